fn main() {
    std::process::exit(micl::run(std::env::args().skip(1)));
}
