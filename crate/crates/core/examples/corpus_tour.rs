//! Drives the data pipelines end to end and prints what they produce:
//! command-corpus generation with round-trip verification and length
//! statistics, the synthetic mini grammar's splits, logical-form
//! simplification, and entity anonymization.

use micl_core::data::{geo, mini, scan, Example};

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn main() {
    // Command corpus: generate, compress, verify decode(compressed) == raw.
    let commands = scan::corpus();
    let mut raw_total = 0usize;
    let mut raw_max = 0usize;
    let mut comp_total = 0usize;
    let mut comp_max = 0usize;
    let mut failures = 0usize;
    for cmd in &commands {
        let raw = cmd.raw_output();
        let comp = cmd.compressed_output();
        raw_total += raw.len();
        raw_max = raw_max.max(raw.len());
        comp_total += comp.len();
        comp_max = comp_max.max(comp.len());
        if scan::decode(&comp).as_deref() != Ok(&raw[..]) {
            failures += 1;
        }
    }
    let n = commands.len();
    println!("command corpus: {n} commands");
    println!(
        "  raw action sequences:  avg {:.4} tokens, max {raw_max}",
        raw_total as f64 / n as f64
    );
    println!(
        "  compressed outputs:    avg {:.4} tokens, max {comp_max}",
        comp_total as f64 / n as f64
    );
    println!("  decode round-trip failures: {failures}");

    let demo = toks("jump around right and walk twice");
    let cmd = scan::parse(&demo).expect("demo command parses");
    println!("  {:?}", demo.join(" "));
    println!("    raw:        {}", cmd.raw_output().join(" "));
    println!("    compressed: {}", cmd.compressed_output().join(" "));

    // Mini grammar: generate both splits.
    let grammar = mini::MiniGrammar::standard();
    let (train, test) = grammar.generate(7).expect("standard grammar generates");
    println!(
        "mini grammar: {} train / {} test phrases",
        train.examples.len(),
        test.examples.len()
    );
    for ex in &test.examples {
        println!("    held out: {} -> {}", ex.input.join(" "), ex.output.join(" "));
    }

    // Entity anonymization on a sample question.
    let lex = geo::EntityLexicon::bundled();
    let ex = Example {
        input: toks("what rivers run through new york and texas"),
        output: toks("answer river traverse new york texas"),
        id: 0,
    };
    let (anon, warning) = geo::anonymize(&ex, &lex);
    println!("entity anonymization ({} entities in lexicon):", lex.len());
    println!("    question: {}", anon.example.input.join(" "));
    println!("    meaning:  {}", anon.example.output.join(" "));
    println!("    table:    {:?}", anon.entities);
    if let Some(w) = warning {
        println!("    warning: {w}");
    }

    if failures > 0 {
        std::process::exit(1);
    }
}
