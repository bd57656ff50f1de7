//! Drives the model layer end to end on the built-in mini grammar: builds a
//! vocabulary, assembles a training trajectory, computes a loss and one
//! backward pass, greedy-decodes from a prompt, and reports the full-scale
//! parameter count. Exits nonzero if any step misbehaves.

use micl_core::data::mini::MiniGrammar;
use micl_core::model::{Mode, Model, ModelConfig};
use micl_core::tensor::Tape;
use micl_core::trajectory::{prompt_tokens, sample_trajectory, Batch};
use micl_core::vocab::Vocabulary;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut failures = 0usize;

    let (train, _test) = MiniGrammar::standard().generate(7).expect("mini split");
    let vocab = Vocabulary::build(&train.examples);
    println!("mini vocabulary: {} tokens", vocab.len());

    let config = ModelConfig::desk(vocab.len(), 128);
    let model = Model::init(config.clone(), 11).expect("init");
    println!(
        "desk model: {} layers, width {}, {} parameters",
        config.layers,
        config.d_model,
        model.params.scalar_count()
    );

    // One training step's worth of forward + backward.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let trajs: Vec<_> = (0..4)
        .map(|_| sample_trajectory(&mut rng, &vocab, &train.examples, 5, true).expect("sample"))
        .collect();
    let batch = Batch::from_trajectories(&trajs);
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let (loss, targets, _) = model
        .batch_loss(&mut tape, &bound, &batch, Mode::Train, &mut rng)
        .expect("loss");
    let loss_value = tape.value(loss).data()[0];
    println!("batch of {} trajectories, {} targets, loss {loss_value:.4}", batch.rows, targets);
    if !loss_value.is_finite() || loss_value <= 0.0 {
        println!("FAIL: training loss should be a positive finite number");
        failures += 1;
    }
    tape.backward(loss).expect("backward");
    let grad_norm: f32 = {
        let mut acc = 0.0f64;
        for p in model.params.iter() {
            if let Some(g) = tape.grad(bound.node(&p.name)) {
                acc += g.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
            }
        }
        acc.sqrt() as f32
    };
    println!("gradient norm after one backward pass: {grad_norm:.4}");
    if !grad_norm.is_finite() || grad_norm == 0.0 {
        println!("FAIL: gradient norm should be positive and finite");
        failures += 1;
    }

    // Greedy decoding from an untrained model: must stop on its own budget.
    let supports: Vec<&_> = train.examples.iter().take(3).collect();
    let query = vec!["dax".to_string()];
    let prompt = prompt_tokens(
        &vocab,
        &supports,
        &query,
        &micl_core::vocab::LabelPermutation::identity(&vocab),
    )
    .expect("prompt");
    let decoded = model.greedy_decode(&prompt, 10).expect("decode");
    println!(
        "greedy decode from a {}-token prompt: {} tokens, stop {:?}",
        prompt.len(),
        decoded.tokens.len(),
        decoded.stop
    );

    // Full-scale parameter accounting.
    let full = ModelConfig::full_scale(30, 64);
    let count = Model::init(full, 0).expect("full-scale init").params.scalar_count();
    println!("full-scale parameter count: {count}");
    if count != 25_249_822 {
        println!("FAIL: expected 25,249,822 parameters");
        failures += 1;
    }

    if failures > 0 {
        println!("{failures} failure(s)");
        std::process::exit(1);
    }
    println!("model tour complete");
}
