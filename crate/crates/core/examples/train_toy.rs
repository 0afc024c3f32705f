//! Builds the modulo dataset, trains n-gram models of two orders and a
//! perturbed copy, and compares their scores on task and random inputs.
//!
//! `cargo run --release --example train_toy -- [out_dir]`

use modeldiff::rng::{stream, Domain};
use modeldiff::seqmodel::{generate_modulo_dataset, train_ngram, Model, ScoredModel, TokenSequence};

fn mean_z(model: &dyn ScoredModel, seqs: &[TokenSequence]) -> f64 {
    seqs.iter().map(|s| model.mean_nll(s.tokens())).sum::<f64>() / seqs.len() as f64
}

fn main() -> modeldiff::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "target/toy_models".into());
    let data = generate_modulo_dataset(6, 10, 30, 50_000, 1)?;
    let trigram = train_ngram(&data, 3, 0.1)?;
    let fourgram = train_ngram(&data, 4, 0.1)?;
    let noisy = trigram.perturb(0.5, 7)?;

    let mut rng = stream(2, Domain::Chain, 0);
    let random: Vec<_> = (0..1000).map(|_| TokenSequence::random(6, 10, &mut rng)).collect();
    let task = &data.sequences[..1000];
    println!("{:<10} {:>12} {:>12}", "model", "task z", "random z");
    for (name, m) in [("trigram", &trigram as &dyn ScoredModel), ("4-gram", &fourgram), ("noisy", &noisy)] {
        println!("{name:<10} {:>12.4} {:>12.4}", mean_z(m, task), mean_z(m, &random));
    }

    std::fs::create_dir_all(&out).map_err(|e| modeldiff::Error::Config(e.to_string()))?;
    for (name, m) in [("a", Model::from(trigram)), ("b", Model::from(fourgram)), ("c", Model::from(noisy))] {
        let path = format!("{out}/{name}.json");
        m.save(&path)?;
        assert_eq!(Model::load(&path)?, m);
        println!("saved {path} ({})", &m.fingerprint()[..12]);
    }
    Ok(())
}
