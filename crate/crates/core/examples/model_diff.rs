//! The full comparison of two models: sample each model's low-NLL inputs,
//! score them with the other model, and normalize the directed sums.
//! Runs through the same configuration the command-line tool reads.
//!
//! `cargo run --release --example model_diff`

use modeldiff::diffstat::{self, Direction};
use modeldiff::pipeline::{self, ExperimentConfig, Role};

fn main() -> modeldiff::Result<()> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/examples/configs/toy.toml");
    let cfg = ExperimentConfig::load(path)?;
    let a = cfg.build_model(Role::A)?;
    let b = cfg.build_model(Role::B)?;
    let seed = cfg.seed;

    let sa = pipeline::sample_model(&a, &cfg, pipeline::sample_seed(seed, Role::A))?;
    let sb = pipeline::sample_model(&b, &cfg, pipeline::sample_seed(seed, Role::B))?;
    let ab = pipeline::diff_from(&sa.restricted, sa.store(), &b, Direction::AToB, &cfg, pipeline::diff_seed(seed, Role::A))?.result;
    let ba = pipeline::diff_from(&sb.restricted, sb.store(), &a, Direction::BToA, &cfg, pipeline::diff_seed(seed, Role::B))?.result;

    for d in [&ab, &ba] {
        let (lo, hi) = d.extrema().unwrap_or((0.0, 0.0));
        println!(
            "{}: {} draws, {} with the other model's z in the band, D in [{lo:.2}, {hi:.2}]",
            d.direction.label(),
            d.n_drawn(),
            d.overlap_count
        );
    }
    println!("\nlambda   PD_AB   PA_AB   PA_BA   PD_BA");
    for r in diffstat::lambda_sweep(&ab, &ba, &cfg.diff.lambdas)? {
        match r.terms() {
            Some(t) => println!("{:+.2}  {:>6.3}  {:>6.3}  {:>6.3}  {:>6.3}", r.lambda, t[0], t[1], t[2], t[3]),
            None => println!("{:+.2}  degenerate", r.lambda),
        }
    }
    Ok(())
}
