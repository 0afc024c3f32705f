//! A noisy copy of a model predicts a higher NLL than the original on
//! almost every input, in both directions. Less noise means more overlap.
//!
//! `cargo run --release --example plagiarism`

use modeldiff::diffstat::{self, Direction};
use modeldiff::pipeline::{self, ExperimentConfig, Role};

fn config(sigma: f64) -> modeldiff::Result<ExperimentConfig> {
    ExperimentConfig::from_toml(&format!(
        r#"
seq_len = 24
vocab_size = 10
seed = 7
band = {{ lo = 2.2, hi = 3.2 }}
[models.a]
kind = "toy"
order = 3
alpha = 0.1
[models.b]
kind = "noise"
sigma = {sigma}
seed = 11
base = {{ kind = "toy", order = 3, alpha = 0.1 }}
[sampling]
steps = 330000
burn_in = 30000
swap_interval = 10
reservoir_capacity = 4096
"#
    ))
}

fn main() -> modeldiff::Result<()> {
    println!(" sigma   D<0 A->B   D<0 B->A   D>=0 A->B   D>=0 B->A");
    for sigma in [0.7, 0.07] {
        let cfg = config(sigma)?;
        let a = cfg.build_model(Role::A)?;
        let b = cfg.build_model(Role::B)?;
        let sa = pipeline::sample_model(&a, &cfg, pipeline::sample_seed(cfg.seed, Role::A))?;
        let sb = pipeline::sample_model(&b, &cfg, pipeline::sample_seed(cfg.seed, Role::B))?;
        let ab = pipeline::diff_from(&sa.restricted, sa.store(), &b, Direction::AToB, &cfg, pipeline::diff_seed(cfg.seed, Role::A))?.result;
        let ba = pipeline::diff_from(&sb.restricted, sb.store(), &a, Direction::BToA, &cfg, pipeline::diff_seed(cfg.seed, Role::B))?.result;
        let below = |d: &modeldiff::DiffResult| diffstat::directed_sums(d, 0.0).0 as f64 / d.n_drawn() as f64;
        let (fab, fba) = (below(&ab), below(&ba));
        println!("{sigma:>6}   {fab:>8.3}   {fba:>8.3}   {:>9.3}   {:>9.3}", 1.0 - fab, 1.0 - fba);
    }
    Ok(())
}
