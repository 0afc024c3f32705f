//! Compares B and C without sampling them against each other: both are
//! measured against a reference A, using the same draws of A's inputs.
//! Checked against the exact value on a space small enough to enumerate.
//!
//! `cargo run --release --example reference_transfer`

use modeldiff::diffstat::{self, DRegion, Direction};
use modeldiff::oracle::{self, EnumerationOptions};
use modeldiff::pipeline::{self, ExperimentConfig, Role};

const CONFIG: &str = r#"
seq_len = 5
vocab_size = 4
seed = 3
band = { lo = 0.4, hi = 1.4 }
[models.a]
kind = "toy"
order = 2
alpha = 0.3
modulus = 6
dataset_size = 150
[models.b]
kind = "toy"
order = 3
alpha = 0.3
modulus = 6
dataset_size = 150
[models.c]
kind = "toy"
order = 3
alpha = 0.05
modulus = 5
dataset_size = 150
[ladder]
count = 6
[sampling]
steps = 550000
burn_in = 50000
swap_interval = 10
reservoir_capacity = 65536
"#;

fn main() -> modeldiff::Result<()> {
    let cfg = ExperimentConfig::from_toml(CONFIG)?;
    let (a, b, c) = (cfg.build_model(Role::A)?, cfg.build_model(Role::B)?, cfg.build_model(Role::C)?);
    let seed = cfg.seed;
    let sa = pipeline::sample_model(&a, &cfg, pipeline::sample_seed(seed, Role::A))?;
    let sb = pipeline::sample_model(&b, &cfg, pipeline::sample_seed(seed, Role::B))?;
    let sc = pipeline::sample_model(&c, &cfg, pipeline::sample_seed(seed, Role::C))?;
    let a_seed = pipeline::diff_seed(seed, Role::A);
    let ab = pipeline::diff_from(&sa.restricted, sa.store(), &b, Direction::AToB, &cfg, a_seed)?.result;
    let ac = pipeline::diff_from(&sa.restricted, sa.store(), &c, Direction::AToB, &cfg, a_seed)?.result;
    let ba = pipeline::diff_from(&sb.restricted, sb.store(), &a, Direction::BToA, &cfg, pipeline::diff_seed(seed, Role::B))?.result;
    let ca = pipeline::diff_from(&sc.restricted, sc.store(), &a, Direction::BToA, &cfg, pipeline::diff_seed(seed, Role::C))?.result;

    let options = EnumerationOptions {
        band: cfg.band,
        z_grid: cfg.z_grid()?,
        d_grid: cfg.d_grid()?,
        cap: cfg.oracle.cap,
    };
    let exact_b = oracle::enumerate(&a, &b, cfg.seq_len, &options)?;
    let exact_c = oracle::enumerate(&a, &c, cfg.seq_len, &options)?;

    for region in [DRegion::All, DRegion::Below(0.0), DRegion::Above(0.0)] {
        let got = diffstat::compare_via_reference(&ab, &ac, &ba, &ca, region)?;
        let want = diffstat::compare_via_reference(&exact_b.diff_ab, &exact_c.diff_ab, &exact_b.diff_ba, &exact_c.diff_ba, region)?;
        println!(
            "{region:?}: Q_B/Q_C sampled {:.4}, exact {:.4}",
            got.reverse_ratio(),
            want.reverse_ratio()
        );
    }
    Ok(())
}
