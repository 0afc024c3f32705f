//! Scores traced inputs with an external judgement and reports precision
//! and proportional recall over the region where B predicts a higher NLL.
//! The "annotator" here marks inputs that satisfy the modulo rule.
//!
//! `cargo run --release --example annotate`

use modeldiff::annotate::{self, AnnotationSet};
use modeldiff::diffstat::{DRegion, Direction};
use modeldiff::pipeline::{self, ExperimentConfig, Role};

fn main() -> modeldiff::Result<()> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/examples/configs/toy.toml");
    let cfg = ExperimentConfig::load(path)?;
    let a = cfg.build_model(Role::A)?;
    let b = cfg.build_model(Role::B)?;
    let sa = pipeline::sample_model(&a, &cfg, pipeline::sample_seed(cfg.seed, Role::A))?;
    let diff = pipeline::diff_from(&sa.restricted, sa.store(), &b, Direction::AToB, &cfg, pipeline::diff_seed(cfg.seed, Role::A))?;

    let mut set = AnnotationSet::new(cfg.annotate.window)?;
    for r in &diff.trace {
        let sum: u32 = r.tokens.tokens().iter().sum();
        set.insert(r.id.clone(), if sum % 30 == 0 { 1.0 } else { 0.0 })?;
    }
    let annotated = set.over(&diff.trace);
    println!("{} distinct inputs annotated", annotated.annotated_inputs());

    for region in [DRegion::Below(0.0), DRegion::Above(0.0), DRegion::All] {
        match annotate::report(&diff.result, &annotated, region) {
            Ok(r) => println!(
                "{region:?}: precision {:.3}, proportional recall {:.1} over {} draws",
                r.precision, r.proportional_recall, r.mass
            ),
            Err(e) => println!("{region:?}: {e}"),
        }
    }
    Ok(())
}
