//! Parallel tempering plus reweighting recovers a model's output density
//! on a band; compared here with exact enumeration.
//!
//! `cargo run --release --example sample_output_distribution`

use modeldiff::histogram::{Band, BinGrid};
use modeldiff::oracle;
use modeldiff::reweight::{self, WhamOptions};
use modeldiff::seqmodel::{generate_modulo_dataset, train_ngram};
use modeldiff::tempering::{run_pt, PtConfig, TemperatureLadder};

fn main() -> modeldiff::Result<()> {
    let data = generate_modulo_dataset(6, 10, 30, 50_000, 1)?;
    let model = train_ngram(&data, 3, 0.1)?;
    let grid = BinGrid::aligned(0.05)?;
    let band = Band::new(1.2, 2.2)?;
    let ladder = TemperatureLadder::geometric(0.05, 2.0, 8)?;
    let config = PtConfig {
        seq_len: 6,
        steps_per_replica: 1_100_000,
        swap_interval: 10,
        burn_in: 100_000,
        thin: 1,
        band,
        grid,
        reservoir_capacity: 4096,
        subdivisions: 50,
    };

    let out = run_pt(&model, &ladder, &config, 42)?;
    println!("temperature  move-acc  swap-acc(with next)");
    for (k, t) in ladder.temperatures().iter().enumerate() {
        let swap = out.diagnostics.swap_acceptance.get(k).map(|s| format!("{s:.3}")).unwrap_or_default();
        println!("{t:>11.3}  {:>8.3}  {swap}", out.diagnostics.move_acceptance[k]);
    }

    let w = reweight::wham(&out.histograms, &ladder.betas(), WhamOptions::default())?;
    let sampled = reweight::restrict(&w.distribution.coarsen(grid, config.subdivisions)?, &band)?;
    let exact_hist = oracle::exact_histogram(&model, 6, grid, oracle::DEFAULT_CAP)?;
    let exact = oracle::exact_distribution(&exact_hist, Some(&band))?;
    println!("\nreweighting converged in {} iterations", w.iterations);
    println!("    z     sequences   exact p   sampled p");
    for (i, p) in exact.probabilities() {
        println!(
            "{:.3} {:>11} {:>9.5} {:>11.5}",
            grid.center(i),
            exact_hist.count(i),
            p,
            sampled.log_density(i).exp()
        );
    }
    println!("\nstored representative inputs: {}", out.store.len());
    Ok(())
}
