//! Runs the default experiment in memory and prints the transfer matrix and
//! the ablation summary. Set `SEEDS=1` to run a single seed.

use std::time::Instant;

use gama_core::eval::{ablation_summary, transfer_matrix};
use gama_core::pipeline::{run_experiment, ExperimentConfig};

fn main() -> gama_core::Result<()> {
    let start = Instant::now();
    let mut cfg = ExperimentConfig::default();
    if let Ok(n) = std::env::var("SEEDS") {
        let n: usize = n.parse().unwrap_or(cfg.seeds.len());
        cfg.seeds.truncate(n.max(1));
    }
    let exp = run_experiment(&cfg, &mut |s| {
        println!("[{:>6.1}s] {s}", start.elapsed().as_secs_f64())
    })?;
    let rows = exp.all_rows();
    print!("{}", transfer_matrix(&rows));
    for arm in ablation_summary(&rows) {
        println!("{arm:?}");
    }
    println!("total {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
