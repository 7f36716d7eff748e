//! Sweep the pseudo-label score threshold on the default synthetic world and
//! print mean and median final mAP per value.
//!
//! cargo run --release -p pseudoloop --example threshold_sweep [seeds]

use pseudoloop::pipeline::SweepParam;
use pseudoloop::sim::WorldParams;
use pseudoloop::{sweep, PipelineConfig};

fn main() -> pseudoloop::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let world = WorldParams::default().build()?;
    let values = [0.1, 0.3, 0.5, 0.6, 0.7, 0.8, 0.95];
    let table = sweep(
        &PipelineConfig::default(),
        SweepParam::TauS,
        &values,
        &world,
        &(0..seeds).collect::<Vec<_>>(),
    )?;
    println!("{:>6} {:>8} {:>8}", "tau_s", "mean", "median");
    for ((v, mean), (_, median)) in table.means().into_iter().zip(table.medians()) {
        println!("{v:>6} {mean:>8.4} {median:>8.4}");
    }
    Ok(())
}
