//! Experiment harness: synthetic data, run configs, metrics CSV, benchmarks.

pub mod bench;
pub mod config;
pub mod dataset;

use crate::train::EpochStats;

/// Renders per-epoch metrics as CSV: `epoch,loss,accuracy,als_l0..als_l{L-1}`.
/// Rows keep the order of `stats`; zero epochs yields the header alone.
pub fn metrics_csv(stats: &[EpochStats], layers: usize) -> String {
    let mut out = String::from("epoch,loss,accuracy");
    for l in 0..layers {
        out.push_str(&format!(",als_l{l}"));
    }
    out.push('\n');
    for s in stats {
        out.push_str(&format!("{},{},{}", s.epoch, s.mean_loss, s.val_accuracy));
        for l in 0..layers {
            out.push_str(&format!(",{}", s.layer_als.get(l).copied().unwrap_or(f64::NAN)));
        }
        out.push('\n');
    }
    out
}
