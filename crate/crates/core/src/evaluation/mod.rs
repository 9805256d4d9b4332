//! Speaker and listener metrics: the train/val accuracy grid, token
//! overlap, entropy-by-overlap calibration curves, population-size sweeps
//! and embedding-distance topicality.

mod calibration;
mod embedding;
mod grid;
mod overlap;
pub mod report;
mod sweep;
mod topicality;

pub use calibration::{calibration_curve, CalibrationCurve, CalibrationPoint};
pub use embedding::{EmbeddingTable, BUNDLED_DIM};
pub use grid::{eval_accuracy_grid, grid_from_utterances, AccuracyGrid, GridInputs, GridSample};
pub use overlap::{sample_overlap_utterances, OverlapLevel, OverlapSet, OverlapSources};
pub use sweep::{build_population, canonical, population_sweep, run_name, SpeakerRun, SweepPoint, SweepSetup};
pub use topicality::{topicality, TopicalityRow};

use crate::training::Aggregate;

/// Mean and `sd / sqrt(N)` with the population standard deviation, so a
/// 0/1 sample never exceeds the Bernoulli bound `0.5 / sqrt(N)`.
pub fn mean_stderr(values: &[f64]) -> Aggregate {
    let n = values.len();
    if n == 0 {
        return Aggregate {
            mean: f64::NAN,
            stderr: f64::NAN,
            n: 0,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    Aggregate {
        mean,
        stderr: (var / n as f64).sqrt(),
        n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bernoulli_stderr_respects_bound() {
        let v: Vec<f64> = (0..101).map(|i| (i % 2) as f64).collect();
        let a = mean_stderr(&v);
        assert!(a.stderr <= 0.5 / (101f64).sqrt());
        let b = mean_stderr(&[1.0, 1.0]);
        assert_eq!((b.mean, b.stderr), (1.0, 0.0));
    }
}
