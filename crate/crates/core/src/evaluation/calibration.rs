use serde::{Deserialize, Serialize};

use super::{mean_stderr, OverlapLevel, OverlapSet};
use crate::error::{Error, Result};
use crate::populations::Population;
use crate::rng::RngStream;
use crate::training::Aggregate;
use crate::vocab::Utterance;
use crate::worldgen::ReferenceGame;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub kind: String,
    pub level: OverlapLevel,
    /// Mean population entropy (nats) over the level's utterances.
    pub entropy: Aggregate,
    pub mean_overlap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    pub points: Vec<CalibrationPoint>,
    /// `ln n_images`, the idealised listener's entropy at low overlap; it
    /// is 0 at high overlap.
    pub max_entropy: f64,
}

impl CalibrationCurve {
    pub fn get(&self, kind: &str, level: OverlapLevel) -> Option<&CalibrationPoint> {
        self.points.iter().find(|p| p.kind == kind && p.level == level)
    }

    /// Idealised listener entropy, defined at the two extreme levels.
    pub fn ideal(&self, level: OverlapLevel) -> Option<f64> {
        match level {
            OverlapLevel::Low => Some(self.max_entropy),
            OverlapLevel::High => Some(0.0),
            OverlapLevel::Medium => None,
        }
    }
}

/// Mean entropy of each named population on each utterance set, pairing
/// every utterance with the game it was produced for.
pub fn calibration_curve(
    pops: &[(&str, &Population)],
    sets: &[OverlapSet],
    games: &[&ReferenceGame],
    seed: u64,
) -> Result<CalibrationCurve> {
    let n_images = games
        .first()
        .ok_or_else(|| Error::Eval("calibration needs games".into()))?
        .n_images();
    let root = RngStream::new(seed).derive("eval/calibration");
    let mut points = Vec::with_capacity(pops.len() * sets.len());
    for (kind, pop) in pops {
        for set in sets {
            if set.is_empty() {
                return Err(Error::Eval(format!("{} overlap set is empty", set.level.name())));
            }
            let gs: Vec<&ReferenceGame> = set.items.iter().map(|(i, _)| games[*i]).collect();
            let us: Vec<&Utterance> = set.items.iter().map(|(_, u)| u).collect();
            let mut rng = root.derive(&format!("{kind}/{}", set.level.name()));
            let h = pop.entropy(&gs, &us, &mut rng)?;
            points.push(CalibrationPoint {
                kind: kind.to_string(),
                level: set.level,
                entropy: mean_stderr(&h),
                mean_overlap: set.mean_overlap,
            });
        }
    }
    Ok(CalibrationCurve {
        points,
        max_entropy: (n_images as f64).ln(),
    })
}
