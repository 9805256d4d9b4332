//! Plain-text report files. Every file starts with `#` comment lines
//! carrying the config hash and tool version; numbers use fixed decimals so
//! unchanged inputs give byte-identical output.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AccuracyGrid, CalibrationCurve, SweepPoint, TopicalityRow};
use crate::error::Result;
use crate::training::Aggregate;

pub const TOOL_VERSION: &str = concat!("refgame ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub tool_version: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new(config_hash: impl Into<String>, seed: u64) -> Self {
        Self {
            config_hash: config_hash.into(),
            tool_version: TOOL_VERSION.to_string(),
            seed,
        }
    }

    fn header(&self, what: &str) -> String {
        format!(
            "# {what}\n# config_hash={}\n# tool_version={}\n# seed={}\n",
            self.config_hash, self.tool_version, self.seed
        )
    }

    /// Reads the provenance back from a report's comment header.
    pub fn parse_header(text: &str) -> Option<Self> {
        let mut hash = None;
        let mut version = None;
        let mut seed = None;
        for line in text.lines().take_while(|l| l.starts_with('#')) {
            let body = line.trim_start_matches('#').trim();
            if let Some(v) = body.strip_prefix("config_hash=") {
                hash = Some(v.to_string());
            } else if let Some(v) = body.strip_prefix("tool_version=") {
                version = Some(v.to_string());
            } else if let Some(v) = body.strip_prefix("seed=") {
                seed = v.parse().ok();
            }
        }
        Some(Self {
            config_hash: hash?,
            tool_version: version?,
            seed: seed?,
        })
    }
}

fn cell(a: &Aggregate, decimals: usize) -> String {
    format!("{:.*} ± {:.*}", decimals, a.mean, decimals, a.stderr)
}

/// Condition rows with the four accuracy cells and token overlap.
pub fn table1(rows: &[(String, AccuracyGrid)], prov: &Provenance) -> String {
    let mut out = prov.header("accuracy grid: listener population x data split; overlap in percent");
    out.push_str("condition,train_L/train_D,train_L/val_D,val_L/train_D,val_L/val_D,overlap\n");
    for (name, g) in rows {
        write!(out, "{name}").expect("string write");
        for (_, a) in g.cells() {
            write!(out, ",{}", cell(&a, 4)).expect("string write");
        }
        writeln!(out, ",{}", cell(&g.overlap, 2)).expect("string write");
    }
    out
}

/// One row per (population kind, overlap level).
pub fn fig2(curve: &CalibrationCurve, prov: &Provenance) -> String {
    let mut out = prov.header(&format!(
        "mean listener entropy (nats) by utterance overlap; ideal listener: ln n = {:.6} at low, 0 at high",
        curve.max_entropy
    ));
    out.push_str("kind level x y yerr\n");
    for p in &curve.points {
        writeln!(
            out,
            "{} {} {:.4} {:.6} {:.6}",
            p.kind,
            p.level.name(),
            p.mean_overlap,
            p.entropy.mean,
            p.entropy.stderr
        )
        .expect("string write");
    }
    out
}

/// One row per (population kind, grid cell, population size).
pub fn fig3(points: &[SweepPoint], prov: &Provenance) -> String {
    let mut out = prov.header("accuracy against population size");
    out.push_str("kind cell x y yerr\n");
    for p in points {
        let mut cells = p.grid.cells().to_vec();
        cells.push(("overlap", p.grid.overlap));
        for (name, a) in cells {
            writeln!(out, "{} {name} {} {:.6} {:.6}", p.kind.name(), p.n, a.mean, a.stderr).expect("string write");
        }
    }
    out
}

/// Embedding distances from the ground-truth caption.
pub fn table3(rows: &[TopicalityRow], prov: &Provenance) -> String {
    let mut out = prov.header("embedding distance to the ground-truth caption (lower is more on topic)");
    out.push_str("speaker,sum,sum_se,first,first_se,coverage,n\n");
    for r in rows {
        writeln!(
            out,
            "{},{:.4},{:.4},{:.4},{:.4},{:.4},{}",
            r.kind, r.sum.mean, r.sum.stderr, r.first.mean, r.first.stderr, r.coverage, r.sum.n
        )
        .expect("string write");
    }
    out
}

pub fn write(path: &Path, text: &str) -> Result<()> {
    crate::agents::write_atomic(path, text.as_bytes())
}
