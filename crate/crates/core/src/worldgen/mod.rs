//! Procedural single-shape scenes, captions and reference games.

mod games;
mod io;
mod render;

pub use games::{caption, caption_is_true, generate_games, random_scene};
pub use io::{load_split, save_split, verify_pixels, SPLIT_MAGIC, SPLIT_VERSION};
pub use render::render;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{COLORS, SHAPES};

pub const DEFAULT_RESOLUTION: usize = 32;
pub const MIN_SIZE: f64 = 0.1;
pub const MAX_SIZE: f64 = 0.35;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Rectangle,
    Ellipse,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Blue,
    Green,
    Yellow,
    White,
    Gray,
}

impl Shape {
    pub const ALL: [Shape; 5] = [
        Shape::Circle,
        Shape::Square,
        Shape::Rectangle,
        Shape::Ellipse,
        Shape::Triangle,
    ];

    pub fn name(self) -> &'static str {
        SHAPES[self as usize]
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

impl Color {
    pub const ALL: [Color; 6] = [
        Color::Red,
        Color::Blue,
        Color::Green,
        Color::Yellow,
        Color::White,
        Color::Gray,
    ];

    pub fn name(self) -> &'static str {
        COLORS[self as usize]
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Yellow => [1.0, 1.0, 0.0],
            Color::White => [1.0, 1.0, 1.0],
            Color::Gray => [0.5, 0.5, 0.5],
        }
    }
}

/// One shape in an otherwise black image.
///
/// `size` is the half-extent as a fraction of the image side; `x`, `y`
/// locate the centre in the unit square (y grows downwards).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shape: Shape,
    pub color: Color,
    pub x: f64,
    pub y: f64,
    pub size: f64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let s = self.size;
        if !(MIN_SIZE..=MAX_SIZE).contains(&s) {
            return Err(Error::Invalid(format!("scene size {s} outside [{MIN_SIZE}, {MAX_SIZE}]")));
        }
        for (name, c) in [("x", self.x), ("y", self.y)] {
            if !(c - s >= 0.0 && c + s <= 1.0) {
                return Err(Error::Invalid(format!(
                    "scene {name}={c} with size {s} leaves the image"
                )));
            }
        }
        Ok(())
    }
}

/// Row-major `H x W x 3` pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub resolution: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.resolution + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Channel-major copy (`3 x H x W`) as consumed by the conv encoders.
    pub fn to_chw(&self, out: &mut Vec<f64>) {
        let hw = self.resolution * self.resolution;
        let start = out.len();
        out.resize(start + 3 * hw, 0.0);
        for p in 0..hw {
            for c in 0..3 {
                out[start + c * hw + p] = self.pixels[p * 3 + c];
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceGame {
    pub images: Vec<Image>,
    pub specs: Vec<SceneSpec>,
    pub target_index: usize,
    /// Ground-truth caption tokens for the target.
    pub caption: Vec<String>,
}

impl ReferenceGame {
    pub fn n_images(&self) -> usize {
        self.images.len()
    }

    pub fn target_spec(&self) -> &SceneSpec {
        &self.specs[self.target_index]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub split_id: String,
    pub seed: u64,
    pub resolution: usize,
    pub games: Vec<ReferenceGame>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.games.len()
    }

    pub fn is_empty(&self) -> bool {
        self.games.is_empty()
    }

    pub fn n_images(&self) -> usize {
        self.games.first().map_or(0, ReferenceGame::n_images)
    }

    /// SHA-256 of the canonical file byte stream.
    pub fn content_hash(&self) -> String {
        io::content_hash(self)
    }

    /// Deterministic partition into `(head, tail)` with `tail` holding
    /// `round(len * tail_fraction)` games taken from the end.
    pub fn split_tail(&self, tail_fraction: f64) -> (Vec<&ReferenceGame>, Vec<&ReferenceGame>) {
        let n_tail = ((self.len() as f64) * tail_fraction).round() as usize;
        let n_tail = n_tail.min(self.len().saturating_sub(1));
        let cut = self.len() - n_tail;
        (
            self.games[..cut].iter().collect(),
            self.games[cut..].iter().collect(),
        )
    }
}
