use super::{render, Color, DatasetSplit, ReferenceGame, SceneSpec, Shape, MAX_SIZE, MIN_SIZE};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::vocab::GENERIC_SHAPE;

/// A ground-truth caption for `spec`: `<color> <shape>`, `<color> shape`
/// or `<shape>`, with the template picked uniformly by `rng`.
pub fn caption(spec: &SceneSpec, rng: &mut RngStream) -> Vec<String> {
    let color = spec.color.name().to_string();
    let shape = spec.shape.name().to_string();
    match rng.below(3) {
        0 => vec![color, shape],
        1 => vec![color, GENERIC_SHAPE.to_string()],
        _ => vec![shape],
    }
}

/// Whether every colour and shape word in `tokens` describes `spec`.
pub fn caption_is_true<S: AsRef<str>>(tokens: &[S], spec: &SceneSpec) -> bool {
    tokens.iter().all(|t| {
        let t = t.as_ref();
        if t == GENERIC_SHAPE {
            return true;
        }
        if let Some(c) = Color::ALL.iter().find(|c| c.name() == t) {
            return *c == spec.color;
        }
        if let Some(s) = Shape::ALL.iter().find(|s| s.name() == t) {
            return *s == spec.shape;
        }
        false
    })
}

/// Uniform shape and colour, size in `[MIN_SIZE, MAX_SIZE]`, position kept in bounds.
pub fn random_scene(rng: &mut RngStream) -> SceneSpec {
    let shape = Shape::ALL[rng.below(Shape::ALL.len())];
    let color = Color::ALL[rng.below(Color::ALL.len())];
    let size = rng.range(MIN_SIZE, MAX_SIZE);
    let x = rng.range(size, 1.0 - size);
    let y = rng.range(size, 1.0 - size);
    SceneSpec {
        shape,
        color,
        x,
        y,
        size,
    }
}

fn make_game(rng: &mut RngStream, n_images: usize, resolution: usize) -> Result<ReferenceGame> {
    let target_index = rng.below(n_images);
    let target = random_scene(rng);
    let caption = caption(&target, rng);
    let mut specs = Vec::with_capacity(n_images);
    for i in 0..n_images {
        if i == target_index {
            specs.push(target);
            continue;
        }
        // The caption must single out the target, which also forces at
        // least one differing attribute.
        let d = loop {
            let d = random_scene(rng);
            let same = d.shape == target.shape && d.color == target.color;
            if !same && !caption_is_true(&caption, &d) {
                break d;
            }
        };
        specs.push(d);
    }
    let images = specs
        .iter()
        .map(|s| render(s, resolution))
        .collect::<Result<_>>()?;
    Ok(ReferenceGame {
        images,
        specs,
        target_index,
        caption,
    })
}

/// `count` games fully determined by `(split_id, seed)`.
pub fn generate_games(
    count: usize,
    n_images: usize,
    split_id: &str,
    seed: u64,
    resolution: usize,
) -> Result<DatasetSplit> {
    if count == 0 {
        return Err(Error::Invalid("game count must be at least 1".into()));
    }
    if n_images < 2 {
        return Err(Error::Invalid(format!("games need at least 2 images, got {n_images}")));
    }
    let root = RngStream::new(seed).derive(&format!("worldgen/{split_id}"));
    let games = (0..count)
        .map(|i| make_game(&mut root.derive_index("game", i as u64), n_images, resolution))
        .collect::<Result<_>>()?;
    Ok(DatasetSplit {
        split_id: split_id.to_string(),
        seed,
        resolution,
        games,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn caption_examples() {
        let red_circle = SceneSpec {
            shape: Shape::Circle,
            color: Color::Red,
            x: 0.5,
            y: 0.5,
            size: 0.2,
        };
        let allowed: HashSet<Vec<&str>> =
            [vec!["red", "circle"], vec!["red", "shape"], vec!["circle"]].into_iter().collect();
        let mut seen = HashSet::new();
        let mut rng = RngStream::new(1);
        for _ in 0..100 {
            let c = caption(&red_circle, &mut rng);
            let c: Vec<&str> = c.iter().map(String::as_str).collect();
            assert!(allowed.contains(&c), "{c:?}");
            seen.insert(c.join(" "));
        }
        assert_eq!(seen.len(), 3);

        let gray_ellipse = SceneSpec {
            shape: Shape::Ellipse,
            color: Color::Gray,
            ..red_circle
        };
        let mut rng = RngStream::new(2);
        let outs: HashSet<String> = (0..100).map(|_| caption(&gray_ellipse, &mut rng).join(" ")).collect();
        assert!(outs.contains("gray shape"));
    }

    #[test]
    fn caption_truth_predicate() {
        let s = SceneSpec {
            shape: Shape::Square,
            color: Color::Blue,
            x: 0.5,
            y: 0.5,
            size: 0.2,
        };
        assert!(caption_is_true(&["blue", "square"], &s));
        assert!(caption_is_true(&["blue", "shape"], &s));
        assert!(caption_is_true(&["square"], &s));
        assert!(!caption_is_true(&["red", "square"], &s));
        assert!(!caption_is_true(&["circle"], &s));
        assert!(!caption_is_true(&["Pagan"], &s));
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(generate_games(0, 3, "a", 1, 32).is_err());
        assert!(generate_games(10, 1, "a", 1, 32).is_err());
    }
}
