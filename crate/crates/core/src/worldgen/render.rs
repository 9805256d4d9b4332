use super::{Image, SceneSpec, Shape};
use crate::error::{Error, Result};

pub const MIN_RESOLUTION: usize = 16;

/// Flat-colour rasterisation without anti-aliasing; pixel centres are
/// sampled, so the output is bit-exact for a given spec and resolution.
pub fn render(spec: &SceneSpec, resolution: usize) -> Result<Image> {
    if resolution < MIN_RESOLUTION {
        return Err(Error::Invalid(format!(
            "resolution must be at least {MIN_RESOLUTION}, got {resolution}"
        )));
    }
    spec.validate()?;
    let res = resolution as f64;
    let (cx, cy, r) = (spec.x * res, spec.y * res, spec.size * res);
    let rgb = spec.color.rgb();
    let mut pixels = vec![0.0; resolution * resolution * 3];
    for row in 0..resolution {
        let py = row as f64 + 0.5 - cy;
        for col in 0..resolution {
            let px = col as f64 + 0.5 - cx;
            if inside(spec.shape, px, py, r) {
                let i = (row * resolution + col) * 3;
                pixels[i..i + 3].copy_from_slice(&rgb);
            }
        }
    }
    Ok(Image { resolution, pixels })
}

fn inside(shape: Shape, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        Shape::Circle => dx * dx + dy * dy <= r * r,
        Shape::Square => dx.abs() <= r && dy.abs() <= r,
        Shape::Rectangle => dx.abs() <= r && dy.abs() <= 0.5 * r,
        Shape::Ellipse => (dx / r).powi(2) + (dy / (0.5 * r)).powi(2) <= 1.0,
        // Upward isosceles triangle: apex at dy = -r, base at dy = +r.
        Shape::Triangle => dy.abs() <= r && dx.abs() <= 0.5 * (dy + r),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldgen::Color;

    fn spec(shape: Shape, color: Color) -> SceneSpec {
        SceneSpec {
            shape,
            color,
            x: 0.5,
            y: 0.5,
            size: 0.3,
        }
    }

    #[test]
    fn red_circle_centre_and_corner() {
        let img = render(&spec(Shape::Circle, Color::Red), 32).unwrap();
        assert_eq!(img.pixel(16, 16), [1.0, 0.0, 0.0]);
        assert_eq!(img.pixel(0, 0), [0.0, 0.0, 0.0]);
        assert_eq!(img.pixel(31, 31), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn rendering_is_bit_identical() {
        let s = SceneSpec {
            shape: Shape::Triangle,
            color: Color::Yellow,
            x: 0.41,
            y: 0.63,
            size: 0.17,
        };
        assert_eq!(render(&s, 32).unwrap(), render(&s, 32).unwrap());
    }

    #[test]
    fn flat_fill_uses_exact_colour() {
        let img = render(&spec(Shape::Square, Color::Gray), 32).unwrap();
        let mut lit = 0;
        for p in img.pixels.chunks(3) {
            if p != [0.0, 0.0, 0.0] {
                assert_eq!(p, [0.5, 0.5, 0.5]);
                lit += 1;
            }
        }
        assert!(lit > 0);
    }

    #[test]
    fn shapes_are_distinguishable_at_min_size() {
        let mut seen = std::collections::HashSet::new();
        for shape in Shape::ALL {
            let s = SceneSpec {
                shape,
                color: Color::White,
                x: 0.5,
                y: 0.5,
                size: 0.1,
            };
            let img = render(&s, 32).unwrap();
            let mask: Vec<bool> = img.pixels.chunks(3).map(|p| p[0] > 0.0).collect();
            assert!(mask.iter().any(|&b| b), "{shape:?} rendered empty");
            assert!(seen.insert(mask), "{shape:?} identical to another shape");
        }
    }

    #[test]
    fn rejects_out_of_bounds_and_low_resolution() {
        let mut s = spec(Shape::Circle, Color::Blue);
        s.x = 0.95;
        assert!(render(&s, 32).is_err());
        assert!(render(&spec(Shape::Circle, Color::Blue), 8).is_err());
        s.x = 0.5;
        s.size = 0.5;
        assert!(render(&s, 32).is_err());
    }

    #[test]
    fn shape_stays_inside_image() {
        // Extreme placement: touching the top-left corner region.
        let s = SceneSpec {
            shape: Shape::Square,
            color: Color::White,
            x: 0.35,
            y: 0.35,
            size: 0.35,
        };
        let img = render(&s, 32).unwrap();
        assert_eq!(img.pixel(0, 0), [1.0, 1.0, 1.0]);
    }
}
