//! Procedurally rendered sign-like images for desk-scale experiments.
//!
//! Class `k` combines an outer shape (`k % 8`), a border colour
//! (`(k / 8 + k) % 7`, distinct from the shape pairing for every `k < 43`)
//! and an inner glyph (`k % 5`). Pose, size, background and brightness are
//! randomised per image.

use std::f64::consts::PI;

use rand::Rng;

use super::{Dataset, Split, IMAGE_SIZE};
use crate::capsule::NUM_SIGN_CLASSES;
use crate::error::{Error, Result};
use crate::rng;

const PALETTE: [[f64; 3]; 7] = [
    [0.85, 0.10, 0.10],
    [0.10, 0.20, 0.85],
    [0.95, 0.85, 0.10],
    [0.10, 0.70, 0.20],
    [0.95, 0.50, 0.05],
    [0.60, 0.10, 0.70],
    [0.10, 0.75, 0.85],
];

/// Normalised "radius" of point `(x, y)` for outer shape `shape`; inside when <= 1.
fn shape_radius(shape: usize, x: f64, y: f64) -> f64 {
    let polygon = |sides: usize, offset: f64| {
        let apothem = (PI / sides as f64).cos();
        (0..sides)
            .map(|k| {
                let a = offset + 2.0 * PI * k as f64 / sides as f64;
                (x * a.cos() + y * a.sin()) / apothem
            })
            .fold(f64::NEG_INFINITY, f64::max)
    };
    match shape {
        0 => (x * x + y * y).sqrt(),
        1 => polygon(3, PI / 2.0),
        2 => polygon(3, -PI / 2.0),
        3 => polygon(4, PI / 4.0),
        4 => polygon(4, 0.0),
        5 => polygon(5, PI / 2.0),
        6 => polygon(6, 0.0),
        _ => polygon(8, PI / 8.0),
    }
}

fn in_glyph(glyph: usize, x: f64, y: f64) -> bool {
    let bar = 0.16;
    match glyph {
        0 => false,
        1 => y.abs() < bar && x.abs() < 0.5,
        2 => x.abs() < bar && y.abs() < 0.5,
        3 => x * x + y * y < 0.09,
        _ => (x.abs() < bar && y.abs() < 0.45) || (y.abs() < bar && x.abs() < 0.45),
    }
}

fn render(class: usize, rng: &mut impl Rng) -> Vec<f32> {
    let shape = class % 8;
    let color = PALETTE[(class / 8 + class) % 7];
    let glyph = class % 5;

    let background: [f64; 3] = {
        let base = rng.random_range(0.15..0.6);
        [0, 1, 2].map(|_| (base + rng.random_range(-0.08..0.08f64)).clamp(0.0, 1.0))
    };
    let cx = 15.5 + rng.random_range(-2.0..2.0);
    let cy = 15.5 + rng.random_range(-2.0..2.0);
    let radius = rng.random_range(10.0..13.0);
    let angle: f64 = rng.random_range(-0.2..0.2);
    let brightness = rng.random_range(0.75..1.15);
    let (sin, cos) = angle.sin_cos();

    let mut out = Vec::with_capacity(IMAGE_SIZE * IMAGE_SIZE * 3);
    for py in 0..IMAGE_SIZE {
        for px in 0..IMAGE_SIZE {
            let dx = px as f64 - cx;
            let dy = py as f64 - cy;
            let x = (cos * dx + sin * dy) / radius;
            let y = (-sin * dx + cos * dy) / radius;
            let r = shape_radius(shape, x, y);
            let rgb = if r > 1.0 {
                background
            } else if r > 0.7 {
                color
            } else if in_glyph(glyph, x, y) {
                [0.08, 0.08, 0.08]
            } else {
                [0.92, 0.92, 0.9]
            };
            for v in rgb {
                let noisy = v * brightness + rng.random_range(-0.03..0.03);
                out.push(noisy.clamp(0.0, 1.0) as f32);
            }
        }
    }
    out
}

/// Renders `per_class` RGB images for each of the first `num_classes` labels,
/// class-major. Identical arguments give bitwise-identical datasets.
pub fn synthesize_toy_dataset(num_classes: usize, per_class: usize, seed: u64) -> Result<Dataset> {
    if !(2..=NUM_SIGN_CLASSES).contains(&num_classes) {
        return Err(Error::InvalidArgument(format!(
            "num_classes must be in 2..={NUM_SIGN_CLASSES}, got {num_classes}"
        )));
    }
    if per_class == 0 {
        return Err(Error::InvalidArgument("per_class must be positive".into()));
    }
    let mut images = Vec::with_capacity(num_classes * per_class * IMAGE_SIZE * IMAGE_SIZE * 3);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for class in 0..num_classes {
        for k in 0..per_class {
            let index = (class * per_class + k) as u64;
            let mut rng = rng::stream(seed, "synth", index);
            images.extend(render(class, &mut rng));
            labels.push(class as u16);
        }
    }
    Dataset::new(images, labels, 3, Split::Train)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_under_seed() {
        let a = synthesize_toy_dataset(10, 20, 1).unwrap();
        let b = synthesize_toy_dataset(10, 20, 1).unwrap();
        assert_eq!(a, b);
        let c = synthesize_toy_dataset(10, 20, 2).unwrap();
        assert_ne!(a.images(), c.images());
    }

    #[test]
    fn minimal_set() {
        let d = synthesize_toy_dataset(2, 1, 99).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.labels(), &[0, 1]);
        assert!(synthesize_toy_dataset(1, 1, 0).is_err());
        assert!(synthesize_toy_dataset(44, 1, 0).is_err());
    }

    #[test]
    fn class_signatures_are_unique() {
        let mut seen = std::collections::HashSet::new();
        for k in 0..NUM_SIGN_CLASSES {
            assert!(seen.insert((k % 8, (k / 8 + k) % 7)), "class {k}");
        }
    }

    #[test]
    fn nearest_centroid_separates_classes() {
        let d = synthesize_toy_dataset(5, 200, 7).unwrap();
        let per = d.image_len();
        let mut centroids = vec![vec![0.0f64; per]; 5];
        for i in 0..d.len() {
            for (c, &v) in centroids[d.label(i)].iter_mut().zip(d.image(i)) {
                *c += f64::from(v) / 200.0;
            }
        }
        let correct = (0..d.len())
            .filter(|&i| {
                let dist = |c: &Vec<f64>| -> f64 {
                    c.iter().zip(d.image(i)).map(|(a, &b)| (a - f64::from(b)).powi(2)).sum()
                };
                let best = (0..5)
                    .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
                    .unwrap();
                best == d.label(i)
            })
            .count();
        let acc = correct as f64 / d.len() as f64;
        assert!(acc > 0.6, "centroid accuracy {acc}");
    }
}
