//! Procedurally generated crack images with exact masks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Sample;
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub count: usize,
    pub size: usize,
    /// Crack stroke width in pixels, inclusive range.
    pub min_width: usize,
    pub max_width: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            count: 8,
            size: 64,
            min_width: 1,
            max_width: 3,
            seed: 2024,
        }
    }
}

fn segment_distance(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((px - qx).powi(2) + (py - qy).powi(2)).sqrt()
}

/// A polyline crossing the image from one border region to the opposite one.
fn polyline<R: Rng>(rng: &mut R, size: f64) -> Vec<(f64, f64)> {
    let vertical = rng.random_bool(0.5);
    let segments = rng.random_range(3..=5);
    let mut pts = Vec::with_capacity(segments + 1);
    for k in 0..=segments {
        let along = size * k as f64 / segments as f64;
        let across = rng.random_range(0.15 * size..0.85 * size);
        pts.push(if vertical { (across, along) } else { (along, across) });
    }
    pts
}

fn texture<R: Rng>(rng: &mut R, size: usize) -> Vec<f32> {
    let base = rng.random_range(0.55..0.75);
    let (fx, fy) = (rng.random_range(0.1..0.4), rng.random_range(0.1..0.4));
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64, (i % size) as f64);
            let wave = 0.05 * (fx * x + phase).sin() * (fy * y).cos();
            let grain = rng.random_range(-0.04..0.04);
            (base + wave + grain) as f32
        })
        .collect()
}

/// One sample: textured gray background, dark crack strokes, and a mask
/// that is 1 exactly where a stroke was painted.
pub fn synthetic_sample(spec: &SyntheticSpec, index: usize) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let n = spec.size;
    let plane = n * n;
    let bg = texture(&mut rng, n);
    let mut mask = vec![0.0f32; plane];
    let cracks = rng.random_range(1..=2);
    for _ in 0..cracks {
        let pts = polyline(&mut rng, n as f64);
        let width = rng.random_range(spec.min_width..=spec.max_width) as f64;
        let half = width / 2.0;
        for (i, m) in mask.iter_mut().enumerate() {
            let (py, px) = ((i / n) as f64 + 0.5, (i % n) as f64 + 0.5);
            let d = pts
                .windows(2)
                .map(|w| segment_distance(px, py, w[0], w[1]))
                .fold(f64::INFINITY, f64::min);
            if d <= half {
                *m = 1.0;
            }
        }
    }
    let dark = rng.random_range(0.1..0.25) as f32;
    let tint = [1.0f32, 0.97, 0.94];
    let mut image = vec![0.0f32; 3 * plane];
    for c in 0..3 {
        for i in 0..plane {
            let v = if mask[i] == 1.0 { dark + 0.3 * (bg[i] - 0.65) } else { bg[i] };
            image[c * plane + i] = (v * tint[c]).clamp(0.0, 1.0);
        }
    }
    Sample::new(
        format!("synthetic_{index:03}"),
        Tensor::new([3, n, n], image)?,
        Tensor::new([1, n, n], mask)?,
    )
}

pub fn synthetic_dataset(spec: &SyntheticSpec) -> Result<Vec<Sample>> {
    (0..spec.count).map(|i| synthetic_sample(spec, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_is_deterministic_and_well_formed() {
        let spec = SyntheticSpec::default();
        let a = synthetic_dataset(&spec).unwrap();
        let b = synthetic_dataset(&spec).unwrap();
        assert_eq!(a.len(), 8);
        for (x, y) in a.iter().zip(&b) {
            assert!(x.image.bitwise_eq(&y.image));
            assert!(x.mask.bitwise_eq(&y.mask));
            assert_eq!((x.height(), x.width()), (64, 64));
            let frac = x.mask.data().iter().sum::<f32>() / 4096.0;
            assert!(frac > 0.005 && frac < 0.25, "crack fraction {frac}");
            assert!(x.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn cracks_are_darker_than_background() {
        let s = synthetic_sample(&SyntheticSpec::default(), 3).unwrap();
        let (mut on, mut off, mut n_on) = (0.0, 0.0, 0.0);
        for (i, &m) in s.mask.data().iter().enumerate() {
            if m == 1.0 {
                on += s.image.data()[i];
                n_on += 1.0;
            } else {
                off += s.image.data()[i];
            }
        }
        assert!(on / n_on < off / (4096.0 - n_on) - 0.2);
    }
}
