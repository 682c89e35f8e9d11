//! Mask-consistent geometric transforms and image-only lighting changes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{chw, Sample};
use crate::error::{Error, Result};
use crate::tensor::{Mode, Tensor};

/// Reflect-101 index: `-1 → 1`, `n → n − 2`. The edge pixel is not repeated.
fn reflect101(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut i = i.rem_euclid(period);
    if i >= n as isize {
        i = period - i;
    }
    i as usize
}

/// Continuous counterpart of [`reflect101`].
fn reflect101_f(u: f64, n: usize) -> f64 {
    if n == 1 {
        return 0.0;
    }
    let period = 2.0 * (n as f64 - 1.0);
    let mut u = u.rem_euclid(period);
    if u > n as f64 - 1.0 {
        u = period - u;
    }
    u
}

fn map_planes(t: &Tensor<f32>, out_h: usize, out_w: usize, f: impl Fn(&[f32], usize, usize) -> f32) -> Result<Tensor<f32>> {
    let (c, h, w) = chw(t)?;
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &t.data()[ch * h * w..(ch + 1) * h * w];
        for y in 0..out_h {
            for x in 0..out_w {
                out.push(f(plane, y, x));
            }
        }
    }
    Tensor::new([c, out_h, out_w], out)
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize_bilinear(t: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let (_, h, w) = chw(t)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::Dimension(format!("cannot resize to {out_h}×{out_w}")));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(t.clone());
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    map_planes(t, out_h, out_w, |plane, y, x| {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
        bilinear(plane, w, h, fy, fx)
    })
}

fn bilinear(plane: &[f32], w: usize, h: usize, fy: f64, fx: f64) -> f32 {
    let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
    let at = |y: usize, x: usize| plane[y * w + x] as f64;
    let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
    let bottom = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
    (top * (1.0 - ty) + bottom * ty) as f32
}

fn crop(t: &Tensor<f32>, top: usize, left: usize, size: usize) -> Result<Tensor<f32>> {
    map_planes(t, size, size, |plane, y, x| {
        let w = t.shape()[2];
        plane[(top + y) * w + left + x]
    })
}

fn rebinarize(mask: &Tensor<f32>) -> Tensor<f32> {
    mask.map(|v| if v > 0.5 { 1.0 } else { 0.0 })
}

/// Resizes the shorter side to `target` and crops a `target × target`
/// window: random in train mode, centred in eval mode. The mask follows the
/// same geometry and is re-binarised at 0.5.
pub fn resize_crop<R: Rng + ?Sized>(
    sample: &Sample,
    target: usize,
    mode: Mode,
    rng: &mut R,
) -> Result<Sample> {
    let (h, w) = (sample.height(), sample.width());
    if h == 0 || w == 0 || target == 0 {
        return Err(Error::Dimension(format!(
            "resize_crop: degenerate source {h}×{w} or target {target}"
        )));
    }
    let short = h.min(w);
    let (rh, rw) = if short == target {
        (h, w)
    } else {
        let scale = target as f64 / short as f64;
        let rh = if h == short { target } else { ((h as f64 * scale).round() as usize).max(target) };
        let rw = if w == short { target } else { ((w as f64 * scale).round() as usize).max(target) };
        (rh, rw)
    };
    let image = resize_bilinear(&sample.image, rh, rw)?;
    let mask = resize_bilinear(&sample.mask, rh, rw)?;
    let (top, left) = match mode {
        Mode::Train => (rng.random_range(0..=rh - target), rng.random_range(0..=rw - target)),
        Mode::Eval => ((rh - target) / 2, (rw - target) / 2),
    };
    Ok(Sample {
        image: crop(&image, top, left, target)?,
        mask: rebinarize(&crop(&mask, top, left, target)?),
        name: sample.name.clone(),
    })
}

/// Pads every plane by reflection (reflect-101) to `out_h × out_w`, keeping
/// the original at the top-left.
pub fn pad_reflect(t: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let (_, h, w) = chw(t)?;
    if out_h < h || out_w < w {
        return Err(Error::Dimension(format!(
            "pad_reflect: target {out_h}×{out_w} smaller than {h}×{w}"
        )));
    }
    map_planes(t, out_h, out_w, |plane, y, x| {
        plane[reflect101(y as isize, h) * w + reflect101(x as isize, w)]
    })
}

pub fn flip_horizontal(t: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (_, h, w) = chw(t)?;
    map_planes(t, h, w, |plane, y, x| plane[y * w + (w - 1 - x)])
}

pub fn flip_vertical(t: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (_, h, w) = chw(t)?;
    map_planes(t, h, w, |plane, y, x| plane[(h - 1 - y) * w + x])
}

/// Clockwise rotation about the image centre, keeping the canvas size.
/// Out-of-canvas samples are taken from the reflect-101 extension of the
/// source. `nearest` selects nearest-neighbour sampling (for masks) instead
/// of bilinear. Quarter turns of square images, and half turns of any image,
/// are exact index permutations.
pub fn rotate(t: &Tensor<f32>, degrees: f64, nearest: bool) -> Result<Tensor<f32>> {
    let (_, h, w) = chw(t)?;
    let turns = degrees.rem_euclid(360.0);
    let quarter = (turns / 90.0).round();
    if (turns - quarter * 90.0).abs() < 1e-9 {
        match quarter as u32 % 4 {
            0 => return Ok(t.clone()),
            2 => return map_planes(t, h, w, |p, y, x| p[(h - 1 - y) * w + (w - 1 - x)]),
            1 if h == w => return map_planes(t, h, w, |p, y, x| p[(h - 1 - x) * w + y]),
            3 if h == w => return map_planes(t, h, w, |p, y, x| p[x * w + (w - 1 - y)]),
            _ => {}
        }
    }
    let (sin, cos) = turns.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    map_planes(t, h, w, |plane, y, x| {
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        let sx = cx + cos * dx + sin * dy;
        let sy = cy - sin * dx + cos * dy;
        if nearest {
            let iy = reflect101(sy.round() as isize, h);
            let ix = reflect101(sx.round() as isize, w);
            plane[iy * w + ix]
        } else {
            bilinear(plane, w, h, reflect101_f(sy, h), reflect101_f(sx, w))
        }
    })
}

/// Ranges of the three stochastic augmentations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    /// Rotation angle is drawn from `[0, max_rotation_deg)`.
    pub max_rotation_deg: f64,
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    /// Brightness and contrast offsets are each drawn from `[-delta, delta]`.
    pub lighting_delta: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            max_rotation_deg: 360.0,
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            lighting_delta: 0.05,
        }
    }
}

impl AugmentSpec {
    /// No augmentation at all.
    pub fn none() -> Self {
        Self {
            max_rotation_deg: 0.0,
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            lighting_delta: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob_ok = |p: f64| (0.0..=1.0).contains(&p);
        if !(0.0..=360.0).contains(&self.max_rotation_deg)
            || !prob_ok(self.hflip_prob)
            || !prob_ok(self.vflip_prob)
            || !(0.0..1.0).contains(&self.lighting_delta)
        {
            return Err(Error::Config(format!("augmentation ranges out of bounds: {self:?}")));
        }
        Ok(())
    }
}

/// One concrete draw of the augmentations.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AugmentParams {
    pub angle_deg: f64,
    pub hflip: bool,
    pub vflip: bool,
    pub brightness: f64,
    pub contrast: f64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn sample<R: Rng + ?Sized>(spec: &AugmentSpec, rng: &mut R) -> Self {
        let angle_deg = if spec.max_rotation_deg > 0.0 {
            rng.random_range(0.0..spec.max_rotation_deg)
        } else {
            0.0
        };
        let hflip = rng.random_bool(spec.hflip_prob);
        let vflip = rng.random_bool(spec.vflip_prob);
        let d = spec.lighting_delta;
        let (brightness, contrast) = if d > 0.0 {
            (rng.random_range(-d..=d), rng.random_range(-d..=d))
        } else {
            (0.0, 0.0)
        };
        Self {
            angle_deg,
            hflip,
            vflip,
            brightness,
            contrast,
        }
    }
}

/// Rotation, flips, then lighting (image only):
/// `p ← clamp((p − 0.5)·(1 + contrast) + 0.5 + brightness, 0, 1)`.
pub fn augment(sample: &Sample, params: &AugmentParams) -> Result<Sample> {
    let mut image = rotate(&sample.image, params.angle_deg, false)?;
    let mut mask = rotate(&sample.mask, params.angle_deg, true)?;
    if params.hflip {
        image = flip_horizontal(&image)?;
        mask = flip_horizontal(&mask)?;
    }
    if params.vflip {
        image = flip_vertical(&image)?;
        mask = flip_vertical(&mask)?;
    }
    if params.brightness != 0.0 || params.contrast != 0.0 {
        let (b, c) = (params.brightness as f32, params.contrast as f32);
        image = image.map(|p| ((p - 0.5) * (1.0 + c) + 0.5 + b).clamp(0.0, 1.0));
    }
    Ok(Sample {
        image,
        mask: rebinarize(&mask),
        name: sample.name.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect101_indices() {
        let got: Vec<usize> = (-3..8).map(|i| reflect101(i, 5)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
        assert_eq!(reflect101(-4, 1), 0);
        assert!((reflect101_f(-0.5, 5) - 0.5).abs() < 1e-12);
        assert!((reflect101_f(4.25, 5) - 3.75).abs() < 1e-12);
    }

    #[test]
    fn pad_reflect_keeps_origin() {
        let t = Tensor::from_fn([1, 2, 3], |i| i as f32);
        let p = pad_reflect(&t, 4, 5).unwrap();
        assert_eq!(p.shape(), &[1, 4, 5]);
        assert_eq!(&p.data()[..3], &[0.0, 1.0, 2.0]);
        // column 3 mirrors column 1, row 2 mirrors row 0
        assert_eq!(p.data()[3], 1.0);
        assert_eq!(p.data()[2 * 5], 0.0);
    }

    #[test]
    fn resize_identity_and_constant() {
        let t = Tensor::from_fn([3, 4, 6], |i| (i % 7) as f32 / 7.0);
        assert!(resize_bilinear(&t, 4, 6).unwrap().bitwise_eq(&t));
        let c = Tensor::full([1, 5, 5], 0.25f32);
        let r = resize_bilinear(&c, 9, 13).unwrap();
        assert!(r.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }
}
