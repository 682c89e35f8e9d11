//! Binarisation and tolerance-based precision / recall / F1.

use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{pad_reflect, Sample};
use crate::error::{contract_err, dim_err, Error, Result};
use crate::network::{Model, OUTPUT_STRIDE};
use crate::tensor::{Float, Tensor};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_RADIUS: usize = 2;

/// Row-major `H×W` mask of exact zeros and ones.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(dim_err!(
                "mask of {height}×{width} needs {} values, got {}",
                height * width,
                bits.len()
            ));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    /// From a `1×H×W`, `H×W` or `1×1×H×W` tensor whose entries are 0 or 1.
    pub fn from_tensor<T: Float>(t: &Tensor<T>) -> Result<Self> {
        let (h, w) = plane_dims(t.shape())?;
        let bits = t
            .data()
            .iter()
            .map(|&v| {
                if v == T::ONE {
                    Ok(true)
                } else if v == T::ZERO {
                    Ok(false)
                } else {
                    Err(dim_err!("mask value {} is not 0 or 1", v.to_f64()))
                }
            })
            .collect::<Result<_>>()?;
        Self::new(h, w, bits)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn to_tensor<T: Float>(&self) -> Tensor<T> {
        Tensor::from_fn([1, self.height, self.width], |i| {
            if self.bits[i] {
                T::ONE
            } else {
                T::ZERO
            }
        })
    }

    /// Dilation by a `(2r+1)×(2r+1)` square, done as two 1-D passes.
    pub fn dilate(&self, radius: usize) -> Self {
        if radius == 0 {
            return self.clone();
        }
        let (h, w) = (self.height, self.width);
        let mut rows = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                let lo = x.saturating_sub(radius);
                let hi = (x + radius).min(w - 1);
                rows[y * w + x] = (lo..=hi).any(|xx| self.bits[y * w + xx]);
            }
        }
        let mut out = vec![false; h * w];
        for y in 0..h {
            let lo = y.saturating_sub(radius);
            let hi = (y + radius).min(h - 1);
            for x in 0..w {
                out[y * w + x] = (lo..=hi).any(|yy| rows[yy * w + x]);
            }
        }
        Self {
            height: h,
            width: w,
            bits: out,
        }
    }
}

fn plane_dims(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [h, w] | [1, h, w] | [1, 1, h, w] => Ok((*h, *w)),
        s => Err(dim_err!("expected a single-channel H×W map, got {s:?}")),
    }
}

/// `1` where the probability is strictly above `threshold`.
pub fn binarize<T: Float>(pred: &Tensor<T>, threshold: f64) -> Result<BinaryMask> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(contract_err!("threshold {threshold} outside [0, 1]"));
    }
    let (h, w) = plane_dims(pred.shape())?;
    let bits = pred.data().iter().map(|v| v.to_f64() > threshold).collect();
    BinaryMask::new(h, w, bits)
}

/// Element-wise binarisation keeping the tensor shape.
pub fn binarize_tensor<T: Float>(pred: &Tensor<T>, threshold: f64) -> Tensor<T> {
    pred.map(|v| if v.to_f64() > threshold { T::ONE } else { T::ZERO })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    /// Predicted positives within the radius of a ground-truth positive.
    pub tp_pr: usize,
    pub fp: usize,
    /// Ground-truth positives within the radius of a predicted positive.
    pub tp_re: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl std::ops::Add for Counts {
    type Output = Counts;

    fn add(self, o: Counts) -> Counts {
        Counts {
            tp_pr: self.tp_pr + o.tp_pr,
            fp: self.fp + o.fp,
            tp_re: self.tp_re + o.tp_re,
            fn_: self.fn_ + o.fn_,
        }
    }
}

/// Tolerant matching under Chebyshev distance `radius`.
pub fn tolerant_counts(pred: &BinaryMask, gt: &BinaryMask, radius: usize) -> Result<Counts> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(dim_err!(
            "prediction {}×{} and ground truth {}×{} differ",
            pred.height,
            pred.width,
            gt.height,
            gt.width
        ));
    }
    let (gt_zone, pred_zone) = (gt.dilate(radius), pred.dilate(radius));
    let mut c = Counts::default();
    for i in 0..pred.bits.len() {
        if pred.bits[i] {
            if gt_zone.bits[i] {
                c.tp_pr += 1;
            } else {
                c.fp += 1;
            }
        }
        if gt.bits[i] {
            if pred_zone.bits[i] {
                c.tp_re += 1;
            } else {
                c.fn_ += 1;
            }
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Both masks empty scores 1 across the board; any other zero denominator
/// gives 0 for that metric.
pub fn precision_recall_f1(c: &Counts) -> Scores {
    if c.tp_pr + c.fp == 0 && c.tp_re + c.fn_ == 0 {
        return Scores {
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
        };
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(c.tp_pr, c.tp_pr + c.fp);
    let recall = ratio(c.tp_re, c.tp_re + c.fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Scores {
        precision,
        recall,
        f1,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Mean of per-image scores.
    #[default]
    PerImage,
    /// Scores of the counts summed over all images.
    Pooled,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-image" | "perimage" | "image" => Ok(Self::PerImage),
            "pooled" => Ok(Self::Pooled),
            _ => Err(Error::Config(format!("unknown aggregation {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRow {
    pub image: String,
    #[serde(flatten)]
    pub counts: Counts,
    #[serde(flatten)]
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub radius: usize,
    pub aggregation: Aggregation,
    pub per_image: Vec<ImageRow>,
    pub mean_precision: f64,
    pub mean_recall: f64,
    pub mean_f1: f64,
}

impl MetricsReport {
    /// Builds the report from rows, sorted by image name.
    pub fn from_rows(mut rows: Vec<ImageRow>, radius: usize, aggregation: Aggregation) -> Result<Self> {
        if rows.is_empty() {
            return Err(contract_err!("cannot summarise an empty set of images"));
        }
        rows.sort_by(|a, b| a.image.cmp(&b.image));
        let means = match aggregation {
            Aggregation::PerImage => {
                let n = rows.len() as f64;
                Scores {
                    precision: rows.iter().map(|r| r.scores.precision).sum::<f64>() / n,
                    recall: rows.iter().map(|r| r.scores.recall).sum::<f64>() / n,
                    f1: rows.iter().map(|r| r.scores.f1).sum::<f64>() / n,
                }
            }
            Aggregation::Pooled => {
                let total = rows.iter().fold(Counts::default(), |acc, r| acc + r.counts);
                precision_recall_f1(&total)
            }
        };
        Ok(Self {
            radius,
            aggregation,
            per_image: rows,
            mean_precision: means.precision,
            mean_recall: means.recall,
            mean_f1: means.f1,
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Pr {:.4} Re {:.4} F1 {:.4}",
            self.mean_precision, self.mean_recall, self.mean_f1
        )
    }
}

/// Scores one prediction against its ground truth.
pub fn score_image(name: &str, pred: &BinaryMask, gt: &BinaryMask, radius: usize) -> Result<ImageRow> {
    let counts = tolerant_counts(pred, gt, radius)?;
    Ok(ImageRow {
        image: name.to_string(),
        counts,
        scores: precision_recall_f1(&counts),
    })
}

/// Eval-mode probability map for one `3×H×W` image of any size: the input is
/// reflect-padded up to a multiple of the encoder stride and the output is
/// cropped back.
pub fn predict_image<T: Float>(model: &Model<T>, image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (c, h, w) = match image.shape() {
        &[c, h, w] => (c, h, w),
        s => return Err(dim_err!("expected a C×H×W image, got {s:?}")),
    };
    let ph = h.div_ceil(OUTPUT_STRIDE).max(1) * OUTPUT_STRIDE;
    let pw = w.div_ceil(OUTPUT_STRIDE).max(1) * OUTPUT_STRIDE;
    let padded = if (ph, pw) == (h, w) {
        image.clone()
    } else {
        pad_reflect(image, ph, pw)?
    };
    let input: Tensor<T> = padded.cast::<T>().reshape([1, c, ph, pw])?;
    let prob = model.predict(&input)?;
    let full = prob.data();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        out.extend(full[y * pw..y * pw + w].iter().map(|v| v.to_f64() as f32));
    }
    Tensor::new([1, h, w], out)
}

/// Predicts, binarises and scores every sample. Images are processed in
/// parallel; rows are sorted by name so the result does not depend on
/// scheduling.
pub fn evaluate_dataset<T: Float>(
    model: &Model<T>,
    samples: &[Sample],
    radius: usize,
    threshold: f64,
    aggregation: Aggregation,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(contract_err!("evaluation needs at least one image"));
    }
    let rows = samples
        .par_iter()
        .map(|s| {
            let prob = predict_image(model, &s.image)?;
            let pred = binarize(&prob, threshold)?;
            let gt = BinaryMask::from_tensor(&s.mask)?;
            score_image(&s.name, &pred, &gt, radius)
        })
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_rows(rows, radius, aggregation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> BinaryMask {
        let mut m = BinaryMask::empty(h, w);
        for &(y, x) in on {
            m.bits[y * w + x] = true;
        }
        m
    }

    #[test]
    fn binarize_is_strict() {
        let t = Tensor::new([1, 3], vec![0.49f64, 0.5, 0.51]).unwrap();
        assert_eq!(binarize(&t, 0.5).unwrap().bits(), &[false, false, true]);
        let b = binarize_tensor(&t, 0.5);
        assert!(binarize_tensor(&b, 0.5).bitwise_eq(&b));
    }

    #[test]
    fn chebyshev_two_pixels_apart_match() {
        let p = mask(10, 10, &[(5, 5)]);
        let g = mask(10, 10, &[(5, 7)]);
        let c = tolerant_counts(&p, &g, 2).unwrap();
        assert_eq!(c, Counts { tp_pr: 1, fp: 0, tp_re: 1, fn_: 0 });
        let c = tolerant_counts(&p, &g, 1).unwrap();
        assert_eq!(c, Counts { tp_pr: 0, fp: 1, tp_re: 0, fn_: 1 });
    }

    #[test]
    fn scores_from_counts() {
        let s = precision_recall_f1(&Counts { tp_pr: 8, fp: 2, tp_re: 9, fn_: 1 });
        assert!((s.precision - 0.8).abs() < 1e-15);
        assert!((s.recall - 0.9).abs() < 1e-15);
        assert!((s.f1 - 2.0 * 0.72 / 1.7).abs() < 1e-12);
        let empty = precision_recall_f1(&Counts::default());
        assert_eq!((empty.precision, empty.recall, empty.f1), (1.0, 1.0, 1.0));
        let miss = precision_recall_f1(&Counts { tp_pr: 0, fp: 3, tp_re: 0, fn_: 0 });
        assert_eq!(miss.f1, 0.0);
    }

    #[test]
    fn means_are_arithmetic() {
        let rows = vec![
            ImageRow {
                image: "b".into(),
                counts: Counts { tp_pr: 1, fp: 0, tp_re: 1, fn_: 0 },
                scores: Scores { precision: 1.0, recall: 1.0, f1: 1.0 },
            },
            ImageRow {
                image: "a".into(),
                counts: Counts { tp_pr: 0, fp: 1, tp_re: 0, fn_: 1 },
                scores: Scores { precision: 0.0, recall: 0.0, f1: 0.0 },
            },
        ];
        let r = MetricsReport::from_rows(rows, 2, Aggregation::PerImage).unwrap();
        assert_eq!(r.mean_f1, 0.5);
        assert_eq!(r.per_image[0].image, "a");
        let json = serde_json::to_value(&r).unwrap();
        for key in ["image", "tp_pr", "fp", "tp_re", "fn", "precision", "recall", "f1"] {
            assert!(json["per_image"][0].get(key).is_some(), "{key}");
        }
        assert!(MetricsReport::from_rows(vec![], 2, Aggregation::PerImage).is_err());
    }

    fn arb_pair() -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
        (1usize..12, 1usize..12).prop_flat_map(|(h, w)| {
            (
                proptest::collection::vec(proptest::bool::weighted(0.2), h * w),
                proptest::collection::vec(proptest::bool::weighted(0.2), h * w),
            )
                .prop_map(move |(a, b)| {
                    (BinaryMask::new(h, w, a).unwrap(), BinaryMask::new(h, w, b).unwrap())
                })
        })
    }

    proptest! {
        #[test]
        fn radius_is_monotone((p, g) in arb_pair(), r in 0usize..4) {
            let a = tolerant_counts(&p, &g, r).unwrap();
            let b = tolerant_counts(&p, &g, r + 1).unwrap();
            prop_assert!(b.tp_pr >= a.tp_pr && b.tp_re >= a.tp_re);
            prop_assert!(b.fp <= a.fp && b.fn_ <= a.fn_);
        }

        #[test]
        fn swapping_masks_swaps_counts((p, g) in arb_pair(), r in 0usize..4) {
            let a = tolerant_counts(&p, &g, r).unwrap();
            let b = tolerant_counts(&g, &p, r).unwrap();
            prop_assert_eq!((a.tp_pr, a.fp), (b.tp_re, b.fn_));
            prop_assert_eq!((a.tp_re, a.fn_), (b.tp_pr, b.fp));
        }

        #[test]
        fn radius_zero_is_pixelwise((p, g) in arb_pair()) {
            let c = tolerant_counts(&p, &g, 0).unwrap();
            prop_assert_eq!(c.tp_pr, c.tp_re);
            let both = p.bits().iter().zip(g.bits()).filter(|(a, b)| **a && **b).count();
            prop_assert_eq!(c.tp_pr, both);
        }
    }
}
