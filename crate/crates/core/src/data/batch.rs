use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{augment, resize_crop, AugmentParams, AugmentSpec, Sample};
use crate::error::{Error, Result};
use crate::tensor::{Mode, Tensor};

/// Stacked images `N×3×S×S` and masks `N×1×S×S`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub masks: Tensor<f32>,
    pub names: Vec<String>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    fn stack(samples: Vec<Sample>, size: usize) -> Result<Self> {
        let n = samples.len();
        let mut images = Vec::with_capacity(n * 3 * size * size);
        let mut masks = Vec::with_capacity(n * size * size);
        let mut names = Vec::with_capacity(n);
        for s in samples {
            images.extend_from_slice(s.image.data());
            masks.extend_from_slice(s.mask.data());
            names.push(s.name);
        }
        Ok(Self {
            images: Tensor::new([n, 3, size, size], images)?,
            masks: Tensor::new([n, 1, size, size], masks)?,
            names,
        })
    }
}

/// One epoch of batches. Each item carries its own seed, so the output does
/// not depend on how many threads prepare it.
pub struct Batches<'a> {
    samples: &'a [Sample],
    order: Vec<(usize, u64)>,
    batch_size: usize,
    size: usize,
    mode: Mode,
    spec: AugmentSpec,
    pos: usize,
}

impl Batches<'_> {
    /// Number of batches in the epoch, including the short last one.
    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    fn prepare(&self, idx: usize, seed: u64) -> Result<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = resize_crop(&self.samples[idx], self.size, self.mode, &mut rng)?;
        match self.mode {
            Mode::Train => augment(&s, &AugmentParams::sample(&self.spec, &mut rng)),
            Mode::Eval => Ok(s),
        }
    }
}

impl Iterator for Batches<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let chunk = &self.order[self.pos..end];
        self.pos = end;
        let prepared: Result<Vec<Sample>> = chunk
            .par_iter()
            .map(|&(idx, seed)| self.prepare(idx, seed))
            .collect();
        Some(prepared.and_then(|s| Batch::stack(s, self.size)))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (left, Some(left))
    }
}

/// Batches for one epoch. Train mode shuffles and augments under `rng`;
/// eval mode keeps the given order and only resizes and centre-crops.
pub fn make_batches<'a, R: Rng + ?Sized>(
    samples: &'a [Sample],
    batch_size: usize,
    size: usize,
    mode: Mode,
    spec: &AugmentSpec,
    rng: &mut R,
) -> Result<Batches<'a>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    spec.validate()?;
    let mut indices: Vec<usize> = (0..samples.len()).collect();
    if mode == Mode::Train {
        indices.shuffle(rng);
    }
    let order = indices
        .into_iter()
        .map(|i| {
            let seed = if mode == Mode::Train { rng.random() } else { 0 };
            (i, seed)
        })
        .collect();
    Ok(Batches {
        samples,
        order,
        batch_size,
        size,
        mode,
        spec: spec.clone(),
        pos: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn samples(n: usize, side: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let img = Tensor::from_fn([3, side, side], |j| ((i * 31 + j) % 17) as f32 / 16.0);
                let mask = Tensor::from_fn([1, side, side], |j| ((i + j) % 5 == 0) as u8 as f32);
                Sample::new(format!("s{i}"), img, mask).unwrap()
            })
            .collect()
    }

    #[test]
    fn last_short_batch_is_kept() {
        let s = samples(10, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = make_batches(&s, 4, 32, Mode::Train, &AugmentSpec::default(), &mut rng).unwrap();
        assert_eq!(b.num_batches(), 3);
        let sizes: Vec<usize> = b.map(|b| b.unwrap().len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn eval_stream_is_repeatable() {
        let s = samples(5, 48);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            make_batches(&s, 2, 32, Mode::Eval, &AugmentSpec::default(), &mut rng)
                .unwrap()
                .map(Result::unwrap)
                .collect::<Vec<_>>()
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| x.images.bitwise_eq(&y.images)
            && x.masks.bitwise_eq(&y.masks)));
        assert_eq!(a[0].names, vec!["s0", "s1"]);
    }

    #[test]
    fn train_stream_follows_the_seed() {
        let s = samples(6, 40);
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            make_batches(&s, 4, 32, Mode::Train, &AugmentSpec::default(), &mut rng)
                .unwrap()
                .map(Result::unwrap)
                .collect::<Vec<_>>()
        };
        let (a, b, c) = (run(3), run(3), run(4));
        for (x, y) in a.iter().zip(&b) {
            assert!(x.images.bitwise_eq(&y.images));
            assert!(x.masks.bitwise_eq(&y.masks));
            assert_eq!(x.names, y.names);
        }
        assert!(a.iter().zip(&c).any(|(x, y)| !x.images.bitwise_eq(&y.images)));
        for batch in &a {
            assert!(batch.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(batch.masks.data().iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }
}
