//! Soft dice loss over a batch of probability maps.

use crate::error::{dim_err, Result};
use crate::tensor::{CustomBackward, Float, Tape, Tensor, Var};

/// Added to the dice denominator only, so an empty prediction against an
/// empty target scores a loss of 1.
pub const DICE_EPS: f64 = 1e-7;

struct DiceBackward<T: Float> {
    target: Tensor<T>,
    /// Per sample: (Σ p·y, Σ p + Σ y + eps).
    terms: Vec<(T, T)>,
}

impl<T: Float> CustomBackward<T> for DiceBackward<T> {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_output: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let pred = inputs[0];
        let n = self.terms.len();
        let per = pred.numel() / n;
        let g = grad_output.data()[0];
        let scale = -T::from_f64(2.0) * g / T::from_usize(n);
        let mut d = vec![T::ZERO; pred.numel()];
        for (s, &(inter, denom)) in self.terms.iter().enumerate() {
            let inv2 = T::ONE / (denom * denom);
            for i in s * per..(s + 1) * per {
                d[i] = scale * (self.target.data()[i] * denom - inter) * inv2;
            }
        }
        Ok(vec![Some(Tensor::new(pred.shape().to_vec(), d)?)])
    }
}

/// `L = mean_n [1 − 2·Σ(ŷ⊙y) / (Σŷ + Σy + eps)]` with sums over each sample.
pub fn dice_loss<T: Float>(tape: &mut Tape<T>, pred: Var, target: &Tensor<T>) -> Result<Var> {
    let p = tape.value(pred)?;
    if p.shape() != target.shape() {
        return Err(dim_err!(
            "dice_loss: prediction {:?} and target {:?} differ",
            p.shape(),
            target.shape()
        ));
    }
    let n = *p
        .shape()
        .first()
        .ok_or_else(|| dim_err!("dice_loss: prediction needs a batch axis"))?;
    let per = p.numel() / n;
    let eps = T::from_f64(DICE_EPS);
    let mut terms = Vec::with_capacity(n);
    let mut total = T::ZERO;
    for s in 0..n {
        let ps = &p.data()[s * per..(s + 1) * per];
        let ys = &target.data()[s * per..(s + 1) * per];
        let inter: T = ps.iter().zip(ys).map(|(&a, &b)| a * b).sum();
        let denom = ps.iter().copied().sum::<T>() + ys.iter().copied().sum::<T>() + eps;
        total += T::ONE - T::from_f64(2.0) * inter / denom;
        terms.push((inter, denom));
    }
    let loss = Tensor::scalar(total / T::from_usize(n));
    tape.custom(
        &[pred],
        loss,
        Box::new(DiceBackward {
            target: target.clone(),
            terms,
        }),
    )
}

/// Dice loss of a fixed prediction, without recording anything.
pub fn dice_value<T: Float>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    let l = dice_loss(&mut tape, p, target)?;
    Ok(tape.value(l)?.data()[0].to_f64())
}
