//! Central finite-difference verification of tape gradients.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{contract_err, Result};

/// Default magnitude below which gradients are compared absolutely.
pub const DEFAULT_FLOOR: f64 = 1e-8;

/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floored(analytic, numeric, DEFAULT_FLOOR)
}

pub fn relative_error_floored(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst element.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let out = f(&mut tape, &vars)?;
    tape.value(out)?
        .item()
        .ok_or_else(|| contract_err!("grad_check closure must return a scalar"))
}

/// Maximum relative error between the tape gradient of `f` and central
/// differences with step `step`, over every element of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    grad_check_sampled(f, inputs, step, usize::MAX, 0).map(|r| r.max_rel_error)
}

/// Like [`grad_check`] but compares at most `per_input` randomly chosen
/// elements of each input (all of them when the input is smaller).
pub fn grad_check_sampled<F>(
    f: F,
    inputs: &[Tensor<f64>],
    step: f64,
    per_input: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    grad_check_steps(f, inputs, &[step], DEFAULT_FLOOR, per_input, seed)
}

/// Error below which no further step sizes are tried for an element.
const SETTLED: f64 = 1e-7;

/// Sampled check over a ladder of step sizes. Each element keeps the best
/// agreement found along the ladder, so an element whose stencil straddles a
/// ReLU or max-pool switch at one step is judged at a step that does not.
/// Gradients smaller than `floor` are compared in absolute terms.
pub fn grad_check_steps<F>(
    f: F,
    inputs: &[Tensor<f64>],
    steps: &[f64],
    floor: f64,
    per_input: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if steps.is_empty() || steps.iter().any(|&h| !(h > 0.0)) {
        return Err(contract_err!("grad_check needs positive step sizes"));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
        let picks: Vec<usize> = if input.numel() <= per_input {
            (0..input.numel()).collect()
        } else {
            let mut v = index::sample(&mut rng, input.numel(), per_input).into_vec();
            v.sort_unstable();
            v
        };
        for e in picks {
            let orig = input.data()[e];
            let mut err = f64::INFINITY;
            for &step in steps {
                work[k].data_mut()[e] = orig + step;
                let plus = evaluate(&f, &work)?;
                work[k].data_mut()[e] = orig - step;
                let minus = evaluate(&f, &work)?;
                work[k].data_mut()[e] = orig;
                let numeric = (plus - minus) / (2.0 * step);
                err = err.min(relative_error_floored(analytic.data()[e], numeric, floor));
                if err < SETTLED {
                    break;
                }
            }
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((k, e));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_op_is_exact() {
        let x = Tensor::new([4], vec![0.3, -1.2, 2.5, 0.0]).unwrap();
        let err = grad_check(
            |t, v| {
                let y = t.scale(v[0], 3.0)?;
                t.sum(y)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-10, "err {err}");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        struct Wrong;
        impl super::super::CustomBackward<f64> for Wrong {
            fn backward(
                &self,
                inputs: &[&Tensor<f64>],
                _output: &Tensor<f64>,
                grad_output: &Tensor<f64>,
            ) -> Result<Vec<Option<Tensor<f64>>>> {
                // true derivative of x² is 2x; report x
                let g = grad_output.item().unwrap();
                Ok(vec![Some(inputs[0].map(|x| x * g))])
            }
        }
        let x = Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap();
        let f = |t: &mut Tape<f64>, v: &[Var]| {
            let sq = t.value(v[0])?.map(|x| x * x).sum();
            t.custom(&[v[0]], Tensor::scalar(sq), Box::new(Wrong))
        };
        assert!(grad_check(f, &[x.clone()], 1e-5).unwrap() > 0.4);
        let ladder = grad_check_steps(f, &[x], &[1e-3, 1e-5, 1e-7], DEFAULT_FLOOR, usize::MAX, 0).unwrap();
        assert!(ladder.max_rel_error > 0.4);
    }

    #[test]
    fn ladder_steps_past_a_kink() {
        // |x| near 0: a step wider than |x| straddles the kink
        let x = Tensor::new([1], vec![2e-6]).unwrap();
        let f = |t: &mut Tape<f64>, v: &[Var]| {
            let pos = t.relu(v[0])?;
            let neg = t.scale(v[0], -1.0)?;
            let neg = t.relu(neg)?;
            let y = t.add(pos, neg)?;
            t.sum(y)
        };
        assert!(grad_check(f, &[x.clone()], 1e-5).unwrap() > 0.5);
        let r = grad_check_steps(f, &[x], &[1e-5, 1e-7], DEFAULT_FLOOR, usize::MAX, 0).unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }
}
