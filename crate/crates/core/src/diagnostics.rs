//! Finite-difference gradient checks over every tape operation and over the
//! reduced network end to end.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::loss::dice_loss;
use crate::network::{scse_block, Model, ModelConfig, ScseVars, BN_EPS};
use crate::tensor::{grad_check_sampled, grad_check_steps, Mode, Tape, Tensor, Var};

/// Largest relative error accepted by the suites.
pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_INSTANCES: usize = 20;
const OP_STEP: f64 = 1e-6;
/// Tried in order per element until one agrees.
const MODEL_STEPS: [f64; 4] = [1e-5, 1e-6, 1e-4, 1e-7];
/// Batch norm makes some full-graph gradients exactly zero (a bias feeding a
/// normalised channel); those are compared absolutely below this magnitude.
pub const MODEL_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub name: String,
    pub instances: usize,
    /// Number of gradient entries compared.
    pub checked: usize,
    pub max_rel_error: f64,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRAD_TOLERANCE
    }
}

impl fmt::Display for CheckRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<20} {:>4} {:>7} {:>12.3e}  {}",
            self.name,
            self.instances,
            self.checked,
            self.max_rel_error,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

pub fn table_header() -> String {
    format!("{:<20} {:>4} {:>7} {:>12}  status", "item", "runs", "checked", "max rel err")
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero so ReLU kinks stay out of the stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

/// Distinct values at least 0.01 apart, so no pooling window has a near tie.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut ranks: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        ranks.swap(i, rng.random_range(0..=i));
    }
    Tensor::from_fn(shape.to_vec(), |i| ranks[i] as f64 * 0.01 - 0.5)
}

/// `Σ y ⊙ w` with fixed pseudo-random weights, so every output element
/// contributes a distinct amount.
fn project(tape: &mut Tape<f64>, y: Var) -> Result<Var> {
    let shape = tape.value(y)?.shape().to_vec();
    if shape.is_empty() {
        return Ok(y);
    }
    let w = Tensor::from_fn(shape, |i| {
        let h = (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 40;
        let m = 0.1 + (h % 1000) as f64 / 1111.0;
        if h & 1 << 20 == 0 { m } else { -m }
    });
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

type Case = (Vec<Tensor<f64>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>);

fn case_for(op: &str, rng: &mut ChaCha8Rng) -> Case {
    let n = rng.random_range(1..=2);
    let c = rng.random_range(1..=3);
    let h = rng.random_range(2..=5);
    let w = rng.random_range(2..=5);
    match op {
        "conv2d" => {
            let k = [1, 2, 3][rng.random_range(0..3)];
            let stride = rng.random_range(1..=2);
            let pad = rng.random_range(0..k);
            let cout = rng.random_range(1..=3);
            let (h, w) = (h + k, w + k);
            let inputs = vec![
                uniform(rng, &[n, c, h, w], -1.0, 1.0),
                uniform(rng, &[cout, c, k, k], -1.0, 1.0),
                uniform(rng, &[cout], -0.5, 0.5),
            ];
            (
                inputs,
                Box::new(move |t, v| {
                    let y = t.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
                    project(t, y)
                }),
            )
        }
        "conv_transpose2d" => {
            let k = rng.random_range(1..=3);
            let cout = rng.random_range(1..=3);
            let inputs = vec![
                uniform(rng, &[n, c, h, w], -1.0, 1.0),
                uniform(rng, &[c, cout, k, k], -1.0, 1.0),
                uniform(rng, &[cout], -0.5, 0.5),
            ];
            (
                inputs,
                Box::new(move |t, v| {
                    let y = t.conv_transpose2d(v[0], v[1], Some(v[2]), k)?;
                    project(t, y)
                }),
            )
        }
        "batch_norm_train" | "batch_norm_eval" => {
            let mode = if op == "batch_norm_train" { Mode::Train } else { Mode::Eval };
            let mean = uniform(rng, &[c], -0.3, 0.3);
            let var = uniform(rng, &[c], 0.5, 1.5);
            let inputs = vec![
                uniform(rng, &[n, c, h, w], -2.0, 2.0),
                uniform(rng, &[c], 0.5, 1.5),
                uniform(rng, &[c], -0.5, 0.5),
            ];
            (
                inputs,
                Box::new(move |t, v| {
                    let (y, _) = t.batch_norm(v[0], v[1], v[2], &mean, &var, mode, BN_EPS)?;
                    project(t, y)
                }),
            )
        }
        "relu" => (
            vec![away_from_zero(rng, &[n, c, h, w])],
            Box::new(|t, v| {
                let y = t.relu(v[0])?;
                project(t, y)
            }),
        ),
        "sigmoid" => (
            vec![uniform(rng, &[n, c, h, w], -4.0, 4.0)],
            Box::new(|t, v| {
                let y = t.sigmoid(v[0])?;
                project(t, y)
            }),
        ),
        "max_pool2d" => {
            let k = rng.random_range(2..=3);
            let stride = rng.random_range(1..=2);
            let pad = rng.random_range(0..k);
            let (h, w) = (h + k, w + k);
            (
                vec![distinct(rng, &[n, c, h, w])],
                Box::new(move |t, v| {
                    let y = t.max_pool2d(v[0], k, stride, pad)?;
                    project(t, y)
                }),
            )
        }
        "global_avg_pool" => (
            vec![uniform(rng, &[n, c, h, w], -1.0, 1.0)],
            Box::new(|t, v| {
                let y = t.global_avg_pool(v[0])?;
                project(t, y)
            }),
        ),
        "linear" => {
            let d = rng.random_range(1..=4);
            let inputs = vec![
                uniform(rng, &[n, c], -1.0, 1.0),
                uniform(rng, &[d, c], -1.0, 1.0),
                uniform(rng, &[d], -0.5, 0.5),
            ];
            (
                inputs,
                Box::new(|t, v| {
                    let y = t.linear(v[0], v[1], Some(v[2]))?;
                    project(t, y)
                }),
            )
        }
        "reshape" => (
            vec![uniform(rng, &[n, c, h, w], -1.0, 1.0)],
            Box::new(move |t, v| {
                let y = t.reshape(v[0], [n * c, h * w])?;
                project(t, y)
            }),
        ),
        "concat_channels" => {
            let c2 = rng.random_range(1..=3);
            let inputs = vec![
                uniform(rng, &[n, c, h, w], -1.0, 1.0),
                uniform(rng, &[n, c2, h, w], -1.0, 1.0),
            ];
            (
                inputs,
                Box::new(|t, v| {
                    let y = t.concat_channels(v[0], v[1])?;
                    project(t, y)
                }),
            )
        }
        "add" => {
            let inputs = vec![
                uniform(rng, &[n, c, h, w], -1.0, 1.0),
                uniform(rng, &[n, c, h, w], -1.0, 1.0),
            ];
            (
                inputs,
                Box::new(|t, v| {
                    let y = t.add(v[0], v[1])?;
                    project(t, y)
                }),
            )
        }
        "mul" => {
            let other = match rng.random_range(0..3) {
                0 => vec![n, c, h, w],
                1 => vec![n, c, 1, 1],
                _ => vec![n, 1, h, w],
            };
            let inputs = vec![
                uniform(rng, &[n, c, h, w], -1.0, 1.0),
                uniform(rng, &other, -1.0, 1.0),
            ];
            (
                inputs,
                Box::new(|t, v| {
                    let y = t.mul(v[0], v[1])?;
                    project(t, y)
                }),
            )
        }
        "sum" => (
            vec![uniform(rng, &[n, c, h, w], -1.0, 1.0)],
            Box::new(|t, v| t.sum(v[0])),
        ),
        "scale" => {
            let factor = rng.random_range(-2.0..2.0);
            (
                vec![uniform(rng, &[n, c, h, w], -1.0, 1.0)],
                Box::new(move |t, v| {
                    let y = t.scale(v[0], factor)?;
                    project(t, y)
                }),
            )
        }
        "dice_loss" => {
            let target = Tensor::from_fn([n, 1, h + 4, w + 4], |_| rng.random_bool(0.4) as u8 as f64);
            (
                vec![uniform(rng, &[n, 1, h + 4, w + 4], 0.05, 0.95)],
                Box::new(move |t, v| dice_loss(t, v[0], &target)),
            )
        }
        "scse" => {
            let c = rng.random_range(2..=6);
            let r = rng.random_range(1..=2);
            let inputs = vec![
                uniform(rng, &[n, c, h, w], -1.0, 1.0),
                uniform(rng, &[r, c], -1.0, 1.0),
                uniform(rng, &[r], 0.2, 0.6),
                uniform(rng, &[c, r], -1.0, 1.0),
                uniform(rng, &[c], -0.3, 0.3),
                uniform(rng, &[1, c, 1, 1], -1.0, 1.0),
                uniform(rng, &[1], -0.3, 0.3),
            ];
            (
                inputs,
                Box::new(|t, v| {
                    let vars = ScseVars {
                        fc1_weight: v[1],
                        fc1_bias: v[2],
                        fc2_weight: v[3],
                        fc2_bias: v[4],
                        spatial_weight: v[5],
                        spatial_bias: v[6],
                    };
                    let y = scse_block(t, v[0], &vars)?;
                    project(t, y)
                }),
            )
        }
        other => unreachable!("no gradient case for {other}"),
    }
}

/// Every operation kind covered by [`op_suite`].
pub const OP_NAMES: [&str; 18] = [
    "conv2d",
    "conv_transpose2d",
    "batch_norm_train",
    "batch_norm_eval",
    "relu",
    "sigmoid",
    "max_pool2d",
    "global_avg_pool",
    "linear",
    "reshape",
    "concat_channels",
    "add",
    "mul",
    "sum",
    "scale",
    "dice_loss",
    "scse",
    "custom",
];

fn custom_case(rng: &mut ChaCha8Rng) -> Case {
    // the dice loss is the library's custom op; here a cubic exercises the hook directly
    use crate::tensor::CustomBackward;
    struct Cube;
    impl CustomBackward<f64> for Cube {
        fn backward(
            &self,
            inputs: &[&Tensor<f64>],
            _output: &Tensor<f64>,
            grad_output: &Tensor<f64>,
        ) -> Result<Vec<Option<Tensor<f64>>>> {
            let g = grad_output.data();
            let x = inputs[0].data();
            let d = (0..x.len()).map(|i| 3.0 * x[i] * x[i] * g[i]).collect();
            Ok(vec![Some(Tensor::new(inputs[0].shape().to_vec(), d)?)])
        }
    }
    let len = rng.random_range(1..=12);
    (
        vec![uniform(rng, &[len], -1.5, 1.5)],
        Box::new(|t, v| {
            let cubed = t.value(v[0])?.map(|x| x * x * x);
            let y = t.custom(&[v[0]], cubed, Box::new(Cube))?;
            project(t, y)
        }),
    )
}

/// One row per operation kind, `instances` random shapes and values each.
pub fn op_suite(seed: u64, instances: usize) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::with_capacity(OP_NAMES.len());
    for (k, name) in OP_NAMES.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64 * 1_000_003));
        let mut row = CheckRow {
            name: name.to_string(),
            instances,
            checked: 0,
            max_rel_error: 0.0,
        };
        for _ in 0..instances {
            let (inputs, f) = if *name == "custom" {
                custom_case(&mut rng)
            } else {
                case_for(name, &mut rng)
            };
            let report = grad_check_sampled(|t, v| f(t, v), &inputs, OP_STEP, usize::MAX, 0)?;
            row.checked += report.checked;
            row.max_rel_error = row.max_rel_error.max(report.max_rel_error);
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Full-graph check of the reduced network in float64 on a `2×3×64×64`
/// input: the input and every parameter tensor (`per_tensor` sampled entries
/// each) against a fixed weighted sum of the output map. Instances alternate
/// between train and eval mode.
pub fn model_check(seed: u64, instances: usize, per_tensor: usize) -> Result<CheckRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut row = CheckRow {
        name: "reduced_model".into(),
        instances,
        checked: 0,
        max_rel_error: 0.0,
    };
    for i in 0..instances {
        let mut model = Model::<f64>::build(&ModelConfig::reduced())?;
        model.he_init(rng.random())?;
        // zero biases feed exact zeros into ReLUs; move them off the kink
        for p in model.params.iter_mut() {
            if p.name.ends_with(".bias") || p.name.contains(".bn") {
                let jitter = uniform(&mut rng, p.value.shape(), -0.1, 0.1);
                p.value = p.value.add(&jitter)?;
            }
        }
        let mode = if i % 2 == 0 { Mode::Train } else { Mode::Eval };
        let x = uniform(&mut rng, &[2, 3, 64, 64], 0.0, 1.0);
        let mut inputs = vec![x];
        inputs.extend(model.params.iter().map(|p| p.value.clone()));
        let f = |t: &mut Tape<f64>, v: &[Var]| {
            let out = model.forward_with(t, v[0], mode, &v[1..])?;
            project(t, out.output)
        };
        let report = grad_check_steps(f, &inputs, &MODEL_STEPS, MODEL_FLOOR, per_tensor, rng.random())?;
        if report.max_rel_error >= GRAD_TOLERANCE {
            let (k, e) = report.worst.unwrap_or_default();
            let name = if k == 0 { "input" } else { model.params.get(crate::tensor::ParamId(k - 1)).name.as_str() };
            log::warn!(
                "instance {i} ({mode:?}): {name}[{e}] error {:.3e}",
                report.max_rel_error
            );
        }
        row.checked += report.checked;
        row.max_rel_error = row.max_rel_error.max(report.max_rel_error);
    }
    Ok(row)
}
