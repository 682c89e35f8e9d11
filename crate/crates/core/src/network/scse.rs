//! Concurrent spatial and channel squeeze-and-excitation.

use crate::error::Result;
use crate::tensor::{Float, Tape, Var};

/// Tape handles for one SCSE block's parameters.
#[derive(Debug, Clone, Copy)]
pub struct ScseVars {
    /// `R×C`
    pub fc1_weight: Var,
    pub fc1_bias: Var,
    /// `C×R`
    pub fc2_weight: Var,
    pub fc2_bias: Var,
    /// `1×C×1×1`
    pub spatial_weight: Var,
    pub spatial_bias: Var,
}

/// Hidden width of the channel-excitation bottleneck.
pub fn reduced_width(channels: usize, reduction: usize) -> usize {
    (channels / reduction.max(1)).max(1)
}

/// `x·σ(FC(ReLU(FC(gap(x))))) + x·σ(conv1×1(x))`.
pub fn scse_block<T: Float>(tape: &mut Tape<T>, x: Var, p: &ScseVars) -> Result<Var> {
    let (n, c, _, _) = tape.value(x)?.dims4()?;

    let squeezed = tape.global_avg_pool(x)?;
    let flat = tape.reshape(squeezed, [n, c])?;
    let hidden = tape.linear(flat, p.fc1_weight, Some(p.fc1_bias))?;
    let hidden = tape.relu(hidden)?;
    let excite = tape.linear(hidden, p.fc2_weight, Some(p.fc2_bias))?;
    let excite = tape.sigmoid(excite)?;
    let gate_c = tape.reshape(excite, [n, c, 1, 1])?;
    let channel = tape.mul(x, gate_c)?;

    let logits = tape.conv2d(x, p.spatial_weight, Some(p.spatial_bias), 1, 0)?;
    let gate_s = tape.sigmoid(logits)?;
    let spatial = tape.mul(x, gate_s)?;

    tape.add(channel, spatial)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-scale..scale))
    }

    fn inputs(rng: &mut ChaCha8Rng, n: usize, c: usize, hw: usize, r: usize) -> Vec<Tensor<f64>> {
        vec![
            rand_tensor(rng, &[n, c, hw, hw], 1.0),
            rand_tensor(rng, &[r, c], 0.8),
            rand_tensor(rng, &[r], 0.3),
            rand_tensor(rng, &[c, r], 0.8),
            rand_tensor(rng, &[c], 0.3),
            rand_tensor(rng, &[1, c, 1, 1], 0.8),
            rand_tensor(rng, &[1], 0.3),
        ]
    }

    fn run(t: &mut Tape<f64>, v: &[Var]) -> Result<Var> {
        let p = ScseVars {
            fc1_weight: v[1],
            fc1_bias: v[2],
            fc2_weight: v[3],
            fc2_bias: v[4],
            spatial_weight: v[5],
            spatial_bias: v[6],
        };
        scse_block(t, v[0], &p)
    }

    #[test]
    fn half_gates_reproduce_the_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ins = inputs(&mut rng, 2, 4, 3, 2);
        for t in ins.iter_mut().skip(1) {
            *t = Tensor::zeros(t.shape().to_vec());
        }
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.constant(t.clone())).collect();
        let out = run(&mut tape, &vars).unwrap();
        let out = tape.value(out).unwrap();
        for (a, b) in out.data().iter().zip(ins[0].data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ins = inputs(&mut rng, 2, 64, 16, reduced_width(64, 16));
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.constant(t.clone())).collect();
        let out = run(&mut tape, &vars).unwrap();
        assert_eq!(tape.value(out).unwrap().shape(), &[2, 64, 16, 16]);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ins = inputs(&mut rng, 2, 4, 3, 2);
        let weights = rand_tensor(&mut rng, &[2, 4, 3, 3], 1.0);
        let err = grad_check(
            |t, v| {
                let y = run(t, v)?;
                let w = t.constant(weights.clone());
                let prod = t.mul(y, w)?;
                t.sum(prod)
            },
            &ins,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn reduced_width_is_clamped() {
        assert_eq!(reduced_width(512, 16), 32);
        assert_eq!(reduced_width(8, 16), 1);
        assert_eq!(reduced_width(2, 16), 1);
    }
}
