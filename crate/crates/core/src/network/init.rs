use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{LayerGroup, Model, ParamKind};
use crate::error::Result;
use crate::tensor::{Float, Tensor};

impl<T: Float> Model<T> {
    /// He-normal initialisation: conv and FC weights ~ N(0, 2/fan_in), biases
    /// 0, batch-norm γ = 1, β = 0, running mean 0 and variance 1.
    ///
    /// With a pretrained encoder configured, encoder tensors are loaded from
    /// that checkpoint instead and only the decoder and head are sampled.
    pub fn he_init(&mut self, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep_encoder = self.config.pretrained_encoder_path.is_some();
        for id in self.params.ids().collect::<Vec<_>>() {
            if keep_encoder && self.group_of(id) != LayerGroup::G3 {
                continue;
            }
            let kind = self.kinds[id.0];
            let p = self.params.get_mut(id);
            let shape = p.value.shape().to_vec();
            p.value = match kind {
                ParamKind::Weight { fan_in } => {
                    let std = (2.0 / fan_in as f64).sqrt();
                    let normal = Normal::new(0.0, std).expect("std is finite and positive");
                    Tensor::from_fn(shape, |_| T::from_f64(normal.sample(&mut rng)))
                }
                ParamKind::Bias | ParamKind::BnBeta => Tensor::zeros(shape),
                ParamKind::BnGamma => Tensor::ones(shape),
            };
            p.grad = None;
        }
        let buffer_names: Vec<String> = self.buffers.keys().cloned().collect();
        for name in buffer_names {
            if keep_encoder && self.buffer_group(&name) != Some(LayerGroup::G3) {
                continue;
            }
            let t = &self.buffers[&name];
            let fresh = if name.ends_with(".running_var") {
                Tensor::ones(t.shape().to_vec())
            } else {
                Tensor::zeros(t.shape().to_vec())
            };
            self.buffers.insert(name, fresh);
        }
        if let Some(path) = self.config.pretrained_encoder_path.clone() {
            self.load_encoder(&path)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use crate::network::{Model, ModelConfig};

    #[test]
    fn conv_weight_std_matches_fan_in() {
        let model = Model::<f32>::build(&ModelConfig::default()).unwrap();
        // 3×3 conv with 64 input channels: 36 864 samples
        let w = &model
            .params
            .by_name("encoder.stage1.block0.conv2.weight")
            .unwrap()
            .value;
        let n = w.numel() as f64;
        let mean = w.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = w
            .data()
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        let expected = (2.0f64 / 576.0).sqrt();
        assert!(n >= 1e4);
        assert!(
            (var.sqrt() - expected).abs() / expected < 0.05,
            "std {} vs {expected}",
            var.sqrt()
        );
    }

    #[test]
    fn biases_and_bn_are_canonical() {
        let model = Model::<f32>::build(&ModelConfig::reduced()).unwrap();
        for p in model.params.iter() {
            if p.name.ends_with(".bias") {
                assert!(p.value.data().iter().all(|&v| v == 0.0), "{}", p.name);
            }
            if p.name.contains(".bn") && p.name.ends_with(".weight") {
                assert!(p.value.data().iter().all(|&v| v == 1.0), "{}", p.name);
            }
        }
        for (name, t) in model.buffers() {
            let want = if name.ends_with("running_var") { 1.0 } else { 0.0 };
            assert!(t.data().iter().all(|&v| v == want), "{name}");
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let mut a = Model::<f32>::build(&ModelConfig::reduced()).unwrap();
        let mut b = Model::<f32>::build(&ModelConfig::reduced()).unwrap();
        a.he_init(42).unwrap();
        b.he_init(42).unwrap();
        for (pa, pb) in a.params.iter().zip(b.params.iter()) {
            assert!(pa.value.bitwise_eq(&pb.value), "{}", pa.name);
        }
        b.he_init(43).unwrap();
        let differs = a
            .params
            .iter()
            .zip(b.params.iter())
            .any(|(pa, pb)| !pa.value.bitwise_eq(&pb.value));
        assert!(differs);
    }
}
