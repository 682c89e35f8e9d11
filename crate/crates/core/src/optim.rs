//! AdamW with decoupled decay, per-group learning-rate scaling and the
//! one-cycle schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Error, Result};
use crate::network::{LayerGroup, Model};
use crate::tensor::{Float, ParamId, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// `false`: `θ ← (1−λ)θ − α·m̂/√(v̂+ε)`, decay independent of the step
    /// size. `true`: `θ ← (1−αλ)θ − α·m̂/√(v̂+ε)`.
    pub decay_scaled_by_lr: bool,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            decay_scaled_by_lr: false,
        }
    }
}

impl AdamWHyper {
    pub fn validate(&self) -> Result<()> {
        let beta_ok = |b: f64| (0.0..1.0).contains(&b);
        if !beta_ok(self.beta1) || !beta_ok(self.beta2) || self.eps <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config(format!("invalid AdamW hyper-parameters {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Optimizer state keyed by parameter name. The step counter is shared by
/// every parameter.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub hyper: AdamWHyper,
    t: u64,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(hyper: AdamWHyper) -> Result<Self> {
        hyper.validate()?;
        Ok(Self {
            hyper,
            t: 0,
            state: BTreeMap::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// First and second moment of a parameter, if it has been stepped.
    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.state.get(name).map(|s| (s.m.as_slice(), s.v.as_slice()))
    }

    /// One update of every trainable parameter, with `lr_of` giving the step
    /// size per parameter. Frozen parameters and their moments are left
    /// alone. Every trainable parameter must carry a gradient.
    pub fn step<T: Float>(&mut self, params: &mut ParamStore<T>, lr_of: impl Fn(ParamId) -> f64) -> Result<()> {
        for p in params.iter().filter(|p| p.trainable) {
            let g = p
                .grad
                .as_ref()
                .ok_or_else(|| contract_err!("trainable parameter {} has no gradient", p.name))?;
            if g.shape() != p.value.shape() {
                return Err(contract_err!("gradient shape mismatch for {}", p.name));
            }
        }
        self.t += 1;
        let h = self.hyper;
        let t = self.t as i32;
        let c1 = 1.0 - h.beta1.powi(t);
        let c2 = 1.0 - h.beta2.powi(t);
        for id in params.ids().collect::<Vec<_>>() {
            let lr = lr_of(id);
            let p = params.get_mut(id);
            if !p.trainable {
                continue;
            }
            let n = p.value.numel();
            let st = self.state.entry(p.name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            let decay = if h.decay_scaled_by_lr {
                1.0 - lr * h.weight_decay
            } else {
                1.0 - h.weight_decay
            };
            let grad = p.grad.as_ref().expect("checked above").data();
            let theta = p.value.data_mut();
            for i in 0..n {
                let g = grad[i].to_f64();
                st.m[i] = h.beta1 * st.m[i] + (1.0 - h.beta1) * g;
                st.v[i] = h.beta2 * st.v[i] + (1.0 - h.beta2) * g * g;
                let m_hat = st.m[i] / c1;
                let v_hat = st.v[i] / c2;
                let next = decay * theta[i].to_f64() - lr * m_hat / (v_hat + h.eps).sqrt();
                theta[i] = T::from_f64(next);
            }
        }
        Ok(())
    }

    /// Steps a model with learning rates per layer group.
    pub fn step_model<T: Float>(&mut self, model: &mut Model<T>, lrs: &GroupLrs) -> Result<()> {
        let groups: Vec<LayerGroup> = model.params.ids().map(|id| model.group_of(id)).collect();
        self.step(&mut model.params, |id| lrs.get(groups[id.0]))
    }

    /// `optim.<param>.m`, `optim.<param>.v` and a scalar `optim.t`.
    pub fn state_entries(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out = Vec::with_capacity(2 * self.state.len() + 1);
        for (name, s) in &self.state {
            let to_t = |v: &[f64]| {
                Tensor::new([v.len()], v.iter().map(|&x| x as f32).collect()).expect("1-D length matches")
            };
            out.push((format!("optim.{name}.m"), to_t(&s.m)));
            out.push((format!("optim.{name}.v"), to_t(&s.v)));
        }
        out.push(("optim.t".into(), Tensor::scalar(self.t as f32)));
        out
    }

    /// Restores state written by [`AdamW::state_entries`]; non-`optim.`
    /// entries are ignored.
    pub fn load_state_entries(&mut self, entries: &[(String, Tensor<f32>)]) -> Result<()> {
        let mut t = None;
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, tensor) in entries {
            let Some(rest) = name.strip_prefix("optim.") else {
                continue;
            };
            let vals: Vec<f64> = tensor.data().iter().map(|&x| x as f64).collect();
            if rest == "t" {
                t = Some(tensor.data().first().copied().unwrap_or(0.0) as u64);
            } else if let Some(p) = rest.strip_suffix(".m") {
                m.insert(p.to_string(), vals);
            } else if let Some(p) = rest.strip_suffix(".v") {
                v.insert(p.to_string(), vals);
            } else {
                return Err(Error::Checkpoint(format!("unrecognised optimizer entry {name}")));
            }
        }
        let t = t.ok_or_else(|| Error::Checkpoint("optimizer state lacks optim.t".into()))?;
        let mut state = BTreeMap::new();
        for (name, mv) in m {
            let vv = v
                .remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state for {name} lacks v")))?;
            if vv.len() != mv.len() {
                return Err(Error::Checkpoint(format!("optimizer moments for {name} differ in length")));
            }
            state.insert(name, Moments { m: mv, v: vv });
        }
        if let Some(name) = v.keys().next() {
            return Err(Error::Checkpoint(format!("optimizer state for {name} lacks m")));
        }
        self.t = t;
        self.state = state;
        Ok(())
    }
}

/// Learning-rate multipliers of the three layer groups.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupScale {
    pub g1: f64,
    pub g2: f64,
    pub g3: f64,
}

impl Default for GroupScale {
    fn default() -> Self {
        Self {
            g1: 1.0 / 9.0,
            g2: 1.0 / 3.0,
            g3: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupLrs(pub [f64; 3]);

impl GroupLrs {
    pub fn get(&self, group: LayerGroup) -> f64 {
        self.0[group.index()]
    }
}

pub fn group_lrs(base_lr: f64, scale: &GroupScale) -> GroupLrs {
    GroupLrs([base_lr * scale.g1, base_lr * scale.g2, base_lr * scale.g3])
}

/// Zeroes the gradients of every trainable parameter.
pub fn zero_grads<T: Float>(params: &mut ParamStore<T>) {
    params.zero_grads();
}

/// Linear warm-up from `min_frac·lr_max` to `lr_max`, then linear decay to
/// `final_frac·lr_max` at the last iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OneCycleConfig {
    pub lr_max: f64,
    pub min_frac: f64,
    pub warm_frac: f64,
    pub final_frac: f64,
    pub total_iterations: usize,
}

impl OneCycleConfig {
    pub fn new(lr_max: f64, total_iterations: usize) -> Self {
        Self {
            lr_max,
            min_frac: 0.05,
            warm_frac: 0.4,
            final_frac: 0.001,
            total_iterations,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let frac = |f: f64| f > 0.0 && f < 1.0;
        if !(self.lr_max > 0.0)
            || !frac(self.min_frac)
            || !frac(self.warm_frac)
            || !(self.final_frac > 0.0 && self.final_frac <= self.min_frac)
            || self.total_iterations == 0
        {
            return Err(Error::Config(format!("invalid one-cycle schedule {self:?}")));
        }
        Ok(())
    }

    /// Iteration at which the peak is reached: `round(warm_frac·total)`,
    /// kept inside `[1, total]`.
    pub fn peak_iteration(&self) -> usize {
        ((self.warm_frac * self.total_iterations as f64).round() as usize).clamp(1, self.total_iterations)
    }

    pub fn lr_at(&self, iteration: usize) -> Result<f64> {
        if iteration > self.total_iterations {
            return Err(contract_err!(
                "iteration {iteration} beyond the schedule's {} iterations",
                self.total_iterations
            ));
        }
        let lerp = |a: f64, b: f64, t: f64| a * (1.0 - t) + b * t;
        let lo = self.min_frac * self.lr_max;
        let end = self.final_frac * self.lr_max;
        let peak = self.peak_iteration();
        Ok(if iteration <= peak {
            lerp(lo, self.lr_max, iteration as f64 / peak as f64)
        } else {
            let span = (self.total_iterations - peak) as f64;
            lerp(self.lr_max, end, (iteration - peak) as f64 / span)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new([values.len()], values.to_vec()).unwrap())
            .unwrap();
        s
    }

    fn set_grad(s: &mut ParamStore<f64>, g: &[f64]) {
        s.get_mut(ParamId(0)).grad = Some(Tensor::new([g.len()], g.to_vec()).unwrap());
    }

    #[test]
    fn single_step_hand_trace() {
        let mut s = store(&[1.0]);
        set_grad(&mut s, &[1.0]);
        let mut opt = AdamW::new(AdamWHyper::default()).unwrap();
        opt.step(&mut s, |_| 0.1).unwrap();
        let (m, v) = opt.moments("w").unwrap();
        assert!((m[0] - 0.1).abs() < 1e-15);
        assert!((v[0] - 0.001).abs() < 1e-15);
        let want = 0.99 - 0.1 / (1.0f64 + 1e-8).sqrt();
        assert!((s.get(ParamId(0)).value.data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn frozen_parameters_and_state_stay_put() {
        let mut s = store(&[0.5, -0.25]);
        set_grad(&mut s, &[1.0, 2.0]);
        s.get_mut(ParamId(0)).trainable = false;
        let mut opt = AdamW::new(AdamWHyper::default()).unwrap();
        for _ in 0..3 {
            opt.step(&mut s, |_| 0.1).unwrap();
        }
        assert_eq!(s.get(ParamId(0)).value.data(), &[0.5, -0.25]);
        assert!(opt.moments("w").is_none());
        assert_eq!(opt.steps(), 3);
    }

    #[test]
    fn missing_gradient_is_named() {
        let mut s = store(&[1.0]);
        let mut opt = AdamW::new(AdamWHyper::default()).unwrap();
        let err = opt.step(&mut s, |_| 0.1).unwrap_err().to_string();
        assert!(err.contains("w"), "{err}");
    }

    #[test]
    fn state_round_trips_through_entries() {
        let mut s = store(&[1.0, 2.0, 3.0]);
        set_grad(&mut s, &[0.5, -0.5, 0.25]);
        let mut opt = AdamW::new(AdamWHyper::default()).unwrap();
        opt.step(&mut s, |_| 0.01).unwrap();
        opt.step(&mut s, |_| 0.01).unwrap();
        let entries = opt.state_entries();
        let names: Vec<&str> = entries.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, vec!["optim.w.m", "optim.w.v", "optim.t"]);
        let mut back = AdamW::new(AdamWHyper::default()).unwrap();
        back.load_state_entries(&entries).unwrap();
        assert_eq!(back.steps(), 2);
        let (m, _) = back.moments("w").unwrap();
        assert!((m[0] - opt.moments("w").unwrap().0[0]).abs() < 1e-7);
    }

    #[test]
    fn group_ratios() {
        let l = group_lrs(0.009, &GroupScale::default());
        assert!((l.0[0] - 0.001).abs() < 1e-17);
        assert!((l.0[1] - 0.003).abs() < 1e-17);
        assert_eq!(l.0[2], 0.009);
        assert_eq!(group_lrs(0.0, &GroupScale::default()).0, [0.0; 3]);
    }

    #[test]
    fn zero_grads_spares_frozen() {
        let mut s = store(&[1.0]);
        s.insert("f", Tensor::new([1], vec![2.0]).unwrap()).unwrap();
        set_grad(&mut s, &[3.0]);
        s.get_mut(ParamId(1)).grad = Some(Tensor::new([1], vec![4.0]).unwrap());
        s.get_mut(ParamId(1)).trainable = false;
        zero_grads(&mut s);
        zero_grads(&mut s);
        assert_eq!(s.get(ParamId(0)).grad.as_ref().unwrap().data(), &[0.0]);
        assert_eq!(s.get(ParamId(1)).grad.as_ref().unwrap().data(), &[4.0]);
    }

    #[test]
    fn schedule_rejects_out_of_range() {
        let c = OneCycleConfig::new(0.01, 10);
        assert!(c.lr_at(11).is_err());
        assert!(OneCycleConfig::new(0.0, 10).validate().is_err());
    }
}
