//! Operation recording and reverse-mode gradient propagation.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order of the graph; backward walks it once in reverse.

use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, BnSaved, Broadcast, ConvGeom, UpGeom};
use super::{Float, ParamId, ParamStore, Tensor};
use crate::error::{contract_err, dim_err, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// Backward rule for an operation defined outside the tensor engine.
pub trait CustomBackward<T: Float>: Send + Sync {
    /// Returns one gradient (or `None`) per input, each shaped like that input.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

/// Per-channel batch mean and unbiased variance from a train-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats<T: Float> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Float> BatchStats<T> {
    /// `running ← (1 − momentum)·running + momentum·batch`.
    pub fn update_running(
        &self,
        running_mean: &mut Tensor<T>,
        running_var: &mut Tensor<T>,
        momentum: f64,
    ) {
        let m = T::from_f64(momentum);
        let keep = T::ONE - m;
        for (r, &b) in running_mean.data_mut().iter_mut().zip(self.mean.data()) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in running_var.data_mut().iter_mut().zip(self.var.data()) {
            *r = keep * *r + m * b;
        }
    }
}

enum Op<T: Float> {
    Leaf {
        param: Option<ParamId>,
    },
    Conv2d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        geom: UpGeom,
    },
    BatchNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        saved: BnSaved<T>,
    },
    Relu {
        input: usize,
    },
    Sigmoid {
        input: usize,
    },
    MaxPool2d {
        input: usize,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        input: usize,
    },
    Linear {
        input: usize,
        weight: usize,
        bias: Option<usize>,
    },
    Reshape {
        input: usize,
    },
    Concat {
        a: usize,
        b: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        big: usize,
        small: usize,
        kind: Broadcast,
    },
    Sum {
        input: usize,
    },
    Scale {
        input: usize,
        factor: T,
    },
    Custom {
        inputs: Vec<usize>,
        rule: Box<dyn CustomBackward<T>>,
    },
}

struct Node<T: Float> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T: Float> {
    tape: u64,
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(usize, ParamId)>,
}

impl<T: Float> Gradients<T> {
    /// Gradient of the loss with respect to `var`, if it was reachable and
    /// required a gradient.
    pub fn wrt(&self, var: Var) -> Option<&Tensor<T>> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index).and_then(Option::as_ref)
    }

    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params
            .iter()
            .filter_map(|&(node, id)| self.grads[node].as_ref().map(|g| (id, g)))
    }
}

/// A single forward pass's record of operations.
pub struct Tape<T: Float = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id {
            return Err(contract_err!(
                "variable belongs to tape {} but was used on tape {}",
                v.tape,
                self.id
            ));
        }
        if self.consumed {
            return Err(contract_err!(
                "tape {} was already consumed by backward; re-run the forward pass",
                self.id
            ));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        if v.tape != self.id {
            return Err(contract_err!("variable does not belong to this tape"));
        }
        Ok(&self.nodes[v.index].value)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf { param: None }, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Records a parameter. Its gradient is tracked only while it is trainable.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(
            p.value.clone(),
            Op::Leaf { param: Some(id) },
            p.trainable,
        )
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (i, w) = (self.idx(input)?, self.idx(weight)?);
        let b = bias.map(|b| self.idx(b)).transpose()?;
        let (out, geom) = kernels::conv2d_forward(
            &self.nodes[i].value,
            &self.nodes[w].value,
            b.map(|b| &self.nodes[b].value),
            stride,
            padding,
        )?;
        let rg = self.rg(i) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            out,
            Op::Conv2d {
                input: i,
                weight: w,
                bias: b,
                geom,
            },
            rg,
        ))
    }

    /// Transposed convolution with kernel equal to stride (non-overlapping
    /// upsampling). Weight layout is `I×O×K×K`.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
    ) -> Result<Var> {
        let (i, w) = (self.idx(input)?, self.idx(weight)?);
        let b = bias.map(|b| self.idx(b)).transpose()?;
        let (out, geom) = kernels::conv_transpose2d_forward(
            &self.nodes[i].value,
            &self.nodes[w].value,
            b.map(|b| &self.nodes[b].value),
            stride,
        )?;
        let rg = self.rg(i) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            out,
            Op::ConvTranspose2d {
                input: i,
                weight: w,
                bias: b,
                geom,
            },
            rg,
        ))
    }

    /// Batch normalisation. In train mode the batch statistics are returned so
    /// the caller can fold them into its running buffers.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        mode: super::Mode,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let (i, g, b) = (self.idx(input)?, self.idx(gamma)?, self.idx(beta)?);
        let train = mode == super::Mode::Train;
        let (out, saved, stats) = kernels::batch_norm_forward(
            &self.nodes[i].value,
            &self.nodes[g].value,
            &self.nodes[b].value,
            (running_mean, running_var),
            train,
            eps,
        )?;
        let stats = stats
            .map(|(mean, var)| -> Result<_> {
                let c = mean.len();
                Ok(BatchStats {
                    mean: Tensor::new([c], mean)?,
                    var: Tensor::new([c], var)?,
                })
            })
            .transpose()?;
        let rg = self.rg(i) || self.rg(g) || self.rg(b);
        let v = self.push(
            out,
            Op::BatchNorm {
                input: i,
                gamma: g,
                beta: b,
                saved,
            },
            rg,
        );
        Ok((v, stats))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let i = self.idx(input)?;
        let out = self.nodes[i]
            .value
            .map(|v| if v <= T::ZERO { T::ZERO } else { v });
        let rg = self.rg(i);
        Ok(self.push(out, Op::Relu { input: i }, rg))
    }

    /// Logistic function, clamped so every output lies strictly inside (0, 1)
    /// even where the exact value rounds to 0 or 1.
    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let i = self.idx(input)?;
        let out = self.nodes[i].value.map(|v| {
            let s = if v >= T::ZERO {
                T::ONE / (T::ONE + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::ONE + e)
            };
            if s >= T::ONE {
                T::BELOW_ONE
            } else if s <= T::ZERO {
                T::MIN_POSITIVE
            } else {
                s
            }
        });
        let rg = self.rg(i);
        Ok(self.push(out, Op::Sigmoid { input: i }, rg))
    }

    pub fn max_pool2d(
        &mut self,
        input: Var,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let i = self.idx(input)?;
        let (out, argmax) =
            kernels::max_pool2d_forward(&self.nodes[i].value, kernel, stride, padding)?;
        let rg = self.rg(i);
        Ok(self.push(out, Op::MaxPool2d { input: i, argmax }, rg))
    }

    /// `N×C×H×W → N×C×1×1` spatial mean.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let i = self.idx(input)?;
        let x = &self.nodes[i].value;
        let (n, c, h, w) = x.dims4()?;
        let hw = h * w;
        let inv = T::ONE / T::from_usize(hw);
        let out: Vec<T> = x
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let rg = self.rg(i);
        Ok(self.push(Tensor::new([n, c, 1, 1], out)?, Op::GlobalAvgPool { input: i }, rg))
    }

    /// Fully connected layer: input `N×C`, weight `D×C`, bias `D`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (i, w) = (self.idx(input)?, self.idx(weight)?);
        let b = bias.map(|b| self.idx(b)).transpose()?;
        let (x, wt) = (&self.nodes[i].value, &self.nodes[w].value);
        let (n, c) = match x.shape() {
            &[n, c] => (n, c),
            s => return Err(dim_err!("linear: input must be N×C, got {s:?}")),
        };
        let d = match wt.shape() {
            &[d, wc] if wc == c => d,
            s => return Err(dim_err!("linear: weight {s:?} incompatible with input width {c}")),
        };
        let mut out = vec![T::ZERO; n * d];
        T::gemm(n, c, d, x.data(), false, wt.data(), true, T::ZERO, &mut out);
        if let Some(b) = b {
            let bv = &self.nodes[b].value;
            if bv.shape() != [d] {
                return Err(dim_err!("linear: bias {:?} does not match width {d}", bv.shape()));
            }
            for row in out.chunks_mut(d) {
                row.iter_mut().zip(bv.data()).for_each(|(o, &b)| *o += b);
            }
        }
        let rg = self.rg(i) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::new([n, d], out)?,
            Op::Linear {
                input: i,
                weight: w,
                bias: b,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, input: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let i = self.idx(input)?;
        let out = self.nodes[i].value.reshape(shape)?;
        let rg = self.rg(i);
        Ok(self.push(out, Op::Reshape { input: i }, rg))
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (xa, xb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (n, ca, h, w) = xa.dims4()?;
        let (nb, cb, hb, wb) = xb.dims4()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(dim_err!(
                "concat_channels: {:?} and {:?} differ outside the channel axis",
                xa.shape(),
                xb.shape()
            ));
        }
        let (sa, sb) = (ca * h * w, cb * h * w);
        let mut out = Vec::with_capacity(n * (sa + sb));
        for ni in 0..n {
            out.extend_from_slice(&xa.data()[ni * sa..(ni + 1) * sa]);
            out.extend_from_slice(&xb.data()[ni * sb..(ni + 1) * sb]);
        }
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(
            Tensor::new([n, ca + cb, h, w], out)?,
            Op::Concat { a: ia, b: ib },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = self.nodes[ia].value.add(&self.nodes[ib].value)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(out, Op::Add { a: ia, b: ib }, rg))
    }

    /// Elementwise product. One operand may be `N×C×1×1` or `N×1×H×W`
    /// against an `N×C×H×W` partner.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        let (big, small, kind) = if let Some(k) = kernels::broadcast_kind(sa, sb) {
            (ia, ib, k)
        } else if let Some(k) = kernels::broadcast_kind(sb, sa) {
            (ib, ia, k)
        } else {
            return Err(dim_err!("mul: shapes {sa:?} and {sb:?} are not broadcast-compatible"));
        };
        let (xb, xs) = (&self.nodes[big].value, &self.nodes[small].value);
        let shape = xb.shape().to_vec();
        let out: Vec<T> = xb
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * xs.data()[kernels::broadcast_index(kind, &shape, i)])
            .collect();
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul { big, small, kind }, rg))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let i = self.idx(input)?;
        let s = self.nodes[i].value.sum();
        let rg = self.rg(i);
        Ok(self.push(Tensor::scalar(s), Op::Sum { input: i }, rg))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var> {
        let i = self.idx(input)?;
        let out = self.nodes[i].value.map(|v| v * factor);
        let rg = self.rg(i);
        Ok(self.push(out, Op::Scale { input: i, factor }, rg))
    }

    /// Records an externally computed `output` of `inputs` with its backward rule.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        output: Tensor<T>,
        rule: Box<dyn CustomBackward<T>>,
    ) -> Result<Var> {
        let idx = inputs
            .iter()
            .map(|&v| self.idx(v))
            .collect::<Result<Vec<_>>>()?;
        let rg = idx.iter().any(|&i| self.rg(i));
        Ok(self.push(output, Op::Custom { inputs: idx, rule }, rg))
    }

    /// Propagates gradients from a one-element `loss` back to every leaf that
    /// requires them. Consumes the tape: a second call is rejected.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        let li = self.idx(loss)?;
        if self.nodes[li].value.numel() != 1 {
            return Err(contract_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[li].value.shape()
            ));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[li].requires_grad {
            grads[li] = Some(Tensor::ones(self.nodes[li].value.shape().to_vec()));
        }
        for idx in (0..=li).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let contributions = self.node_backward(idx, &g)?;
            for (target, tg) in contributions {
                if !self.nodes[target].requires_grad {
                    continue;
                }
                match grads[target].as_mut() {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(tg.data())
                        .for_each(|(a, &b)| *a += b),
                    None => grads[target] = Some(tg),
                }
            }
            if matches!(self.nodes[idx].op, Op::Leaf { .. }) {
                grads[idx] = Some(g);
            }
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Leaf { param: Some(id) } => Some((i, id)),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads,
            params,
        })
    }

    fn node_backward(&self, idx: usize, g: &Tensor<T>) -> Result<Vec<(usize, Tensor<T>)>> {
        let node = &self.nodes[idx];
        let val = |i: usize| &self.nodes[i].value;
        let shaped = |i: usize, data: Vec<T>| Tensor::new(val(i).shape().to_vec(), data);
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let need = [self.rg(*input), self.rg(*weight), bias.is_some_and(|b| self.rg(b))];
                let r = kernels::conv2d_backward(geom, val(*input), val(*weight), g.data(), need);
                push_grads(&mut out, *input, *weight, *bias, r, shaped)?;
            }
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let need = [self.rg(*input), self.rg(*weight), bias.is_some_and(|b| self.rg(b))];
                let r = kernels::conv_transpose2d_backward(
                    geom,
                    val(*input),
                    val(*weight),
                    g.data(),
                    need,
                );
                push_grads(&mut out, *input, *weight, *bias, r, shaped)?;
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                saved,
            } => {
                let need = [self.rg(*input), self.rg(*gamma), self.rg(*beta)];
                let r = kernels::batch_norm_backward(
                    val(*input).shape(),
                    saved,
                    val(*gamma),
                    g.data(),
                    need,
                );
                push_grads(&mut out, *input, *gamma, Some(*beta), r, shaped)?;
            }
            Op::Relu { input } => {
                let d = val(*input)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gv)| if x > T::ZERO { gv } else { T::ZERO })
                    .collect();
                out.push((*input, shaped(*input, d)?));
            }
            Op::Sigmoid { input } => {
                let d = node
                    .value
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&s, &gv)| gv * s * (T::ONE - s))
                    .collect();
                out.push((*input, shaped(*input, d)?));
            }
            Op::MaxPool2d { input, argmax } => {
                let d = kernels::max_pool2d_backward(val(*input).numel(), argmax, g.data());
                out.push((*input, shaped(*input, d)?));
            }
            Op::GlobalAvgPool { input } => {
                let x = val(*input);
                let hw = x.shape()[2] * x.shape()[3];
                let inv = T::ONE / T::from_usize(hw);
                let d = g
                    .data()
                    .iter()
                    .flat_map(|&gv| std::iter::repeat_n(gv * inv, hw))
                    .collect();
                out.push((*input, shaped(*input, d)?));
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (x, w) = (val(*input), val(*weight));
                let (n, c) = (x.shape()[0], x.shape()[1]);
                let d = w.shape()[0];
                if self.rg(*input) {
                    let mut dx = vec![T::ZERO; n * c];
                    T::gemm(n, d, c, g.data(), false, w.data(), false, T::ZERO, &mut dx);
                    out.push((*input, shaped(*input, dx)?));
                }
                if self.rg(*weight) {
                    let mut dw = vec![T::ZERO; d * c];
                    T::gemm(d, n, c, g.data(), true, x.data(), false, T::ZERO, &mut dw);
                    out.push((*weight, shaped(*weight, dw)?));
                }
                if let Some(b) = bias.filter(|&b| self.rg(b)) {
                    let mut db = vec![T::ZERO; d];
                    for row in g.data().chunks(d) {
                        db.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                    out.push((b, shaped(b, db)?));
                }
            }
            Op::Reshape { input } => {
                out.push((*input, g.reshape(val(*input).shape().to_vec())?));
            }
            Op::Concat { a, b } => {
                let (n, ca, h, w) = val(*a).dims4()?;
                let cb = val(*b).shape()[1];
                let (sa, sb) = (ca * h * w, cb * h * w);
                let mut ga = Vec::with_capacity(n * sa);
                let mut gb = Vec::with_capacity(n * sb);
                for chunk in g.data().chunks(sa + sb) {
                    ga.extend_from_slice(&chunk[..sa]);
                    gb.extend_from_slice(&chunk[sa..]);
                }
                out.push((*a, shaped(*a, ga)?));
                out.push((*b, shaped(*b, gb)?));
            }
            Op::Add { a, b } => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Mul { big, small, kind } => {
                let (xb, xs) = (val(*big), val(*small));
                let shape = xb.shape();
                if self.rg(*big) {
                    let d = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| gv * xs.data()[kernels::broadcast_index(*kind, shape, i)])
                        .collect();
                    out.push((*big, shaped(*big, d)?));
                }
                if self.rg(*small) {
                    let mut d = vec![T::ZERO; xs.numel()];
                    for (i, (&gv, &bv)) in g.data().iter().zip(xb.data()).enumerate() {
                        d[kernels::broadcast_index(*kind, shape, i)] += gv * bv;
                    }
                    out.push((*small, shaped(*small, d)?));
                }
            }
            Op::Sum { input } => {
                let gv = g.data()[0];
                out.push((*input, Tensor::full(val(*input).shape().to_vec(), gv)));
            }
            Op::Scale { input, factor } => {
                out.push((*input, g.map(|v| v * *factor)));
            }
            Op::Custom { inputs, rule } => {
                let ins: Vec<&Tensor<T>> = inputs.iter().map(|&i| val(i)).collect();
                let gs = rule.backward(&ins, &node.value, g)?;
                if gs.len() != inputs.len() {
                    return Err(contract_err!(
                        "custom backward returned {} gradients for {} inputs",
                        gs.len(),
                        inputs.len()
                    ));
                }
                for (&i, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        if gi.shape() != val(i).shape() {
                            return Err(contract_err!(
                                "custom backward gradient shape {:?} != input shape {:?}",
                                gi.shape(),
                                val(i).shape()
                            ));
                        }
                        out.push((i, gi));
                    }
                }
            }
        }
        Ok(out)
    }
}

fn push_grads<T: Float>(
    out: &mut Vec<(usize, Tensor<T>)>,
    input: usize,
    weight: usize,
    bias: Option<usize>,
    r: kernels::ConvGrads<T>,
    shaped: impl Fn(usize, Vec<T>) -> Result<Tensor<T>>,
) -> Result<()> {
    if let Some(d) = r.input {
        out.push((input, shaped(input, d)?));
    }
    if let Some(d) = r.weight {
        out.push((weight, shaped(weight, d)?));
    }
    if let (Some(b), Some(d)) = (bias, r.bias) {
        out.push((b, shaped(b, d)?));
    }
    Ok(())
}
