//! U-Net with a ResNet-34 encoder and an SCSE-gated upsampling decoder.
//!
//! ```text
//! input ─ stem(7×7/2, BN, ReLU) ─┬─ maxpool/2 ─ stage1 ─┬─ stage2 ─┬─ stage3 ─┬─ stage4
//!                                │                      │          │          │
//!          skip 1/2              │ skip 1/4             │ 1/8      │ 1/16     │ 1/32
//!                                ▼                      ▼          ▼          ▼
//! head ◄─ block4 ◄─────────── block3 ◄────────────── block2 ◄─ block1 ◄─ block0
//! ```
//!
//! Each decoder block runs ReLU → BN → SCSE → 2×2/2 transposed conv and
//! concatenates a 1×1-projected encoder skip of the same resolution. The last
//! block (1/2 → 1/1) has no skip.

mod checkpoint;
mod init;
pub mod scse;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::{BatchStats, Float, Mode, ParamId, ParamStore, Tape, Tensor, Var};

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use scse::{scse_block, ScseVars};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Total downsampling factor of the encoder.
pub const OUTPUT_STRIDE: usize = 32;

/// Learning-rate / freezing group of a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LayerGroup {
    /// Stem through the 128-channel stage.
    G1,
    /// 256-channel stage to the end of the encoder.
    G2,
    /// Decoder and head.
    G3,
}

impl LayerGroup {
    pub const ALL: [LayerGroup; 3] = [LayerGroup::G1, LayerGroup::G2, LayerGroup::G3];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for LayerGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "G{}", self.index() + 1)
    }
}

/// Widths and depths of the residual encoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub stem_channels: usize,
    pub stage_channels: [usize; 4],
    pub stage_blocks: [usize; 4],
}

impl Architecture {
    pub fn resnet34() -> Self {
        Self {
            stem_channels: 64,
            stage_channels: [64, 128, 256, 512],
            stage_blocks: [3, 4, 6, 3],
        }
    }

    /// One block per stage with 8 base channels. Same layer kinds as ResNet-34,
    /// small enough for full-graph finite differencing and CPU overfitting.
    pub fn reduced() -> Self {
        Self {
            stem_channels: 8,
            stage_channels: [8, 16, 32, 64],
            stage_blocks: [1, 1, 1, 1],
        }
    }

    fn bottleneck(&self) -> usize {
        self.stage_channels[3]
    }

    /// Output channels of the five decoder blocks (halving from the bottleneck).
    pub fn decoder_widths(&self) -> [usize; 5] {
        let b = self.bottleneck();
        [b / 2, b / 4, b / 8, b / 16, b / 32]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub use_scse: bool,
    pub input_channels: usize,
    pub pretrained_encoder_path: Option<PathBuf>,
    pub scse_reduction: usize,
    pub arch: Architecture,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            use_scse: true,
            input_channels: 3,
            pretrained_encoder_path: None,
            scse_reduction: 16,
            arch: Architecture::resnet34(),
        }
    }
}

impl ModelConfig {
    pub fn reduced() -> Self {
        Self {
            arch: Architecture::reduced(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.arch;
        if self.input_channels == 0 || self.scse_reduction == 0 || a.stem_channels == 0 {
            return Err(Error::Config(
                "input_channels, scse_reduction and stem_channels must be positive".into(),
            ));
        }
        if a.stage_channels.contains(&0) || a.stage_blocks.contains(&0) {
            return Err(Error::Config("every encoder stage needs channels and blocks".into()));
        }
        if a.bottleneck() % 32 != 0 {
            return Err(Error::Config(format!(
                "bottleneck width {} must be divisible by 32 so five halvings stay integral",
                a.bottleneck()
            )));
        }
        Ok(())
    }
}

/// How [`init::he_init`] treats a parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum ParamKind {
    Weight { fan_in: usize },
    Bias,
    BnGamma,
    BnBeta,
}

#[derive(Debug, Clone)]
struct ConvLayer {
    weight: ParamId,
    bias: Option<ParamId>,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone)]
struct BnLayer {
    gamma: ParamId,
    beta: ParamId,
    /// Prefix of the running-stat buffers.
    key: String,
}

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: ConvLayer,
    bn1: BnLayer,
    conv2: ConvLayer,
    bn2: BnLayer,
    downsample: Option<(ConvLayer, BnLayer)>,
}

#[derive(Debug, Clone)]
struct ScseLayer {
    fc1_weight: ParamId,
    fc1_bias: ParamId,
    fc2_weight: ParamId,
    fc2_bias: ParamId,
    spatial_weight: ParamId,
    spatial_bias: ParamId,
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    bn: BnLayer,
    scse: Option<ScseLayer>,
    up_weight: ParamId,
    up_bias: ParamId,
    skip: Option<ConvLayer>,
}

#[derive(Debug, Clone)]
struct Layout {
    stem_conv: ConvLayer,
    stem_bn: BnLayer,
    stages: Vec<Vec<BasicBlock>>,
    decoder: Vec<DecoderBlock>,
    head: ConvLayer,
}

/// Activations of interest from one forward pass.
pub struct ForwardOutput<T: Float> {
    /// `N×1×S×S` probability map.
    pub output: Var,
    /// Pre-sigmoid head output.
    pub logits: Var,
    /// Encoder output, `N×C×S/32×S/32`.
    pub bottleneck: Var,
    /// Train-mode batch statistics per batch-norm buffer key.
    pub batch_stats: Vec<(String, BatchStats<T>)>,
}

pub struct Model<T: Float = f32> {
    config: ModelConfig,
    pub params: ParamStore<T>,
    groups: Vec<LayerGroup>,
    kinds: Vec<ParamKind>,
    buffers: BTreeMap<String, Tensor<T>>,
    buffer_groups: BTreeMap<String, LayerGroup>,
    layout: Layout,
}

struct Builder<T: Float> {
    params: ParamStore<T>,
    groups: Vec<LayerGroup>,
    kinds: Vec<ParamKind>,
    buffers: BTreeMap<String, Tensor<T>>,
    buffer_groups: BTreeMap<String, LayerGroup>,
    group: LayerGroup,
}

impl<T: Float> Builder<T> {
    fn param(&mut self, name: String, shape: Vec<usize>, kind: ParamKind) -> Result<ParamId> {
        let value = match kind {
            ParamKind::BnGamma => Tensor::ones(shape),
            _ => Tensor::zeros(shape),
        };
        let id = self.params.insert(name, value)?;
        self.groups.push(self.group);
        self.kinds.push(kind);
        Ok(id)
    }

    fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Result<ConvLayer> {
        let weight = self.param(
            format!("{name}.weight"),
            vec![cout, cin, k, k],
            ParamKind::Weight { fan_in: cin * k * k },
        )?;
        let bias = if bias {
            Some(self.param(format!("{name}.bias"), vec![cout], ParamKind::Bias)?)
        } else {
            None
        };
        Ok(ConvLayer {
            weight,
            bias,
            stride,
            pad,
        })
    }

    fn bn(&mut self, name: &str, c: usize) -> Result<BnLayer> {
        let gamma = self.param(format!("{name}.weight"), vec![c], ParamKind::BnGamma)?;
        let beta = self.param(format!("{name}.bias"), vec![c], ParamKind::BnBeta)?;
        self.buffers
            .insert(format!("{name}.running_mean"), Tensor::zeros([c]));
        self.buffers
            .insert(format!("{name}.running_var"), Tensor::ones([c]));
        self.buffer_groups.insert(name.to_string(), self.group);
        Ok(BnLayer {
            gamma,
            beta,
            key: name.to_string(),
        })
    }

    fn linear(&mut self, name: &str, cin: usize, cout: usize) -> Result<(ParamId, ParamId)> {
        let w = self.param(
            format!("{name}.weight"),
            vec![cout, cin],
            ParamKind::Weight { fan_in: cin },
        )?;
        let b = self.param(format!("{name}.bias"), vec![cout], ParamKind::Bias)?;
        Ok((w, b))
    }
}

impl<T: Float> Model<T> {
    /// Builds the network and He-initialises it with seed 0. Pretrained
    /// encoder weights are loaded when the config names a file.
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let a = &config.arch;
        let mut b = Builder {
            params: ParamStore::new(),
            groups: Vec::new(),
            kinds: Vec::new(),
            buffers: BTreeMap::new(),
            buffer_groups: BTreeMap::new(),
            group: LayerGroup::G1,
        };

        let stem_conv = b.conv(
            "encoder.stem.conv",
            config.input_channels,
            a.stem_channels,
            7,
            2,
            3,
            false,
        )?;
        let stem_bn = b.bn("encoder.stem.bn", a.stem_channels)?;

        let mut stages = Vec::with_capacity(4);
        let mut cin = a.stem_channels;
        for (s, (&cout, &nblocks)) in a.stage_channels.iter().zip(&a.stage_blocks).enumerate() {
            b.group = if s < 2 { LayerGroup::G1 } else { LayerGroup::G2 };
            let mut blocks = Vec::with_capacity(nblocks);
            for j in 0..nblocks {
                let prefix = format!("encoder.stage{}.block{j}", s + 1);
                let stride = if j == 0 && s > 0 { 2 } else { 1 };
                let block_in = if j == 0 { cin } else { cout };
                let conv1 = b.conv(&format!("{prefix}.conv1"), block_in, cout, 3, stride, 1, false)?;
                let bn1 = b.bn(&format!("{prefix}.bn1"), cout)?;
                let conv2 = b.conv(&format!("{prefix}.conv2"), cout, cout, 3, 1, 1, false)?;
                let bn2 = b.bn(&format!("{prefix}.bn2"), cout)?;
                let downsample = if stride != 1 || block_in != cout {
                    let c = b.conv(
                        &format!("{prefix}.downsample.conv"),
                        block_in,
                        cout,
                        1,
                        stride,
                        0,
                        false,
                    )?;
                    let n = b.bn(&format!("{prefix}.downsample.bn"), cout)?;
                    Some((c, n))
                } else {
                    None
                };
                blocks.push(BasicBlock {
                    conv1,
                    bn1,
                    conv2,
                    bn2,
                    downsample,
                });
            }
            stages.push(blocks);
            cin = cout;
        }

        b.group = LayerGroup::G3;
        let widths = a.decoder_widths();
        // Skip sources for decoder blocks 0..4, deepest first.
        let skip_channels = [
            Some(a.stage_channels[2]),
            Some(a.stage_channels[1]),
            Some(a.stage_channels[0]),
            Some(a.stem_channels),
            None,
        ];
        let mut decoder = Vec::with_capacity(5);
        let mut din = a.bottleneck();
        for (k, (&width, skip_c)) in widths.iter().zip(skip_channels).enumerate() {
            let prefix = format!("decoder.block{k}");
            let bn = b.bn(&format!("{prefix}.bn"), din)?;
            let scse = if config.use_scse {
                let r = scse::reduced_width(din, config.scse_reduction);
                let (fc1_weight, fc1_bias) = b.linear(&format!("{prefix}.scse.fc1"), din, r)?;
                let (fc2_weight, fc2_bias) = b.linear(&format!("{prefix}.scse.fc2"), r, din)?;
                let sp = b.conv(&format!("{prefix}.scse.spatial"), din, 1, 1, 1, 0, true)?;
                Some(ScseLayer {
                    fc1_weight,
                    fc1_bias,
                    fc2_weight,
                    fc2_bias,
                    spatial_weight: sp.weight,
                    spatial_bias: sp.bias.expect("spatial conv has a bias"),
                })
            } else {
                None
            };
            let up_width = if skip_c.is_some() { width / 2 } else { width };
            let up_weight = b.param(
                format!("{prefix}.up.weight"),
                vec![din, up_width, 2, 2],
                ParamKind::Weight { fan_in: din * 4 },
            )?;
            let up_bias = b.param(format!("{prefix}.up.bias"), vec![up_width], ParamKind::Bias)?;
            let skip = skip_c
                .map(|sc| b.conv(&format!("{prefix}.skip"), sc, width - up_width, 1, 1, 0, true))
                .transpose()?;
            decoder.push(DecoderBlock {
                bn,
                scse,
                up_weight,
                up_bias,
                skip,
            });
            din = width;
        }
        let head = b.conv("head.conv", din, 1, 1, 1, 0, true)?;

        let mut model = Self {
            config: config.clone(),
            params: b.params,
            groups: b.groups,
            kinds: b.kinds,
            buffers: b.buffers,
            buffer_groups: b.buffer_groups,
            layout: Layout {
                stem_conv,
                stem_bn,
                stages,
                decoder,
                head,
            },
        };
        model.he_init(0)?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn group_of(&self, id: ParamId) -> LayerGroup {
        self.groups[id.0]
    }

    pub fn group_by_name(&self, name: &str) -> Option<LayerGroup> {
        self.params.id(name).map(|id| self.group_of(id))
    }

    pub fn buffers(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.buffers
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor<T>> {
        self.buffers.get(name)
    }

    /// Group owning a running-stat buffer (`<layer>.running_mean|var`).
    pub fn buffer_group(&self, buffer_name: &str) -> Option<LayerGroup> {
        let layer = buffer_name
            .strip_suffix(".running_mean")
            .or_else(|| buffer_name.strip_suffix(".running_var"))?;
        self.buffer_groups.get(layer).copied()
    }

    /// Number of scalar parameters in `group`.
    pub fn group_numel(&self, group: LayerGroup) -> usize {
        self.params
            .ids()
            .filter(|&id| self.group_of(id) == group)
            .map(|id| self.params.get(id).value.numel())
            .sum()
    }

    /// Flips the trainable flag of every parameter in `group`. A frozen group
    /// also stops updating its batch-norm running statistics.
    pub fn set_group_trainable(&mut self, group: LayerGroup, trainable: bool) {
        for id in self.params.ids().collect::<Vec<_>>() {
            if self.group_of(id) == group {
                self.params.get_mut(id).trainable = trainable;
            }
        }
    }

    pub fn is_group_trainable(&self, group: LayerGroup) -> bool {
        self.params
            .ids()
            .filter(|&id| self.group_of(id) == group)
            .all(|id| self.params.get(id).trainable)
    }

    /// Records every parameter on the tape, in store order.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.ids().map(|id| tape.param(&self.params, id)).collect()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = shape else {
            return Err(dim_err!("model input must be N×C×H×W, got {shape:?}"));
        };
        if *c != self.config.input_channels {
            return Err(dim_err!(
                "model expects {} input channels, got {c}",
                self.config.input_channels
            ));
        }
        if h % OUTPUT_STRIDE != 0 || w % OUTPUT_STRIDE != 0 || *h == 0 || *w == 0 {
            return Err(dim_err!(
                "input spatial size {h}×{w} must be a positive multiple of {OUTPUT_STRIDE}"
            ));
        }
        Ok(())
    }

    /// Forward pass with caller-supplied parameter handles (`params[i]` stands
    /// for parameter `i`). Running statistics are read, never written.
    pub fn forward_with(
        &self,
        tape: &mut Tape<T>,
        input: Var,
        mode: Mode,
        params: &[Var],
    ) -> Result<ForwardOutput<T>> {
        self.check_input(tape.value(input)?.shape())?;
        if params.len() != self.params.len() {
            return Err(crate::error::contract_err!(
                "forward_with got {} parameter handles for {} parameters",
                params.len(),
                self.params.len()
            ));
        }
        let mut ctx = Ctx {
            model: self,
            tape,
            params,
            mode,
            stats: Vec::new(),
        };
        let l = &self.layout;

        let x = ctx.conv(input, &l.stem_conv)?;
        let x = ctx.bn(x, &l.stem_bn)?;
        let stem = ctx.tape.relu(x)?;
        let mut x = ctx.tape.max_pool2d(stem, 3, 2, 1)?;
        let mut features = Vec::with_capacity(4);
        for stage in &l.stages {
            for block in stage {
                x = ctx.basic_block(x, block)?;
            }
            features.push(x);
        }
        let bottleneck = x;
        let skips = [Some(features[2]), Some(features[1]), Some(features[0]), Some(stem), None];

        for (block, skip) in l.decoder.iter().zip(skips) {
            let h = ctx.tape.relu(x)?;
            let h = ctx.bn(h, &block.bn)?;
            let h = match &block.scse {
                Some(s) => {
                    let vars = ScseVars {
                        fc1_weight: ctx.p(s.fc1_weight),
                        fc1_bias: ctx.p(s.fc1_bias),
                        fc2_weight: ctx.p(s.fc2_weight),
                        fc2_bias: ctx.p(s.fc2_bias),
                        spatial_weight: ctx.p(s.spatial_weight),
                        spatial_bias: ctx.p(s.spatial_bias),
                    };
                    scse_block(ctx.tape, h, &vars)?
                }
                None => h,
            };
            let (w, b) = (ctx.p(block.up_weight), ctx.p(block.up_bias));
            let up = ctx.tape.conv_transpose2d(h, w, Some(b), 2)?;
            x = match (&block.skip, skip) {
                (Some(conv), Some(feat)) => {
                    let projected = ctx.conv(feat, conv)?;
                    ctx.tape.concat_channels(up, projected)?
                }
                _ => up,
            };
        }
        let logits = ctx.conv(x, &l.head)?;
        let output = ctx.tape.sigmoid(logits)?;
        Ok(ForwardOutput {
            output,
            logits,
            bottleneck,
            batch_stats: ctx.stats,
        })
    }

    /// Forward pass over the model's own parameters. In train mode the
    /// running statistics of every non-frozen batch-norm layer are updated.
    pub fn forward(&mut self, tape: &mut Tape<T>, input: Var, mode: Mode) -> Result<Var> {
        let params = self.bind(tape);
        let out = self.forward_with(tape, input, mode, &params)?;
        self.apply_batch_stats(&out.batch_stats);
        Ok(out.output)
    }

    /// Folds train-mode batch statistics into the running buffers, skipping
    /// layers whose parameters are frozen.
    pub fn apply_batch_stats(&mut self, stats: &[(String, BatchStats<T>)]) {
        for (key, s) in stats {
            let frozen = self
                .params
                .by_name(&format!("{key}.weight"))
                .is_some_and(|p| !p.trainable);
            if frozen {
                continue;
            }
            let mut mean = self.buffers.remove(&format!("{key}.running_mean"));
            let mut var = self.buffers.remove(&format!("{key}.running_var"));
            if let (Some(m), Some(v)) = (mean.as_mut(), var.as_mut()) {
                s.update_running(m, v, BN_MOMENTUM);
            }
            if let Some(m) = mean {
                self.buffers.insert(format!("{key}.running_mean"), m);
            }
            if let Some(v) = var {
                self.buffers.insert(format!("{key}.running_var"), v);
            }
        }
    }

    /// Eval-mode probability map for a batch.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape);
        let x = tape.constant(batch.clone());
        let out = self.forward_with(&mut tape, x, Mode::Eval, &params)?;
        Ok(tape.value(out.output)?.clone())
    }

    /// Shape of the encoder output for an `N×C×H×W` input, without running
    /// the network.
    pub fn bottleneck_shape(&self, input_shape: &[usize]) -> Result<[usize; 4]> {
        self.check_input(input_shape)?;
        let c = self.config.arch.bottleneck();
        Ok([
            input_shape[0],
            c,
            input_shape[2] / OUTPUT_STRIDE,
            input_shape[3] / OUTPUT_STRIDE,
        ])
    }

    /// Converts every parameter and buffer to another precision.
    pub fn cast<U: Float>(&self) -> Model<U> {
        let mut params = ParamStore::new();
        for p in self.params.iter() {
            let id = params
                .insert(p.name.clone(), p.value.cast())
                .expect("names are unique");
            params.get_mut(id).trainable = p.trainable;
        }
        Model {
            config: self.config.clone(),
            params,
            groups: self.groups.clone(),
            kinds: self.kinds.clone(),
            buffers: self
                .buffers
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            buffer_groups: self.buffer_groups.clone(),
            layout: self.layout.clone(),
        }
    }
}

struct Ctx<'a, T: Float> {
    model: &'a Model<T>,
    tape: &'a mut Tape<T>,
    params: &'a [Var],
    mode: Mode,
    stats: Vec<(String, BatchStats<T>)>,
}

impl<T: Float> Ctx<'_, T> {
    fn p(&self, id: ParamId) -> Var {
        self.params[id.0]
    }

    fn conv(&mut self, x: Var, c: &ConvLayer) -> Result<Var> {
        let w = self.p(c.weight);
        let b = c.bias.map(|b| self.p(b));
        self.tape.conv2d(x, w, b, c.stride, c.pad)
    }

    fn bn(&mut self, x: Var, bn: &BnLayer) -> Result<Var> {
        let (g, b) = (self.p(bn.gamma), self.p(bn.beta));
        let buffers = &self.model.buffers;
        let mean = &buffers[&format!("{}.running_mean", bn.key)];
        let var = &buffers[&format!("{}.running_var", bn.key)];
        let (y, stats) = self
            .tape
            .batch_norm(x, g, b, mean, var, self.mode, BN_EPS)
            .map_err(|e| match e {
                Error::DegenerateStatistics(m) => {
                    Error::DegenerateStatistics(format!("{}: {m}", bn.key))
                }
                other => other,
            })?;
        if let Some(s) = stats {
            self.stats.push((bn.key.clone(), s));
        }
        Ok(y)
    }

    fn basic_block(&mut self, x: Var, b: &BasicBlock) -> Result<Var> {
        let h = self.conv(x, &b.conv1)?;
        let h = self.bn(h, &b.bn1)?;
        let h = self.tape.relu(h)?;
        let h = self.conv(h, &b.conv2)?;
        let h = self.bn(h, &b.bn2)?;
        let shortcut = match &b.downsample {
            Some((c, n)) => {
                let s = self.conv(x, c)?;
                self.bn(s, n)?
            }
            None => x,
        };
        let sum = self.tape.add(h, shortcut)?;
        self.tape.relu(sum)
    }
}
