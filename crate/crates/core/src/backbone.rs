//! Projection layers, transformer block stack and enhancement placement.

use serde::{Deserialize, Serialize};

use crate::enhancement::{
    self, AceConfig, AceModule, BetaMode, MceConfig, MceModule, SeModule, DEFAULT_MCE_KERNEL, DEFAULT_MCE_STRIDE,
    DEFAULT_REDUCTION,
};
use crate::error::{Error, Result};
use crate::nn::{uniform, AttentionLayer, Conv1dLayer, Graph, LayerNormLayer, LinearLayer, ModelRng, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Var;

/// Where (and which) channel modules sit in the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Plain encoder, ReLU projections.
    Baseline,
    /// Squeeze-and-excitation after every block.
    Afse,
    /// Swish instead of ReLU in the projection layers.
    Afswish,
    /// SE after every block plus swish projections.
    #[serde(alias = "afseswish")]
    Afsesswish,
    /// Channel enhancement module after every block.
    #[serde(alias = "ce")]
    CeInterleaved,
    /// Channel enhancement modules on every-other-level bridges.
    CeBridged,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Baseline,
        Variant::Afse,
        Variant::Afswish,
        Variant::Afsesswish,
        Variant::CeInterleaved,
        Variant::CeBridged,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Afse => "afse",
            Variant::Afswish => "afswish",
            Variant::Afsesswish => "afsesswish",
            Variant::CeInterleaved => "ce_interleaved",
            Variant::CeBridged => "ce_bridged",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "baseline" => Ok(Variant::Baseline),
            "afse" => Ok(Variant::Afse),
            "afswish" => Ok(Variant::Afswish),
            "afsesswish" | "afseswish" => Ok(Variant::Afsesswish),
            "ce_interleaved" | "ce" => Ok(Variant::CeInterleaved),
            "ce_bridged" => Ok(Variant::CeBridged),
            other => Err(Error::Config(format!("unknown variant '{other}'"))),
        }
    }

    fn swish_projection(&self) -> bool {
        matches!(self, Variant::Afswish | Variant::Afsesswish)
    }

    fn se_blocks(&self) -> bool {
        matches!(self, Variant::Afse | Variant::Afsesswish)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnhancementKind {
    /// Adaptive average pool weighting.
    Ace,
    /// Max-pool weighting with interpolation.
    Mce,
}

/// Enhancement module settings; the channel count is the embedding size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnhancementConfig {
    pub kind: EnhancementKind,
    pub reduction: usize,
    pub beta: BetaMode,
    /// Max-pool kernel (MCE only).
    pub kernel: usize,
    /// Max-pool stride (MCE only).
    pub stride: usize,
}

impl Default for EnhancementConfig {
    fn default() -> Self {
        Self {
            kind: EnhancementKind::Ace,
            reduction: DEFAULT_REDUCTION,
            beta: BetaMode::default(),
            kernel: DEFAULT_MCE_KERNEL,
            stride: DEFAULT_MCE_STRIDE,
        }
    }
}

impl EnhancementConfig {
    pub fn ace(&self, channels: usize) -> AceConfig {
        AceConfig { channels, reduction: self.reduction, beta: self.beta }
    }

    pub fn mce(&self, channels: usize) -> MceConfig {
        MceConfig { channels, reduction: self.reduction, kernel: self.kernel, stride: self.stride, beta: self.beta }
    }

    fn parameter_count(&self, channels: usize) -> usize {
        match self.kind {
            EnhancementKind::Ace => self.ace(channels).parameter_count(),
            EnhancementKind::Mce => self.mce(channels).parameter_count(),
        }
    }
}

/// Declarative description of a full detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub block_strides: Vec<usize>,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    /// Attention radius; `None` means global attention.
    pub local_window: Option<usize>,
    pub variant: Variant,
    pub enhancement: EnhancementConfig,
    pub num_classes: usize,
    /// Per-level `[low, high]` bounds on the largest onset/offset distance,
    /// in input samples. `None` derives them from the stride schedule.
    pub regression_ranges: Option<Vec<[f64; 2]>>,
    /// Initial foreground probability of the classification head.
    pub prior_prob: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_channels: 12,
            embed_dim: 512,
            num_blocks: 7,
            block_strides: vec![1, 2, 2, 2, 2, 2, 2],
            num_heads: 4,
            mlp_ratio: 4.0,
            local_window: None,
            variant: Variant::CeInterleaved,
            enhancement: EnhancementConfig::default(),
            num_classes: 4,
            regression_ranges: None,
            prior_prob: 0.01,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.input_channels == 0 {
            problems.push("input_channels must be >= 1".to_string());
        }
        if self.embed_dim == 0 {
            problems.push("embed_dim must be >= 1".to_string());
        }
        if self.num_blocks == 0 {
            problems.push("num_blocks must be >= 1".to_string());
        }
        if self.block_strides.len() != self.num_blocks {
            problems.push(format!(
                "block_strides has {} entries for {} blocks",
                self.block_strides.len(),
                self.num_blocks
            ));
        }
        if self.block_strides.iter().any(|s| !matches!(s, 1 | 2)) {
            problems.push(format!("block strides must be 1 or 2, got {:?}", self.block_strides));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            problems.push(format!("embed_dim {} not divisible by num_heads {}", self.embed_dim, self.num_heads));
        }
        if self.mlp_ratio <= 0.0 || self.mlp_hidden() == 0 {
            problems.push("mlp_ratio must give a positive hidden size".to_string());
        }
        if self.num_classes == 0 {
            problems.push("num_classes must be >= 1".to_string());
        }
        if self.enhancement.reduction == 0 || self.enhancement.kernel == 0 || self.enhancement.stride == 0 {
            problems.push("enhancement reduction, kernel and stride must be >= 1".to_string());
        }
        if let Some(r) = &self.regression_ranges {
            if r.len() != self.num_blocks {
                problems.push(format!("regression_ranges has {} entries for {} levels", r.len(), self.num_blocks));
            }
        }
        if !(0.0..1.0).contains(&self.prior_prob) || self.prior_prob == 0.0 {
            problems.push("prior_prob must lie in (0, 1)".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    /// Cumulative downsampling factor of each pyramid level.
    pub fn level_strides(&self) -> Vec<usize> {
        self.block_strides
            .iter()
            .scan(1usize, |acc, &s| {
                *acc *= s;
                Some(*acc)
            })
            .collect()
    }

    /// Pyramid level lengths for an input of length `len`.
    pub fn level_lengths(&self, len: usize) -> Vec<usize> {
        pyramid_lengths(len, &self.block_strides)
    }

    pub fn regression_ranges(&self) -> Vec<[f64; 2]> {
        if let Some(r) = &self.regression_ranges {
            return r.clone();
        }
        let strides = self.level_strides();
        let n = strides.len();
        (0..n)
            .map(|l| {
                let lo = if l == 0 { 0.0 } else { 4.0 * strides[l - 1] as f64 };
                let hi = if l + 1 == n { f64::INFINITY } else { 4.0 * strides[l] as f64 };
                [lo, hi]
            })
            .collect()
    }

    /// Indices of the blocks followed by an enhancement (or SE) module.
    pub fn enhanced_levels(&self) -> Vec<usize> {
        match self.variant {
            Variant::Baseline | Variant::Afswish => vec![],
            Variant::Afse | Variant::Afsesswish | Variant::CeInterleaved => (0..self.num_blocks).collect(),
            Variant::CeBridged => (0..self.num_blocks).step_by(2).collect(),
        }
    }

    /// Exact trainable-scalar count of the whole detector.
    pub fn parameter_count(&self) -> usize {
        let d = self.embed_dim;
        let cin = self.input_channels;
        let hidden = self.mlp_hidden();
        let projection = (cin * d * 3 + d) + (d * d * 3 + d);
        let attention = 4 * (d * d + d);
        let mlp = (d * hidden + hidden) + (hidden * d + d);
        let norms = 2 * 2 * d;
        let blocks: usize = self
            .block_strides
            .iter()
            .map(|&s| attention + mlp + norms + if s > 1 { 3 * d + d } else { 0 })
            .sum();
        let per_module = match self.variant {
            Variant::Afse | Variant::Afsesswish => enhancement::se_parameter_count(d, self.enhancement.reduction),
            _ => self.enhancement.parameter_count(d),
        };
        let modules = self.enhanced_levels().len() * per_module;
        let c = self.num_classes;
        let neck = self.num_blocks * 2 * d;
        let head_trunk = 2 * (d * d * 3 + d);
        let heads = 2 * head_trunk + (d * c * 3 + c) + (d * 2 * 3 + 2);
        projection + blocks + modules + neck + heads
    }
}

pub fn pyramid_lengths(len: usize, block_strides: &[usize]) -> Vec<usize> {
    block_strides
        .iter()
        .scan(len, |t, &s| {
            *t = t.div_ceil(s);
            Some(*t)
        })
        .collect()
}

/// Encoder outputs, one `[B, D, T_l]` tensor per level.
#[derive(Debug, Clone)]
pub struct PyramidFeatures {
    pub levels: Vec<Var>,
    pub level_strides: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub norm1: LayerNormLayer,
    pub attention: AttentionLayer,
    pub norm2: LayerNormLayer,
    pub fc1: LinearLayer,
    pub fc2: LinearLayer,
    pub downsample: Option<Conv1dLayer>,
    pub stride: usize,
}

impl TransformerBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &ModelConfig,
        stride: usize,
        rng: &mut ModelRng,
    ) -> Result<Self> {
        let d = cfg.embed_dim;
        let downsample = if stride > 1 {
            // center-tap start: behaves like plain subsampling until trained
            let mut w = uniform::<T>(&[d, 1, 3], 0.05, rng);
            for c in 0..d {
                let v = w.at(&[c, 0, 1]) + T::one();
                w.set(&[c, 0, 1], v);
            }
            Some(Conv1dLayer {
                weight: store.add(format!("{name}.down.weight"), w, true),
                bias: Some(store.add(format!("{name}.down.bias"), crate::tensor::Tensor::zeros(&[d]), true)),
                stride,
                padding: 1,
                groups: d,
            })
        } else {
            None
        };
        Ok(Self {
            norm1: LayerNormLayer::new(store, &format!("{name}.norm1"), d),
            attention: AttentionLayer::new(store, &format!("{name}.attn"), d, cfg.num_heads, cfg.local_window, rng)?,
            norm2: LayerNormLayer::new(store, &format!("{name}.norm2"), d),
            fc1: LinearLayer::new(store, &format!("{name}.fc1"), d, cfg.mlp_hidden(), rng),
            fc2: LinearLayer::new(store, &format!("{name}.fc2"), cfg.mlp_hidden(), d, rng),
            downsample,
            stride,
        })
    }

    /// `[B, D, T] -> [B, D, ceil(T / stride)]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let xt = g.transpose_last2(x)?;
        let h = self.norm1.forward(g, xt)?;
        let a = self.attention.forward(g, h)?;
        let x1 = g.add(xt, a)?;
        let h = self.norm2.forward(g, x1)?;
        let h = self.fc1.forward(g, h)?;
        let h = g.gelu(h);
        let m = self.fc2.forward(g, h)?;
        let x2 = g.add(x1, m)?;
        let y = g.transpose_last2(x2)?;
        match &self.downsample {
            Some(down) => down.forward(g, y),
            None => Ok(y),
        }
    }

    /// Zeroes both residual branches' output projections.
    pub fn zero_residual_branches<T: Scalar>(&self, store: &mut ParamStore<T>) {
        for layer in [&self.attention.out, &self.fc2] {
            store.get_mut(layer.weight).data_mut().fill(T::zero());
            store.get_mut(layer.bias).data_mut().fill(T::zero());
        }
    }
}

#[derive(Debug, Clone)]
pub enum Enhancer {
    Ace(AceModule),
    Mce(MceModule),
    Se(SeModule),
}

impl Enhancer {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        match self {
            Enhancer::Ace(m) => m.forward(g, x),
            Enhancer::Mce(m) => m.forward(g, x),
            Enhancer::Se(m) => m.forward(g, x),
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Activation {
    Relu,
    Swish,
}

impl Activation {
    fn apply<T: Scalar>(self, g: &mut Graph<'_, T>, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Swish => g.swish_fixed(x, T::one()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub proj1: Conv1dLayer,
    pub proj2: Conv1dLayer,
    activation: Activation,
    pub blocks: Vec<TransformerBlock>,
    /// One slot per block; `Some` where a module follows (or bridges from) that block.
    pub enhancers: Vec<Option<Enhancer>>,
    variant: Variant,
    block_strides: Vec<usize>,
}

impl Backbone {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut ModelRng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let proj1 = Conv1dLayer::new(store, "proj.0", cfg.input_channels, d, 3, 1, 1, rng);
        let proj2 = Conv1dLayer::new(store, "proj.1", d, d, 3, 1, 1, rng);
        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        for (i, &s) in cfg.block_strides.iter().enumerate() {
            blocks.push(TransformerBlock::new(store, &format!("blocks.{i}"), cfg, s, rng)?);
        }
        let mut enhancers: Vec<Option<Enhancer>> = vec![None; cfg.num_blocks];
        for l in cfg.enhanced_levels() {
            let name = format!("enhance.{l}");
            enhancers[l] = Some(if cfg.variant.se_blocks() {
                Enhancer::Se(SeModule::new(store, &name, d, cfg.enhancement.reduction, rng)?)
            } else {
                match cfg.enhancement.kind {
                    EnhancementKind::Ace => Enhancer::Ace(AceModule::new(store, &name, cfg.enhancement.ace(d), rng)?),
                    EnhancementKind::Mce => Enhancer::Mce(MceModule::new(store, &name, cfg.enhancement.mce(d), rng)?),
                }
            });
        }
        let activation = if cfg.variant.swish_projection() { Activation::Swish } else { Activation::Relu };
        Ok(Self { proj1, proj2, activation, blocks, enhancers, variant: cfg.variant, block_strides: cfg.block_strides.clone() })
    }

    pub fn module_count(&self) -> usize {
        self.enhancers.iter().filter(|e| e.is_some()).count()
    }

    /// Two length-preserving convolutions with the activation between them.
    pub fn project<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.proj1.forward(g, x)?;
        let h = self.activation.apply(g, h);
        self.proj2.forward(g, h)
    }

    pub fn forward_pyramid<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<PyramidFeatures> {
        let mut h = self.project(g, x)?;
        let mut levels = Vec::with_capacity(self.blocks.len());
        // bridge output waiting to be added to the next level
        let mut pending: Option<Var> = None;
        for (l, block) in self.blocks.iter().enumerate() {
            let mut y = block.forward(g, h)?;
            if let Some(b) = pending.take() {
                let b = align_length(g, b, self.block_strides[l])?;
                y = g.add(y, b)?;
            }
            if let Some(module) = &self.enhancers[l] {
                match self.variant {
                    Variant::CeBridged => {
                        let e = module.forward(g, y)?;
                        if l + 1 < self.blocks.len() {
                            pending = Some(e);
                        } else {
                            y = g.add(y, e)?;
                        }
                    }
                    _ => y = module.forward(g, y)?,
                }
            }
            levels.push(y);
            h = y;
        }
        let strides = self
            .block_strides
            .iter()
            .scan(1usize, |acc, &s| {
                *acc *= s;
                Some(*acc)
            })
            .collect();
        Ok(PyramidFeatures { levels, level_strides: strides })
    }
}

/// Max-pool a bridge output down by `stride` so it matches the next level.
fn align_length<T: Scalar>(g: &mut Graph<'_, T>, x: Var, stride: usize) -> Result<Var> {
    if stride == 1 {
        Ok(x)
    } else {
        g.max_pool1d_ceil(x, stride, stride)
    }
}
