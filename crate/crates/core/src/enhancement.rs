//! Channel-wise enhancement blocks.
//!
//! * [`AceModule`]: adaptive-average-pool channel weighting. Channel weights
//!   `W = sigmoid(conv2(swish(conv1(avgpool(x)))))` rescale the input, which
//!   then passes through a trailing 1x1 convolution.
//! * [`MceModule`]: max-pool variant. The squeeze uses a local max pool, so
//!   the weights vary over (pooled) time and are linearly interpolated back to
//!   the input length before rescaling. No trailing convolution.
//! * [`SeModule`]: classic squeeze-and-excitation with ReLU, used as an
//!   ablation unit.
//!
//! All convolutions inside the bottleneck are 1x1 with bias. The bottleneck
//! width is `ceil(C / r)`, never below one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{uniform, Conv1dLayer, Graph, ModelRng, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, Var};

/// How the swish slope is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum BetaMode {
    Fixed { beta: f64 },
    Learnable { init: f64 },
}

impl Default for BetaMode {
    /// SiLU.
    fn default() -> Self {
        BetaMode::Fixed { beta: 1.0 }
    }
}

impl BetaMode {
    fn extra_params(&self) -> usize {
        matches!(self, BetaMode::Learnable { .. }) as usize
    }
}

pub const DEFAULT_REDUCTION: usize = 16;
pub const DEFAULT_MCE_KERNEL: usize = 3;
pub const DEFAULT_MCE_STRIDE: usize = 2;

pub fn bottleneck_width(channels: usize, reduction: usize) -> usize {
    channels.div_ceil(reduction.max(1)).max(1)
}

fn bottleneck_params(channels: usize, reduction: usize) -> usize {
    let h = bottleneck_width(channels, reduction);
    channels * h + h + h * channels + channels
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AceConfig {
    pub channels: usize,
    pub reduction: usize,
    pub beta: BetaMode,
}

impl AceConfig {
    pub fn new(channels: usize) -> Self {
        Self { channels, reduction: DEFAULT_REDUCTION, beta: BetaMode::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.reduction == 0 {
            return Err(Error::Config(format!(
                "enhancement needs channels >= 1 and reduction >= 1, got C={} r={}",
                self.channels, self.reduction
            )));
        }
        Ok(())
    }

    pub fn bottleneck(&self) -> usize {
        bottleneck_width(self.channels, self.reduction)
    }

    /// Trainable scalars of the weighting branch alone.
    pub fn bottleneck_parameter_count(&self) -> usize {
        bottleneck_params(self.channels, self.reduction) + self.beta.extra_params()
    }

    /// Trainable scalars of the whole module, trailing 1x1 conv included.
    pub fn parameter_count(&self) -> usize {
        self.bottleneck_parameter_count() + self.channels * self.channels + self.channels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MceConfig {
    pub channels: usize,
    pub reduction: usize,
    pub kernel: usize,
    pub stride: usize,
    pub beta: BetaMode,
}

impl MceConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            reduction: DEFAULT_REDUCTION,
            kernel: DEFAULT_MCE_KERNEL,
            stride: DEFAULT_MCE_STRIDE,
            beta: BetaMode::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.reduction == 0 || self.kernel == 0 || self.stride == 0 {
            return Err(Error::Config(format!("invalid max-pool enhancement config {self:?}")));
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        bottleneck_params(self.channels, self.reduction) + self.beta.extra_params()
    }
}

pub fn se_parameter_count(channels: usize, reduction: usize) -> usize {
    bottleneck_params(channels, reduction)
}

#[derive(Debug, Clone)]
enum Beta {
    Fixed(f64),
    Learnable(ParamId),
}

impl Beta {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, mode: BetaMode) -> Self {
        match mode {
            BetaMode::Fixed { beta } => Beta::Fixed(beta),
            BetaMode::Learnable { init } => Beta::Learnable(store.add(format!("{name}.beta"), Tensor::scalar(T::c(init)), true)),
        }
    }

    fn swish<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        match self {
            Beta::Fixed(b) => Ok(g.swish_fixed(x, T::c(*b))),
            Beta::Learnable(id) => {
                let b = g.param(*id);
                g.swish(x, b)
            }
        }
    }
}

/// Squeeze → excite bottleneck shared by all three modules.
#[derive(Debug, Clone)]
struct Bottleneck {
    squeeze: Conv1dLayer,
    excite: Conv1dLayer,
}

impl Bottleneck {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, reduction: usize, rng: &mut ModelRng) -> Self {
        let h = bottleneck_width(channels, reduction);
        Self {
            squeeze: Conv1dLayer::new(store, &format!("{name}.squeeze"), channels, h, 1, 1, 0, rng),
            excite: Conv1dLayer::new(store, &format!("{name}.excite"), h, channels, 1, 1, 0, rng),
        }
    }

    fn zero<T: Scalar>(&self, store: &mut ParamStore<T>) {
        for layer in [&self.squeeze, &self.excite] {
            store.get_mut(layer.weight).data_mut().fill(T::zero());
            if let Some(b) = layer.bias {
                store.get_mut(b).data_mut().fill(T::zero());
            }
        }
    }
}

fn check_channels<T: Scalar>(g: &Graph<'_, T>, x: Var, channels: usize, op: &'static str) -> Result<()> {
    let shape = g.shape(x);
    if shape.len() != 3 || shape[1] != channels {
        return Err(Error::dim(op, format!("expected [B, {channels}, T], got {shape:?}")));
    }
    Ok(())
}

/// Adaptive channel-wise enhancement.
#[derive(Debug, Clone)]
pub struct AceModule {
    pub config: AceConfig,
    bottleneck: Bottleneck,
    beta: Beta,
    projection: Conv1dLayer,
}

impl AceModule {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, config: AceConfig, rng: &mut ModelRng) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let bottleneck = Bottleneck::new(store, name, c, config.reduction, rng);
        let beta = Beta::new(store, name, config.beta);
        // near-identity start: identity plus small noise, zero bias
        let mut w = uniform::<T>(&[c, c, 1], 0.01, rng);
        for i in 0..c {
            let v = w.at(&[i, i, 0]) + T::one();
            w.set(&[i, i, 0], v);
        }
        let projection = Conv1dLayer {
            weight: store.add(format!("{name}.proj.weight"), w, true),
            bias: Some(store.add(format!("{name}.proj.bias"), Tensor::zeros(&[c]), true)),
            stride: 1,
            padding: 0,
            groups: 1,
        };
        Ok(Self { config, bottleneck, beta, projection })
    }

    /// Channel weights `[B, C, 1]`, each strictly inside (0, 1).
    pub fn channel_weights<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        check_channels(g, x, self.config.channels, "ace")?;
        let pooled = g.adaptive_avg_pool1d_to_one(x)?;
        let h = self.bottleneck.squeeze.forward(g, pooled)?;
        let h = self.beta.swish(g, h)?;
        let z = self.bottleneck.excite.forward(g, h)?;
        Ok(g.sigmoid(z))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = self.channel_weights(g, x)?;
        let scaled = g.mul(x, w)?;
        self.projection.forward(g, scaled)
    }

    /// Zeroes every bottleneck weight and bias, making the weights exactly 0.5.
    pub fn zero_bottleneck<T: Scalar>(&self, store: &mut ParamStore<T>) {
        self.bottleneck.zero(store);
    }

    /// Sets the trailing 1x1 convolution to the exact identity.
    pub fn set_identity_projection<T: Scalar>(&self, store: &mut ParamStore<T>) {
        let c = self.config.channels;
        let w = store.get_mut(self.projection.weight);
        w.data_mut().fill(T::zero());
        for i in 0..c {
            w.set(&[i, i, 0], T::one());
        }
        if let Some(b) = self.projection.bias {
            store.get_mut(b).data_mut().fill(T::zero());
        }
    }
}

/// Max-pool channel-wise enhancement.
#[derive(Debug, Clone)]
pub struct MceModule {
    pub config: MceConfig,
    bottleneck: Bottleneck,
    beta: Beta,
}

impl MceModule {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, config: MceConfig, rng: &mut ModelRng) -> Result<Self> {
        config.validate()?;
        let bottleneck = Bottleneck::new(store, name, config.channels, config.reduction, rng);
        let beta = Beta::new(store, name, config.beta);
        Ok(Self { config, bottleneck, beta })
    }

    /// Per-timestep channel weights at pooled resolution `[B, C, L']`.
    pub fn channel_weights<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        check_channels(g, x, self.config.channels, "mce")?;
        let pooled = g.max_pool1d(x, self.config.kernel, self.config.stride)?;
        let h = self.bottleneck.squeeze.forward(g, pooled)?;
        let h = self.beta.swish(g, h)?;
        let z = self.bottleneck.excite.forward(g, h)?;
        Ok(g.sigmoid(z))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let len = g.shape(x).get(2).copied().unwrap_or(0);
        let w = self.channel_weights(g, x)?;
        let w = g.linear_interpolate(w, len)?;
        g.mul(x, w)
    }

    pub fn zero_bottleneck<T: Scalar>(&self, store: &mut ParamStore<T>) {
        self.bottleneck.zero(store);
    }
}

/// Squeeze-and-excitation with ReLU and no trailing convolution.
#[derive(Debug, Clone)]
pub struct SeModule {
    pub channels: usize,
    pub reduction: usize,
    bottleneck: Bottleneck,
}

impl SeModule {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        reduction: usize,
        rng: &mut ModelRng,
    ) -> Result<Self> {
        AceConfig { channels, reduction, beta: BetaMode::default() }.validate()?;
        Ok(Self { channels, reduction, bottleneck: Bottleneck::new(store, name, channels, reduction, rng) })
    }

    pub fn channel_weights<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        check_channels(g, x, self.channels, "se")?;
        let pooled = g.adaptive_avg_pool1d_to_one(x)?;
        let h = self.bottleneck.squeeze.forward(g, pooled)?;
        let h = g.relu(h);
        let z = self.bottleneck.excite.forward(g, h)?;
        Ok(g.sigmoid(z))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = self.channel_weights(g, x)?;
        g.mul(x, w)
    }

    pub fn zero_bottleneck<T: Scalar>(&self, store: &mut ParamStore<T>) {
        self.bottleneck.zero(store);
    }

    /// Copies bottleneck parameters from an ACE module of the same geometry.
    pub fn copy_bottleneck_from<T: Scalar>(&self, store: &mut ParamStore<T>, ace: &AceModule) {
        let pairs = [
            (self.bottleneck.squeeze.weight, ace.bottleneck.squeeze.weight),
            (self.bottleneck.excite.weight, ace.bottleneck.excite.weight),
        ];
        for (dst, src) in pairs {
            *store.get_mut(dst) = store.get(src).clone();
        }
        let biases = [
            (self.bottleneck.squeeze.bias, ace.bottleneck.squeeze.bias),
            (self.bottleneck.excite.bias, ace.bottleneck.excite.bias),
        ];
        for (dst, src) in biases {
            if let (Some(d), Some(s)) = (dst, src) {
                *store.get_mut(d) = store.get(s).clone();
            }
        }
    }
}
