//! Named parameter storage and the small layers the models are built from.

use std::ops::{Deref, DerefMut};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{AttentionVars, Tape, Tensor, Var};

pub type ModelRng = ChaCha8Rng;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Ordered, uniquely named collection of model parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.entries.iter().all(|e| e.name != name), "duplicate parameter {name}");
        self.entries.push(ParamEntry { name, value, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry_mut(&mut self, index: usize) -> &mut ParamEntry<T> {
        &mut self.entries[index]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.numel()).sum()
    }
}

/// A tape bound to a parameter store; parameters become leaves on first use.
pub struct Graph<'s, T: Scalar> {
    tape: Tape<T>,
    params: &'s ParamStore<T>,
}

impl<'s, T: Scalar> Graph<'s, T> {
    pub fn new(params: &'s ParamStore<T>) -> Self {
        Self { tape: Tape::new(), params }
    }

    pub fn inference(params: &'s ParamStore<T>) -> Self {
        Self { tape: Tape::inference(), params }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let e = &self.params.entries[id.0];
        self.tape.bind_param(id.0, &e.value, e.trainable)
    }

    /// Gradient of every parameter in store order; `None` for parameters the
    /// loss did not reach or that are frozen.
    pub fn param_grads(&self) -> Vec<Option<Tensor<T>>> {
        (0..self.params.len())
            .map(|i| self.tape.bound_param(i).and_then(|v| self.tape.grad(v).cloned()))
            .collect()
    }
}

impl<T: Scalar> Deref for Graph<'_, T> {
    type Target = Tape<T>;
    fn deref(&self) -> &Tape<T> {
        &self.tape
    }
}

impl<T: Scalar> DerefMut for Graph<'_, T> {
    fn deref_mut(&mut self) -> &mut Tape<T> {
        &mut self.tape
    }
}

/// Uniform `(-bound, bound)` tensor.
pub fn uniform<T: Scalar>(shape: &[usize], bound: f64, rng: &mut ModelRng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::c(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("consistent shape")
}

#[derive(Debug, Clone)]
pub struct Conv1dLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv1dLayer {
    /// Kaiming-uniform style init with bound `1/sqrt(fan_in)`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut ModelRng,
    ) -> Self {
        let bound = 1.0 / ((cin * kernel) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(&[cout, cin, kernel], bound, rng), true);
        let bias = Some(store.add(format!("{name}.bias"), uniform(&[cout], bound, rng), true));
        Self { weight, bias, stride, padding, groups: 1 }
    }

    pub fn depthwise<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut ModelRng,
    ) -> Self {
        let bound = 1.0 / (kernel as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(&[channels, 1, kernel], bound, rng), true);
        let bias = Some(store.add(format!("{name}.bias"), uniform(&[channels], bound, rng), true));
        Self { weight, bias, stride, padding, groups: channels }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv1d_grouped(x, w, b, self.stride, self.padding, self.groups)
    }
}

#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearLayer {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, din: usize, dout: usize, rng: &mut ModelRng) -> Self {
        let bound = 1.0 / (din as f64).sqrt();
        Self {
            weight: store.add(format!("{name}.weight"), uniform(&[dout, din], bound, rng), true),
            bias: store.add(format!("{name}.bias"), uniform(&[dout], bound, rng), true),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.linear(x, w, Some(b))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNormLayer {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim]), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]), true),
            eps: 1e-5,
        }
    }

    /// Normalizes the last axis.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gm, bt, T::c(self.eps))
    }

    /// Normalizes the channel axis of a `[B, C, T]` tensor.
    pub fn forward_channels<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let xt = g.transpose_last2(x)?;
        let y = self.forward(g, xt)?;
        g.transpose_last2(y)
    }
}

#[derive(Debug, Clone)]
pub struct AttentionLayer {
    pub q: LinearLayer,
    pub k: LinearLayer,
    pub v: LinearLayer,
    pub out: LinearLayer,
    pub num_heads: usize,
    pub local_window: Option<usize>,
}

impl AttentionLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        num_heads: usize,
        local_window: Option<usize>,
        rng: &mut ModelRng,
    ) -> Result<Self> {
        if num_heads == 0 || dim % num_heads != 0 {
            return Err(Error::Config(format!("embedding size {dim} not divisible by {num_heads} heads")));
        }
        Ok(Self {
            q: LinearLayer::new(store, &format!("{name}.q"), dim, dim, rng),
            k: LinearLayer::new(store, &format!("{name}.k"), dim, dim, rng),
            v: LinearLayer::new(store, &format!("{name}.v"), dim, dim, rng),
            out: LinearLayer::new(store, &format!("{name}.out"), dim, dim, rng),
            num_heads,
            local_window,
        })
    }

    /// `x: [B, T, D]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let vars = AttentionVars {
            wq: g.param(self.q.weight),
            bq: g.param(self.q.bias),
            wk: g.param(self.k.weight),
            bk: g.param(self.k.bias),
            wv: g.param(self.v.weight),
            bv: g.param(self.v.bias),
            wo: g.param(self.out.weight),
            bo: g.param(self.out.bias),
        };
        g.multi_head_self_attention(x, self.num_heads, &vars, self.local_window)
    }
}
