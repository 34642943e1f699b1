//! The complete detector: encoder, heads and decoding glue.

use rand::SeedableRng;

use crate::backbone::{Backbone, ModelConfig, PyramidFeatures};
use crate::error::{Error, Result};
use crate::heads::{decode_heads, dense_to_segments, postprocess, DecodeConfig, DenseOutputs, DenseTensors, Heads};
use crate::nn::{Graph, ModelRng, ParamStore};
use crate::scalar::Scalar;
use crate::segment::Segment;
use crate::tensor::{Tensor, Var};

#[derive(Debug, Clone)]
pub struct Detector<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub backbone: Backbone,
    pub heads: Heads,
}

impl<T: Scalar> Detector<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ModelRng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let backbone = Backbone::new(&mut params, &config, &mut rng)?;
        let heads = Heads::new(&mut params, &config, &mut rng);
        Ok(Self { config, params, backbone, heads })
    }

    /// `x: [B, C_in, T]`.
    pub fn forward(&self, g: &mut Graph<'_, T>, x: Var) -> Result<(PyramidFeatures, DenseOutputs)> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != self.config.input_channels {
            return Err(Error::dim(
                "detector",
                format!("expected [B, {}, T] input, got {shape:?}", self.config.input_channels),
            ));
        }
        let pyr = self.backbone.forward_pyramid(g, x)?;
        let dense = decode_heads(g, &pyr, &self.heads)?;
        Ok((pyr, dense))
    }

    /// Gradient-free forward pass.
    pub fn infer(&self, x: &Tensor<T>) -> Result<DenseTensors<T>> {
        let mut g = Graph::inference(&self.params);
        let xv = g.constant(x.clone());
        let (_, dense) = self.forward(&mut g, xv)?;
        Ok(dense.values(&g))
    }

    /// Detections for one `[C_in, T]` sequence.
    pub fn predict(&self, features: &Tensor<T>, rate_hz: f64, decode: &DecodeConfig) -> Result<Vec<Segment>> {
        let (c, t) = (features.dim(0), features.dim(1));
        let x = features.reshape(&[1, c, t])?;
        let dense = self.infer(&x)?;
        let mut cands = dense_to_segments(&dense, &self.config.level_strides(), rate_hz, decode.score_threshold)?;
        Ok(postprocess(cands.remove(0), t as f64 / rate_hz, decode))
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_trainable()
    }
}
