use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Projection parameters of one attention layer, as tape variables.
///
/// Weights are `[D, D]` in `[out, in]` layout, biases `[D]`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

impl<T: Scalar> Tape<T> {
    /// Scaled dot-product attention over `[B, T, D]`, split into `num_heads`
    /// heads, concatenated and output-projected. With `local_window = Some(w)`
    /// position `i` only attends to positions `j` with `|i - j| <= w`.
    pub fn multi_head_self_attention(
        &mut self,
        x: Var,
        num_heads: usize,
        p: &AttentionVars,
        local_window: Option<usize>,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(Error::dim("attention", format!("input must be [B, T, D], got {shape:?}")));
        }
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        if num_heads == 0 || d % num_heads != 0 {
            return Err(Error::Config(format!("embedding size {d} not divisible by {num_heads} heads")));
        }
        let dh = d / num_heads;

        let q = self.linear(x, p.wq, Some(p.bq))?;
        let k = self.linear(x, p.wk, Some(p.bk))?;
        let v = self.linear(x, p.wv, Some(p.bv))?;
        let q = self.reshape(q, &[b, t, num_heads, dh])?;
        let q = self.permute(q, &[0, 2, 1, 3])?;
        let k = self.reshape(k, &[b, t, num_heads, dh])?;
        let kt = self.permute(k, &[0, 2, 3, 1])?;
        let v = self.reshape(v, &[b, t, num_heads, dh])?;
        let v = self.permute(v, &[0, 2, 1, 3])?;

        let scores = self.matmul(q, kt)?;
        let mut scores = self.scale(scores, T::one() / T::usize(dh).sqrt());
        if let Some(w) = local_window {
            let mut mask = Tensor::zeros(&[t, t]);
            for i in 0..t {
                for j in 0..t {
                    if i.abs_diff(j) > w {
                        mask.set(&[i, j], T::neg_infinity());
                    }
                }
            }
            let mask = self.constant(mask);
            scores = self.add(scores, mask)?;
        }
        let attn = self.softmax(scores);
        let ctx = self.matmul(attn, v)?;
        let ctx = self.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = self.reshape(ctx, &[b, t, d])?;
        self.linear(ctx, p.wo, Some(p.bo))
    }
}
