//! Central finite-difference checking of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::Result;
use crate::nn::{Graph, ParamStore};

/// Gradients smaller than this are compared in absolute terms.
pub const SCALE_FLOOR: f64 = 1e-6;

/// Outcome of comparing analytic and numeric gradients for every input.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Per input: `max |analytic - numeric| / max(max|analytic|, max|numeric|, SCALE_FLOOR)`.
    pub rel_errors: Vec<f64>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Checks `f`'s gradient with respect to each of `inputs` with step `h`.
///
/// `f` receives a fresh tape and the leaf handles of the inputs and must
/// return a scalar. The numeric side only ever evaluates forward values.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut rel_errors = Vec::with_capacity(inputs.len());
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        let mut max_diff: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + h;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = orig - h;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.data()[j];
            max_diff = max_diff.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
        }
        rel_errors.push(max_diff / scale.max(SCALE_FLOOR));
    }
    Ok(GradCheck { rel_errors })
}

/// Like [`check`], for a computation that also reads parameters from `store`.
///
/// Reported errors cover the explicit inputs first, then every trainable
/// parameter in store order.
pub fn check_graph<F>(store: &ParamStore<f64>, inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let mut analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let trainable: Vec<usize> = (0..store.len()).filter(|&i| store.entries()[i].trainable).collect();
    let pgrads = g.param_grads();
    for &i in &trainable {
        analytic.push(pgrads[i].clone().unwrap_or_else(|| Tensor::zeros(store.entries()[i].value.shape())));
    }
    drop(g);

    let eval = |xs: &[Tensor<f64>], ps: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::inference(ps);
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut xs = inputs.to_vec();
    let mut ps = store.clone();
    let mut rel_errors = Vec::with_capacity(analytic.len());
    for (slot, grad) in analytic.iter().enumerate() {
        let mut max_diff: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for j in 0..grad.numel() {
            let nudge = |delta: f64, xs: &mut Vec<Tensor<f64>>, ps: &mut ParamStore<f64>| {
                if slot < inputs.len() {
                    xs[slot].data_mut()[j] += delta;
                } else {
                    ps.entry_mut(trainable[slot - inputs.len()]).value.data_mut()[j] += delta;
                }
            };
            let orig = if slot < inputs.len() {
                xs[slot].data()[j]
            } else {
                ps.entries()[trainable[slot - inputs.len()]].value.data()[j]
            };
            nudge(h, &mut xs, &mut ps);
            let up = eval(&xs, &ps)?;
            nudge(-2.0 * h, &mut xs, &mut ps);
            let down = eval(&xs, &ps)?;
            // restore exactly
            if slot < inputs.len() {
                xs[slot].data_mut()[j] = orig;
            } else {
                ps.entry_mut(trainable[slot - inputs.len()]).value.data_mut()[j] = orig;
            }
            let numeric = (up - down) / (2.0 * h);
            let a = grad.data()[j];
            max_diff = max_diff.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
        }
        rel_errors.push(max_diff / scale.max(SCALE_FLOOR));
    }
    Ok(GradCheck { rel_errors })
}
