//! Attention, feed-forward and dropout built on the autodiff graph.

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `y = x·W + b` with `W` stored as `in×out`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn in_dim(&self, store: &ParamStore) -> usize {
        store.get(self.weight).tensor.rows()
    }

    pub fn out_dim(&self, store: &ParamStore) -> usize {
        store.get(self.weight).tensor.cols()
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }

    /// Registers a Xavier-uniform initialized layer (biases start at zero).
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        trainable: bool,
        rng: &mut impl Rng,
    ) -> Result<Linear> {
        let weight = store.add(
            format!("{name}.weight"),
            xavier_uniform(in_dim, out_dim, rng),
            trainable,
        )?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]), trainable)?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    /// Registers a layer with the given weight (`in×out`) and optional bias.
    pub fn from_tensors(
        store: &mut ParamStore,
        name: &str,
        weight: Tensor,
        bias: Option<Tensor>,
        trainable: bool,
    ) -> Result<Linear> {
        let weight = store.add(format!("{name}.weight"), weight, trainable)?;
        let bias = match bias {
            Some(b) => Some(store.add(format!("{name}.bias"), b, trainable)?),
            None => None,
        };
        Ok(Linear { weight, bias })
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> {
        std::iter::once(self.weight).chain(self.bias)
    }
}

/// Glorot/Xavier uniform: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::matrix(fan_in, fan_out, data).expect("shape matches data")
}

/// Projections of one attention block: `q, k: d→C_q`, `v: d→C_v`, `c: C_v→d_out`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub c: Linear,
    pub heads: usize,
}

impl AttentionParams {
    pub fn param_ids(&self) -> Vec<ParamId> {
        [self.q, self.k, self.v, self.c]
            .iter()
            .flat_map(|l| l.param_ids())
            .collect()
    }

    pub fn validate(&self, store: &ParamStore) -> Result<()> {
        let cq = self.q.out_dim(store);
        let cv = self.v.out_dim(store);
        if self.heads == 0 || cq % self.heads != 0 || cv % self.heads != 0 {
            return Err(Error::Config(format!(
                "attention width {cq}/{cv} is not divisible by {} heads",
                self.heads
            )));
        }
        if self.k.out_dim(store) != cq || self.c.in_dim(store) != cv {
            return Err(Error::dim("multi_head_attention", "projection shapes disagree"));
        }
        if self.q.in_dim(store) != self.k.in_dim(store) || self.k.in_dim(store) != self.v.in_dim(store) {
            return Err(Error::dim("multi_head_attention", "input widths disagree"));
        }
        Ok(())
    }
}

/// Scaled dot-product attention of `queries` over `keys_values`, split into
/// `heads` column groups, concatenated and passed through the output
/// projection `c`.
pub fn multi_head_attention(
    g: &mut Graph,
    store: &ParamStore,
    queries: Var,
    keys_values: Var,
    p: &AttentionParams,
) -> Result<Var> {
    p.validate(store)?;
    let qp = p.q.forward(g, store, queries)?;
    let kp = p.k.forward(g, store, keys_values)?;
    let vp = p.v.forward(g, store, keys_values)?;
    let z = attention_core(g, qp, kp, vp, p.heads)?;
    p.c.forward(g, store, z)
}

/// `softmax(q·kᵀ / sqrt(d_head)) · v` per head on already-projected inputs.
pub fn attention_core(g: &mut Graph, qp: Var, kp: Var, vp: Var, heads: usize) -> Result<Var> {
    let cq = g.value(qp).cols();
    let cv = g.value(vp).cols();
    if heads == 0 || cq % heads != 0 || cv % heads != 0 {
        return Err(Error::Config(format!("width {cq} not divisible by {heads} heads")));
    }
    let dq = cq / heads;
    let dv = cv / heads;
    let scale = 1.0 / (dq as f64).sqrt();
    if heads == 1 {
        let s = g.matmul_t(qp, false, kp, true)?;
        let s = g.scale(s, scale);
        let a = g.softmax_rows(s);
        return g.matmul(a, vp);
    }
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(qp, h * dq, (h + 1) * dq)?;
        let kh = g.slice_cols(kp, h * dq, (h + 1) * dq)?;
        let vh = g.slice_cols(vp, h * dv, (h + 1) * dv)?;
        let s = g.matmul_t(qh, false, kh, true)?;
        let s = g.scale(s, scale);
        let a = g.softmax_rows(s);
        outs.push(g.matmul(a, vh)?);
    }
    g.concat_cols(&outs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FfnParams {
    pub lin1: Linear,
    pub lin2: Linear,
}

/// Position-wise feed-forward: linear → ReLU → dropout → linear.
pub fn ffn(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    p: &FfnParams,
    dropout_ratio: f64,
    training: bool,
    rng: &mut impl Rng,
) -> Result<Var> {
    let h = p.lin1.forward(g, store, x)?;
    let h = g.relu(h);
    let h = dropout(g, h, dropout_ratio, training, rng)?;
    p.lin2.forward(g, store, h)
}

/// Inverted dropout. Identity in eval mode or when `ratio == 0`.
pub fn dropout(g: &mut Graph, x: Var, ratio: f64, training: bool, rng: &mut impl Rng) -> Result<Var> {
    check_dropout_ratio(ratio)?;
    if !training || ratio == 0.0 {
        return Ok(x);
    }
    let shape = g.value(x).shape().to_vec();
    let mask = dropout_mask(g.value(x).len(), ratio, rng);
    g.mul_const(x, Tensor::new(shape, mask)?)
}

pub fn check_dropout_ratio(ratio: f64) -> Result<()> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("dropout ratio {ratio} is outside [0, 1)")));
    }
    Ok(())
}

/// Mask of `0` (dropped) and `1/(1-ratio)` (kept) entries.
pub fn dropout_mask(len: usize, ratio: f64, rng: &mut impl Rng) -> Vec<f64> {
    let keep = 1.0 / (1.0 - ratio);
    (0..len)
        .map(|_| if rng.gen::<f64>() < ratio { 0.0 } else { keep })
        .collect()
}
