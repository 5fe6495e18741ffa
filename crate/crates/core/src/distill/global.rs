//! Global relation block: softmax-pooled context, a bottleneck transform, and
//! a residual broadcast over every pixel.

use crate::error::{Error, Result};
use crate::rng::{normal_tensor, SeededRng};
use crate::tensor::{ConvOpts, Graph, ParamSet, Scalar, Tensor, Var};

/// Indices of the block's tensors inside a [`ParamSet`].
///
/// `key: 1×C×1×1`, `v1: C/2×C` (+ bias), layer-norm affine over `C/2`,
/// `v2: C×C/2` (+ bias, zero-initialised so the block starts as the identity).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GlobalBlockParams {
    pub key: usize,
    pub v1_weight: usize,
    pub v1_bias: usize,
    pub ln_weight: usize,
    pub ln_bias: usize,
    pub v2_weight: usize,
    pub v2_bias: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct GlobalVars {
    pub key: Var,
    pub v1_weight: Var,
    pub v1_bias: Var,
    pub ln_weight: Var,
    pub ln_bias: Var,
    pub v2_weight: Var,
    pub v2_bias: Var,
}

pub(crate) const LN_EPS: f64 = 1e-5;

impl GlobalBlockParams {
    pub fn hidden(channels: usize) -> usize {
        (channels / 2).max(1)
    }

    pub fn init<T: Scalar>(params: &mut ParamSet<T>, channels: usize, rng: &mut SeededRng) -> Self {
        let c = channels;
        let h = Self::hidden(c);
        let he = (2.0 / c as f64).sqrt();
        GlobalBlockParams {
            key: params.push("global.key.weight", normal_tensor(rng, &[1, c, 1, 1], he)),
            v1_weight: params.push("global.v1.weight", normal_tensor(rng, &[h, c], he)),
            v1_bias: params.push("global.v1.bias", Tensor::zeros([h])),
            ln_weight: params.push("global.ln.weight", Tensor::ones([h])),
            ln_bias: params.push("global.ln.bias", Tensor::zeros([h])),
            v2_weight: params.push("global.v2.weight", Tensor::zeros([c, h])),
            v2_bias: params.push("global.v2.bias", Tensor::zeros([c])),
        }
    }

    pub fn vars(&self, vars: &[Var]) -> GlobalVars {
        GlobalVars {
            key: vars[self.key],
            v1_weight: vars[self.v1_weight],
            v1_bias: vars[self.v1_bias],
            ln_weight: vars[self.ln_weight],
            ln_bias: vars[self.ln_bias],
            v2_weight: vars[self.v2_weight],
            v2_bias: vars[self.v2_bias],
        }
    }
}

/// `Σ_j softmax_j(W_k F)·F_j` for `F: N×C×H×W`, as an `N×C` matrix.
pub fn global_context<T: Scalar>(g: &mut Graph<T>, f: Var, key: Var) -> Result<Var> {
    let shape = g.shape(f).to_vec();
    if shape.len() != 4 {
        return Err(Error::Dimension(format!("expected N×C×H×W features, got {shape:?}")));
    }
    let logits = g.conv2d(f, key, None, ConvOpts::default())?;
    let weights = g.softmax(logits, &[2, 3])?;
    let pooled = g.mul(f, weights)?;
    let context = g.sum(pooled, &[2, 3])?;
    g.reshape(context, &[shape[0], shape[1]])
}

/// `R(F) = F + W_v2(ReLU(LN(W_v1(context))))`, broadcast over every pixel.
pub fn global_relation<T: Scalar>(g: &mut Graph<T>, f: Var, p: &GlobalVars) -> Result<Var> {
    let context = global_context(g, f, p.key)?;
    let (n, c) = (g.shape(f)[0], g.shape(f)[1]);
    let hidden = g.shape(p.v1_weight)[0];
    let t = g.linear(context, p.v1_weight, Some(p.v1_bias))?;
    let t = g.layer_norm(t, 1, LN_EPS)?;
    let gamma = g.reshape(p.ln_weight, &[1, hidden])?;
    let beta = g.reshape(p.ln_bias, &[1, hidden])?;
    let t = g.mul(t, gamma)?;
    let t = g.add(t, beta)?;
    let t = g.relu(t)?;
    let t = g.linear(t, p.v2_weight, Some(p.v2_bias))?;
    let t = g.reshape(t, &[n, c, 1, 1])?;
    g.add(f, t)
}

/// `λ·Σ(R(F_T) − R(F_S))²`, batch mean, with one shared block and a detached teacher.
pub fn global_loss<T: Scalar>(
    g: &mut Graph<T>,
    f_t: Var,
    f_s: Var,
    p: &GlobalVars,
    lambda: f64,
) -> Result<Var> {
    if g.shape(f_t) != g.shape(f_s) {
        return Err(Error::Dimension(format!(
            "global loss: shapes {:?} and {:?} differ",
            g.shape(f_t),
            g.shape(f_s)
        )));
    }
    let n = g.shape(f_t)[0];
    let f_t = g.detach(f_t);
    let r_t = global_relation(g, f_t, p)?;
    let r_s = global_relation(g, f_s, p)?;
    let d = g.sub(r_t, r_s)?;
    let d = g.square(d)?;
    let s = g.sum_all(d)?;
    g.scale(s, T::of(lambda / n as f64))
}
