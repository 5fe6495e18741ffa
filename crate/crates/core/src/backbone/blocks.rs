use crate::error::{Error, Result};
use crate::tensor::{Activation, ConvOpts, Graph, Scalar, Var};

use super::spec::BlockSpec;

/// Graph handles for a squeeze-and-excitation unit.
#[derive(Clone, Copy, Debug)]
pub struct SeVars {
    pub fc1_weight: Var,
    pub fc1_bias: Var,
    pub fc2_weight: Var,
    pub fc2_bias: Var,
}

/// Graph handles for one depthwise-separable block.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub dw_weight: Var,
    pub dw_bias: Var,
    pub pw_weight: Var,
    pub pw_bias: Var,
    pub se: Option<SeVars>,
}

/// Squeeze (GAP) → FC(C→C/r) → ReLU → FC(C/r→C) → sigmoid → per-channel rescale.
pub fn se_forward<T: Scalar>(g: &mut Graph<T>, x: Var, reduction: usize, p: &SeVars) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(Error::Dimension(format!("SE expects N×C×H×W, got {shape:?}")));
    }
    let (n, c) = (shape[0], shape[1]);
    if reduction == 0 || c % reduction != 0 {
        return Err(Error::Config(format!(
            "SE: {c} channels not divisible by reduction {reduction}"
        )));
    }
    let pooled = g.global_avg_pool(x)?;
    let flat = g.reshape(pooled, &[n, c])?;
    let hidden = g.linear(flat, p.fc1_weight, Some(p.fc1_bias))?;
    let hidden = g.relu(hidden)?;
    let gates = g.linear(hidden, p.fc2_weight, Some(p.fc2_bias))?;
    let gates = g.sigmoid(gates)?;
    let gates = g.reshape(gates, &[n, c, 1, 1])?;
    g.mul(x, gates)
}

/// Depthwise `L×L` (groups = M) → act → pointwise 1×1 → optional SE → act.
pub fn dws_block_forward<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    spec: &BlockSpec,
    se_reduction: usize,
    p: &BlockVars,
) -> Result<Var> {
    let shape = g.shape(x);
    if shape.len() != 4 || shape[1] != spec.in_channels {
        return Err(Error::Dimension(format!(
            "block expects {} input channels, got shape {shape:?}",
            spec.in_channels
        )));
    }
    let dw = ConvOpts {
        stride: spec.stride,
        padding: spec.kernel / 2,
        groups: spec.in_channels,
    };
    let h = g.conv2d(x, p.dw_weight, Some(p.dw_bias), dw)?;
    let h = g.activation(h, spec.activation)?;
    let h = g.conv2d(h, p.pw_weight, Some(p.pw_bias), ConvOpts::default())?;
    let h = match &p.se {
        Some(se) if spec.use_se => se_forward(g, h, se_reduction, se)?,
        _ => h,
    };
    g.activation(h, spec.activation)
}

pub(crate) fn conv_act<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    weight: Var,
    bias: Var,
    opts: ConvOpts,
    act: Option<Activation>,
) -> Result<Var> {
    let y = g.conv2d(x, weight, Some(bias), opts)?;
    match act {
        Some(a) => g.activation(y, a),
        None => Ok(y),
    }
}
