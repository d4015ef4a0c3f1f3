//! The layer vocabulary of compiled networks, dispatched onto tape operations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{BnMode, PoolKind, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    Conv3x3,
    /// 1×5 followed by 5×1, no nonlinearity in between.
    FactorizedConv5x5,
    Identity,
    AvgPool3x3,
    MaxPool3x3,
    Conv1x1,
    BatchNorm,
    ReLU,
    Linear,
    GlobalAvgPool,
    Concat,
    Add,
    /// 2×2 average pooling with stride 2, used between stages.
    AvgPool2x2,
}

/// Forward mode of a whole network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    EvalRunning,
    EvalTransduction,
}

impl From<Mode> for BnMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Train => BnMode::Train,
            Mode::EvalRunning => BnMode::Running,
            Mode::EvalTransduction => BnMode::Transduction,
        }
    }
}

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub mean: Tensor,
    pub var: Tensor,
}

impl BnStats {
    pub fn new(channels: usize) -> Self {
        BnStats {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::ones(&[channels]),
        }
    }
}

fn arity(kind: LayerKind, inputs: &[Var], params: &[Var], ins: usize, ps: &[usize]) -> Result<()> {
    let ok_inputs = if kind == LayerKind::Concat {
        !inputs.is_empty()
    } else {
        inputs.len() == ins
    };
    if !ok_inputs || !ps.contains(&params.len()) {
        return Err(Error::Shape(format!(
            "{kind:?} takes {ins} input(s) and {ps:?} parameter(s), got {} and {}",
            inputs.len(),
            params.len()
        )));
    }
    Ok(())
}

/// Applies one layer. Parameter layout per kind:
///
/// * `Conv3x3`, `Conv1x1`: `[w]` or `[w, bias]`
/// * `FactorizedConv5x5`: `[w_1x5, w_5x1]`
/// * `BatchNorm`: `[gamma, beta]`, plus `stats`
/// * `Linear`: `[w, bias]`
///
/// `stats` is required for `BatchNorm` and ignored otherwise; in
/// [`Mode::Train`] it is updated in place.
pub fn forward(
    tape: &mut Tape,
    kind: LayerKind,
    inputs: &[Var],
    params: &[Var],
    mode: Mode,
    stats: Option<&mut BnStats>,
) -> Result<Var> {
    use LayerKind::*;
    match kind {
        Conv3x3 => {
            arity(kind, inputs, params, 1, &[1, 2])?;
            tape.conv2d(inputs[0], params[0], params.get(1).copied(), 1, 1)
        }
        Conv1x1 => {
            arity(kind, inputs, params, 1, &[1, 2])?;
            tape.conv2d(inputs[0], params[0], params.get(1).copied(), 0, 0)
        }
        FactorizedConv5x5 => {
            arity(kind, inputs, params, 1, &[2])?;
            let mid = tape.conv2d(inputs[0], params[0], None, 0, 2)?;
            tape.conv2d(mid, params[1], None, 2, 0)
        }
        Identity => {
            arity(kind, inputs, params, 1, &[0])?;
            Ok(inputs[0])
        }
        AvgPool3x3 => {
            arity(kind, inputs, params, 1, &[0])?;
            tape.pool3(inputs[0], PoolKind::Avg)
        }
        MaxPool3x3 => {
            arity(kind, inputs, params, 1, &[0])?;
            tape.pool3(inputs[0], PoolKind::Max)
        }
        AvgPool2x2 => {
            arity(kind, inputs, params, 1, &[0])?;
            tape.avg_pool2(inputs[0])
        }
        BatchNorm => {
            arity(kind, inputs, params, 1, &[2])?;
            let stats = stats.ok_or_else(|| Error::Shape("BatchNorm needs running stats".into()))?;
            tape.batch_norm(
                inputs[0],
                params[0],
                params[1],
                mode.into(),
                &mut stats.mean,
                &mut stats.var,
            )
        }
        ReLU => {
            arity(kind, inputs, params, 1, &[0])?;
            tape.relu(inputs[0])
        }
        Linear => {
            arity(kind, inputs, params, 1, &[2])?;
            tape.linear(inputs[0], params[0], params[1])
        }
        GlobalAvgPool => {
            arity(kind, inputs, params, 1, &[0])?;
            tape.global_avg_pool(inputs[0])
        }
        Concat => {
            arity(kind, inputs, params, 0, &[0])?;
            if inputs.len() == 1 {
                Ok(inputs[0])
            } else {
                tape.concat(inputs)
            }
        }
        Add => {
            arity(kind, inputs, params, 2, &[0])?;
            tape.add(inputs[0], inputs[1])
        }
    }
}
