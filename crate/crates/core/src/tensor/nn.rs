use std::fmt;
use std::str::FromStr;

use super::{Result, Tape, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
    Identity,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Gelu => tape.gelu(x),
            Activation::Identity => x,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
            Activation::Identity => "identity",
        })
    }
}

impl FromStr for Activation {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            "identity" => Ok(Activation::Identity),
            other => Err(TensorError::Invalid(format!("unknown activation `{other}`"))),
        }
    }
}

/// One affine layer already placed on a tape: `act(x·W + b)`.
#[derive(Debug, Clone, Copy)]
pub struct LayerRef {
    pub weight: Var,
    pub bias: Var,
    pub activation: Activation,
}

/// Applies `layers` in order to the rows of `x` (`[rows × in]`).
pub fn mlp_forward(tape: &mut Tape, x: Var, layers: &[LayerRef]) -> Result<Var> {
    let mut h = x;
    for (i, layer) in layers.iter().enumerate() {
        let width = tape.value(h).last_dim();
        let (fan_in, fan_out) = tape.value(layer.weight).dims2().ok_or_else(|| TensorError::Dimension {
            op: "mlp_forward",
            msg: format!("layer {i}: weight must be rank 2, got {:?}", tape.shape(layer.weight)),
        })?;
        if fan_in != width || tape.value(layer.bias).len() != fan_out {
            return Err(TensorError::Dimension {
                op: "mlp_forward",
                msg: format!(
                    "layer {i}: input width {width} does not chain into weight {:?} / bias {:?}",
                    tape.shape(layer.weight),
                    tape.shape(layer.bias)
                ),
            });
        }
        let z = tape.matmul(h, layer.weight)?;
        let z = tape.add_row(z, layer.bias)?;
        h = layer.activation.apply(tape, z);
    }
    Ok(h)
}
