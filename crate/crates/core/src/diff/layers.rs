//! Name-addressable layer kinds over [`Graph`] operations.

use core::str::FromStr;

use alloc::string::ToString;

use crate::error::{shape_err, Error, Result};
use crate::real::Real;

use super::graph::{Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    PointwiseConv1x1,
    DepthwiseConv3x3,
    StridedConv,
    TransposedUpsample,
    LayerNorm,
    SoftmaxLastAxis,
    MatMul,
    Gelu,
    ConcatChannels,
    Add,
    Subtract,
    Scale,
}

impl FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "pointwise_conv_1x1" => Self::PointwiseConv1x1,
            "depthwise_conv_3x3" => Self::DepthwiseConv3x3,
            "strided_conv" => Self::StridedConv,
            "transposed_upsample" => Self::TransposedUpsample,
            "layer_norm" => Self::LayerNorm,
            "softmax_last_axis" => Self::SoftmaxLastAxis,
            "matmul" => Self::MatMul,
            "gelu" => Self::Gelu,
            "concat_channels" => Self::ConcatChannels,
            "add" => Self::Add,
            "subtract" => Self::Subtract,
            "scale" => Self::Scale,
            other => {
                return Err(Error::Unknown {
                    kind: "layer kind",
                    name: other.to_string(),
                })
            }
        })
    }
}

fn arity(kind: LayerKind, inputs: &[Var], params: &[Var], want_in: usize, want_params: &[usize]) -> Result<()> {
    if inputs.len() != want_in || !want_params.contains(&params.len()) {
        return Err(shape_err!(
            "{kind:?} takes {want_in} inputs and {want_params:?} params, got {} and {}",
            inputs.len(),
            params.len()
        ));
    }
    Ok(())
}

/// Applies one layer. Convolutions take `[weight]` or `[weight, bias]`,
/// layer norm takes `[]` or `[gamma, beta]`, and `scale` multiplies by `factor`.
pub fn layer_forward<R: Real>(
    g: &mut Graph<R>,
    kind: LayerKind,
    params: &[Var],
    inputs: &[Var],
    factor: R,
) -> Result<Var> {
    use LayerKind::*;
    match kind {
        PointwiseConv1x1 | DepthwiseConv3x3 | StridedConv | TransposedUpsample => {
            arity(kind, inputs, params, 1, &[1, 2])?;
            let (x, w, b) = (inputs[0], params[0], params.get(1).copied());
            match kind {
                PointwiseConv1x1 => g.pointwise(x, w, b),
                DepthwiseConv3x3 => g.depthwise(x, w, b),
                StridedConv => g.downsample(x, w, b),
                _ => g.upsample(x, w, b),
            }
        }
        LayerNorm => {
            arity(kind, inputs, params, 1, &[0, 2])?;
            g.layer_norm(inputs[0], params.first().copied(), params.get(1).copied())
        }
        SoftmaxLastAxis => {
            arity(kind, inputs, params, 1, &[0])?;
            Ok(g.softmax_last_axis(inputs[0]))
        }
        Gelu => {
            arity(kind, inputs, params, 1, &[0])?;
            Ok(g.gelu(inputs[0]))
        }
        Scale => {
            arity(kind, inputs, params, 1, &[0])?;
            Ok(g.scale(inputs[0], factor))
        }
        MatMul | ConcatChannels | Add | Subtract => {
            arity(kind, inputs, params, 2, &[0])?;
            let (a, b) = (inputs[0], inputs[1]);
            match kind {
                MatMul => g.matmul(a, b, false, false),
                ConcatChannels => g.concat_channels(a, b),
                Add => g.add(a, b),
                _ => g.sub(a, b),
            }
        }
    }
}
