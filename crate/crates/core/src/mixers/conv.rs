//! Partial-channel depthwise convolution mixer.
//!
//! The fused expansion `[.., 2·hidden]` splits into a gate `g` (`hidden`
//! channels), a passthrough `i` (`hidden - conv`) and a conv path `c`
//! (`conv`). Only `c` is convolved; the mixer returns `(g, concat(i, conv(c)))`.

use serde::{Deserialize, Serialize};

use crate::tensor::{kernels, Element, Graph, Tensor, Var};
use crate::{Error, Result};

/// Channel widths of the three slices of the fused expansion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub gate: usize,
    pub identity: usize,
    pub conv: usize,
}

impl SplitIndices {
    /// `hidden = floor(dim · expansion)`, `conv = floor(dim · conv_ratio)`,
    /// with both ratios given as `numerator / denominator`.
    pub fn new(dim: usize, expansion: (u64, u64), conv_ratio: (u64, u64)) -> Result<Self> {
        if expansion.1 == 0 || conv_ratio.1 == 0 {
            return Err(Error::Config("ratio with zero denominator".into()));
        }
        let hidden = (dim as u64 * expansion.0 / expansion.1) as usize;
        let conv = (dim as u64 * conv_ratio.0 / conv_ratio.1) as usize;
        Self::from_widths(hidden, conv)
    }

    pub fn from_widths(hidden: usize, conv: usize) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        if conv > hidden {
            return Err(Error::Config(format!(
                "conv channels {conv} exceed hidden width {hidden} (negative passthrough split)"
            )));
        }
        Ok(Self {
            gate: hidden,
            identity: hidden - conv,
            conv,
        })
    }

    pub fn hidden(&self) -> usize {
        self.gate
    }

    /// Width of the fused first projection.
    pub fn fused_width(&self) -> usize {
        2 * self.gate
    }

    pub fn widths(&self) -> [usize; 3] {
        [self.gate, self.identity, self.conv]
    }
}

/// Depthwise kernel `[k, k, conv]` and bias `[conv]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvMixerWeights<H> {
    pub kernel: H,
    pub bias: H,
}

impl<H> ConvMixerWeights<H> {
    pub fn map<U>(&self, mut f: impl FnMut(&str, &H) -> U) -> ConvMixerWeights<U> {
        ConvMixerWeights {
            kernel: f("kernel", &self.kernel),
            bias: f("bias", &self.bias),
        }
    }

    pub fn try_map<U>(&self, mut f: impl FnMut(&str, &H) -> Result<U>) -> Result<ConvMixerWeights<U>> {
        Ok(ConvMixerWeights {
            kernel: f("kernel", &self.kernel)?,
            bias: f("bias", &self.bias)?,
        })
    }
}

/// Records the mixer on `x: [B, H, W, 2·hidden]`. `conv_path` transforms the
/// convolved slice before it is concatenated back (identity for the gated
/// conv block).
pub fn conv_mixer_graph<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    w: Option<&ConvMixerWeights<Var>>,
    split: &SplitIndices,
    conv_path: impl FnOnce(&mut Graph<T>, Var) -> Result<Var>,
) -> Result<(Var, Var)> {
    let parts = g.split_last(x, &split.widths())?;
    let gate = parts[0].expect("hidden > 0");
    let mut pieces = Vec::with_capacity(2);
    if let Some(i) = parts[1] {
        pieces.push(i);
    }
    if let Some(c) = parts[2] {
        let w = w.ok_or_else(|| Error::Config("conv channels > 0 but no conv weights".into()))?;
        let k = g.shape(w.kernel)[0];
        let y = g.depthwise_conv2d(c, w.kernel, 1, k / 2)?;
        let y = g.add(y, w.bias)?;
        pieces.push(conv_path(g, y)?);
    }
    let mixed = g.concat_last(&pieces)?;
    Ok((gate, mixed))
}

/// Tensor-level mixer: returns `(gate, concat(passthrough, conv(c)))`.
pub fn conv_mixer<T: Element>(
    x: &Tensor<T>,
    w: Option<&ConvMixerWeights<Tensor<T>>>,
    split: &SplitIndices,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if x.rank() != 4 {
        return Err(Error::shape(
            "conv_mixer",
            format!("expected [B,H,W,C], got {:?}", x.shape()),
        ));
    }
    let parts: Vec<Option<Tensor<T>>> = {
        let mut start = 0;
        split
            .widths()
            .iter()
            .map(|&width| {
                let s = (width > 0).then(|| kernels::slice_last(x, start, width)).transpose();
                start += width;
                s
            })
            .collect::<Result<_>>()?
    };
    if split.fused_width() != x.last_dim() {
        return Err(Error::shape(
            "conv_mixer",
            format!("input width {} != 2·hidden {}", x.last_dim(), split.fused_width()),
        ));
    }
    let mut pieces = Vec::new();
    if let Some(i) = &parts[1] {
        pieces.push(i.clone());
    }
    if let Some(c) = &parts[2] {
        let w = w.ok_or_else(|| Error::Config("conv channels > 0 but no conv weights".into()))?;
        let k = w.kernel.shape()[0];
        let y = kernels::depthwise_conv2d(c, &w.kernel, 1, k / 2)?;
        pieces.push(kernels::add(&y, &w.bias)?);
    }
    let refs: Vec<&Tensor<T>> = pieces.iter().collect();
    Ok((parts[0].clone().expect("hidden > 0"), kernels::concat_last(&refs)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_arithmetic_for_dim_64() {
        let s = SplitIndices::new(64, (8, 3), (1, 1)).unwrap();
        assert_eq!(s.widths(), [170, 106, 64]);
        assert_eq!(s.fused_width(), 340);
    }

    #[test]
    fn conv_wider_than_hidden_is_config_error() {
        assert!(matches!(SplitIndices::from_widths(10, 11), Err(Error::Config(_))));
        assert!(SplitIndices::new(64, (8, 3), (3, 1)).is_err());
    }
}
