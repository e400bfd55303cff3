//! Small parameter bundles shared by the attention, decoder and network
//! modules.

use crate::autodiff::{batchnorm, conv3d_padded, same_padding, BatchNormMode, RunningStats, Var};
use crate::error::{Error, Result};

/// A 3D convolution layer: `weight` is `[F, C, kd, kh, kw]`, `bias` is `[F]`.
#[derive(Debug, Clone, Copy)]
pub struct Conv<'g> {
    pub weight: Var<'g>,
    pub bias: Option<Var<'g>>,
}

impl<'g> Conv<'g> {
    pub fn new(weight: Var<'g>, bias: Option<Var<'g>>) -> Self {
        Conv { weight, bias }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Stride-1 convolution that preserves spatial extents.
    pub fn same(&self, x: Var<'g>) -> Result<Var<'g>> {
        let ws = self.weight.shape();
        if ws.len() != 5 {
            return Err(Error::shape("conv", format!("kernel must be rank 5, got {ws:?}")));
        }
        let pad = [same_padding(ws[2]), same_padding(ws[3]), same_padding(ws[4])];
        conv3d_padded(x, self.weight, self.bias, 1, pad)
    }
}

/// Batch normalization parameters plus the statistics and mode to use.
#[derive(Debug, Clone)]
pub struct Norm<'g> {
    pub gamma: Var<'g>,
    pub beta: Var<'g>,
    pub running: RunningStats,
    pub mode: BatchNormMode,
}

impl<'g> Norm<'g> {
    pub fn apply(&self, x: Var<'g>) -> Result<(Var<'g>, Option<RunningStats>)> {
        batchnorm(x, self.gamma, self.beta, &self.running, self.mode)
    }
}
