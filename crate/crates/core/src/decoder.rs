//! Decoder-side building blocks: remapping the attention sequence back to a
//! feature grid, the two-branch multi-scale block, cascaded upsampling and
//! fusion of per-scale predictions.

use crate::autodiff::{resize_trilinear, upsample_to_corners, Var};
use crate::error::{Error, Result};
use crate::nn::Conv;
use crate::patches::reshape_sequence_to_grid;

/// `[d, N]` sequence to a `[1, c, gd, gh, gw]` grid via a 1x1x1 convolution
/// from `d` to `c` channels.
pub fn hcnn_remap<'g>(z: Var<'g>, grid: [usize; 3], conv: &Conv<'g>) -> Result<Var<'g>> {
    let x = reshape_sequence_to_grid(z, grid)?;
    let d = x.shape()[0];
    let ws = conv.weight.shape();
    if ws[1..] != [d, 1, 1, 1] {
        return Err(Error::shape("hcnn_remap", format!("remap kernel {ws:?} for {d} sequence channels")));
    }
    conv.same(x.reshape(&[1, d, grid[0], grid[1], grid[2]])?)
}

/// Two convolutions applied in sequence with no nonlinearity.
#[derive(Debug, Clone, Copy)]
pub struct Branch<'g> {
    pub first: Conv<'g>,
    pub second: Conv<'g>,
}

impl<'g> Branch<'g> {
    fn apply(&self, x: Var<'g>) -> Result<Var<'g>> {
        self.second.same(self.first.same(x)?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MultiScaleBlockParams<'g> {
    pub branch1: Branch<'g>,
    pub branch2: Branch<'g>,
    pub fuse: Conv<'g>,
}

/// `fuse(concat(branch1(x), branch2(x)))`. Extents are preserved.
pub fn multiscale_block<'g>(input: Var<'g>, p: &MultiScaleBlockParams<'g>) -> Result<Var<'g>> {
    let c = input.shape().get(1).copied().unwrap_or(0);
    for b in [&p.branch1, &p.branch2] {
        if b.first.in_channels() != c {
            return Err(Error::shape(
                "multiscale_block",
                format!("branch expects {} channels, input has {c}", b.first.in_channels()),
            ));
        }
    }
    let cat = p.branch1.second.out_channels() + p.branch2.second.out_channels();
    if p.fuse.in_channels() != cat {
        return Err(Error::shape(
            "multiscale_block",
            format!("fuse expects {} channels, branches give {cat}", p.fuse.in_channels()),
        ));
    }
    let x1 = p.branch1.apply(input)?;
    let x2 = p.branch2.apply(input)?;
    p.fuse.same(Var::concat(&[x1, x2], 1)?)
}

/// Upsample by `factor`, then a same-padded 2x2x2 convolution and PReLU.
/// The upsampling samples voxel corners so the even-sized kernel ends up
/// centred on the output voxels.
#[derive(Debug, Clone, Copy)]
pub struct UpsampleStage<'g> {
    pub conv: Conv<'g>,
    /// PReLU slope, shape `[1]`.
    pub slope: Var<'g>,
    pub factor: usize,
}

pub fn cascaded_upsample_stage<'g>(x: Var<'g>, p: &UpsampleStage<'g>) -> Result<Var<'g>> {
    p.conv.same(upsample_to_corners(x, p.factor)?)?.prelu(p.slope)
}

/// Non-negative per-scale weights, normalized to sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights(Vec<f64>);

impl FusionWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if weights.is_empty() || weights.iter().any(|w| !w.is_finite() || *w < 0.0) || total <= 0.0 {
            return Err(Error::invalid("fusion weights", format!("{weights:?} must be non-negative with a positive sum")));
        }
        Ok(FusionWeights(weights.into_iter().map(|w| w / total).collect()))
    }

    pub fn uniform(n: usize) -> Self {
        FusionWeights(vec![1.0 / n as f64; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Resizes every output to the finest (last) one and takes the weighted
/// average. Inputs are ordered coarsest to finest.
pub fn fuse_multiscale<'g>(outputs: &[Var<'g>], w: &FusionWeights) -> Result<Var<'g>> {
    let last = outputs.last().ok_or_else(|| Error::invalid("fuse_multiscale", "no outputs to fuse"))?;
    if w.len() != outputs.len() {
        return Err(Error::invalid(
            "fuse_multiscale",
            format!("{} weights for {} outputs", w.len(), outputs.len()),
        ));
    }
    let target = last.shape();
    if target.len() != 5 {
        return Err(Error::shape("fuse_multiscale", format!("expected [N,C,D,H,W], got {target:?}")));
    }
    let mut acc: Option<Var<'g>> = None;
    let mut prev: Option<Vec<usize>> = None;
    for (x, &wm) in outputs.iter().zip(w.as_slice()) {
        let s = x.shape();
        if s.len() != 5 || s[..2] != target[..2] {
            return Err(Error::shape("fuse_multiscale", format!("output {s:?} does not match {target:?} in batch/channels")));
        }
        if let Some(p) = &prev {
            if s[2..].iter().zip(&p[2..]).any(|(a, b)| a <= b) {
                return Err(Error::shape("fuse_multiscale", format!("resolutions must increase, got {p:?} then {s:?}")));
            }
        }
        prev = Some(s.clone());
        let r = if s == target { *x } else { resize_trilinear(*x, [target[2], target[3], target[4]])? };
        let term = r.scale(wm)?;
        acc = Some(match acc {
            Some(a) => a.add(term)?,
            None => term,
        });
    }
    Ok(acc.expect("non-empty"))
}
