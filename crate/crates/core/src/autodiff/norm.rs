use super::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
/// Weight of the current batch in the running-statistics update.
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel running mean and (unbiased) variance.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats { mean: Tensor::zeros(&[channels]), var: Tensor::ones(&[channels]) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BatchNormMode {
    /// Normalize with batch statistics and update the running stats.
    Train { momentum: f64 },
    /// Normalize with the running stats.
    Eval,
}

/// Batch normalization over every axis except the channel axis 1.
///
/// Returns the normalized output and, in training mode, the updated running
/// statistics (the caller decides where to store them).
pub fn batchnorm<'g>(
    input: Var<'g>,
    gamma: Var<'g>,
    beta: Var<'g>,
    running: &RunningStats,
    mode: BatchNormMode,
) -> Result<(Var<'g>, Option<RunningStats>)> {
    let x = input.value();
    let shape = x.shape().to_vec();
    if shape.len() < 2 {
        return Err(Error::shape("batchnorm", format!("need [N,C,...], got {shape:?}")));
    }
    let (n, c) = (shape[0], shape[1]);
    let inner: usize = shape[2..].iter().product();
    for (name, t) in [("gamma", gamma.value()), ("beta", beta.value()), ("running mean", running.mean.clone()), ("running var", running.var.clone())] {
        if t.shape() != [c] {
            return Err(Error::shape("batchnorm", format!("{name} {:?} for {c} channels", t.shape())));
        }
    }
    let count = (n * inner) as f64;
    let xd = x.data();
    let lane = move |ni: usize, ci: usize| (ni * c + ci) * inner;

    let (mean, var, updated) = match mode {
        BatchNormMode::Train { momentum } => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ci in 0..c {
                let mut s = 0.0;
                for ni in 0..n {
                    s += xd[lane(ni, ci)..][..inner].iter().sum::<f64>();
                }
                let m = s / count;
                let mut v = 0.0;
                for ni in 0..n {
                    v += xd[lane(ni, ci)..][..inner].iter().map(|&x| (x - m) * (x - m)).sum::<f64>();
                }
                mean[ci] = m;
                var[ci] = v / count;
            }
            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            let rm = running.mean.data();
            let rv = running.var.data();
            let updated = RunningStats {
                mean: Tensor::from_fn(&[c], |i| (1.0 - momentum) * rm[i[0]] + momentum * mean[i[0]]),
                var: Tensor::from_fn(&[c], |i| (1.0 - momentum) * rv[i[0]] + momentum * var[i[0]] * unbias),
            };
            (mean, var, Some(updated))
        }
        BatchNormMode::Eval => (running.mean.data().to_vec(), running.var.data().to_vec(), None),
    };

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let gm = gamma.value();
    let bt = beta.value();
    let mut xhat = vec![0.0; xd.len()];
    let mut y = vec![0.0; xd.len()];
    for ni in 0..n {
        for ci in 0..c {
            let o = lane(ni, ci);
            let (m, s, gv, bv) = (mean[ci], inv_std[ci], gm.data()[ci], bt.data()[ci]);
            for i in o..o + inner {
                let h = (xd[i] - m) * s;
                xhat[i] = h;
                y[i] = gv * h + bv;
            }
        }
    }
    let training = matches!(mode, BatchNormMode::Train { .. });
    let out = input.graph().record("batchnorm", Tensor::from_parts(shape.clone(), y), &[input, gamma, beta], move |g| {
        let gd = g.data();
        let mut gx = vec![0.0; gd.len()];
        let mut ggamma = vec![0.0; c];
        let mut gbeta = vec![0.0; c];
        for ci in 0..c {
            let (mut sg, mut sgh) = (0.0, 0.0);
            for ni in 0..n {
                let o = lane(ni, ci);
                for i in o..o + inner {
                    sg += gd[i];
                    sgh += gd[i] * xhat[i];
                }
            }
            ggamma[ci] = sgh;
            gbeta[ci] = sg;
            let scale = gm.data()[ci] * inv_std[ci];
            for ni in 0..n {
                let o = lane(ni, ci);
                for i in o..o + inner {
                    gx[i] = if training {
                        scale * (gd[i] - sg / count - xhat[i] * sgh / count)
                    } else {
                        scale * gd[i]
                    };
                }
            }
        }
        vec![
            Some(Tensor::from_parts(shape.clone(), gx)),
            Some(Tensor::from_parts(vec![c], ggamma)),
            Some(Tensor::from_parts(vec![c], gbeta)),
        ]
    })?;
    Ok((out, updated))
}
