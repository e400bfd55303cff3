//! 3D convolution (and 1D convolution expressed through it).
//!
//! Every output element is accumulated by exactly one worker in the fixed
//! order bias, input channel, kernel depth, height, width, so the result is
//! bitwise independent of the rayon pool size.

use rayon::prelude::*;

use super::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `(before, after)` padding that keeps the extent of a stride-1 convolution
/// with kernel width `k`. Even kernels put the extra element after.
pub fn same_padding(k: usize) -> (usize, usize) {
    let total = k.saturating_sub(1);
    (total / 2, total - total / 2)
}

#[derive(Debug, Clone, Copy)]
struct Geom {
    n: usize,
    c: usize,
    f: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    out: [usize; 3],
    lo: [usize; 3],
    stride: usize,
}

impl Geom {
    fn in_vol(&self) -> usize {
        self.input.iter().product()
    }
    fn out_vol(&self) -> usize {
        self.out.iter().product()
    }
    fn k_vol(&self) -> usize {
        self.kernel.iter().product()
    }
    /// Output positions along `axis` whose tap `k` lands inside the input.
    fn valid(&self, axis: usize, k: usize) -> (usize, usize) {
        let (lo, s, inn) = (self.lo[axis] as isize, self.stride as isize, self.input[axis] as isize);
        let k = k as isize;
        // need 0 <= o*s + k - lo <= inn - 1
        let start = if lo > k { (lo - k + s - 1) / s } else { 0 };
        let end = if inn - 1 + lo >= k { (inn - 1 + lo - k) / s + 1 } else { 0 };
        let end = end.min(self.out[axis] as isize);
        (start as usize, (end.max(start)) as usize)
    }
    fn src(&self, axis: usize, o: usize, k: usize) -> usize {
        o * self.stride + k - self.lo[axis]
    }
}

/// Convolution with symmetric zero padding on all three spatial axes.
///
/// `input` is `[N,C,D,H,W]`, `kernel` is `[F,C,kd,kh,kw]`, `bias` is `[F]`.
/// Output extents follow `floor((i + 2p - k) / s) + 1`.
pub fn conv3d<'g>(
    input: Var<'g>,
    kernel: Var<'g>,
    bias: Option<Var<'g>>,
    stride: usize,
    padding: usize,
) -> Result<Var<'g>> {
    conv3d_padded(input, kernel, bias, stride, [(padding, padding); 3])
}

/// Convolution with per-axis `(before, after)` zero padding.
pub fn conv3d_padded<'g>(
    input: Var<'g>,
    kernel: Var<'g>,
    bias: Option<Var<'g>>,
    stride: usize,
    padding: [(usize, usize); 3],
) -> Result<Var<'g>> {
    let x = input.value();
    let w = kernel.value();
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 5 || ws.len() != 5 {
        return Err(Error::shape("conv3d", format!("input {xs:?} and kernel {ws:?} must be rank 5")));
    }
    if ws[1] != xs[1] {
        return Err(Error::shape(
            "conv3d",
            format!("kernel expects {} input channels, input has {}", ws[1], xs[1]),
        ));
    }
    if stride == 0 {
        return Err(Error::invalid("conv3d", "stride must be at least 1"));
    }
    let b = bias.map(|b| b.value());
    if let Some(b) = &b {
        if b.shape() != [ws[0]] {
            return Err(Error::shape("conv3d", format!("bias {:?} for {} filters", b.shape(), ws[0])));
        }
    }
    let mut out = [0; 3];
    for a in 0..3 {
        let padded = xs[2 + a] + padding[a].0 + padding[a].1;
        if ws[2 + a] > padded {
            return Err(Error::shape(
                "conv3d",
                format!("kernel extent {} exceeds padded input extent {padded} on axis {a}", ws[2 + a]),
            ));
        }
        out[a] = (padded - ws[2 + a]) / stride + 1;
    }
    let geom = Geom {
        n: xs[0],
        c: xs[1],
        f: ws[0],
        input: [xs[2], xs[3], xs[4]],
        kernel: [ws[2], ws[3], ws[4]],
        out,
        lo: [padding[0].0, padding[1].0, padding[2].0],
        stride,
    };
    let y = forward(x.data(), w.data(), b.as_ref().map(|b| b.data()), &geom);
    let y = Tensor::from_parts(vec![geom.n, geom.f, out[0], out[1], out[2]], y);
    let mut parents = vec![input, kernel];
    parents.extend(bias);
    let has_bias = bias.is_some();
    input.graph().record("conv3d", y, &parents, move |g| {
        let gd = g.data();
        let gx = grad_input(gd, w.data(), &geom);
        let gw = grad_kernel(gd, x.data(), &geom);
        let mut grads = vec![
            Some(Tensor::from_parts(x.shape().to_vec(), gx)),
            Some(Tensor::from_parts(w.shape().to_vec(), gw)),
        ];
        if has_bias {
            let ov = geom.out_vol();
            let mut gb = vec![0.0; geom.f];
            for ni in 0..geom.n {
                for (fi, gbf) in gb.iter_mut().enumerate() {
                    *gbf += gd[(ni * geom.f + fi) * ov..][..ov].iter().sum::<f64>();
                }
            }
            grads.push(Some(Tensor::from_parts(vec![geom.f], gb)));
        }
        grads
    })
}

/// Width-`k` 1D convolution with same padding: `[N,C,L] -> [N,F,L]`.
pub fn conv1d<'g>(input: Var<'g>, kernel: Var<'g>, bias: Option<Var<'g>>) -> Result<Var<'g>> {
    let xs = input.shape();
    let ws = kernel.shape();
    if xs.len() != 3 || ws.len() != 3 {
        return Err(Error::shape("conv1d", format!("input {xs:?} and kernel {ws:?} must be rank 3")));
    }
    if xs[2] < 1 {
        return Err(Error::shape("conv1d", "sequence length must be at least 1"));
    }
    let x5 = input.reshape(&[xs[0], xs[1], 1, 1, xs[2]])?;
    let w5 = kernel.reshape(&[ws[0], ws[1], 1, 1, ws[2]])?;
    let y = conv3d_padded(x5, w5, bias, 1, [(0, 0), (0, 0), same_padding(ws[2])])?;
    y.reshape(&[xs[0], ws[0], xs[2]])
}

fn axpy(out: &mut [f64], a: f64, x: &[f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

fn forward(x: &[f64], w: &[f64], b: Option<&[f64]>, g: &Geom) -> Vec<f64> {
    let (iv, ov, kv) = (g.in_vol(), g.out_vol(), g.k_vol());
    let [_, ih, iw] = g.input;
    let [_, oh, ow] = g.out;
    let [kd, kh, kw] = g.kernel;
    let s = g.stride;
    let mut y = vec![0.0; g.n * g.f * ov];
    y.par_chunks_mut(ov).enumerate().for_each(|(nf, plane)| {
        let (ni, fi) = (nf / g.f, nf % g.f);
        if let Some(b) = b {
            plane.fill(b[fi]);
        }
        for ci in 0..g.c {
            let xin = &x[(ni * g.c + ci) * iv..][..iv];
            let wk = &w[(fi * g.c + ci) * kv..][..kv];
            for a in 0..kd {
                let (d0, d1) = g.valid(0, a);
                for bb in 0..kh {
                    let (h0, h1) = g.valid(1, bb);
                    for c in 0..kw {
                        let wv = wk[(a * kh + bb) * kw + c];
                        let (w0, w1) = g.valid(2, c);
                        if w0 >= w1 {
                            continue;
                        }
                        for od in d0..d1 {
                            let id = g.src(0, od, a);
                            for oh_ in h0..h1 {
                                let ih_ = g.src(1, oh_, bb);
                                let orow = &mut plane[(od * oh + oh_) * ow..][..ow];
                                let irow = &xin[(id * ih + ih_) * iw..][..iw];
                                if s == 1 {
                                    let off = w0 + c - g.lo[2];
                                    axpy(&mut orow[w0..w1], wv, &irow[off..off + (w1 - w0)]);
                                } else {
                                    for (o, slot) in orow[w0..w1].iter_mut().enumerate() {
                                        *slot += wv * irow[g.src(2, o + w0, c)];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    y
}

fn grad_input(gy: &[f64], w: &[f64], g: &Geom) -> Vec<f64> {
    let (iv, ov, kv) = (g.in_vol(), g.out_vol(), g.k_vol());
    let [_, ih, iw] = g.input;
    let [_, oh, ow] = g.out;
    let [kd, kh, kw] = g.kernel;
    let s = g.stride;
    let mut gx = vec![0.0; g.n * g.c * iv];
    gx.par_chunks_mut(iv).enumerate().for_each(|(nc, plane)| {
        let (ni, ci) = (nc / g.c, nc % g.c);
        for fi in 0..g.f {
            let gout = &gy[(ni * g.f + fi) * ov..][..ov];
            let wk = &w[(fi * g.c + ci) * kv..][..kv];
            for a in 0..kd {
                let (d0, d1) = g.valid(0, a);
                for bb in 0..kh {
                    let (h0, h1) = g.valid(1, bb);
                    for c in 0..kw {
                        let wv = wk[(a * kh + bb) * kw + c];
                        let (w0, w1) = g.valid(2, c);
                        if w0 >= w1 {
                            continue;
                        }
                        for od in d0..d1 {
                            let id = g.src(0, od, a);
                            for oh_ in h0..h1 {
                                let ih_ = g.src(1, oh_, bb);
                                let grow = &gout[(od * oh + oh_) * ow..][..ow];
                                let irow = &mut plane[(id * ih + ih_) * iw..][..iw];
                                if s == 1 {
                                    let off = w0 + c - g.lo[2];
                                    axpy(&mut irow[off..off + (w1 - w0)], wv, &grow[w0..w1]);
                                } else {
                                    for o in w0..w1 {
                                        irow[g.src(2, o, c)] += wv * grow[o];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    gx
}

fn grad_kernel(gy: &[f64], x: &[f64], g: &Geom) -> Vec<f64> {
    let (iv, ov, kv) = (g.in_vol(), g.out_vol(), g.k_vol());
    let [_, ih, iw] = g.input;
    let [_, oh, ow] = g.out;
    let [_, kh, kw] = g.kernel;
    let mut gw = vec![0.0; g.f * g.c * kv];
    gw.par_chunks_mut(kv).enumerate().for_each(|(fc, taps)| {
        let (fi, ci) = (fc / g.c, fc % g.c);
        for (t, slot) in taps.iter_mut().enumerate() {
            let (a, bb, c) = (t / (kh * kw), (t / kw) % kh, t % kw);
            let (d0, d1) = g.valid(0, a);
            let (h0, h1) = g.valid(1, bb);
            let (w0, w1) = g.valid(2, c);
            if w0 >= w1 {
                continue;
            }
            let mut acc = 0.0;
            for ni in 0..g.n {
                let gout = &gy[(ni * g.f + fi) * ov..][..ov];
                let xin = &x[(ni * g.c + ci) * iv..][..iv];
                for od in d0..d1 {
                    let id = g.src(0, od, a);
                    for oh_ in h0..h1 {
                        let ih_ = g.src(1, oh_, bb);
                        let grow = &gout[(od * oh + oh_) * ow..][..ow];
                        let irow = &xin[(id * ih + ih_) * iw..][..iw];
                        if g.stride == 1 {
                            let off = w0 + c - g.lo[2];
                            acc += grow[w0..w1]
                                .iter()
                                .zip(&irow[off..off + (w1 - w0)])
                                .map(|(p, q)| p * q)
                                .sum::<f64>();
                        } else {
                            for o in w0..w1 {
                                acc += grow[o] * irow[g.src(2, o, c)];
                            }
                        }
                    }
                }
            }
            *slot = acc;
        }
    });
    gw
}
