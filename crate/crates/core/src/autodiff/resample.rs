//! Linear resampling with the half-pixel (align-corners = false) convention.
//!
//! Sample `j` of an axis resized from `n` to `m` reads source coordinate
//! `(j + 0.5) * n / m - 0.5`. Coordinates that fall in the outer half cell are
//! extrapolated linearly from the two border samples rather than clamped, so
//! upsampling followed by block averaging reproduces affine data exactly.

use super::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-output `(left index, weight of left, weight of right)`. `shift`
/// moves every sample point by that many output voxels.
fn taps(n: usize, m: usize, shift: f64) -> Vec<(usize, f64, f64)> {
    (0..m)
        .map(|j| {
            if n == 1 {
                return (0, 1.0, 0.0);
            }
            let src = (j as f64 + 0.5 + shift) * n as f64 / m as f64 - 0.5;
            let i0 = (src.floor().max(0.0) as usize).min(n - 2);
            let t = src - i0 as f64;
            (i0, 1.0 - t, t)
        })
        .collect()
}

/// Resizes one axis to `out_len` by linear interpolation.
pub fn resize_axis_linear<'g>(input: Var<'g>, axis: usize, out_len: usize) -> Result<Var<'g>> {
    resize_axis_shifted(input, axis, out_len, 0.0)
}

fn resize_axis_shifted<'g>(input: Var<'g>, axis: usize, out_len: usize, shift: f64) -> Result<Var<'g>> {
    let x = input.value();
    let shape = x.shape().to_vec();
    if axis >= shape.len() || out_len == 0 {
        return Err(Error::invalid("resize", format!("axis {axis} to length {out_len} for {shape:?}")));
    }
    let n = shape[axis];
    if n == out_len && shift == 0.0 {
        return Ok(input);
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let tp = taps(n, out_len, shift);
    let xd = x.data();
    let mut y = vec![0.0; outer * out_len * inner];
    for o in 0..outer {
        let src = &xd[o * n * inner..][..n * inner];
        let dst = &mut y[o * out_len * inner..][..out_len * inner];
        for (j, &(i0, w0, w1)) in tp.iter().enumerate() {
            let row = &mut dst[j * inner..][..inner];
            let a = &src[i0 * inner..][..inner];
            if w1 == 0.0 {
                row.iter_mut().zip(a).for_each(|(r, &v)| *r = w0 * v);
            } else {
                let b = &src[(i0 + 1) * inner..][..inner];
                row.iter_mut().zip(a.iter().zip(b)).for_each(|(r, (&p, &q))| *r = w0 * p + w1 * q);
            }
        }
    }
    let mut out_shape = shape.clone();
    out_shape[axis] = out_len;
    input.graph().record("resize", Tensor::from_parts(out_shape, y), &[input], move |g| {
        let gd = g.data();
        let mut gx = vec![0.0; outer * n * inner];
        for o in 0..outer {
            let gsrc = &gd[o * out_len * inner..][..out_len * inner];
            let dst = &mut gx[o * n * inner..][..n * inner];
            for (j, &(i0, w0, w1)) in tp.iter().enumerate() {
                let grow = &gsrc[j * inner..][..inner];
                for (d, &gv) in dst[i0 * inner..][..inner].iter_mut().zip(grow) {
                    *d += w0 * gv;
                }
                if w1 != 0.0 {
                    for (d, &gv) in dst[(i0 + 1) * inner..][..inner].iter_mut().zip(grow) {
                        *d += w1 * gv;
                    }
                }
            }
        }
        vec![Some(Tensor::from_parts(shape.clone(), gx))]
    })
}

/// Resizes the three trailing spatial axes of `[N,C,D,H,W]` to `size`.
pub fn resize_trilinear<'g>(input: Var<'g>, size: [usize; 3]) -> Result<Var<'g>> {
    let rank = input.shape().len();
    if rank != 5 {
        return Err(Error::shape("resize_trilinear", format!("expected rank 5, got {rank}")));
    }
    let mut y = input;
    for (a, &len) in size.iter().enumerate() {
        y = resize_axis_linear(y, 2 + a, len)?;
    }
    Ok(y)
}

/// Multiplies every spatial extent of `[N,C,D,H,W]` by `factor`.
pub fn upsample_trilinear<'g>(input: Var<'g>, factor: usize) -> Result<Var<'g>> {
    if factor == 0 {
        return Err(Error::invalid("upsample_trilinear", "factor must be at least 1"));
    }
    let s = input.shape();
    if s.len() != 5 {
        return Err(Error::shape("upsample_trilinear", format!("expected rank 5, got {s:?}")));
    }
    resize_trilinear(input, [s[2] * factor, s[3] * factor, s[4] * factor])
}

/// Like [`upsample_trilinear`], but each output voxel samples its lower
/// corner (half an output voxel before its centre). A following 2-wide
/// convolution padded at the far end then averages the two corners around
/// each centre, so the pair introduces no shift.
pub fn upsample_to_corners<'g>(input: Var<'g>, factor: usize) -> Result<Var<'g>> {
    if factor == 0 {
        return Err(Error::invalid("upsample_to_corners", "factor must be at least 1"));
    }
    let s = input.shape();
    if s.len() != 5 {
        return Err(Error::shape("upsample_to_corners", format!("expected rank 5, got {s:?}")));
    }
    let mut y = input;
    for a in 2..5 {
        y = resize_axis_shifted(y, a, s[a] * factor, -0.5)?;
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;

    #[test]
    fn factor_one_is_identity() {
        let g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[1, 2, 3, 3, 3], |i| (i[1] + i[2] * i[4]) as f64));
        assert!(upsample_trilinear(x, 1).unwrap().value().bitwise_eq(&x.value()));
    }

    #[test]
    fn constant_stays_constant() {
        let g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1, 2, 3, 4], 1.75));
        let y = upsample_trilinear(x, 3).unwrap().value();
        assert_eq!(y.shape(), &[1, 1, 6, 9, 12]);
        assert!(y.data().iter().all(|&v| (v - 1.75).abs() < 1e-15));
    }

    #[test]
    fn block_average_recovers_ramp() {
        // Independent oracle: average each 2x2x2 block of the upsampled volume.
        let g = Graph::new();
        let ramp = Tensor::from_fn(&[1, 1, 2, 2, 2], |i| 1.0 + 2.0 * i[2] as f64 - 3.0 * i[3] as f64 + 0.5 * i[4] as f64);
        let up = upsample_trilinear(g.constant(ramp.clone()), 2).unwrap().value();
        let back = Tensor::from_fn(&[1, 1, 2, 2, 2], |o| {
            let mut s = 0.0;
            for a in 0..2 {
                for b in 0..2 {
                    for c in 0..2 {
                        s += up.get(&[0, 0, 2 * o[2] + a, 2 * o[3] + b, 2 * o[4] + c]);
                    }
                }
            }
            s / 8.0
        });
        assert!(back.max_abs_diff(&ramp).unwrap() < 1e-12);
    }

    #[test]
    fn corner_pairs_average_to_centres() {
        let g = Graph::new();
        let ramp = Tensor::from_fn(&[1, 1, 3, 1, 1], |i| 2.0 + 3.0 * i[2] as f64);
        let corners = upsample_to_corners(g.constant(ramp.clone()), 2).unwrap().value();
        // output voxel j has its lower corner at source coordinate j/2 - 0.5
        for j in 0..6 {
            assert!((corners.get(&[0, 0, j, 0, 0]) - (2.0 + 3.0 * (j as f64 / 2.0 - 0.5))).abs() < 1e-12);
        }
        let centres = upsample_trilinear(g.constant(ramp), 2).unwrap().value();
        for j in 0..5 {
            let pair = 0.5 * (corners.get(&[0, 0, j, 0, 0]) + corners.get(&[0, 0, j + 1, 0, 0]));
            assert!((pair - centres.get(&[0, 0, j, 0, 0])).abs() < 1e-12);
        }
    }

    #[test]
    fn corner_upsample_gradient() {
        use crate::autodiff::gradcheck::{max_rel_error, rand_tensor, weighted_sum};
        let err = max_rel_error(&[rand_tensor(&[1, 2, 2, 3, 2], 1)], |_, v| weighted_sum(upsample_to_corners(v[0], 2)?, 2));
        assert!(err < 1e-6, "{err}");
    }
}
