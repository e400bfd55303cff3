use super::Var;
use crate::error::{Error, Result};
use crate::tensor::{numel, strides, Tensor};

/// Non-overlapping max pooling with window `window` over each axis in `axes`.
///
/// Every pooled extent must be divisible by `window`. The gradient flows to
/// the first maximal element of each window.
pub fn maxpool<'g>(input: Var<'g>, window: usize, axes: &[usize]) -> Result<Var<'g>> {
    let x = input.value();
    let shape = x.shape().to_vec();
    if window == 0 {
        return Err(Error::invalid("maxpool", "window must be at least 1"));
    }
    let mut win = vec![1usize; shape.len()];
    for &a in axes {
        if a >= shape.len() {
            return Err(Error::invalid("maxpool", format!("axis {a} for rank {}", shape.len())));
        }
        if !shape[a].is_multiple_of(window) {
            return Err(Error::shape(
                "maxpool",
                format!("extent {} on axis {a} is not divisible by window {window}", shape[a]),
            ));
        }
        win[a] = window;
    }
    let out_shape: Vec<usize> = shape.iter().zip(&win).map(|(d, w)| d / w).collect();
    let in_strides = strides(&shape);
    let rank = shape.len();
    let n_out = numel(&out_shape);
    let win_count: usize = win.iter().product();

    // Offsets of each window element relative to the window origin.
    let mut rel = Vec::with_capacity(win_count);
    let mut widx = vec![0usize; rank];
    for _ in 0..win_count {
        rel.push(widx.iter().zip(&in_strides).map(|(i, s)| i * s).sum::<usize>());
        for ax in (0..rank).rev() {
            widx[ax] += 1;
            if widx[ax] < win[ax] {
                break;
            }
            widx[ax] = 0;
        }
    }

    let xd = x.data();
    let mut y = Vec::with_capacity(n_out);
    let mut arg = Vec::with_capacity(n_out);
    let mut oidx = vec![0usize; rank];
    for _ in 0..n_out {
        let origin: usize = (0..rank).map(|a| oidx[a] * win[a] * in_strides[a]).sum();
        let mut best = origin + rel[0];
        for &r in &rel[1..] {
            if xd[origin + r] > xd[best] {
                best = origin + r;
            }
        }
        y.push(xd[best]);
        arg.push(best);
        for ax in (0..rank).rev() {
            oidx[ax] += 1;
            if oidx[ax] < out_shape[ax] {
                break;
            }
            oidx[ax] = 0;
        }
    }
    let in_len = x.numel();
    input.graph().record("maxpool", Tensor::from_parts(out_shape, y), &[input], move |g| {
        let mut gx = vec![0.0; in_len];
        for (&i, &gv) in arg.iter().zip(g.data()) {
            gx[i] += gv;
        }
        vec![Some(Tensor::from_parts(shape.clone(), gx))]
    })
}
