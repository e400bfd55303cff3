//! Central finite-difference oracle used by the unit tests.

use super::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub(crate) const H: f64 = 1e-5;

pub(crate) fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Deterministic pseudo-random tensor in [-1, 1).
pub(crate) fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut s = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
    Tensor::from_fn(shape, |_| {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        (s >> 11) as f64 / (1u64 << 52) as f64 - 1.0
    })
}

/// Worst relative error between reverse-mode and central-difference
/// gradients of `f` with respect to every element of every input.
pub(crate) fn max_rel_error<F>(inputs: &[Tensor], f: F) -> f64
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&g, &vars).expect("forward");
    let grads = g.backward(loss).expect("backward");
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();

    let eval = |ts: &[Tensor]| -> f64 {
        let g = Graph::new();
        let vs: Vec<Var<'_>> = ts.iter().map(|t| g.constant(t.clone())).collect();
        f(&g, &vs).expect("forward").item()
    };
    let mut worst: f64 = 0.0;
    for (which, t) in inputs.iter().enumerate() {
        for i in 0..t.numel() {
            let mut probe = inputs.to_vec();
            probe[which].data_mut()[i] = t.data()[i] + H;
            let up = eval(&probe);
            probe[which].data_mut()[i] = t.data()[i] - H;
            let down = eval(&probe);
            let numeric = (up - down) / (2.0 * H);
            let e = rel_err(analytic[which].data()[i], numeric);
            worst = worst.max(e);
        }
    }
    worst
}

/// `sum(y * w)` for a fixed pseudo-random `w`, so gradients are not degenerate.
pub(crate) fn weighted_sum<'g>(y: Var<'g>, seed: u64) -> Result<Var<'g>> {
    let w = y.graph().constant(rand_tensor(&y.shape(), seed));
    y.mul(w)?.sum()
}
