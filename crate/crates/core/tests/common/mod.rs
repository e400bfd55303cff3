#![allow(dead_code)]

use voxelseg::io::{generate_phantom, preprocess, LabeledSample, PreprocessConfig};
use voxelseg::networks::{Mode, Model};
use voxelseg::{Graph, Result, Tensor, Var};

pub const H: f64 = 1e-5;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Deterministic values in [-1, 1).
pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut s = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
    Tensor::from_fn(shape, |_| {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        (s >> 11) as f64 / (1u64 << 52) as f64 - 1.0
    })
}

/// Worst relative error between reverse-mode and central-difference
/// gradients of `f` over every element of every input. Disagreeing entries
/// get a second try with a step ten times smaller, as in
/// [`model_gradient_error`].
pub fn max_rel_error<F>(inputs: &[Tensor], f: F) -> f64
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let grads = g.backward(f(&g, &vars).unwrap()).unwrap();
    let eval = |ts: &[Tensor]| {
        let g = Graph::new();
        let vs: Vec<Var<'_>> = ts.iter().map(|t| g.constant(t.clone())).collect();
        f(&g, &vs).unwrap().item()
    };
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[k]);
        for i in 0..t.numel() {
            let central = |h: f64| {
                let mut probe = inputs.to_vec();
                probe[k].data_mut()[i] = t.data()[i] + h;
                let up = eval(&probe);
                probe[k].data_mut()[i] = t.data()[i] - h;
                (up - eval(&probe)) / (2.0 * h)
            };
            let a = analytic.data()[i];
            let mut e = rel_err(a, central(H));
            if e > 1e-5 {
                e = e.min(rel_err(a, central(H / 10.0)));
            }
            worst = worst.max(e);
        }
    }
    worst
}

/// Checks `stride`-spaced entries of every parameter of `model` against
/// central differences of `loss`. Returns the worst error and its parameter.
/// An entry that disagrees is retried with a step ten times smaller, since a
/// ReLU or max-pool kink inside the stencil spoils the wider difference.
pub fn model_gradient_error<F>(model: &Model, input: &Tensor, stride: usize, loss: F) -> (f64, String)
where
    F: for<'g> Fn(Var<'g>, &[Var<'g>]) -> Result<Var<'g>>,
{
    let value = |m: &Model| {
        let g = Graph::new();
        let out = m.forward(&g, g.constant(input.clone()), Mode::Train).unwrap();
        loss(out.logits, &out.taps).unwrap().item()
    };
    let g = Graph::new();
    let out = model.forward(&g, g.constant(input.clone()), Mode::Train).unwrap();
    let grads = g.backward(loss(out.logits, &out.taps).unwrap()).unwrap();
    let analytic: Vec<Tensor> = out.params.iter().map(|&v| grads.get_or_zeros(v)).collect();

    let mut probe = model.clone();
    let (mut worst, mut at) = (0.0f64, String::new());
    for (k, (name, t)) in model.params().iter().enumerate() {
        for i in (k % stride..t.numel()).step_by(stride).chain(std::iter::once(0)) {
            let x = t.data()[i];
            let mut central = |h: f64| {
                probe.param_values_mut().nth(k).unwrap().data_mut()[i] = x + h;
                let up = value(&probe);
                probe.param_values_mut().nth(k).unwrap().data_mut()[i] = x - h;
                let down = value(&probe);
                probe.param_values_mut().nth(k).unwrap().data_mut()[i] = x;
                (up - down) / (2.0 * h)
            };
            let a = analytic[k].data()[i];
            let mut e = rel_err(a, central(H));
            if e > 1e-5 {
                e = e.min(rel_err(a, central(H / 10.0)));
            }
            if e > worst {
                worst = e;
                at = format!("{name}[{i}]");
            }
        }
    }
    (worst, at)
}

/// `sum(y * w)` with fixed pseudo-random `w`.
pub fn weighted_sum<'g>(y: Var<'g>, seed: u64) -> Result<Var<'g>> {
    let w = y.graph().constant(rand_tensor(&y.shape(), seed));
    y.mul(w)?.sum()
}

/// The desk-scale data set: 16 preprocessed 32^3 phantoms with one to
/// three lesions each, split 12 / 2 / 2.
pub fn desk_dataset() -> (Vec<LabeledSample>, Vec<LabeledSample>, Vec<LabeledSample>) {
    let size = 32;
    let pre = PreprocessConfig { min_slices: size, inplane: None, ..PreprocessConfig::default() };
    let mut data: Vec<LabeledSample> = (0..16u64)
        .map(|seed| {
            let p = generate_phantom(seed, size, 1 + seed as usize % 3).unwrap();
            preprocess(p.raw_sample(), &pre).unwrap().sample().unwrap()
        })
        .collect();
    let test = data.split_off(14);
    let val = data.split_off(12);
    (data, val, test)
}
