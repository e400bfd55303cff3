//! Multi-head self-attention over a short token sequence and the position
//! attention module on a small feature map.
//!
//! `cargo run --example attention`

use voxelseg::attention::{multi_head_attention_weights, pam_forward, MultiHeadWeights, PamState, DEFAULT_AFFINITY_CAP};
use voxelseg::autodiff::{BatchNormMode, RunningStats};
use voxelseg::nn::{Conv, Norm};
use voxelseg::{Graph, Tensor};

fn wave(shape: &[usize], phase: f64) -> Tensor {
    let mut k = 0.0;
    Tensor::from_fn(shape, |_| {
        k += 1.0;
        (k * 0.7 + phase).sin()
    })
}

fn main() -> voxelseg::Result<()> {
    let g = Graph::new();
    let (d, n) = (8, 5);
    let w = |p| g.constant(wave(&[d, d], p));
    let mh = MultiHeadWeights { w_q: w(1.0), w_k: w(2.0), w_v: w(3.0), w_out: w(4.0), n_heads: 2 };
    let att = multi_head_attention_weights(g.constant(wave(&[d, n], 0.0)), &mh)?;
    for (h, s) in att.weights.iter().enumerate() {
        let s = s.value();
        println!("head {h} weights:");
        for i in 0..n {
            let row: Vec<String> = (0..n).map(|j| format!("{:.3}", s.get(&[i, j]))).collect();
            println!("  {}  (sum {:.12})", row.join(" "), (0..n).map(|j| s.get(&[i, j])).sum::<f64>());
        }
    }
    println!("output shape {:?}", att.output.shape());

    let c = 3;
    let f = wave(&[1, c, 2, 3, 2], 0.5);
    let conv = |p| Conv::new(g.constant(wave(&[c, c, 1, 1, 1], p)), Some(g.constant(Tensor::zeros(&[c]))));
    let state = |lambda: f64| PamState {
        norm: Norm { gamma: g.constant(Tensor::ones(&[c])), beta: g.constant(Tensor::zeros(&[c])), running: RunningStats::new(c), mode: BatchNormMode::Eval },
        prelu: g.constant(Tensor::new(vec![1], vec![0.25]).unwrap()),
        conv_a: conv(1.0),
        conv_b: conv(2.0),
        conv_c: conv(3.0),
        lambda: g.constant(Tensor::new(vec![1], vec![lambda]).unwrap()),
        affinity_cap: DEFAULT_AFFINITY_CAP,
    };
    for lambda in [0.0, 0.5] {
        let out = pam_forward(g.constant(f.clone()), &state(lambda))?;
        let changed = out.output.value().max_abs_diff(&f).unwrap_or(f64::NAN);
        let a = out.affinity[0].value();
        println!("lambda {lambda}: affinity {:?}, max change from input {changed:.6}, identical {}", a.shape(), out.output.value().bitwise_eq(&f));
    }
    Ok(())
}
