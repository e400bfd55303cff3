//! Reverse-mode gradients on a small convolutional graph, checked against
//! a central difference.
//!
//! `cargo run --example autodiff`

use voxelseg::autodiff::conv3d;
use voxelseg::{Graph, Tensor};

fn loss(x: &Tensor, w: &Tensor) -> voxelseg::Result<f64> {
    let g = Graph::new();
    Ok(conv3d(g.constant(x.clone()), g.constant(w.clone()), None, 1, 1)?.elu()?.mean()?.item())
}

fn main() -> voxelseg::Result<()> {
    let x = Tensor::from_fn(&[1, 2, 4, 4, 4], |i| ((i[2] * 7 + i[3] * 3 + i[4] + i[1]) % 5) as f64 / 5.0 - 0.4);
    let w = Tensor::from_fn(&[3, 2, 3, 3, 3], |i| ((i.iter().sum::<usize>() % 7) as f64 - 3.0) / 10.0);

    let g = Graph::new();
    let wv = g.param(w.clone());
    let out = conv3d(g.constant(x.clone()), wv, None, 1, 1)?.elu()?.mean()?;
    let grads = g.backward(out)?;
    let dw = grads.get_or_zeros(wv);
    println!("loss {:.6}, tape length {}", out.item(), g.len());

    let h = 1e-5;
    for k in [0, 17, 80, 161] {
        let (mut up, mut down) = (w.clone(), w.clone());
        up.data_mut()[k] += h;
        down.data_mut()[k] -= h;
        let numeric = (loss(&x, &up)? - loss(&x, &down)?) / (2.0 * h);
        println!("dL/dw[{k:3}]  reverse {:+.9}  central {:+.9}", dw.data()[k], numeric);
    }
    Ok(())
}
