//! Confusion counts and the six overlap metrics for a pair of masks, plus
//! the per-volume table the evaluator writes.
//!
//! `cargo run --example metrics`

use voxelseg::metrics::{compute_metrics, confusion, MetricsTable};
use voxelseg::Tensor;

fn ball(n: usize, centre: [f64; 3], radius: f64) -> Tensor {
    Tensor::from_fn(&[n, n, n], |i| {
        let d2: f64 = (0..3).map(|a| (i[a] as f64 - centre[a]).powi(2)).sum();
        (d2 <= radius * radius) as u8 as f64
    })
}

fn main() -> voxelseg::Result<()> {
    let truth = ball(20, [10.0; 3], 5.0);
    let mut table = MetricsTable::default();
    for (name, shift) in [("exact", 0.0), ("shift1", 1.0), ("shift3", 3.0)] {
        let pred = ball(20, [10.0 + shift, 10.0, 10.0], 5.0);
        let c = confusion(&pred, &truth)?;
        let r = compute_metrics(&c);
        println!("{name}: {c:?}  dice/(2-dice) = {:.6}, iou = {:.6}", r.dice / (2.0 - r.dice), r.iou);
        table.push(name, r);
    }
    print!("{}", table.to_csv());
    Ok(())
}
