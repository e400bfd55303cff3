//! Trains a small MPU-Net on phantoms, saves the best checkpoint, reloads
//! it and segments a held-out volume.
//!
//! `cargo run --release --example train_segment -- [iterations]`

use voxelseg::inference::segment;
use voxelseg::io::{generate_phantom, preprocess, LabeledSample, PreprocessConfig};
use voxelseg::loss::LossConfig;
use voxelseg::metrics::{compute_metrics, confusion};
use voxelseg::networks::{build_mpunet, ModelConfig};
use voxelseg::optim::{load_checkpoint, train_loop, TrainConfig};

fn main() -> voxelseg::Result<()> {
    let iterations = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(60);
    let size = 16;
    let pre = PreprocessConfig { min_slices: size, inplane: None, ..PreprocessConfig::default() };
    let data: Vec<LabeledSample> = (0..6u64)
        .map(|seed| Ok(preprocess(generate_phantom(seed, size, 2)?.raw_sample(), &pre)?.sample().expect("16 slices")))
        .collect::<voxelseg::Result<_>>()?;
    let (train, rest) = data.split_at(4);

    let mut model = build_mpunet(&ModelConfig { input_shape: [size; 3], seed: 1, ..ModelConfig::micro() })?;
    let tcfg = TrainConfig { initial_lr: 1e-2, max_iterations: iterations, validate_every: 10, seed: 1, ..TrainConfig::default() };
    let ckpt = std::env::temp_dir().join("voxelseg-train-segment.ckpt");
    let out = train_loop(&mut model, train, &rest[..1], &tcfg, &LossConfig::default(), Some(&ckpt))?;
    for v in &out.validations {
        println!("iteration {:4}  loss {:.4}  val dice {:.4}{}", v.iteration, out.history[v.iteration - 1].loss, v.report.dice, if v.improved { "  *" } else { "" });
    }

    let best = load_checkpoint(&ckpt)?.model()?;
    let held_out = &rest[1];
    let mask = segment(&best, &held_out.image)?;
    let r = compute_metrics(&confusion(&mask, &held_out.label)?);
    println!("held-out volume: {} predicted voxels, {} true, dice {:.4}", mask.sum(), held_out.label.sum(), r.dice);
    Ok(())
}
