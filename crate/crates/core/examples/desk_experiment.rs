//! Trains MPU-Net and the plain 3D U-Net on the same synthetic phantoms for
//! several model seeds and compares median test Dice, alongside a
//! fixed-threshold baseline.
//!
//! `cargo run --release --example desk_experiment -- [iterations] [seeds]`
//!
//! `LR` overrides the initial learning rate (default 1e-2).

use std::time::Instant;

use voxelseg::inference::evaluate;
use voxelseg::io::{generate_phantom, preprocess, LabeledSample, PreprocessConfig};
use voxelseg::loss::LossConfig;
use voxelseg::metrics::{compute_metrics, confusion, ConfusionCounts};
use voxelseg::networks::{build_mpunet, build_unet3d, ModelConfig};
use voxelseg::optim::{train_loop, TrainConfig};

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn main() -> voxelseg::Result<()> {
    let arg = |i: usize| std::env::args().nth(i).and_then(|s| s.parse().ok());
    let iterations = arg(1).unwrap_or(300);
    let seeds: u64 = arg(2).map_or(3, |s: usize| s as u64);
    let lr = std::env::var("LR").ok().and_then(|s| s.parse().ok()).unwrap_or(1e-2);
    let size = 32;
    let pre = PreprocessConfig { min_slices: size, inplane: None, ..Default::default() };
    let data: Vec<LabeledSample> = (0..16u64)
        .map(|seed| {
            let p = generate_phantom(seed, size, 1 + seed as usize % 3)?;
            Ok(preprocess(p.raw_sample(), &pre)?.sample().expect("32 slices"))
        })
        .collect::<voxelseg::Result<_>>()?;
    let (train, rest) = data.split_at(12);
    let (val, test) = rest.split_at(2);
    let named: Vec<_> = test.iter().map(|s| (s.provenance.source.clone(), s.clone())).collect();

    // halfway between organ (60 HU) and lesion (180 HU) after windowing
    let mut c = ConfusionCounts::default();
    for s in test {
        c = c + confusion(&s.image.map(|v| (v > 320.0 / 450.0) as u8 as f64).reshape(s.label.shape())?, &s.label)?;
    }
    println!("threshold baseline dice {:.4}", compute_metrics(&c).dice);

    let tcfg = TrainConfig { initial_lr: lr, max_iterations: iterations, seed: 1, ..Default::default() };
    let (mut mpu, mut unet) = (Vec::new(), Vec::new());
    for seed in 0..seeds {
        let cfg = ModelConfig { input_shape: [size; 3], seed, ..ModelConfig::micro() };
        for (name, mut model) in [("mpunet", build_mpunet(&cfg)?), ("unet", build_unet3d(&cfg)?)] {
            let t = Instant::now();
            let out = train_loop(&mut model, train, val, &tcfg, &LossConfig::default(), None)?;
            let best = out.best.expect("at least one validation").model()?;
            let first = out.history.first().map_or(f64::NAN, |h| h.loss);
            let last = out.history.last().map_or(f64::NAN, |h| h.loss);
            let dice = evaluate(&best, &named)?.average().dice;
            println!(
                "{name} seed {seed}: loss {first:.4} -> {last:.4}, best val dice {:.4}, test dice {dice:.4}, {:.1}s",
                out.validations.iter().map(|v| v.report.dice).fold(0.0, f64::max),
                t.elapsed().as_secs_f64()
            );
            if name == "mpunet" { &mut mpu } else { &mut unet }.push(dice);
        }
    }
    println!("median test dice: mpunet {:.4}, unet {:.4}", median(mpu), median(unet));
    Ok(())
}
