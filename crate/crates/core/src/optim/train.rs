use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::inference::evaluate;
use crate::io::{augment, LabeledSample};
use crate::loss::{hybrid_loss_from_logits, LossConfig};
use crate::metrics::{MetricsReport, CSV_HEADER};
use crate::networks::{parse, Mode, Model};
use crate::optim::{adam_step, save_checkpoint, AdamState, Checkpoint};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub halve_every: usize,
    pub max_iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Validate after every this many iterations, and after the last one.
    pub validate_every: usize,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            initial_lr: 1e-4,
            halve_every: 100,
            max_iterations: 300,
            batch_size: 1,
            seed: 0,
            validate_every: 10,
            augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::Config(format!("initial_lr {} must be positive", self.initial_lr)));
        }
        if self.halve_every == 0 || self.batch_size == 0 || self.validate_every == 0 {
            return Err(Error::Config("halve_every, batch_size and validate_every must be at least 1".into()));
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("initial_lr", self.initial_lr.to_string()),
            ("halve_every", self.halve_every.to_string()),
            ("max_iterations", self.max_iterations.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("train_seed", self.seed.to_string()),
            ("validate_every", self.validate_every.to_string()),
            ("augment", self.augment.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "initial_lr" => self.initial_lr = parse(key, value)?,
            "halve_every" => self.halve_every = parse(key, value)?,
            "max_iterations" => self.max_iterations = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "train_seed" => self.seed = parse(key, value)?,
            "validate_every" => self.validate_every = parse(key, value)?,
            "augment" => self.augment = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// `initial_lr * 0.5^floor(iteration / halve_every)`.
pub fn lr_schedule(iteration: usize, cfg: &TrainConfig) -> f64 {
    let halvings = (iteration / cfg.halve_every.max(1)).min(i32::MAX as usize) as i32;
    cfg.initial_lr * 0.5f64.powi(halvings)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    /// 1-based.
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Validation {
    pub iteration: usize,
    pub report: MetricsReport,
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<HistoryRow>,
    pub validations: Vec<Validation>,
    pub best: Option<Checkpoint>,
}

impl TrainOutcome {
    /// `iteration,lr,loss` plus the metric columns, filled on validation rows.
    pub fn history_csv(&self) -> String {
        let metrics = CSV_HEADER.split_once(',').map_or("", |(_, m)| m);
        let mut s = format!("iteration,lr,loss,{metrics}\n");
        for h in &self.history {
            let _ = write!(s, "{},{:e},{:.9}", h.iteration, h.lr, h.loss);
            match self.validations.iter().find(|v| v.iteration == h.iteration) {
                Some(v) => {
                    let r = v.report;
                    let _ = writeln!(
                        s,
                        ",{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                        r.dice, r.accuracy, r.precision, r.specificity, r.iou, r.mcc
                    );
                }
                None => s.push_str(",,,,,,\n"),
            }
        }
        s
    }
}

fn stack(samples: &[LabeledSample]) -> Result<(Tensor, Tensor)> {
    let [d, h, w] = samples[0].dims();
    let mut img = Vec::with_capacity(samples.len() * d * h * w);
    let mut lab = Vec::with_capacity(img.capacity());
    for s in samples {
        if s.dims() != [d, h, w] {
            return Err(Error::Dataset(format!("batch mixes volume sizes {:?} and {:?}", [d, h, w], s.dims())));
        }
        img.extend_from_slice(s.image.data());
        lab.extend_from_slice(s.label.data());
    }
    let n = samples.len();
    Ok((Tensor::new(vec![n, 1, d, h, w], img)?, Tensor::new(vec![n, d, h, w], lab)?))
}

/// Trains `model` in place with Adam and keeps the parameters that scored
/// the best mean validation Dice. The best checkpoint is written to
/// `checkpoint` (if given) each time validation Dice strictly improves.
///
/// Sample order and augmentation draws come from one generator seeded by
/// `tcfg.seed`, so runs are reproducible.
pub fn train_loop(
    model: &mut Model,
    train: &[LabeledSample],
    val: &[LabeledSample],
    tcfg: &TrainConfig,
    lcfg: &LossConfig,
    checkpoint: Option<&Path>,
) -> Result<TrainOutcome> {
    tcfg.validate()?;
    lcfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Dataset(format!("need training and validation data, got {} and {}", train.len(), val.len())));
    }
    let val: Vec<(String, LabeledSample)> =
        val.iter().map(|s| (s.provenance.source.clone(), s.clone())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut adam = AdamState::new(model.params().iter().map(|(_, t)| t));
    let mut out = TrainOutcome { history: Vec::new(), validations: Vec::new(), best: None };
    let mut best_dice = f64::NEG_INFINITY;
    let mut order: Vec<usize> = Vec::new();

    for it in 0..tcfg.max_iterations {
        let mut batch = Vec::with_capacity(tcfg.batch_size);
        while batch.len() < tcfg.batch_size {
            if order.is_empty() {
                order = (0..train.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            let s = &train[order.pop().expect("refilled")];
            batch.push(if tcfg.augment { augment(s, &mut rng) } else { s.clone() });
        }
        let (x, labels) = stack(&batch)?;
        let lr = lr_schedule(it, tcfg);
        let diverged = |loss: f64| Error::Diverged { iteration: it + 1, loss };

        let g = Graph::new();
        let step = model
            .forward(&g, g.constant(x), Mode::Train)
            .and_then(|fp| Ok((hybrid_loss_from_logits(fp.logits, &fp.taps, &labels, lcfg)?, fp)));
        let (loss, fp) = match step {
            Ok(v) => v,
            Err(Error::NonFinite(_)) => return Err(diverged(f64::NAN)),
            Err(e) => return Err(e),
        };
        let value = loss.item();
        if !value.is_finite() {
            return Err(diverged(value));
        }
        let grads = g.backward(loss)?;
        let grads: Vec<Tensor> = fp.params.iter().map(|&p| grads.get_or_zeros(p)).collect();
        match adam_step(model.param_values_mut(), &grads, &mut adam, lr) {
            Err(Error::NonFinite(_)) => return Err(diverged(value)),
            r => r?,
        }
        model.apply_bn_updates(fp.bn_updates);
        out.history.push(HistoryRow { iteration: it + 1, lr, loss: value });

        if (it + 1) % tcfg.validate_every == 0 || it + 1 == tcfg.max_iterations {
            let report = evaluate(model, &val)?.average();
            let improved = report.dice > best_dice;
            if improved {
                best_dice = report.dice;
                let ck = Checkpoint::capture(model, &adam, it + 1, best_dice, &rng);
                if let Some(p) = checkpoint {
                    save_checkpoint(p, &ck)?;
                }
                out.best = Some(ck);
            }
            out.validations.push(Validation { iteration: it + 1, report, improved });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::generate_phantom;
    use crate::networks::{build_mpunet, ModelConfig};

    #[test]
    fn schedule_values() {
        let c = TrainConfig::default();
        assert_eq!(lr_schedule(0, &c), 1e-4);
        assert_eq!(lr_schedule(99, &c), 1e-4);
        assert_eq!(lr_schedule(100, &c), 5e-5);
        assert_eq!(lr_schedule(200, &c), 2.5e-5);
        let one = TrainConfig { halve_every: 1, ..c };
        assert_eq!(lr_schedule(10, &one), 1e-4 / 1024.0);
    }

    fn data() -> Vec<LabeledSample> {
        (0..3)
            .map(|s| {
                let p = generate_phantom(s, 16, 1).unwrap();
                let mut x = p.sample.clone();
                x.image = x.image.map(|v| ((v + 200.0) / 450.0).clamp(0.0, 1.0));
                x
            })
            .collect()
    }

    fn cfg() -> ModelConfig {
        ModelConfig { levels: 2, base_channels: 2, embed_dim: 8, input_shape: [16, 16, 16], ..ModelConfig::micro() }
    }

    #[test]
    fn zero_iterations_do_nothing() {
        let mut m = build_mpunet(&cfg()).unwrap();
        let before = m.clone();
        let d = data();
        let t = TrainConfig { max_iterations: 0, ..Default::default() };
        let out = train_loop(&mut m, &d[..2], &d[2..], &t, &LossConfig::default(), None).unwrap();
        assert!(out.history.is_empty() && out.best.is_none());
        assert_eq!(m, before);
    }

    #[test]
    fn seeded_runs_repeat_and_best_is_monotone() {
        let d = data();
        let t = TrainConfig { max_iterations: 6, validate_every: 2, initial_lr: 1e-2, augment: true, ..Default::default() };
        let run = || {
            let mut m = build_mpunet(&cfg()).unwrap();
            train_loop(&mut m, &d[..2], &d[2..], &t, &LossConfig::default(), None).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.history.len(), 6);
        let bits = |o: &TrainOutcome| o.history.iter().map(|h| h.loss.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.best, b.best);
        let best = a.best.as_ref().unwrap().best_dice;
        assert!(a.validations.iter().all(|v| v.report.dice <= best));
        assert_eq!(a.validations.iter().filter(|v| v.report.dice == best && v.improved).count(), 1);
        assert_eq!(a.history_csv().lines().count(), 7);
    }

    #[test]
    fn empty_sets_are_rejected() {
        let mut m = build_mpunet(&cfg()).unwrap();
        let d = data();
        assert!(train_loop(&mut m, &d, &[], &TrainConfig::default(), &LossConfig::default(), None).is_err());
    }

    #[test]
    fn divergence_is_reported_and_best_checkpoint_kept() {
        let dir = tempfile::tempdir().unwrap();
        let ck = dir.path().join("best.ckpt");
        let d = data();
        let mut m = build_mpunet(&cfg()).unwrap();
        let t = TrainConfig { max_iterations: 2, validate_every: 1, ..Default::default() };
        train_loop(&mut m, &d[..2], &d[2..], &t, &LossConfig::default(), Some(&ck)).unwrap();
        let saved = std::fs::read(&ck).unwrap();
        let mut poisoned = d.clone();
        poisoned[0].image.data_mut()[0] = f64::INFINITY;
        poisoned[1].image.data_mut()[0] = f64::INFINITY;
        let err = train_loop(&mut m, &poisoned[..2], &d[2..], &t, &LossConfig::default(), Some(&ck)).unwrap_err();
        assert!(matches!(err, Error::Diverged { iteration: 1, .. }), "{err}");
        assert_eq!(std::fs::read(&ck).unwrap(), saved);
    }
}
