//! Hybrid Tversky + multi-scale binary cross-entropy loss.
//!
//! Probabilities here are foreground (class 1) probabilities; the background
//! probability is `1 - p`. Masks are binary foreground indicators.

use crate::autodiff::{resize_trilinear, Var};
use crate::error::{Error, Result};
use crate::networks::parse;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Weight on false positives.
    pub tversky_alpha: f64,
    /// Weight on false negatives.
    pub tversky_beta: f64,
    pub ce_weight: f64,
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { tversky_alpha: 0.3, tversky_beta: 0.7, ce_weight: 1.0, epsilon: 1e-7 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tversky_alpha > 0.0 && self.tversky_beta > 0.0) {
            return Err(Error::Config("tversky_alpha and tversky_beta must be positive".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1e-3) {
            return Err(Error::Config(format!("epsilon {} must lie in (0, 1e-3]", self.epsilon)));
        }
        if !(self.ce_weight >= 0.0 && self.ce_weight.is_finite()) {
            return Err(Error::Config(format!("ce_weight {} must be non-negative", self.ce_weight)));
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("tversky_alpha", self.tversky_alpha.to_string()),
            ("tversky_beta", self.tversky_beta.to_string()),
            ("ce_weight", self.ce_weight.to_string()),
            ("epsilon", self.epsilon.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "tversky_alpha" => self.tversky_alpha = parse(key, value)?,
            "tversky_beta" => self.tversky_beta = parse(key, value)?,
            "ce_weight" => self.ce_weight = parse(key, value)?,
            "epsilon" => self.epsilon = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

fn check_mask(op: &'static str, p: &[usize], g: &Tensor) -> Result<()> {
    if p != g.shape() {
        return Err(Error::shape(op, format!("prediction {p:?} vs mask {:?}", g.shape())));
    }
    if g.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid(op, "mask must be binary"));
    }
    Ok(())
}

/// `1 - TP / (TP + alpha FP + beta FN + eps)` with soft counts
/// `TP = sum p g`, `FP = sum p (1-g)`, `FN = sum (1-p) g`.
pub fn tversky_term<'g>(p: Var<'g>, g: &Tensor, alpha: f64, beta: f64, eps: f64) -> Result<Var<'g>> {
    check_mask("tversky_term", &p.shape(), g)?;
    if p.value().data().iter().any(|&v| !(-1e-9..=1.0 + 1e-9).contains(&v)) {
        return Err(Error::invalid("tversky_term", "probabilities must lie in [0, 1]"));
    }
    let graph = p.graph();
    let gm = graph.constant(g.clone());
    let inv = graph.constant(g.map(|v| 1.0 - v));
    let tp = p.mul(gm)?.sum()?;
    let fp = p.mul(inv)?.sum()?;
    let fn_ = p.neg()?.add_scalar(1.0)?.mul(gm)?.sum()?;
    let denom = tp.add(fp.scale(alpha)?)?.add(fn_.scale(beta)?)?.add_scalar(eps)?;
    tp.div(denom)?.neg()?.add_scalar(1.0)
}

/// Sum over taps of the voxel-mean binary cross-entropy. Each tap must
/// already be at the mask's resolution; probabilities are clamped to
/// `[eps, 1 - eps]`.
pub fn multiscale_cross_entropy<'g>(taps: &[Var<'g>], g: &Tensor, eps: f64) -> Result<Var<'g>> {
    let first = taps.first().ok_or_else(|| Error::invalid("multiscale_cross_entropy", "no taps"))?;
    let graph = first.graph();
    let gm = graph.constant(g.clone());
    let inv = graph.constant(g.map(|v| 1.0 - v));
    let mut total: Option<Var<'g>> = None;
    for &p in taps {
        check_mask("multiscale_cross_entropy", &p.shape(), g)?;
        let pc = p.clamp(eps, 1.0 - eps)?;
        let ll = pc.ln()?.mul(gm)?.add(pc.neg()?.add_scalar(1.0)?.ln()?.mul(inv)?)?;
        let term = ll.mean()?.neg()?;
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    Ok(total.expect("non-empty"))
}

/// `tversky(fused) + ce_weight * multiscale_cross_entropy(taps)`.
pub fn hybrid_loss<'g>(taps: &[Var<'g>], fused: Var<'g>, g: &Tensor, cfg: &LossConfig) -> Result<Var<'g>> {
    let t = tversky_term(fused, g, cfg.tversky_alpha, cfg.tversky_beta, cfg.epsilon)?;
    if cfg.ce_weight == 0.0 {
        return Ok(t);
    }
    t.add(multiscale_cross_entropy(taps, g, cfg.epsilon)?.scale(cfg.ce_weight)?)
}

/// Foreground probability `[N, 1, D, H, W]` from class logits `[N, J, D, H, W]`.
pub fn foreground_probability(logits: Var<'_>) -> Result<Var<'_>> {
    let s = logits.shape();
    if s.len() != 5 || s[1] < 2 {
        return Err(Error::shape("foreground_probability", format!("need [N,J>=2,D,H,W], got {s:?}")));
    }
    logits.softmax(1)?.narrow(1, 1, 1)
}

/// Binary foreground mask `[N, 1, D, H, W]` from integer labels `[N, D, H, W]`.
pub fn foreground_mask(labels: &Tensor) -> Result<Tensor> {
    let s = labels.shape();
    if s.len() != 4 {
        return Err(Error::shape("foreground_mask", format!("need [N,D,H,W], got {s:?}")));
    }
    labels.map(|v| if v == 1.0 { 1.0 } else { 0.0 }).reshape(&[s[0], 1, s[1], s[2], s[3]])
}

/// [`hybrid_loss`] evaluated on network outputs: fused logits and per-tap
/// logits (resized to the label grid here).
pub fn hybrid_loss_from_logits<'g>(logits: Var<'g>, taps: &[Var<'g>], labels: &Tensor, cfg: &LossConfig) -> Result<Var<'g>> {
    let g = foreground_mask(labels)?;
    let size = [g.shape()[2], g.shape()[3], g.shape()[4]];
    let fused = foreground_probability(logits)?;
    let probs = taps
        .iter()
        .map(|&t| {
            let t = if t.shape()[2..] == size { t } else { resize_trilinear(t, size)? };
            foreground_probability(t)
        })
        .collect::<Result<Vec<_>>>()?;
    hybrid_loss(&probs, fused, &g, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{max_rel_error, rand_tensor};
    use crate::autodiff::Graph;

    fn mask(shape: &[usize], seed: u64) -> Tensor {
        rand_tensor(shape, seed).map(|v| if v > 0.2 { 1.0 } else { 0.0 })
    }

    #[test]
    fn tversky_extremes() {
        let g = Graph::new();
        let m = mask(&[1, 1, 4, 4, 4], 1);
        let t = tversky_term(g.constant(m.clone()), &m, 0.3, 0.7, 1e-7).unwrap().item();
        assert!(t.abs() < 1e-7);
        let t = tversky_term(g.constant(m.map(|v| 1.0 - v)), &m, 0.3, 0.7, 1e-7).unwrap().item();
        assert!((t - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tversky_half_half_is_one_minus_dice() {
        let g = Graph::new();
        let (p, t) = (mask(&[10, 10, 10], 2), mask(&[10, 10, 10], 3));
        let v = tversky_term(g.constant(p.clone()), &t, 0.5, 0.5, 1e-7).unwrap().item();
        let tp: f64 = p.data().iter().zip(t.data()).map(|(a, b)| a * b).sum();
        let dice = 2.0 * tp / (p.sum() + t.sum());
        assert!((v - (1.0 - dice)).abs() < 1e-9);
    }

    #[test]
    fn tversky_rejects_bad_inputs() {
        let g = Graph::new();
        let m = mask(&[4], 1);
        assert!(tversky_term(g.constant(Tensor::full(&[4], 1.5)), &m, 0.3, 0.7, 1e-7).is_err());
        assert!(tversky_term(g.constant(Tensor::full(&[5], 0.5)), &m, 0.3, 0.7, 1e-7).is_err());
        assert!(tversky_term(g.constant(Tensor::full(&[4], 0.5)), &Tensor::full(&[4], 0.5), 0.3, 0.7, 1e-7).is_err());
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let g = Graph::new();
        let m = mask(&[1, 1, 3, 3, 3], 4);
        let half = g.constant(Tensor::full(m.shape(), 0.5));
        let v = multiscale_cross_entropy(&[half, half, half, half], &m, 1e-7).unwrap().item();
        assert!((v - 4.0 * 2f64.ln()).abs() < 1e-12);

        let one = Tensor::ones(&[1]);
        let v = multiscale_cross_entropy(&[g.constant(Tensor::full(&[1], 0.25))], &one, 1e-7).unwrap().item();
        assert!((v - 1.3862943611198906).abs() < 1e-12);

        let exact: Vec<Var> = (0..4).map(|_| g.constant(m.clone())).collect();
        let v = multiscale_cross_entropy(&exact, &m, 1e-7).unwrap().item();
        assert!(v <= 4.0 * -(1.0f64 - 1e-7).ln() + 1e-15);
        assert!(multiscale_cross_entropy(&[g.constant(Tensor::full(&[2], 0.5))], &one, 1e-7).is_err());
    }

    #[test]
    fn hybrid_perfect_and_pure_tversky() {
        let g = Graph::new();
        let m = mask(&[1, 1, 4, 4, 4], 5);
        let p = g.constant(m.clone());
        let cfg = LossConfig::default();
        let v = hybrid_loss(&[p, p, p, p], p, &m, &cfg).unwrap().item();
        assert!((0.0..10.0 * cfg.epsilon).contains(&v), "{v}");

        let soft = g.constant(rand_tensor(m.shape(), 6).map(|v| 0.5 + 0.4 * v));
        let no_ce = LossConfig { ce_weight: 0.0, ..cfg.clone() };
        let a = hybrid_loss(&[soft], soft, &m, &no_ce).unwrap().item();
        let b = tversky_term(soft, &m, 0.3, 0.7, 1e-7).unwrap().item();
        assert_eq!(a, b);
        assert!(hybrid_loss(&[soft], soft, &m, &cfg).unwrap().item() >= 0.0);
    }

    #[test]
    fn hybrid_gradient_wrt_logits() {
        let labels = Tensor::from_fn(&[1, 4, 4, 4], |i| ((i[1] + i[2] * i[3]) % 3) as f64);
        let cfg = LossConfig::default();
        let inputs = [rand_tensor(&[1, 3, 4, 4, 4], 7), rand_tensor(&[1, 3, 2, 2, 2], 8), rand_tensor(&[1, 3, 1, 1, 1], 9)];
        let err = max_rel_error(&inputs, |_, v| hybrid_loss_from_logits(v[0], &[v[2], v[1], v[0]], &labels, &cfg));
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig { epsilon: 0.1, ..LossConfig::default() }.validate().is_err());
        assert!(LossConfig { tversky_alpha: 0.0, ..LossConfig::default() }.validate().is_err());
    }
}
