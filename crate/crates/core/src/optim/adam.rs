use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Bias-corrected Adam moments for an ordered list of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, v: m.clone(), m }
    }
}

/// One Adam update in place. Nothing is modified if any gradient is
/// mis-shaped or non-finite.
pub fn adam_step<'a>(
    params: impl IntoIterator<Item = &'a mut Tensor>,
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    let mut params: Vec<&mut Tensor> = params.into_iter().collect();
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} parameters, {} gradients, {} moment buffers", params.len(), grads.len(), state.m.len()),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].shape() != g.shape() {
            return Err(Error::shape("adam_step", format!("parameter {i}: {:?} vs gradient {:?}", p.shape(), g.shape())));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter {i}")));
        }
    }
    state.t += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, (w, &g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_changes_nothing() {
        let mut p = vec![Tensor::full(&[3], 2.0)];
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &[Tensor::zeros(&[3])], &mut s, 0.1).unwrap();
        assert_eq!(p[0].data(), &[2.0; 3]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let g = Tensor::new(vec![3], vec![0.5, -3.0, 1e-3]).unwrap();
        let mut p = vec![Tensor::zeros(&[3])];
        let mut s = AdamState::new(&p);
        adam_step(&mut p, std::slice::from_ref(&g), &mut s, 1e-3).unwrap();
        for (w, gi) in p[0].data().iter().zip(g.data()) {
            let expect = -1e-3 * gi / (gi.abs() + 1e-8);
            assert!((w - expect).abs() < 1e-15);
            assert!((w + 1e-3 * gi.signum()).abs() < 1e-8);
        }
    }

    #[test]
    fn quadratic_descends_and_converges() {
        // f(w) = (w - 3)^2
        let mut p = vec![Tensor::scalar(0.0)];
        let mut s = AdamState::new(&p);
        let f = |w: f64| (w - 3.0).powi(2);
        let mut prev = f(0.0);
        for k in 0..2000 {
            let w = p[0].item();
            adam_step(&mut p, &[Tensor::scalar(2.0 * (w - 3.0))], &mut s, 1e-2).unwrap();
            if k < 2 {
                assert!(f(p[0].item()) < prev);
                prev = f(p[0].item());
            }
        }
        assert!((p[0].item() - 3.0).abs() < 1e-3);
    }

    #[test]
    fn bad_gradients_leave_state_untouched() {
        let mut p = vec![Tensor::zeros(&[2])];
        let mut s = AdamState::new(&p);
        assert!(adam_step(&mut p, &[Tensor::zeros(&[3])], &mut s, 0.1).is_err());
        assert!(matches!(
            adam_step(&mut p, &[Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap()], &mut s, 0.1),
            Err(Error::NonFinite(_))
        ));
        assert_eq!(s.t, 0);
        assert_eq!(p[0].data(), &[0.0, 0.0]);
    }
}
