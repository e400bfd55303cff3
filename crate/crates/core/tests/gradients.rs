mod common;

use common::{model_gradient_error, rand_tensor};
use voxelseg::loss::{hybrid_loss_from_logits, LossConfig};
use voxelseg::networks::{build_mpunet, ModelConfig};
use voxelseg::Tensor;

#[test]
fn full_micro_model_matches_finite_differences() {
    let cfg = ModelConfig { input_shape: [16; 3], ..ModelConfig::micro() };
    let model = build_mpunet(&cfg).unwrap();
    let x = rand_tensor(&[1, 1, 16, 16, 16], 3);
    let labels = Tensor::from_fn(&[1, 16, 16, 16], |i| if (i[1] + 2 * i[2] + i[3]) % 7 == 0 { 1.0 } else { 0.0 });
    let lcfg = LossConfig::default();
    let (err, at) = model_gradient_error(&model, &x, 29, |logits, taps| hybrid_loss_from_logits(logits, taps, &labels, &lcfg));
    assert!(err < 1e-4, "{err} at {at}");
}

