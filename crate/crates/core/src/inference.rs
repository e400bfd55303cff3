//! Whole-volume segmentation and evaluation with a trained model.

use crate::error::{Error, Result};
use crate::io::LabeledSample;
use crate::metrics::{compute_metrics, confusion, MetricsTable};
use crate::networks::Model;
use crate::tensor::Tensor;

/// Grid the model accepts for a volume of extent `dims`: the fixed input
/// shape for models with a bottleneck transformer, otherwise `dims` rounded
/// up to the model's divisor.
pub fn padded_dims(model: &Model, dims: [usize; 3]) -> Result<[usize; 3]> {
    let cfg = model.config();
    if cfg.use_pam {
        let target = cfg.input_shape;
        if (0..3).any(|a| dims[a] > target[a]) {
            return Err(Error::shape("segment", format!("volume {dims:?} exceeds the model input {target:?}")));
        }
        Ok(target)
    } else {
        let k = cfg.divisor();
        Ok(dims.map(|d| d.div_ceil(k) * k))
    }
}

/// Binary foreground mask `[D, H, W]` for a normalized image `[1, D, H, W]`.
/// The volume is zero-padded at the far end to a shape the model accepts
/// and the prediction cropped back.
pub fn segment(model: &Model, image: &Tensor) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 4 || s[0] != model.config().input_channels {
        return Err(Error::shape("segment", format!("expected [C,D,H,W] with C={}, got {s:?}", model.config().input_channels)));
    }
    let dims = [s[1], s[2], s[3]];
    let [pd, ph, pw] = padded_dims(model, dims)?;
    let input = Tensor::from_fn(&[1, s[0], pd, ph, pw], |i| {
        if i[2] < dims[0] && i[3] < dims[1] && i[4] < dims[2] {
            image.get(&i[1..])
        } else {
            0.0
        }
    });
    let classes = model.predict(&input)?.logits.argmax_axis(1)?;
    Ok(Tensor::from_fn(&dims, |i| (classes.get(&[0, i[0], i[1], i[2]]) == 1.0) as u8 as f64))
}

/// Per-volume metrics of [`segment`] against each sample's label.
pub fn evaluate(model: &Model, samples: &[(String, LabeledSample)]) -> Result<MetricsTable> {
    let mut table = MetricsTable::default();
    for (name, s) in samples {
        let pred = segment(model, &s.image)?;
        table.push(name.clone(), compute_metrics(&confusion(&pred, &s.label)?));
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::rand_tensor;
    use crate::networks::{build_mpunet, build_unet3d, ModelConfig};

    #[test]
    fn padding_rules() {
        let cfg = ModelConfig { levels: 2, base_channels: 2, embed_dim: 8, input_shape: [8, 8, 8], ..ModelConfig::micro() };
        let mpu = build_mpunet(&cfg).unwrap();
        assert_eq!(padded_dims(&mpu, [5, 8, 7]).unwrap(), [8, 8, 8]);
        assert!(padded_dims(&mpu, [9, 8, 8]).is_err());
        let unet = build_unet3d(&cfg).unwrap();
        assert_eq!(padded_dims(&unet, [5, 8, 7]).unwrap(), [6, 8, 8]);
    }

    #[test]
    fn segment_crops_back_to_input() {
        let cfg = ModelConfig { levels: 2, base_channels: 2, embed_dim: 8, input_shape: [8, 8, 8], ..ModelConfig::micro() };
        let model = build_unet3d(&cfg).unwrap();
        let mask = segment(&model, &rand_tensor(&[1, 5, 6, 7], 1)).unwrap();
        assert_eq!(mask.shape(), &[5, 6, 7]);
        assert!(mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }
}
