//! Slice-count filtering, in-plane resizing, HU windowing and label
//! binarization.

use crate::autodiff::{resize_axis_linear, Graph};
use crate::error::{Error, Result};
use crate::io::LabeledSample;
use crate::networks::parse;
use crate::tensor::Tensor;

/// Which raw label classes count as foreground.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForegroundClass {
    /// Label 2 only.
    Tumor,
    /// Labels 1 and 2.
    Liver,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessConfig {
    pub min_slices: usize,
    /// Target `[H, W]`; `None` keeps the native in-plane size.
    pub inplane: Option<[usize; 2]>,
    /// HU values mapped to 0 and 1.
    pub window: [f64; 2],
    pub foreground: ForegroundClass,
    /// Depth is zero-padded at the far end up to a multiple of this.
    pub depth_multiple: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            min_slices: 48,
            inplane: Some([256, 256]),
            window: [-200.0, 250.0],
            foreground: ForegroundClass::Tumor,
            depth_multiple: 1,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.window[0] < self.window[1]) {
            return Err(Error::Config(format!("window {:?} must be increasing", self.window)));
        }
        if self.depth_multiple == 0 || self.inplane.is_some_and(|s| s.contains(&0)) {
            return Err(Error::Config("depth_multiple and inplane sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("min_slices", self.min_slices.to_string()),
            ("inplane", self.inplane.map_or("native".into(), |[h, w]| format!("{h}x{w}"))),
            ("window", format!("{},{}", self.window[0], self.window[1])),
            ("foreground", match self.foreground {
                ForegroundClass::Tumor => "tumor".into(),
                ForegroundClass::Liver => "liver".into(),
            }),
            ("depth_multiple", self.depth_multiple.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "min_slices" => self.min_slices = parse(key, value)?,
            "inplane" if value == "native" => self.inplane = None,
            "inplane" => {
                let v: Vec<usize> = value.split('x').map(|s| parse(key, s)).collect::<Result<_>>()?;
                let [h, w] = v[..] else {
                    return Err(Error::Config(format!("inplane `{value}` must look like 32x32 or native")));
                };
                self.inplane = Some([h, w]);
            }
            "window" => {
                let v: Vec<f64> = value.split(',').map(|s| parse(key, s.trim())).collect::<Result<_>>()?;
                let [lo, hi] = v[..] else {
                    return Err(Error::Config(format!("window `{value}` must be two comma-separated numbers")));
                };
                self.window = [lo, hi];
            }
            "foreground" => {
                self.foreground = match value {
                    "tumor" => ForegroundClass::Tumor,
                    "liver" => ForegroundClass::Liver,
                    _ => return Err(Error::Config(format!("foreground `{value}` must be tumor or liver"))),
                }
            }
            "depth_multiple" => self.depth_multiple = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Preprocessed {
    Sample(LabeledSample),
    Rejected(String),
}

impl Preprocessed {
    pub fn sample(self) -> Option<LabeledSample> {
        match self {
            Preprocessed::Sample(s) => Some(s),
            Preprocessed::Rejected(_) => None,
        }
    }
}

/// Nearest-neighbour resize of one axis (pixel-centre sampling).
fn resize_axis_nearest(t: &Tensor, axis: usize, out: usize) -> Tensor {
    let n = t.shape()[axis];
    let mut shape = t.shape().to_vec();
    shape[axis] = out;
    Tensor::from_fn(&shape, |idx| {
        let mut src = idx.to_vec();
        src[axis] = (((idx[axis] as f64 + 0.5) * n as f64 / out as f64) as usize).min(n - 1);
        t.get(&src)
    })
}

fn resize_axis_image(t: &Tensor, axis: usize, out: usize) -> Result<Tensor> {
    let g = Graph::new();
    Ok(resize_axis_linear(g.constant(t.clone()), axis, out)?.value())
}

fn window(t: &Tensor, [lo, hi]: [f64; 2]) -> Tensor {
    t.map(|v| ((v.clamp(lo, hi) - lo) / (hi - lo)).clamp(0.0, 1.0))
}

/// The image half of [`preprocess`] for unlabeled volumes: in-plane
/// resizing and windowing of a raw `[1, D, H, W]` image. Depth is left alone.
pub fn preprocess_image(image: &Tensor, cfg: &PreprocessConfig) -> Result<Tensor> {
    cfg.validate()?;
    let s = image.shape();
    if s.len() != 4 || s[0] != 1 {
        return Err(Error::shape("preprocess_image", format!("expected [1,D,H,W], got {s:?}")));
    }
    let mut out = image.clone();
    if let Some([th, tw]) = cfg.inplane {
        if [s[2], s[3]] != [th, tw] {
            out = resize_axis_image(&resize_axis_image(&out, 2, th)?, 3, tw)?;
        }
    }
    Ok(window(&out, cfg.window))
}

/// Nearest-neighbour resize of a `[D, H, W]` mask back to in-plane size `hw`.
pub fn restore_inplane(mask: &Tensor, hw: [usize; 2]) -> Result<Tensor> {
    if mask.shape().len() != 3 {
        return Err(Error::shape("restore_inplane", format!("expected [D,H,W], got {:?}", mask.shape())));
    }
    Ok(resize_axis_nearest(&resize_axis_nearest(mask, 1, hw[0]), 2, hw[1]))
}

/// Brings a raw sample into network-ready form. Already preprocessed
/// samples only get the geometric steps they still need, so applying this
/// twice is the same as applying it once.
pub fn preprocess(sample: LabeledSample, cfg: &PreprocessConfig) -> Result<Preprocessed> {
    cfg.validate()?;
    let s = sample.image.shape();
    if s.len() != 4 || s[0] != 1 || s[1..] != *sample.label.shape() {
        return Err(Error::shape("preprocess", format!("image {s:?} vs label {:?}", sample.label.shape())));
    }
    let [d, h, w] = sample.dims();
    if d < cfg.min_slices {
        return Ok(Preprocessed::Rejected(format!(
            "{}: {d} slices, below the minimum of {}",
            sample.provenance.source, cfg.min_slices
        )));
    }
    let LabeledSample { mut image, mut label, mut provenance } = sample;
    let mut steps = Vec::new();
    let fresh = !provenance.transforms.iter().any(|t| t.starts_with("preprocess"));

    if let Some([th, tw]) = cfg.inplane {
        if [h, w] != [th, tw] {
            image = resize_axis_image(&resize_axis_image(&image, 2, th)?, 3, tw)?;
            label = resize_axis_nearest(&resize_axis_nearest(&label, 1, th), 2, tw);
            steps.push(format!("resize={th}x{tw}"));
        }
    }
    if fresh {
        let [lo, hi] = cfg.window;
        image = window(&image, cfg.window);
        steps.push(format!("window={lo},{hi}"));
        if let Some(&bad) = label.data().iter().find(|&&v| v < 0.0 || v.fract() != 0.0) {
            return Err(Error::Dataset(format!("{}: label value {bad} is not a class index", provenance.source)));
        }
        let fg = cfg.foreground;
        label = label.map(|v| match fg {
            ForegroundClass::Tumor => (v == 2.0) as u8 as f64,
            ForegroundClass::Liver => (v >= 1.0) as u8 as f64,
        });
        steps.push(format!("foreground={fg:?}").to_lowercase());
    }
    let padded = d.div_ceil(cfg.depth_multiple) * cfg.depth_multiple;
    if padded != d {
        let ls = label.shape().to_vec();
        let pad = |t: &Tensor, off: usize| {
            let mut shape = t.shape().to_vec();
            shape[off] = padded;
            Tensor::from_fn(&shape, |i| if i[off] < d { t.get(i) } else { 0.0 })
        };
        image = pad(&image, 1);
        label = pad(&label, 0);
        steps.push(format!("pad_depth={}->{padded}", ls[0]));
    }
    if !steps.is_empty() {
        provenance.transforms.push(format!("preprocess({})", steps.join(";")));
    }
    Ok(Preprocessed::Sample(LabeledSample { image, label, provenance }))
}
