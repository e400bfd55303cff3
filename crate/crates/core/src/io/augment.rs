//! Random flips, 90-degree rotations and crops applied jointly to image and
//! label. Every transform is a voxel permutation or zeroing, so labels keep
//! their exact value set.

use rand::Rng;

use crate::error::{Error, Result};
use crate::io::LabeledSample;
use crate::tensor::Tensor;

/// One concrete augmentation. Applied in the order crop, flips, rotation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AugmentDraw {
    /// Mirror along D, H, W.
    pub flips: [bool; 3],
    /// Quarter turns `k` in the plane of two spatial axes.
    pub rotation: Option<([usize; 2], usize)>,
    /// Box `(start, len)` kept; everything outside is zeroed.
    pub crop: Option<([usize; 3], [usize; 3])>,
}

const PLANES: [[usize; 2]; 3] = [[0, 1], [0, 2], [1, 2]];

impl AugmentDraw {
    pub fn identity() -> Self {
        AugmentDraw::default()
    }

    /// Draws a transform valid for a volume of extent `dims`. Rotations are
    /// only drawn in planes with equal extents so the shape is unchanged.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, dims: [usize; 3]) -> Self {
        let flips = [rng.random_bool(0.5), rng.random_bool(0.5), rng.random_bool(0.5)];
        let planes: Vec<[usize; 2]> = PLANES.into_iter().filter(|&[a, b]| dims[a] == dims[b]).collect();
        let rotation = if !planes.is_empty() && rng.random_bool(0.5) {
            Some((planes[rng.random_range(0..planes.len())], rng.random_range(1..4)))
        } else {
            None
        };
        let crop = rng.random_bool(0.3).then(|| {
            let mut start = [0; 3];
            let mut len = dims;
            for a in 0..3 {
                len[a] = rng.random_range((dims[a] * 3).div_ceil(4).max(1)..=dims[a]);
                start[a] = rng.random_range(0..=dims[a] - len[a]);
            }
            (start, len)
        });
        AugmentDraw { flips, rotation, crop }
    }

    /// Transforms a `[D, H, W]` volume.
    pub fn apply_volume(&self, t: &Tensor) -> Result<Tensor> {
        let s = t.shape();
        if s.len() != 3 {
            return Err(Error::shape("augment", format!("expected [D,H,W], got {s:?}")));
        }
        let dims = [s[0], s[1], s[2]];
        let mut out = t.clone();
        if let Some((start, len)) = self.crop {
            if (0..3).any(|a| start[a] + len[a] > dims[a]) {
                return Err(Error::invalid("augment", format!("crop {start:?}+{len:?} outside {dims:?}")));
            }
            out = Tensor::from_fn(s, |i| {
                let inside = (0..3).all(|a| i[a] >= start[a] && i[a] < start[a] + len[a]);
                if inside { t.get(i) } else { 0.0 }
            });
        }
        if self.flips.iter().any(|&f| f) {
            let src = out;
            out = Tensor::from_fn(s, |i| {
                let j: Vec<usize> = (0..3).map(|a| if self.flips[a] { dims[a] - 1 - i[a] } else { i[a] }).collect();
                src.get(&j)
            });
        }
        if let Some(([a, b], k)) = self.rotation {
            if a >= 3 || b >= 3 || a == b || (k % 2 == 1 && dims[a] != dims[b]) {
                return Err(Error::invalid("augment", format!("cannot rotate plane {a},{b} of {dims:?}")));
            }
            for _ in 0..k % 4 {
                let src = out;
                let n = dims[a];
                // one quarter turn: out[.., i, .., j, ..] = src[.., n-1-j, .., i, ..]
                out = Tensor::from_fn(s, |i| {
                    let mut j = i.to_vec();
                    j[a] = n - 1 - i[b];
                    j[b] = i[a];
                    src.get(&j)
                });
            }
        }
        Ok(out)
    }

    pub fn apply(&self, sample: &LabeledSample) -> Result<LabeledSample> {
        let [d, h, w] = sample.dims();
        let image = self.apply_volume(&sample.image.reshape(&[d, h, w])?)?.reshape(&[1, d, h, w])?;
        let label = self.apply_volume(&sample.label)?;
        let mut provenance = sample.provenance.clone();
        if *self != AugmentDraw::identity() {
            provenance.transforms.push(format!("augment({self:?})"));
        }
        Ok(LabeledSample { image, label, provenance })
    }
}

/// Draws and applies a random augmentation.
pub fn augment<R: Rng + ?Sized>(sample: &LabeledSample, rng: &mut R) -> LabeledSample {
    AugmentDraw::sample(rng, sample.dims()).apply(sample).expect("sampled draws fit the sample")
}
