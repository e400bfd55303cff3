//! Volume files, preprocessing, augmentation, synthetic phantoms and
//! dataset manifests.

pub mod augment;
pub mod manifest;
pub mod nifti;
pub mod phantom;
pub mod preprocess;

pub use augment::{augment, AugmentDraw};
pub use manifest::{split_counts, Manifest, ManifestEntry, Split};
pub use nifti::{read_nifti, write_nifti, Datatype, NiftiHeader};
pub use phantom::{generate_phantom, Phantom, PhantomConfig};
pub use preprocess::{preprocess, preprocess_image, restore_inplane, ForegroundClass, Preprocessed, PreprocessConfig};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Where a sample came from and what has been done to it.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Provenance {
    pub source: String,
    pub transforms: Vec<String>,
}

/// An image `[1, D, H, W]` with its spatially aligned label `[D, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub image: Tensor,
    pub label: Tensor,
    pub provenance: Provenance,
}

impl LabeledSample {
    pub fn new(image: Tensor, label: Tensor, source: impl Into<String>) -> Result<Self> {
        let s = image.shape();
        if s.len() != 4 || s[0] != 1 || s[1..] != *label.shape() {
            return Err(Error::shape("LabeledSample", format!("image {s:?} vs label {:?}", label.shape())));
        }
        Ok(LabeledSample { image, label, provenance: Provenance { source: source.into(), transforms: Vec::new() } })
    }

    /// Spatial extent `[D, H, W]`.
    pub fn dims(&self) -> [usize; 3] {
        let s = self.label.shape();
        [s[0], s[1], s[2]]
    }

    pub fn is_preprocessed(&self) -> bool {
        self.provenance.transforms.iter().any(|t| t.starts_with("preprocess"))
    }

    /// Loads an image/label pair of 3D NIfTI volumes.
    pub fn load(image: &std::path::Path, label: &std::path::Path) -> Result<Self> {
        let (_, img) = read_nifti(image)?;
        let (_, lab) = read_nifti(label)?;
        let s = img.shape().to_vec();
        if s.len() != 3 {
            return Err(Error::Dataset(format!("{}: expected a 3D volume, got shape {s:?}", image.display())));
        }
        if lab.shape() != s.as_slice() {
            return Err(Error::Dataset(format!(
                "{} and {} are not aligned ({s:?} vs {:?})",
                image.display(),
                label.display(),
                lab.shape()
            )));
        }
        LabeledSample::new(img.reshape(&[1, s[0], s[1], s[2]])?, lab, image.display().to_string())
    }
}
