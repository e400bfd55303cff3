//! Synthetic CT-like volumes: a smooth background, one large organ
//! ellipsoid and a few bright ellipsoidal lesions inside it, plus Gaussian
//! noise. Intensities are integer HU values.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::io::LabeledSample;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomConfig {
    pub size: usize,
    pub n_lesions: usize,
    /// Bounds on the lesion voxel fraction when at least one lesion is placed.
    pub lesion_fraction: [f64; 2],
    pub background_hu: f64,
    pub organ_hu: f64,
    pub lesion_hu: f64,
    pub noise_hu: f64,
}

impl PhantomConfig {
    pub fn new(size: usize, n_lesions: usize) -> Self {
        PhantomConfig {
            size,
            n_lesions,
            lesion_fraction: [0.005, 0.05],
            background_hu: -100.0,
            organ_hu: 60.0,
            lesion_hu: 180.0,
            noise_hu: 12.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    /// HU image `[1, S, S, S]` with the binary lesion mask as label.
    pub sample: LabeledSample,
    /// 0 background, 1 organ, 2 lesion.
    pub classes: Tensor,
    pub lesions: usize,
    pub requested: usize,
}

impl Phantom {
    /// The image paired with the three-class label, as a scanner dataset
    /// would provide it.
    pub fn raw_sample(&self) -> LabeledSample {
        LabeledSample { label: self.classes.clone(), ..self.sample.clone() }
    }

    pub fn lesion_fraction(&self) -> f64 {
        self.sample.label.mean()
    }
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2)).sum::<f64>() <= 1.0
    }

    /// Integer bounding box, clipped to `[0, n)`.
    fn bounds(&self, n: usize) -> [std::ops::Range<usize>; 3] {
        std::array::from_fn(|a| {
            let lo = (self.center[a] - self.radii[a]).floor().max(0.0) as usize;
            let hi = ((self.center[a] + self.radii[a]).ceil() as usize + 1).min(n);
            lo..hi
        })
    }
}

fn idx(n: usize, p: [usize; 3]) -> usize {
    (p[0] * n + p[1]) * n + p[2]
}

fn try_lesions(rng: &mut ChaCha8Rng, cfg: &PhantomConfig, organ: &[bool]) -> (Vec<bool>, usize) {
    let n = cfg.size;
    let total = (n * n * n) as f64;
    let mut mask = vec![false; organ.len()];
    if cfg.n_lesions == 0 {
        return (mask, 0);
    }
    let [lo, hi] = cfg.lesion_fraction;
    let target = rng.random_range(lo + 0.2 * (hi - lo)..lo + 0.6 * (hi - lo)) * total / cfg.n_lesions as f64;
    let mut placed = 0;
    for _ in 0..cfg.n_lesions {
        let r = (3.0 * target / (4.0 * PI)).cbrt();
        let e: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.85..1.15));
        let norm = (e[0] * e[1] * e[2]).cbrt();
        let radii = e.map(|x| r * x / norm);
        if radii.iter().any(|&x| 2.0 * x >= n as f64 - 1.0) {
            continue;
        }
        for _ in 0..100 {
            let center: [f64; 3] = std::array::from_fn(|a| rng.random_range(radii[a]..n as f64 - 1.0 - radii[a]));
            let lesion = Ellipsoid { center, radii };
            let grown = Ellipsoid { center, radii: radii.map(|x| x + 1.5) };
            let [bd, bh, bw] = grown.bounds(n);
            let mut voxels = Vec::new();
            let mut ok = true;
            'scan: for d in bd {
                for h in bh.clone() {
                    for w in bw.clone() {
                        let p = [d as f64, h as f64, w as f64];
                        let i = idx(n, [d, h, w]);
                        if grown.contains(p) && mask[i] {
                            ok = false;
                            break 'scan;
                        }
                        if lesion.contains(p) {
                            if !organ[i] {
                                ok = false;
                                break 'scan;
                            }
                            voxels.push(i);
                        }
                    }
                }
            }
            if ok && !voxels.is_empty() {
                voxels.into_iter().for_each(|i| mask[i] = true);
                placed += 1;
                break;
            }
        }
    }
    (mask, placed)
}

impl PhantomConfig {
    /// Deterministic in `(seed, self)`.
    pub fn generate(&self, seed: u64) -> Result<Phantom> {
        let n = self.size;
        if n < 16 {
            return Err(Error::invalid("generate_phantom", format!("size {n} is below the minimum of 16")));
        }
        let [flo, fhi] = self.lesion_fraction;
        if !(0.0 < flo && flo < fhi && fhi < 1.0) {
            return Err(Error::invalid("generate_phantom", format!("lesion_fraction {:?}", self.lesion_fraction)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nf = n as f64;
        let organ_shape = Ellipsoid {
            center: std::array::from_fn(|_| nf / 2.0 - 0.5 + rng.random_range(-0.05..0.05) * nf),
            radii: std::array::from_fn(|_| rng.random_range(0.30..0.40) * nf),
        };
        let mut organ = vec![false; n * n * n];
        for d in 0..n {
            for h in 0..n {
                for w in 0..n {
                    organ[idx(n, [d, h, w])] = organ_shape.contains([d as f64, h as f64, w as f64]);
                }
            }
        }

        let (mut lesions, mut placed) = (vec![false; organ.len()], 0);
        for _ in 0..20 {
            (lesions, placed) = try_lesions(&mut rng, self, &organ);
            let frac = lesions.iter().filter(|&&b| b).count() as f64 / organ.len() as f64;
            if placed == 0 || (flo..=fhi).contains(&frac) {
                break;
            }
        }
        let frac = lesions.iter().filter(|&&b| b).count() as f64 / organ.len() as f64;
        if placed > 0 && !(flo..=fhi).contains(&frac) {
            return Err(Error::invalid("generate_phantom", format!("lesion fraction {frac} outside {:?}", self.lesion_fraction)));
        }

        let freq: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.5..1.5) * 2.0 * PI / nf);
        let phase: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..2.0 * PI));
        let noise = Normal::new(0.0, self.noise_hu).expect("finite sigma");
        let mut image = Vec::with_capacity(organ.len());
        let mut classes = Vec::with_capacity(organ.len());
        for d in 0..n {
            for h in 0..n {
                for w in 0..n {
                    let i = idx(n, [d, h, w]);
                    let p = [d as f64, h as f64, w as f64];
                    let field: f64 = (0..3).map(|a| (freq[a] * p[a] + phase[a]).sin()).sum::<f64>() / 3.0;
                    let (base, class) = if lesions[i] {
                        (self.lesion_hu, 2.0)
                    } else if organ[i] {
                        (self.organ_hu + 8.0 * field, 1.0)
                    } else {
                        (self.background_hu + 25.0 * field, 0.0)
                    };
                    image.push((base + noise.sample(&mut rng)).round());
                    classes.push(class);
                }
            }
        }
        let image = Tensor::new(vec![1, n, n, n], image)?;
        let classes = Tensor::new(vec![n, n, n], classes)?;
        let label = classes.map(|c| (c == 2.0) as u8 as f64);
        let mut sample = LabeledSample::new(image, label, format!("phantom(seed={seed},size={n},lesions={})", self.n_lesions))?;
        sample.provenance.transforms.clear();
        Ok(Phantom { sample, classes, lesions: placed, requested: self.n_lesions })
    }
}

/// Phantom with default intensities and lesion-fraction bounds.
pub fn generate_phantom(seed: u64, size: usize, n_lesions: usize) -> Result<Phantom> {
    PhantomConfig::new(size, n_lesions).generate(seed)
}
