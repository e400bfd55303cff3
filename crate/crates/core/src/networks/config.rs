use std::fmt::Display;
use std::str::FromStr;

use crate::attention::DEFAULT_AFFINITY_CAP;
use crate::autodiff::Activation;
use crate::decoder::FusionWeights;
use crate::error::{Error, Result};

/// Architecture hyperparameters shared by the MPU-Net and U-Net builders.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub classes: usize,
    /// Encoder depth including the bottleneck level.
    pub levels: usize,
    pub base_channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub n_heads: usize,
    pub use_pam: bool,
    pub use_gates: bool,
    pub use_multiscale: bool,
    /// One weight per output tap (coarsest first); `None` is uniform.
    pub fusion_weights: Option<Vec<f64>>,
    /// Per-stage factor of the bottleneck upsampler.
    pub upsample_factor: usize,
    pub seed: u64,
    /// Spatial extents `[D, H, W]` the position embedding is sized for.
    pub input_shape: [usize; 3],
    pub gate_per_channel: bool,
    pub gate_activation: Activation,
    pub affinity_cap: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_channels: 1,
            classes: 2,
            levels: 4,
            base_channels: 8,
            patch_size: 2,
            embed_dim: 32,
            n_heads: 4,
            use_pam: true,
            use_gates: true,
            use_multiscale: true,
            fusion_weights: None,
            upsample_factor: 2,
            seed: 0,
            input_shape: [64, 64, 64],
            gate_per_channel: false,
            gate_activation: Activation::Relu,
            affinity_cap: DEFAULT_AFFINITY_CAP,
        }
    }
}

pub(crate) fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value.trim().parse().map_err(|e| Error::Config(format!("{key}: cannot parse `{value}`: {e}")))
}

pub(crate) fn parse_shape(key: &str, value: &str) -> Result<[usize; 3]> {
    let parts: Vec<&str> = value.trim().split('x').collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!("{key}: expected DxHxW, got `{value}`")));
    }
    Ok([parse(key, parts[0])?, parse(key, parts[1])?, parse(key, parts[2])?])
}

fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Relu => "relu",
        Activation::Elu => "elu",
        Activation::Sigmoid => "sigmoid",
    }
}

impl ModelConfig {
    /// Small configuration used for gradient checks and desk experiments.
    pub fn micro() -> Self {
        ModelConfig {
            levels: 3,
            base_channels: 4,
            patch_size: 2,
            embed_dim: 16,
            n_heads: 2,
            input_shape: [16, 16, 16],
            ..Self::default()
        }
    }

    /// Same architecture with every feature flag off.
    pub fn plain(&self) -> Self {
        ModelConfig { use_pam: false, use_gates: false, use_multiscale: false, ..self.clone() }
    }

    pub fn any_feature(&self) -> bool {
        self.use_pam || self.use_gates || self.use_multiscale
    }

    /// Channel width of encoder level `l`.
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Number of prediction taps fused into the final logits.
    pub fn n_taps(&self) -> usize {
        if self.use_multiscale {
            self.levels
        } else {
            1
        }
    }

    /// Every spatial extent must be a multiple of this.
    pub fn divisor(&self) -> usize {
        let pool = 1 << (self.levels.max(1) - 1);
        if self.use_pam {
            pool * self.patch_size
        } else {
            pool
        }
    }

    pub fn bottleneck_shape(&self) -> [usize; 3] {
        self.input_shape.map(|s| s >> (self.levels - 1))
    }

    pub fn patch_grid(&self) -> [usize; 3] {
        self.bottleneck_shape().map(|s| s / self.patch_size.max(1))
    }

    pub fn fusion(&self) -> Result<FusionWeights> {
        match &self.fusion_weights {
            None => Ok(FusionWeights::uniform(self.n_taps())),
            Some(w) => FusionWeights::new(w.clone()),
        }
    }

    /// Number of bottleneck upsampling stages, `log_factor(P)`.
    pub fn upsample_stages(&self) -> usize {
        let mut p = self.patch_size;
        let mut k = 0;
        while p > 1 {
            p /= self.upsample_factor;
            k += 1;
        }
        k
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.levels < 2 {
            return fail(format!("levels must be at least 2, got {}", self.levels));
        }
        if self.base_channels == 0 || self.input_channels == 0 {
            return fail("channel counts must be positive".into());
        }
        if self.classes < 2 {
            return fail(format!("need at least 2 classes (foreground is class 1), got {}", self.classes));
        }
        if self.embed_dim == 0 || self.n_heads == 0 || !self.embed_dim.is_multiple_of(self.n_heads) {
            return fail(format!("embed_dim {} must be a positive multiple of n_heads {}", self.embed_dim, self.n_heads));
        }
        if self.patch_size == 0 {
            return fail("patch_size must be positive".into());
        }
        if self.use_pam {
            if self.upsample_factor < 2 {
                return fail(format!("upsample_factor must be at least 2, got {}", self.upsample_factor));
            }
            if self.upsample_factor.pow(self.upsample_stages() as u32) != self.patch_size {
                return fail(format!(
                    "patch_size {} is not a power of upsample_factor {}",
                    self.patch_size, self.upsample_factor
                ));
            }
        }
        let div = self.divisor();
        if self.input_shape.iter().any(|&s| s == 0 || s % div != 0) {
            return fail(format!("resolution {:?} is not divisible by {div}", self.input_shape));
        }
        if self.use_pam {
            let positions: usize = self.patch_grid().iter().product();
            if positions > self.affinity_cap {
                return fail(format!("PAM grid of {positions} positions exceeds affinity_cap {}", self.affinity_cap));
            }
        }
        if let Some(w) = &self.fusion_weights {
            if w.len() != self.n_taps() {
                return fail(format!("{} fusion weights for {} taps", w.len(), self.n_taps()));
            }
            FusionWeights::new(w.clone())?;
        }
        Ok(())
    }

    /// Checks a `[D, H, W]` input resolution against the configuration.
    pub fn check_resolution(&self, dhw: &[usize]) -> Result<()> {
        if self.use_pam && dhw != self.input_shape {
            return Err(Error::shape(
                "forward",
                format!("input {dhw:?} differs from the configured resolution {:?}", self.input_shape),
            ));
        }
        let div = self.divisor();
        if dhw.len() != 3 || dhw.iter().any(|&s| s == 0 || s % div != 0) {
            return Err(Error::shape("forward", format!("input {dhw:?} is not divisible by {div}")));
        }
        Ok(())
    }

    /// `key=value` pairs covering every field, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let fusion = match &self.fusion_weights {
            None => "uniform".to_string(),
            Some(w) => w.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
        };
        let [d, h, w] = self.input_shape;
        vec![
            ("input_channels", self.input_channels.to_string()),
            ("classes", self.classes.to_string()),
            ("levels", self.levels.to_string()),
            ("base_channels", self.base_channels.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("use_pam", self.use_pam.to_string()),
            ("use_gates", self.use_gates.to_string()),
            ("use_multiscale", self.use_multiscale.to_string()),
            ("fusion_weights", fusion),
            ("upsample_factor", self.upsample_factor.to_string()),
            ("seed", self.seed.to_string()),
            ("input_shape", format!("{d}x{h}x{w}")),
            ("gate_per_channel", self.gate_per_channel.to_string()),
            ("gate_activation", activation_name(self.gate_activation).to_string()),
            ("affinity_cap", self.affinity_cap.to_string()),
        ]
    }

    /// Sets one field by key. Returns `false` when the key is not a model key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "input_channels" => self.input_channels = parse(key, value)?,
            "classes" => self.classes = parse(key, value)?,
            "levels" => self.levels = parse(key, value)?,
            "base_channels" => self.base_channels = parse(key, value)?,
            "patch_size" => self.patch_size = parse(key, value)?,
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "n_heads" => self.n_heads = parse(key, value)?,
            "use_pam" => self.use_pam = parse(key, value)?,
            "use_gates" => self.use_gates = parse(key, value)?,
            "use_multiscale" => self.use_multiscale = parse(key, value)?,
            "fusion_weights" => {
                self.fusion_weights = match value.trim() {
                    "uniform" => None,
                    v => Some(v.split(',').map(|x| parse(key, x)).collect::<Result<_>>()?),
                }
            }
            "upsample_factor" => self.upsample_factor = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "input_shape" => self.input_shape = parse_shape(key, value)?,
            "gate_per_channel" => self.gate_per_channel = parse(key, value)?,
            "gate_activation" => {
                self.gate_activation = match value.trim() {
                    "relu" => Activation::Relu,
                    "elu" => Activation::Elu,
                    "sigmoid" => Activation::Sigmoid,
                    v => return Err(Error::Config(format!("{key}: unknown activation `{v}`"))),
                }
            }
            "affinity_cap" => self.affinity_cap = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}
