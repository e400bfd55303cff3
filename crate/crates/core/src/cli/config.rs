//! Run configuration: one flat `key = value` file covering the model,
//! training, loss and preprocessing settings plus data paths.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::io::PreprocessConfig;
use crate::loss::LossConfig;
use crate::networks::{build_mpunet, build_unet3d, Model, ModelConfig};
use crate::optim::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    MpuNet,
    UNet,
}

impl Arch {
    pub fn build(self, cfg: &ModelConfig) -> Result<Model> {
        match self {
            Arch::MpuNet => build_mpunet(cfg),
            Arch::UNet => build_unet3d(cfg),
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::MpuNet => "mpunet",
            Arch::UNet => "unet",
        })
    }
}

impl FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mpunet" => Ok(Arch::MpuNet),
            "unet" => Ok(Arch::UNet),
            _ => Err(Error::Config(format!("model must be mpunet or unet, got `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub arch: Arch,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub preprocess: PreprocessConfig,
    pub manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            arch: Arch::MpuNet,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            preprocess: PreprocessConfig::default(),
            manifest: None,
            out_dir: PathBuf::from("run"),
        }
    }
}

impl RunConfig {
    /// Sets one key. Keys belong to exactly one section; anything else is an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "model" => self.arch = value.parse()?,
            "manifest" => self.manifest = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = PathBuf::from(value),
            _ => {
                let known = self.model.set(key, value)?
                    || self.train.set(key, value)?
                    || self.loss.set(key, value)?
                    || self.preprocess.set(key, value)?;
                if !known {
                    return Err(Error::Config(format!("unknown key `{key}`")));
                }
            }
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the current values. Blank lines
    /// and `#` comments are skipped; errors name `origin` and the line.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |e: Error| Error::Config(format!("{origin}:{}: {}", n + 1, strip(e)));
            let (k, v) = line.split_once('=').ok_or_else(|| at(Error::Config(format!("expected key = value, got `{line}`"))))?;
            self.set(k.trim(), v.trim()).map_err(at)?;
        }
        Ok(())
    }

    /// Applies an override of the form `key=value`.
    pub fn apply_override(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair.split_once('=').ok_or_else(|| Error::Config(format!("override `{pair}` is not key=value")))?;
        self.set(k.trim(), v.trim()).map_err(|e| Error::Config(format!("--set {pair}: {}", strip(e))))
    }

    /// Reads a config file. A relative manifest path is taken relative to
    /// the file's directory and stored absolute, so the echoed config works
    /// from anywhere.
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        if let Some(m) = &cfg.manifest {
            let joined = path.parent().unwrap_or(Path::new("")).join(m);
            cfg.manifest = Some(std::path::absolute(&joined).map_err(|e| Error::io(joined, e))?);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.preprocess.validate()
    }

    /// Every setting, one `key = value` per line, grouped by section.
    /// Reading this text back gives an identical config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut section = |title: &str, entries: Vec<(&str, String)>| {
            s.push_str(&format!("# {title}\n"));
            for (k, v) in entries {
                s.push_str(&format!("{k} = {v}\n"));
            }
        };
        let mut run = vec![("model", self.arch.to_string()), ("out_dir", self.out_dir.display().to_string())];
        if let Some(m) = &self.manifest {
            run.push(("manifest", m.display().to_string()));
        }
        section("run", run);
        section("network", self.model.entries());
        section("training", self.train.entries());
        section("loss", self.loss.entries());
        section("preprocessing", self.preprocess.entries());
        s
    }
}

/// Drops the variant prefix so nested config errors read as one message.
fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        e => e.to_string(),
    }
}
