//! The `voxelseg` command line: phantom generation, training, evaluation,
//! segmentation and header inspection.

mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

pub use config::{Arch, RunConfig};

use crate::error::{Error, Result};
use crate::inference::{evaluate, segment};
use crate::io::{
    generate_phantom, preprocess, preprocess_image, read_nifti, restore_inplane, split_counts, write_nifti, Datatype,
    LabeledSample, Manifest, ManifestEntry, NiftiHeader, PreprocessConfig, Preprocessed, Split,
};
use crate::metrics::CSV_HEADER;
use crate::optim::{load_checkpoint, train_loop};

pub const THREADS_ENV: &str = "VOXELSEG_THREADS";

#[derive(Debug, Parser)]
#[command(name = "voxelseg", version, about = "3D segmentation with MPU-Net and 3D U-Net")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic CT phantoms and a train/val/test manifest.
    Phantom {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a network on the manifest's train split.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's `model` key.
        #[arg(long)]
        model: Option<String>,
        /// Overrides the config's `out_dir` key.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Extra `key=value` settings applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Score a checkpoint on one manifest split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Preprocessing settings; defaults to the `config.txt` next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write the table here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Segment one volume into a binary uint8 mask.
    Segment {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print a NIfTI header as key=value lines.
    Inspect {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

/// Worker count requested through the environment, if any.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        },
    }
}

/// Runs one command, sending tables and summaries to `out` and warnings
/// to `warn`.
pub fn run(cli: Cli, out: &mut dyn Write, warn: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Phantom { out: dir, count, size, seed } => {
            let m = cmd_phantom(&dir, count, size, seed)?;
            let [a, b, c] = [Split::Train, Split::Val, Split::Test].map(|s| m.split(s).count());
            say(out, format!("wrote {count} phantoms to {} (train {a}, val {b}, test {c})\n", dir.display()))
        }
        Command::Train { config, model, out: dir, overrides } => {
            let mut cfg = RunConfig::read(&config)?;
            if let Some(m) = model {
                cfg.arch = m.parse()?;
            }
            if let Some(d) = dir {
                cfg.out_dir = d;
            }
            for o in &overrides {
                cfg.apply_override(o)?;
            }
            let summary = cmd_train(&cfg, warn)?;
            say(out, summary)
        }
        Command::Evaluate { checkpoint, manifest, split, config, out: dest } => {
            let pre = preprocess_settings(&checkpoint, config.as_deref())?;
            let split: Split = split.parse()?;
            let table = cmd_evaluate(&checkpoint, &manifest, split, &pre, warn)?;
            if table.lines().count() == 1 {
                say(warn, format!("warning: split {split} of {} is empty\n", manifest.display()))?;
            }
            match dest {
                Some(p) => fs::write(&p, table).map_err(|e| Error::io(p, e)),
                None => say(out, table),
            }
        }
        Command::Segment { checkpoint, input, out: dest, config } => {
            let pre = preprocess_settings(&checkpoint, config.as_deref())?;
            let voxels = cmd_segment(&checkpoint, &input, &dest, &pre)?;
            say(out, format!("{}: {voxels} foreground voxels\n", dest.display()))
        }
        Command::Inspect { input } => {
            let (h, _) = read_nifti(&input)?;
            say(out, h.dump())
        }
    }
}

fn say(w: &mut dyn Write, s: String) -> Result<()> {
    w.write_all(s.as_bytes()).map_err(|e| Error::io("<output>", e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Mixes the run seed with the case index so neighbouring seeds do not share volumes.
fn case_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E3779B97F4A7C15) ^ (i as u64).wrapping_mul(0xBF58476D1CE4E5B9)
}

/// Writes `count` phantom pairs (`case_NNN.nii.gz` with a three-class
/// `case_NNN_label.nii.gz`) and `manifest.csv` into `dir`.
pub fn cmd_phantom(dir: &Path, count: usize, size: usize, seed: u64) -> Result<Manifest> {
    create_dir(dir)?;
    let counts = split_counts(count);
    let splits = [Split::Train, Split::Val, Split::Test];
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let ph = generate_phantom(case_seed(seed, i), size, 1 + i % 3)?;
        let (img, lab) = (format!("case_{i:03}.nii.gz"), format!("case_{i:03}_label.nii.gz"));
        let shape = [size; 3];
        let image = ph.sample.image.reshape(&shape)?;
        write_nifti(dir.join(&img), &NiftiHeader::for_shape(&shape, Datatype::I16)?, &image, true)?;
        write_nifti(dir.join(&lab), &NiftiHeader::for_shape(&shape, Datatype::U8)?, &ph.classes, true)?;
        let mut k = 0;
        let mut before = counts[0];
        while i >= before {
            k += 1;
            before += counts[k];
        }
        entries.push(ManifestEntry { image: img.into(), label: lab.into(), split: splits[k] });
    }
    let manifest = Manifest { entries, root: dir.to_path_buf() };
    manifest.write(dir.join("manifest.csv"))?;
    Ok(manifest)
}

/// Loads and preprocesses one split; rejected volumes are reported and skipped.
fn load_split(m: &Manifest, split: Split, pre: &PreprocessConfig, warn: &mut dyn Write) -> Result<Vec<(String, LabeledSample)>> {
    let mut out = Vec::new();
    for (name, s) in m.load(split)? {
        match preprocess(s, pre)? {
            Preprocessed::Sample(s) => out.push((name, s)),
            Preprocessed::Rejected(why) => {
                let _ = writeln!(warn, "warning: skipping {why}");
            }
        }
    }
    Ok(out)
}

/// Trains per `cfg`, writing `config.txt`, `best.ckpt` and `history.csv`
/// into the output directory. Returns a short summary.
pub fn cmd_train(cfg: &RunConfig, warn: &mut dyn Write) -> Result<String> {
    cfg.validate()?;
    let manifest_path = cfg.manifest.as_ref().ok_or_else(|| Error::Config("no manifest given".into()))?;
    let manifest = Manifest::read(manifest_path)?;
    let strip = |v: Vec<(String, LabeledSample)>| v.into_iter().map(|(_, s)| s).collect::<Vec<_>>();
    let train = strip(load_split(&manifest, Split::Train, &cfg.preprocess, warn)?);
    let val = strip(load_split(&manifest, Split::Val, &cfg.preprocess, warn)?);

    let dir = &cfg.out_dir;
    create_dir(dir)?;
    let echo = dir.join("config.txt");
    fs::write(&echo, cfg.to_text()).map_err(|e| Error::io(&echo, e))?;

    let mut model = cfg.arch.build(&cfg.model)?;
    let ckpt = dir.join("best.ckpt");
    let outcome = train_loop(&mut model, &train, &val, &cfg.train, &cfg.loss, Some(&ckpt))?;
    let hist = dir.join("history.csv");
    fs::write(&hist, outcome.history_csv()).map_err(|e| Error::io(&hist, e))?;

    let last = outcome.history.last().map_or(f64::NAN, |h| h.loss);
    let best = outcome.best.as_ref().map_or(f64::NAN, |b| b.best_dice);
    Ok(format!(
        "{} trained for {} iterations on {} volumes: final loss {last:.6}, best validation Dice {best:.6}\nwrote {}\n",
        cfg.arch,
        outcome.history.len(),
        train.len(),
        dir.display()
    ))
}

/// Preprocessing from an explicit config, else from the run's echoed
/// `config.txt` beside the checkpoint, else the defaults.
fn preprocess_settings(checkpoint: &Path, config: Option<&Path>) -> Result<PreprocessConfig> {
    let sibling = checkpoint.parent().map(|d| d.join("config.txt"));
    match config.map(Path::to_path_buf).or(sibling.filter(|p| p.is_file())) {
        Some(p) => Ok(RunConfig::read(&p)?.preprocess),
        None => Ok(PreprocessConfig::default()),
    }
}

/// The metrics table (CSV) for one split.
pub fn cmd_evaluate(checkpoint: &Path, manifest: &Path, split: Split, pre: &PreprocessConfig, warn: &mut dyn Write) -> Result<String> {
    let model = load_checkpoint(checkpoint)?.model()?;
    let samples = load_split(&Manifest::read(manifest)?, split, pre, warn)?;
    if samples.is_empty() {
        return Ok(format!("{CSV_HEADER}\n"));
    }
    Ok(evaluate(&model, &samples)?.to_csv())
}

/// Segments `input` into a uint8 mask at `output` on the input grid, with
/// the input's geometry. Returns the foreground voxel count.
pub fn cmd_segment(checkpoint: &Path, input: &Path, output: &Path, pre: &PreprocessConfig) -> Result<usize> {
    let model = load_checkpoint(checkpoint)?.model()?;
    let (header, voxels) = read_nifti(input)?;
    let s = voxels.shape().to_vec();
    if s.len() != 3 {
        return Err(Error::Dataset(format!("{}: expected a 3D volume, got shape {s:?}", input.display())));
    }
    let image = preprocess_image(&voxels.reshape(&[1, s[0], s[1], s[2]])?, pre)?;
    let mask = restore_inplane(&segment(&model, &image)?, [s[1], s[2]])?;
    let mut out = NiftiHeader::for_shape(&s, Datatype::U8)?;
    out.copy_geometry(&header);
    let gzip = output.extension().is_some_and(|e| e == "gz");
    write_nifti(output, &out, &mask, gzip)?;
    Ok(mask.sum() as usize)
}
