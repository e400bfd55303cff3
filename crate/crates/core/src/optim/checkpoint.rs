//! Binary checkpoint files.
//!
//! Layout (little-endian): 8-byte magic, `u32` version, `u64` manifest
//! length, a UTF-8 manifest, then the raw `f64` blobs it points at. The
//! manifest holds the model config, scalar training state and one
//! `tensor <name> <shape> <offset> <len>` line per blob; scalars that must
//! survive bit-for-bit are written as hex bit patterns.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::RunningStats;
use crate::error::{Error, Result};
use crate::networks::{build_mpunet, Model, ModelConfig};
use crate::optim::AdamState;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"VXSGCKPT";
pub const VERSION: u32 = 1;

/// Enough of a ChaCha8 generator to resume its stream exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Vec<(String, Tensor)>,
    pub buffers: BTreeMap<String, RunningStats>,
    pub adam: AdamState,
    pub iteration: usize,
    pub best_dice: f64,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn capture(model: &Model, adam: &AdamState, iteration: usize, best_dice: f64, rng: &ChaCha8Rng) -> Self {
        Checkpoint {
            config: model.config().clone(),
            params: model.params().to_vec(),
            buffers: model.buffers().clone(),
            adam: adam.clone(),
            iteration,
            best_dice,
            rng: RngState::capture(rng),
        }
    }

    /// Copies parameters and buffers into an existing model, which must have
    /// the same parameter names and shapes.
    pub fn restore_into(&self, model: &mut Model) -> Result<()> {
        model.load_state(self.params.clone(), self.buffers.clone())
    }

    /// A fresh model built from the stored config with the stored weights.
    pub fn model(&self) -> Result<Model> {
        let mut m = build_mpunet(&self.config)?;
        self.restore_into(&mut m)?;
        Ok(m)
    }
}

fn hex(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

fn unhex(s: &str) -> Result<f64> {
    u64::from_str_radix(s, 16).map(f64::from_bits).map_err(|_| Error::Checkpoint(format!("bad float bits `{s}`")))
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut tensors: Vec<(String, &Tensor)> = Vec::new();
    for (n, t) in &ck.params {
        tensors.push((format!("param:{n}"), t));
    }
    for (n, b) in &ck.buffers {
        tensors.push((format!("bn_mean:{n}"), &b.mean));
        tensors.push((format!("bn_var:{n}"), &b.var));
    }
    for (i, (m, v)) in ck.adam.m.iter().zip(&ck.adam.v).enumerate() {
        tensors.push((format!("adam_m:{i}"), m));
        tensors.push((format!("adam_v:{i}"), v));
    }

    let mut man = String::new();
    for (k, v) in ck.config.entries() {
        let _ = writeln!(man, "config {k}={v}");
    }
    let _ = writeln!(man, "iteration {}", ck.iteration);
    let _ = writeln!(man, "best_dice {}", hex(ck.best_dice));
    let _ = writeln!(man, "adam {} {} {} {}", ck.adam.t, hex(ck.adam.beta1), hex(ck.adam.beta2), hex(ck.adam.eps));
    let seed: String = ck.rng.seed.iter().map(|b| format!("{b:02x}")).collect();
    let _ = writeln!(man, "rng {seed} {} {}", ck.rng.stream, ck.rng.word_pos);
    let mut offset = 0;
    for (n, t) in &tensors {
        let shape: Vec<String> = t.shape().iter().map(|s| s.to_string()).collect();
        let _ = writeln!(man, "tensor {n} {} {offset} {}", shape.join("x"), t.numel());
        offset += t.numel();
    }

    let mut out = Vec::with_capacity(20 + man.len() + offset * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(man.len() as u64).to_le_bytes());
    out.extend_from_slice(man.as_bytes());
    for (_, t) in &tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: String| Error::Checkpoint(m);
    if bytes.len() < 20 {
        return Err(bad(format!("file is {} bytes, too short for a header", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(bad(format!("bad magic {:?}", &bytes[..8])));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(format!("format version {version}, this build reads version {VERSION}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let man = bytes.get(20..20 + len).ok_or_else(|| bad("truncated manifest".into()))?;
    let man = std::str::from_utf8(man).map_err(|_| bad("manifest is not UTF-8".into()))?;
    let blob = &bytes[20 + len..];

    let mut config = ModelConfig::default();
    let (mut iteration, mut best_dice, mut adam_hdr, mut rng) = (None, None, None, None);
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    let mut used = 0usize;
    for line in man.lines() {
        let (tag, rest) = line.split_once(' ').ok_or_else(|| bad(format!("malformed line `{line}`")))?;
        let f: Vec<&str> = rest.split(' ').collect();
        let int = |s: &str| s.parse::<u128>().map_err(|_| bad(format!("bad integer `{s}` in `{line}`")));
        match (tag, &f[..]) {
            ("config", [kv]) => {
                let (k, v) = kv.split_once('=').ok_or_else(|| bad(format!("malformed `{line}`")))?;
                if !config.set(k, v)? {
                    return Err(bad(format!("unknown config key `{k}`")));
                }
            }
            ("iteration", [n]) => iteration = Some(int(n)? as usize),
            ("best_dice", [h]) => best_dice = Some(unhex(h)?),
            ("adam", [t, b1, b2, e]) => adam_hdr = Some((int(t)? as u64, unhex(b1)?, unhex(b2)?, unhex(e)?)),
            ("rng", [seed, stream, pos]) => {
                if seed.len() != 64 {
                    return Err(bad("rng seed must be 32 bytes".into()));
                }
                let mut s = [0u8; 32];
                for (i, b) in s.iter_mut().enumerate() {
                    *b = u8::from_str_radix(&seed[2 * i..2 * i + 2], 16).map_err(|_| bad("bad rng seed".into()))?;
                }
                rng = Some(RngState { seed: s, stream: int(stream)? as u64, word_pos: int(pos)? });
            }
            ("tensor", [name, shape, offset, n]) => {
                let shape: Vec<usize> = shape.split('x').map(|d| int(d).map(|v| v as usize)).collect::<Result<_>>()?;
                let (offset, n) = (int(offset)? as usize, int(n)? as usize);
                let end = (offset + n) * 8;
                if blob.len() < end {
                    return Err(bad(format!("truncated data: `{name}` needs bytes up to {end}, have {}", blob.len())));
                }
                let data = blob[offset * 8..end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
                tensors.push((name.to_string(), Tensor::new(shape, data).map_err(|e| bad(format!("`{name}`: {e}")))?));
                used = used.max(end);
            }
            _ => return Err(bad(format!("unrecognized manifest line `{line}`"))),
        }
    }
    if used != blob.len() {
        return Err(bad(format!("{} trailing bytes after the last tensor", blob.len() - used)));
    }
    let missing = |what: &str| bad(format!("manifest has no `{what}` entry"));
    let (t, beta1, beta2, eps) = adam_hdr.ok_or_else(|| missing("adam"))?;

    let mut params = Vec::new();
    let mut means = BTreeMap::new();
    let mut vars = BTreeMap::new();
    let (mut m, mut v) = (Vec::new(), Vec::new());
    for (name, t) in tensors {
        let (kind, key) = name.split_once(':').ok_or_else(|| bad(format!("tensor name `{name}`")))?;
        match kind {
            "param" => params.push((key.to_string(), t)),
            "bn_mean" => drop(means.insert(key.to_string(), t)),
            "bn_var" => drop(vars.insert(key.to_string(), t)),
            "adam_m" => m.push(t),
            "adam_v" => v.push(t),
            _ => return Err(bad(format!("tensor kind `{kind}`"))),
        }
    }
    let mut buffers = BTreeMap::new();
    for (k, mean) in means {
        let var = vars.remove(&k).ok_or_else(|| bad(format!("buffer `{k}` has a mean but no variance")))?;
        buffers.insert(k, RunningStats { mean, var });
    }
    if !vars.is_empty() || m.len() != v.len() || (!m.is_empty() && m.len() != params.len()) {
        return Err(bad("inconsistent buffer or optimizer tensors".into()));
    }
    let ck = Checkpoint {
        config,
        params,
        buffers,
        adam: AdamState { beta1, beta2, eps, t, m, v },
        iteration: iteration.ok_or_else(|| missing("iteration"))?,
        best_dice: best_dice.ok_or_else(|| missing("best_dice"))?,
        rng: rng.ok_or_else(|| missing("rng"))?,
    };
    // names and shapes must be exactly what the stored config builds
    ck.model()?;
    Ok(ck)
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(ck)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    decode_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::rand_tensor;
    use crate::networks::Mode;
    use rand::{RngCore, SeedableRng};

    fn tiny() -> ModelConfig {
        ModelConfig { levels: 2, base_channels: 2, embed_dim: 8, input_shape: [8, 8, 8], ..ModelConfig::micro() }
    }

    fn trained_checkpoint() -> (Model, Checkpoint) {
        let mut model = build_mpunet(&tiny()).unwrap();
        for (i, p) in model.param_values_mut().enumerate() {
            *p = p.map(|v| v + 0.01 * i as f64);
        }
        let g = crate::Graph::new();
        let out = model.forward(&g, g.constant(rand_tensor(&[1, 1, 8, 8, 8], 2)), Mode::Train).unwrap();
        model.apply_bn_updates(out.bn_updates);
        let mut adam = AdamState::new(model.params().iter().map(|(_, t)| t));
        adam.t = 7;
        adam.m[0] = adam.m[0].map(|_| 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        rng.next_u64();
        let ck = Checkpoint::capture(&model, &adam, 42, 0.123456789, &rng);
        (model, ck)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let (model, ck) = trained_checkpoint();
        let p = dir.path().join("best.ckpt");
        save_checkpoint(&p, &ck).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back, ck);
        let x = rand_tensor(&[1, 1, 8, 8, 8], 3);
        let a = model.predict(&x).unwrap().logits;
        let b = back.model().unwrap().predict(&x).unwrap().logits;
        assert!(a.bitwise_eq(&b));
        let mut r1 = ck.rng.restore();
        let mut r0 = ChaCha8Rng::seed_from_u64(5);
        r0.next_u64();
        assert_eq!(r0.next_u64(), r1.next_u64());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let (_, ck) = trained_checkpoint();
        let good = encode_checkpoint(&ck);
        let mut magic = good.clone();
        magic[0] = b'X';
        assert!(matches!(decode_checkpoint(&magic), Err(Error::Checkpoint(m)) if m.contains("magic")));
        let mut ver = good.clone();
        ver[8] = 9;
        assert!(matches!(decode_checkpoint(&ver), Err(Error::Checkpoint(m)) if m.contains("version")));
        assert!(matches!(decode_checkpoint(&good[..good.len() - 8]), Err(Error::Checkpoint(m)) if m.contains("truncated")));
        assert!(decode_checkpoint(&good[..10]).is_err());
    }

    #[test]
    fn mismatched_model_names_the_parameter() {
        let (_, ck) = trained_checkpoint();
        let mut other = build_mpunet(&ModelConfig { base_channels: 3, ..tiny() }).unwrap();
        match ck.restore_into(&mut other) {
            Err(Error::CheckpointMismatch { name, .. }) => assert_eq!(name, "enc0.conv1.weight"),
            r => panic!("{r:?}"),
        }
        let mut tampered = ck.clone();
        tampered.params[0].0 = "enc0.conv9.weight".into();
        assert!(matches!(decode_checkpoint(&encode_checkpoint(&tampered)), Err(Error::CheckpointMismatch { .. })));
    }
}
