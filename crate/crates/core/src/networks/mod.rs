//! MPU-Net and the baseline 3D U-Net.
//!
//! A [`Model`] is an ordered list of named parameter tensors plus batch-norm
//! buffers. The wiring is fixed by the [`ModelConfig`]; [`Model::forward`]
//! binds the parameters onto a [`Graph`] and evaluates it.
//!
//! Encoder level `l` has `base * 2^l` channels and two conv-BN-ReLU layers;
//! levels are joined by 2x max pooling. With `use_pam` the bottleneck also
//! runs patchify, embed, multi-head attention (residual), PAM, distilling,
//! the HCNN remap and cascaded upsampling, and the result is added back to
//! the bottleneck features. Each decoder level upsamples, optionally gates
//! the skip connection, concatenates, applies two conv-BN-ReLU layers and,
//! with `use_multiscale`, the multi-scale block plus a class head whose
//! output is fused with the others.

mod config;

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use config::ModelConfig;
pub(crate) use config::parse;

use crate::attention::{
    attention_gate, distill_layer, multi_head_attention, pam_forward, DistillParams, GateParams, MultiHeadWeights,
    PamState,
};
use crate::autodiff::{maxpool, upsample_trilinear, BatchNormMode, RunningStats, Var, BN_MOMENTUM};
use crate::decoder::{cascaded_upsample_stage, fuse_multiscale, hcnn_remap, multiscale_block, Branch, MultiScaleBlockParams, UpsampleStage};
use crate::error::{Error, Result};
use crate::nn::{Conv, Norm};
use crate::patches::{embed, patchify, reshape_sequence_to_grid, PatchEmbedding};
use crate::tensor::Tensor;
use crate::Graph;

/// Batch-norm behaviour during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A built network: configuration, parameters and normalization buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
    buffers: BTreeMap<String, RunningStats>,
}

/// The part of the forward pass recorded on a tape.
#[derive(Debug)]
pub struct ForwardPass<'g> {
    /// `[N, classes, D, H, W]`
    pub logits: Var<'g>,
    /// Per-tap class logits at their native resolution, coarsest first.
    /// Without multi-scale fusion this is just `[logits]`.
    pub taps: Vec<Var<'g>>,
    /// One leaf per model parameter, in [`Model::params`] order.
    pub params: Vec<Var<'g>>,
    /// Updated running statistics (training mode only).
    pub bn_updates: Vec<(String, RunningStats)>,
}

/// Eval-mode outputs as plain tensors.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub logits: Tensor,
    pub taps: Vec<Tensor>,
}

pub fn build_mpunet(cfg: &ModelConfig) -> Result<Model> {
    cfg.validate()?;
    let mut b = Builder { seed: cfg.seed, params: Vec::new(), buffers: BTreeMap::new() };
    b.wire(cfg);
    let index = b.params.iter().enumerate().map(|(i, (n, _))| (n.clone(), i)).collect();
    Ok(Model { config: cfg.clone(), params: b.params, index, buffers: b.buffers })
}

/// The plain U-Net: `cfg` with every feature flag cleared.
pub fn build_unet3d(cfg: &ModelConfig) -> Result<Model> {
    build_mpunet(&cfg.plain())
}

pub fn count_parameters(model: &Model) -> usize {
    model.params.iter().map(|(_, t)| t.numel()).sum()
}

/// Eval-mode inference on `[N, C, D, H, W]`.
pub fn forward(model: &Model, volume: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
    let p = model.predict(volume)?;
    Ok((p.logits, p.taps))
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    /// Mutable parameter values. Names and order are fixed.
    pub fn param_values_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(|(_, t)| t)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i].1)
    }

    pub fn buffers(&self) -> &BTreeMap<String, RunningStats> {
        &self.buffers
    }

    pub fn apply_bn_updates(&mut self, updates: Vec<(String, RunningStats)>) {
        for (name, stats) in updates {
            self.buffers.insert(name, stats);
        }
    }

    /// Replaces parameters and buffers with values loaded from elsewhere.
    /// Names and shapes must match this model exactly.
    pub fn load_state(&mut self, params: Vec<(String, Tensor)>, buffers: BTreeMap<String, RunningStats>) -> Result<()> {
        let mismatch = |name: &str, detail: String| Error::CheckpointMismatch { name: name.to_string(), detail };
        if params.len() != self.params.len() {
            let missing = self.params.iter().find(|(n, _)| !params.iter().any(|(m, _)| m == n));
            let extra = params.iter().find(|(n, _)| !self.index.contains_key(n));
            let name = missing.or(extra).map(|(n, _)| n.as_str()).unwrap_or("?");
            return Err(mismatch(name, format!("{} parameters given, model has {}", params.len(), self.params.len())));
        }
        for ((want, cur), (name, t)) in self.params.iter().map(|(n, t)| (n, t)).zip(&params) {
            if want != name {
                return Err(mismatch(name, format!("expected parameter `{want}` at this position")));
            }
            if cur.shape() != t.shape() {
                return Err(mismatch(name, format!("shape {:?} where the model has {:?}", t.shape(), cur.shape())));
            }
        }
        for (name, cur) in &self.buffers {
            match buffers.get(name) {
                None => return Err(mismatch(name, "missing batch-norm buffer".into())),
                Some(b) if b.mean.shape() != cur.mean.shape() || b.var.shape() != cur.var.shape() => {
                    return Err(mismatch(name, "batch-norm buffer shape differs".into()));
                }
                _ => {}
            }
        }
        if let Some(extra) = buffers.keys().find(|k| !self.buffers.contains_key(*k)) {
            return Err(mismatch(extra, "unexpected batch-norm buffer".into()));
        }
        self.params = params;
        self.buffers = buffers;
        Ok(())
    }

    /// One line per parameter: `name shape`.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        for (n, t) in &self.params {
            s.push_str(&format!("{n} {:?}\n", t.shape()));
        }
        s.push_str(&format!("total {}\n", count_parameters(self)));
        s
    }

    /// Records the network on `g`. Parameters become gradient-tracking leaves.
    pub fn forward<'g>(&self, g: &'g Graph, input: Var<'g>, mode: Mode) -> Result<ForwardPass<'g>> {
        let vars: Vec<Var<'g>> = self.params.iter().map(|(_, t)| g.param(t.clone())).collect();
        let mut ctx = Ctx { model: self, vars, mode, updates: Vec::new() };
        let (logits, taps) = ctx.run(input)?;
        Ok(ForwardPass { logits, taps, params: ctx.vars, bn_updates: ctx.updates })
    }

    pub fn predict(&self, volume: &Tensor) -> Result<Prediction> {
        let g = Graph::new();
        let out = self.forward(&g, g.constant(volume.clone()), Mode::Eval)?;
        Ok(Prediction { logits: out.logits.value(), taps: out.taps.iter().map(|t| t.value()).collect() })
    }
}

/// Mixes the model seed with a parameter name so each tensor gets its own
/// stream, independent of which other layers exist.
fn param_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h ^ seed.wrapping_mul(0x9E3779B97F4A7C15)
}

struct Builder {
    seed: u64,
    params: Vec<(String, Tensor)>,
    buffers: BTreeMap<String, RunningStats>,
}

impl Builder {
    fn add(&mut self, name: String, t: Tensor) {
        self.params.push((name, t));
    }

    fn normal(&mut self, name: String, shape: &[usize], std: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(param_seed(self.seed, &name));
        let dist = Normal::new(0.0, std).expect("positive std");
        let t = Tensor::from_fn(shape, |_| dist.sample(&mut rng));
        self.add(name, t);
    }

    fn fan_in(shape: &[usize]) -> f64 {
        shape[1..].iter().product::<usize>().max(1) as f64
    }

    /// He-initialized kernel and zero bias.
    fn conv(&mut self, prefix: &str, f: usize, c: usize, k: usize) {
        let shape = [f, c, k, k, k];
        self.normal(format!("{prefix}.weight"), &shape, (2.0 / Self::fan_in(&shape)).sqrt());
        self.add(format!("{prefix}.bias"), Tensor::zeros(&[f]));
    }

    /// Variance-preserving kernel for layers not followed by a rectifier.
    fn linear_conv(&mut self, prefix: &str, f: usize, c: usize, k: usize) {
        let shape = [f, c, k, k, k];
        self.normal(format!("{prefix}.weight"), &shape, (1.0 / Self::fan_in(&shape)).sqrt());
        self.add(format!("{prefix}.bias"), Tensor::zeros(&[f]));
    }

    fn bn(&mut self, prefix: &str, c: usize) {
        self.add(format!("{prefix}.gamma"), Tensor::ones(&[c]));
        self.add(format!("{prefix}.beta"), Tensor::zeros(&[c]));
        self.buffers.insert(prefix.to_string(), RunningStats::new(c));
    }

    fn double_conv(&mut self, prefix: &str, cin: usize, cout: usize) {
        self.conv(&format!("{prefix}.conv1"), cout, cin, 3);
        self.bn(&format!("{prefix}.bn1"), cout);
        self.conv(&format!("{prefix}.conv2"), cout, cout, 3);
        self.bn(&format!("{prefix}.bn2"), cout);
    }

    fn up_stage(&mut self, prefix: &str, c: usize) {
        self.conv(&format!("{prefix}.conv"), c, c, 2);
        self.add(format!("{prefix}.slope"), Tensor::scalar(0.25));
    }

    fn wire(&mut self, cfg: &ModelConfig) {
        let l_max = cfg.levels - 1;
        for l in 0..cfg.levels {
            let cin = if l == 0 { cfg.input_channels } else { cfg.channels(l - 1) };
            self.double_conv(&format!("enc{l}"), cin, cfg.channels(l));
        }
        if cfg.use_pam {
            let c = cfg.channels(l_max);
            let (d, p) = (cfg.embed_dim, cfg.patch_size);
            let n: usize = cfg.patch_grid().iter().product();
            let token = p * p * p * c;
            self.normal("tr.embed.projection".into(), &[token, d], (1.0 / token as f64).sqrt());
            self.normal("tr.embed.position".into(), &[d, n], 0.02);
            for m in ["w_q", "w_k", "w_v", "w_out"] {
                self.normal(format!("tr.mha.{m}"), &[d, d], (1.0 / d as f64).sqrt());
            }
            self.bn("tr.pam.bn", d);
            self.add("tr.pam.prelu".into(), Tensor::scalar(0.25));
            for m in ["conv_a", "conv_b", "conv_c"] {
                self.linear_conv(&format!("tr.pam.{m}"), d, d, 1);
            }
            self.add("tr.pam.lambda".into(), Tensor::scalar(0.0));
            self.normal("tr.distill.kernel".into(), &[1, 1, 3], (1.0f64 / 3.0).sqrt());
            self.add("tr.distill.bias".into(), Tensor::zeros(&[1]));
            self.linear_conv("tr.remap", c, d.div_ceil(2), 1);
            for s in 0..cfg.upsample_stages() {
                self.up_stage(&format!("tr.up{s}"), c);
            }
        }
        if cfg.use_multiscale {
            self.linear_conv("head0", cfg.classes, cfg.channels(l_max), 1);
        }
        for l in (0..l_max).rev() {
            let (c, coarse) = (cfg.channels(l), cfg.channels(l + 1));
            let pre = format!("dec{l}");
            if cfg.use_multiscale {
                self.up_stage(&format!("{pre}.up"), coarse);
            }
            if cfg.use_gates {
                let f_int = (c / 2).max(1);
                let out = if cfg.gate_per_channel { c } else { 1 };
                self.normal(format!("{pre}.gate.w_x"), &[f_int, c, 1, 1, 1], (1.0 / c as f64).sqrt());
                self.normal(format!("{pre}.gate.w_g"), &[f_int, coarse, 1, 1, 1], (1.0 / coarse as f64).sqrt());
                self.add(format!("{pre}.gate.b_g"), Tensor::zeros(&[f_int]));
                self.normal(format!("{pre}.gate.phi"), &[out, f_int, 1, 1, 1], (1.0 / f_int as f64).sqrt());
                self.add(format!("{pre}.gate.b_phi"), Tensor::zeros(&[out]));
            }
            self.double_conv(&pre, c + coarse, c);
            if cfg.use_multiscale {
                self.linear_conv(&format!("{pre}.ms.b1a"), c, c, 3);
                self.linear_conv(&format!("{pre}.ms.b1b"), c, c, 3);
                self.linear_conv(&format!("{pre}.ms.b2a"), c, c, 5);
                self.linear_conv(&format!("{pre}.ms.b2b"), c, c, 5);
                self.linear_conv(&format!("{pre}.ms.fuse"), c, 2 * c, 1);
                self.bn(&format!("{pre}.ms.bn"), c);
                self.linear_conv(&format!("head{}", l_max - l), cfg.classes, c, 1);
            }
        }
        if !cfg.use_multiscale {
            self.linear_conv("head", cfg.classes, cfg.channels(0), 1);
        }
    }
}

struct Ctx<'m, 'g> {
    model: &'m Model,
    vars: Vec<Var<'g>>,
    mode: Mode,
    updates: Vec<(String, RunningStats)>,
}

impl<'g> Ctx<'_, 'g> {
    fn p(&self, name: &str) -> Result<Var<'g>> {
        self.model
            .index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Config(format!("model has no parameter `{name}`")))
    }

    fn conv(&self, prefix: &str) -> Result<Conv<'g>> {
        Ok(Conv::new(self.p(&format!("{prefix}.weight"))?, Some(self.p(&format!("{prefix}.bias"))?)))
    }

    fn norm(&mut self, prefix: &str, x: Var<'g>) -> Result<Var<'g>> {
        let running = self.model.buffers.get(prefix).cloned().ok_or_else(|| Error::Config(format!("missing buffer `{prefix}`")))?;
        let mode = match self.mode {
            Mode::Train => BatchNormMode::Train { momentum: BN_MOMENTUM },
            Mode::Eval => BatchNormMode::Eval,
        };
        let norm = Norm { gamma: self.p(&format!("{prefix}.gamma"))?, beta: self.p(&format!("{prefix}.beta"))?, running, mode };
        let (y, upd) = norm.apply(x)?;
        if let Some(u) = upd {
            self.updates.push((prefix.to_string(), u));
        }
        Ok(y)
    }

    fn double_conv(&mut self, prefix: &str, x: Var<'g>) -> Result<Var<'g>> {
        let h = self.conv(&format!("{prefix}.conv1"))?.same(x)?;
        let h = self.norm(&format!("{prefix}.bn1"), h)?.relu()?;
        let h = self.conv(&format!("{prefix}.conv2"))?.same(h)?;
        self.norm(&format!("{prefix}.bn2"), h)?.relu()
    }

    fn up_stage(&self, prefix: &str, x: Var<'g>, factor: usize) -> Result<Var<'g>> {
        let st = UpsampleStage { conv: self.conv(&format!("{prefix}.conv"))?, slope: self.p(&format!("{prefix}.slope"))?, factor };
        cascaded_upsample_stage(x, &st)
    }

    fn transformer(&mut self, b: Var<'g>) -> Result<Var<'g>> {
        let cfg = &self.model.config;
        let s = b.shape();
        let (n, c) = (s[0], s[1]);
        let d = cfg.embed_dim;
        let emb = PatchEmbedding { projection: self.p("tr.embed.projection")?, position: self.p("tr.embed.position")? };
        let mha = MultiHeadWeights {
            w_q: self.p("tr.mha.w_q")?,
            w_k: self.p("tr.mha.w_k")?,
            w_v: self.p("tr.mha.w_v")?,
            w_out: self.p("tr.mha.w_out")?,
            n_heads: cfg.n_heads,
        };
        let mut grids = Vec::with_capacity(n);
        let mut grid = [0; 3];
        for i in 0..n {
            let sample = b.narrow(0, i, 1)?.reshape(&[c, s[2], s[3], s[4]])?;
            let seq = patchify(sample, cfg.patch_size)?;
            grid = seq.grid();
            let z0 = embed(&seq, &emb)?;
            let z1 = z0.add(multi_head_attention(z0, &mha)?)?;
            grids.push(reshape_sequence_to_grid(z1, grid)?.reshape(&[1, d, grid[0], grid[1], grid[2]])?);
        }
        let stacked = if n == 1 { grids[0] } else { Var::concat(&grids, 0)? };

        let running = self.model.buffers.get("tr.pam.bn").cloned().ok_or_else(|| Error::Config("missing PAM buffer".into()))?;
        let mode = match self.mode {
            Mode::Train => BatchNormMode::Train { momentum: BN_MOMENTUM },
            Mode::Eval => BatchNormMode::Eval,
        };
        let pam = PamState {
            norm: Norm { gamma: self.p("tr.pam.bn.gamma")?, beta: self.p("tr.pam.bn.beta")?, running, mode },
            prelu: self.p("tr.pam.prelu")?,
            conv_a: self.conv("tr.pam.conv_a")?,
            conv_b: self.conv("tr.pam.conv_b")?,
            conv_c: self.conv("tr.pam.conv_c")?,
            lambda: self.p("tr.pam.lambda")?,
            affinity_cap: cfg.affinity_cap,
        };
        let out = pam_forward(stacked, &pam)?;
        if let Some(u) = out.running {
            self.updates.push(("tr.pam.bn".to_string(), u));
        }

        let tokens: usize = grid.iter().product();
        let distill = DistillParams { kernel: self.p("tr.distill.kernel")?, bias: self.p("tr.distill.bias")? };
        let remap = self.conv("tr.remap")?;
        let mut remapped = Vec::with_capacity(n);
        for i in 0..n {
            let z = out.output.narrow(0, i, 1)?.reshape(&[d, tokens])?;
            let seq = z.t()?.reshape(&[tokens, 1, d])?;
            let short = distill_layer(seq, &distill)?;
            let half = short.shape()[2];
            let z = short.reshape(&[tokens, half])?.t()?;
            remapped.push(hcnn_remap(z, grid, &remap)?);
        }
        let mut t = if n == 1 { remapped[0] } else { Var::concat(&remapped, 0)? };
        for st in 0..cfg.upsample_stages() {
            t = self.up_stage(&format!("tr.up{st}"), t, cfg.upsample_factor)?;
        }
        Ok(t)
    }

    fn run(&mut self, x: Var<'g>) -> Result<(Var<'g>, Vec<Var<'g>>)> {
        let cfg = self.model.config.clone();
        let s = x.shape();
        if s.len() != 5 || s[1] != cfg.input_channels {
            return Err(Error::shape(
                "forward",
                format!("expected [N,{},D,H,W], got {s:?}", cfg.input_channels),
            ));
        }
        cfg.check_resolution(&s[2..])?;
        let l_max = cfg.levels - 1;

        let mut skips = Vec::with_capacity(cfg.levels);
        let mut h = x;
        for l in 0..cfg.levels {
            if l > 0 {
                h = maxpool(h, 2, &[2, 3, 4])?;
            }
            h = self.double_conv(&format!("enc{l}"), h)?;
            skips.push(h);
        }
        if cfg.use_pam {
            h = h.add(self.transformer(h)?)?;
        }

        let mut taps = Vec::new();
        if cfg.use_multiscale {
            taps.push(self.conv("head0")?.same(h)?);
        }
        for l in (0..l_max).rev() {
            let pre = format!("dec{l}");
            let up = if cfg.use_multiscale { self.up_stage(&format!("{pre}.up"), h, 2)? } else { upsample_trilinear(h, 2)? };
            let mut skip = skips[l];
            if cfg.use_gates {
                let p = GateParams {
                    w_x: self.p(&format!("{pre}.gate.w_x"))?,
                    w_g: self.p(&format!("{pre}.gate.w_g"))?,
                    b_g: self.p(&format!("{pre}.gate.b_g"))?,
                    phi: self.p(&format!("{pre}.gate.phi"))?,
                    b_phi: self.p(&format!("{pre}.gate.b_phi"))?,
                    sigma1: cfg.gate_activation,
                };
                skip = attention_gate(skip, h, &p)?.gated;
            }
            h = self.double_conv(&pre, Var::concat(&[skip, up], 1)?)?;
            if cfg.use_multiscale {
                let ms = MultiScaleBlockParams {
                    branch1: Branch { first: self.conv(&format!("{pre}.ms.b1a"))?, second: self.conv(&format!("{pre}.ms.b1b"))? },
                    branch2: Branch { first: self.conv(&format!("{pre}.ms.b2a"))?, second: self.conv(&format!("{pre}.ms.b2b"))? },
                    fuse: self.conv(&format!("{pre}.ms.fuse"))?,
                };
                // the block is linear; normalizing its output keeps the head's input scale fixed
                let m = multiscale_block(h, &ms)?;
                h = self.norm(&format!("{pre}.ms.bn"), m)?.relu()?;
                taps.push(self.conv(&format!("head{}", l_max - l))?.same(h)?);
            }
        }
        if cfg.use_multiscale {
            let logits = fuse_multiscale(&taps, &cfg.fusion()?)?;
            Ok((logits, taps))
        } else {
            let logits = self.conv("head")?.same(h)?;
            Ok((logits, vec![logits]))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::rand_tensor;

    fn micro_input(seed: u64) -> Tensor {
        rand_tensor(&[1, 1, 16, 16, 16], seed)
    }

    #[test]
    fn micro_forward_shapes() {
        let model = build_mpunet(&ModelConfig::micro()).unwrap();
        let (logits, taps) = forward(&model, &micro_input(1)).unwrap();
        assert_eq!(logits.shape(), &[1, 2, 16, 16, 16]);
        let sizes: Vec<usize> = taps.iter().map(|t| t.shape()[2]).collect();
        assert_eq!(sizes, vec![4, 8, 16]);
        assert!(logits.is_finite());
    }

    #[test]
    fn unet_forward_shape_and_finiteness() {
        let cfg = ModelConfig { input_shape: [8, 8, 8], ..ModelConfig::micro() };
        let model = build_unet3d(&cfg).unwrap();
        let (logits, taps) = forward(&model, &rand_tensor(&[2, 1, 8, 8, 8], 2)).unwrap();
        assert_eq!(logits.shape(), &[2, 2, 8, 8, 8]);
        assert_eq!(taps.len(), 1);
        assert!(logits.is_finite());
    }

    #[test]
    fn flags_off_equals_unet() {
        let cfg = ModelConfig::micro();
        let a = build_mpunet(&cfg.plain()).unwrap();
        let b = build_unet3d(&cfg).unwrap();
        assert_eq!(a, b);
        let x = micro_input(3);
        assert!(forward(&a, &x).unwrap().0.bitwise_eq(&forward(&b, &x).unwrap().0));
    }

    #[test]
    fn encoder_init_is_shared_across_variants() {
        let cfg = ModelConfig::micro();
        let (m, u) = (build_mpunet(&cfg).unwrap(), build_unet3d(&cfg).unwrap());
        for (name, t) in u.params().iter().filter(|(n, _)| n.starts_with("enc")) {
            assert!(m.param(name).unwrap().bitwise_eq(t), "{name}");
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let model = build_mpunet(&ModelConfig::micro()).unwrap();
        let x = micro_input(4);
        let (a, b) = (model.predict(&x).unwrap(), model.predict(&x).unwrap());
        assert!(a.logits.bitwise_eq(&b.logits));
    }

    #[test]
    fn softmax_of_logits_is_normalized() {
        let model = build_mpunet(&ModelConfig::micro()).unwrap();
        let g = Graph::new();
        let out = model.forward(&g, g.constant(micro_input(5)), Mode::Eval).unwrap();
        let p = out.logits.softmax(1).unwrap().value();
        let vox = 16 * 16 * 16;
        for i in 0..vox {
            assert!((p.data()[i] + p.data()[vox + i] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn parameter_count_of_micro_unet() {
        let cfg = ModelConfig { levels: 2, base_channels: 2, input_channels: 1, classes: 2, ..ModelConfig::micro() };
        let model = build_unet3d(&cfg).unwrap();
        let conv = |k: usize, ci: usize, co: usize| k * k * k * ci * co + co;
        let bn = |c: usize| 2 * c;
        let want = conv(3, 1, 2) + bn(2) + conv(3, 2, 2) + bn(2) // enc0
            + conv(3, 2, 4) + bn(4) + conv(3, 4, 4) + bn(4) // enc1
            + conv(3, 6, 2) + bn(2) + conv(3, 2, 2) + bn(2) // dec0
            + conv(1, 2, 2); // head
        assert_eq!(count_parameters(&model), want);
    }

    #[test]
    fn feature_flags_add_parameters() {
        let cfg = ModelConfig::micro();
        let base = count_parameters(&build_unet3d(&cfg).unwrap());
        for (pam, gates, ms) in [(true, false, false), (false, true, false), (false, false, true), (true, true, true)] {
            let c = ModelConfig { use_pam: pam, use_gates: gates, use_multiscale: ms, ..cfg.clone() };
            assert!(count_parameters(&build_mpunet(&c).unwrap()) > base, "{pam} {gates} {ms}");
        }
    }

    #[test]
    fn resolution_errors() {
        assert!(build_mpunet(&ModelConfig { input_shape: [16, 16, 12], ..ModelConfig::micro() }).is_err());
        let model = build_mpunet(&ModelConfig::micro()).unwrap();
        assert!(model.predict(&rand_tensor(&[1, 1, 8, 8, 8], 1)).is_err());
        assert!(model.predict(&rand_tensor(&[1, 2, 16, 16, 16], 1)).is_err());
    }

    #[test]
    fn eval_with_fresh_stats_is_near_identity_normalization() {
        let g = Graph::new();
        let model = build_unet3d(&ModelConfig { input_shape: [8, 8, 8], ..ModelConfig::micro() }).unwrap();
        let mut ctx = Ctx { model: &model, vars: model.params.iter().map(|(_, t)| g.param(t.clone())).collect(), mode: Mode::Eval, updates: vec![] };
        let x = rand_tensor(&[1, 4, 2, 2, 2], 6);
        let y = ctx.norm("enc0.bn1", g.constant(x.clone())).unwrap().value();
        assert!(y.max_abs_diff(&x.map(|v| v / (1.0 + 1e-5f64).sqrt())).unwrap() < 1e-15);
        assert!(ctx.updates.is_empty());
    }

    #[test]
    fn every_parameter_receives_a_gradient() {
        let model = build_mpunet(&ModelConfig::micro()).unwrap();
        let g = Graph::new();
        let out = model.forward(&g, g.constant(micro_input(7)), Mode::Train).unwrap();
        let w = g.constant(rand_tensor(&out.logits.shape(), 8));
        let loss = out.logits.mul(w).unwrap().sum().unwrap();
        let grads = g.backward(loss).unwrap();
        for ((name, _), v) in model.params().iter().zip(&out.params) {
            assert!(grads.get(*v).is_some(), "{name} is unused");
        }
        assert_eq!(out.bn_updates.len(), model.buffers().len());
    }

    #[test]
    fn load_state_reports_offending_parameter() {
        let small = build_mpunet(&ModelConfig::micro()).unwrap();
        let mut wide = build_mpunet(&ModelConfig { base_channels: 6, ..ModelConfig::micro() }).unwrap();
        let err = wide.load_state(small.params().to_vec(), small.buffers().clone()).unwrap_err();
        match err {
            Error::CheckpointMismatch { name, .. } => assert_eq!(name, "enc0.conv1.weight"),
            e => panic!("unexpected {e}"),
        }
    }
}
