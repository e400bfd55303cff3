//! Multi-head dot-product self-attention, the position attention module
//! (PAM) with its sequence distilling layer, and the additive attention gate.

use crate::autodiff::{conv1d, maxpool, resize_trilinear, Activation, RunningStats, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv, Norm};

/// Default upper bound on the number of positions a PAM affinity may cover.
pub const DEFAULT_AFFINITY_CAP: usize = 32 * 32 * 32;

/// Projection weights for [`multi_head_attention`]; every matrix is `[d, d]`.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadWeights<'g> {
    pub w_q: Var<'g>,
    pub w_k: Var<'g>,
    pub w_v: Var<'g>,
    pub w_out: Var<'g>,
    pub n_heads: usize,
}

/// Output of [`multi_head_attention_weights`]: the `[d, N]` result and one
/// `[N, N]` row-stochastic weight matrix per head.
#[derive(Debug, Clone)]
pub struct Attended<'g> {
    pub output: Var<'g>,
    pub weights: Vec<Var<'g>>,
}

/// `softmax(Q K^T / sqrt(d_h)) V` per head, heads concatenated and mixed by
/// `w_out`. Tokens are the columns of `z`.
pub fn multi_head_attention<'g>(z: Var<'g>, w: &MultiHeadWeights<'g>) -> Result<Var<'g>> {
    Ok(multi_head_attention_weights(z, w)?.output)
}

pub fn multi_head_attention_weights<'g>(z: Var<'g>, w: &MultiHeadWeights<'g>) -> Result<Attended<'g>> {
    let zs = z.shape();
    if zs.len() != 2 {
        return Err(Error::shape("multi_head_attention", format!("expected [d,N], got {zs:?}")));
    }
    let d = zs[0];
    if w.n_heads == 0 || !d.is_multiple_of(w.n_heads) {
        return Err(Error::invalid(
            "multi_head_attention",
            format!("embedding dim {d} is not divisible by {} heads", w.n_heads),
        ));
    }
    for (name, m) in [("W_Q", w.w_q), ("W_K", w.w_k), ("W_V", w.w_v), ("W_out", w.w_out)] {
        if m.shape() != [d, d] {
            return Err(Error::shape("multi_head_attention", format!("{name} is {:?}, need [{d},{d}]", m.shape())));
        }
    }
    let dh = d / w.n_heads;
    let x = z.t()?;
    let q = x.matmul(w.w_q)?;
    let k = x.matmul(w.w_k)?;
    let v = x.matmul(w.w_v)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(w.n_heads);
    let mut weights = Vec::with_capacity(w.n_heads);
    for m in 0..w.n_heads {
        let qm = q.narrow(1, m * dh, dh)?;
        let km = k.narrow(1, m * dh, dh)?;
        let vm = v.narrow(1, m * dh, dh)?;
        let a = qm.matmul(km.t()?)?.scale(scale)?.softmax(1)?;
        heads.push(a.matmul(vm)?);
        weights.push(a);
    }
    let cat = if heads.len() == 1 { heads[0] } else { Var::concat(&heads, 1)? };
    let output = cat.matmul(w.w_out)?.t()?;
    Ok(Attended { output, weights })
}

/// Width-3 conv1d parameters: `kernel` is `[F, C, 3]`, `bias` is `[F]`.
#[derive(Debug, Clone, Copy)]
pub struct DistillParams<'g> {
    pub kernel: Var<'g>,
    pub bias: Var<'g>,
}

/// `MaxPool(ELU(Conv1d(x)))` on `[B, C, L]`, halving the length.
///
/// An odd length is first padded by repeating the last element.
pub fn distill_layer<'g>(x: Var<'g>, p: &DistillParams<'g>) -> Result<Var<'g>> {
    let s = x.shape();
    if s.len() != 3 || s[2] < 2 {
        return Err(Error::shape("distill_layer", format!("expected [B,C,L] with L >= 2, got {s:?}")));
    }
    let x = if s[2] % 2 == 1 { Var::concat(&[x, x.narrow(2, s[2] - 1, 1)?], 2)? } else { x };
    let y = conv1d(x, p.kernel, Some(p.bias))?.elu()?;
    maxpool(y, 2, &[2])
}

/// Parameters of the position attention module.
#[derive(Debug, Clone)]
pub struct PamState<'g> {
    pub norm: Norm<'g>,
    /// PReLU slope, shape `[1]`.
    pub prelu: Var<'g>,
    pub conv_a: Conv<'g>,
    pub conv_b: Conv<'g>,
    pub conv_c: Conv<'g>,
    /// Blend weight, shape `[1]`; starts at 0.
    pub lambda: Var<'g>,
    pub affinity_cap: usize,
}

#[derive(Debug, Clone)]
pub struct PamOutput<'g> {
    pub output: Var<'g>,
    /// Per sample, `S[i, j]` is the weight of source position `j` for target `i`.
    pub affinity: Vec<Var<'g>>,
    pub running: Option<RunningStats>,
}

/// Position attention over `[N, C, D, H, W]` features.
///
/// `A`, `B`, `C` are 1x1x1 convolutions of `PReLU(BN(F))`. For each sample
/// the affinity is `S = softmax_j(B_i . A_j)` over the `D*H*W` positions
/// and the output is `lambda * sum_j S[i, j] C_j + F_i`.
pub fn pam_forward<'g>(f: Var<'g>, state: &PamState<'g>) -> Result<PamOutput<'g>> {
    let s = f.shape();
    if s.len() != 5 {
        return Err(Error::shape("pam_forward", format!("expected [N,C,D,H,W], got {s:?}")));
    }
    let (n, c) = (s[0], s[1]);
    let m = s[2] * s[3] * s[4];
    if m > state.affinity_cap {
        return Err(Error::AffinityCap { positions: m, cap: state.affinity_cap });
    }
    for (name, conv) in [("A", &state.conv_a), ("B", &state.conv_b), ("C", &state.conv_c)] {
        if conv.weight.shape() != [c, c, 1, 1, 1] {
            return Err(Error::shape("pam_forward", format!("conv {name} is {:?} for {c} channels", conv.weight.shape())));
        }
    }
    let (h, running) = state.norm.apply(f)?;
    let h = h.prelu(state.prelu)?;
    let a = state.conv_a.same(h)?;
    let b = state.conv_b.same(h)?;
    let cv = state.conv_c.same(h)?;

    let mut outs = Vec::with_capacity(n);
    let mut affinity = Vec::with_capacity(n);
    for i in 0..n {
        let flat = |t: Var<'g>| t.narrow(0, i, 1)?.reshape(&[c, m]);
        let (ai, bi, ci) = (flat(a)?, flat(b)?, flat(cv)?);
        let si = bi.t()?.matmul(ai)?.softmax(1)?;
        outs.push(ci.matmul(si.t()?)?.reshape(&[1, c, s[2], s[3], s[4]])?);
        affinity.push(si);
    }
    let mixed = if n == 1 { outs[0] } else { Var::concat(&outs, 0)? };
    let output = mixed.mul(state.lambda)?.add(f)?;
    Ok(PamOutput { output, affinity, running })
}

/// Additive attention gate parameters. All maps are 1x1x1 convolutions:
/// `w_x` is `[F_int, F_l]`, `w_g` is `[F_int, F_g]` with bias `b_g`, and
/// `phi` maps `F_int` to one coefficient channel (or `F_l` channels when
/// coefficients are per channel) with bias `b_phi`.
#[derive(Debug, Clone, Copy)]
pub struct GateParams<'g> {
    pub w_x: Var<'g>,
    pub w_g: Var<'g>,
    pub b_g: Var<'g>,
    pub phi: Var<'g>,
    pub b_phi: Var<'g>,
    /// Inner nonlinearity applied to `W_x x + W_g g + b_g`.
    pub sigma1: Activation,
}

#[derive(Debug, Clone, Copy)]
pub struct Gated<'g> {
    pub gated: Var<'g>,
    pub alpha: Var<'g>,
}

/// Gates skip features `x_l` `[N, F_l, ...]` with the coarser signal `g`
/// `[N, F_g, ...]`, which is trilinearly resized to `x_l`'s grid.
///
/// `alpha = sigmoid(phi(sigma1(W_x x + W_g g + b_g)) + b_phi)` and the
/// output is `x_l * alpha` broadcast over channels.
pub fn attention_gate<'g>(x_l: Var<'g>, g: Var<'g>, p: &GateParams<'g>) -> Result<Gated<'g>> {
    let (xs, gs) = (x_l.shape(), g.shape());
    if xs.len() != 5 || gs.len() != 5 || xs[0] != gs[0] {
        return Err(Error::shape("attention_gate", format!("skip {xs:?} and gating signal {gs:?} are incompatible")));
    }
    let (wx, wg, phi) = (p.w_x.shape(), p.w_g.shape(), p.phi.shape());
    let f_int = wx[0];
    let ok = f_int >= 1
        && wx == [f_int, xs[1], 1, 1, 1]
        && wg == [f_int, gs[1], 1, 1, 1]
        && p.b_g.shape() == [f_int]
        && phi.len() == 5
        && (phi[0] == 1 || phi[0] == xs[1])
        && phi[1..] == [f_int, 1, 1, 1]
        && p.b_phi.shape() == [phi[0]];
    if !ok {
        return Err(Error::shape(
            "attention_gate",
            format!("parameters W_x {wx:?}, W_g {wg:?}, phi {phi:?} do not fit skip {xs:?} / gate {gs:?}"),
        ));
    }
    let g = if gs[2..] == xs[2..] { g } else { resize_trilinear(g, [xs[2], xs[3], xs[4]])? };
    let inner = Conv::new(p.w_x, None).same(x_l)?.add(Conv::new(p.w_g, Some(p.b_g)).same(g)?)?;
    let q = Conv::new(p.phi, Some(p.b_phi)).same(inner.activation(p.sigma1)?)?;
    let alpha = q.sigmoid()?;
    Ok(Gated { gated: x_l.mul(alpha)?, alpha })
}
