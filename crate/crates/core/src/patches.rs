//! Volume-to-sequence front end: non-overlapping `P x P x P` patches,
//! linear patch embedding with a learnable position embedding, and the
//! inverse mapping from a token sequence back onto the patch grid.
//!
//! Tokens are ordered in raster order over the patch grid (depth slowest,
//! width fastest). Within a token the layout is `[C, P, P, P]` flattened.

use crate::autodiff::Var;
use crate::error::{Error, Result};

/// A tokenized volume: `tokens` is `[N, P^3 * C]`.
#[derive(Debug, Clone, Copy)]
pub struct PatchSequence<'g> {
    pub tokens: Var<'g>,
    pub patch_size: usize,
    /// `[C, D, H, W]` of the source volume.
    pub source_shape: [usize; 4],
}

impl PatchSequence<'_> {
    /// Patch-grid extents `[D/P, H/P, W/P]`.
    pub fn grid(&self) -> [usize; 3] {
        let [_, d, h, w] = self.source_shape;
        let p = self.patch_size;
        [d / p, h / p, w / p]
    }

    pub fn len(&self) -> usize {
        self.grid().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn token_len(&self) -> usize {
        self.source_shape[0] * self.patch_size.pow(3)
    }
}

/// Learnable parameters of the patch embedding.
#[derive(Debug, Clone, Copy)]
pub struct PatchEmbedding<'g> {
    /// `[P^3 * C, d]`
    pub projection: Var<'g>,
    /// `[d, N]`
    pub position: Var<'g>,
}

fn as_cdhw(shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [c, d, h, w] => Ok([c, d, h, w]),
        _ => Err(Error::shape("patchify", format!("expected [C,D,H,W], got {shape:?}"))),
    }
}

/// Splits `[C, D, H, W]` into `N = D*H*W / P^3` tokens of length `P^3 * C`.
pub fn patchify<'g>(volume: Var<'g>, patch_size: usize) -> Result<PatchSequence<'g>> {
    let [c, d, h, w] = as_cdhw(&volume.shape())?;
    let p = patch_size;
    if p == 0 || d % p != 0 || h % p != 0 || w % p != 0 {
        return Err(Error::shape(
            "patchify",
            format!("extents {d}x{h}x{w} are not divisible by patch size {p}"),
        ));
    }
    let (gd, gh, gw) = (d / p, h / p, w / p);
    let tokens = volume
        .reshape(&[c, gd, p, gh, p, gw, p])?
        .permute(&[1, 3, 5, 0, 2, 4, 6])?
        .reshape(&[gd * gh * gw, c * p * p * p])?;
    Ok(PatchSequence { tokens, patch_size: p, source_shape: [c, d, h, w] })
}

/// Exact inverse of [`patchify`].
pub fn unpatchify<'g>(seq: &PatchSequence<'g>) -> Result<Var<'g>> {
    let [c, d, h, w] = seq.source_shape;
    let p = seq.patch_size;
    let shape = seq.tokens.shape();
    if p == 0 || d % p != 0 || h % p != 0 || w % p != 0 || shape != [seq.len(), seq.token_len()] {
        return Err(Error::shape(
            "unpatchify",
            format!("tokens {shape:?} inconsistent with source {:?} and patch size {p}", seq.source_shape),
        ));
    }
    let [gd, gh, gw] = seq.grid();
    seq.tokens
        .reshape(&[gd, gh, gw, c, p, p, p])?
        .permute(&[3, 0, 4, 1, 5, 2, 6])?
        .reshape(&[c, d, h, w])
}

/// `z0 = (X W)^T + E_pos`, a `[d, N]` feature map.
pub fn embed<'g>(seq: &PatchSequence<'g>, emb: &PatchEmbedding<'g>) -> Result<Var<'g>> {
    let ps = emb.projection.shape();
    let es = emb.position.shape();
    let (n, len) = (seq.len(), seq.token_len());
    if ps.len() != 2 || ps[0] != len {
        return Err(Error::shape("embed", format!("projection {ps:?} for tokens of length {len}")));
    }
    if es != [ps[1], n] {
        return Err(Error::shape(
            "embed",
            format!("position embedding {es:?} does not match [d={}, N={n}]", ps[1]),
        ));
    }
    seq.tokens.matmul(emb.projection)?.t()?.add(emb.position)
}

/// `[d, N] -> [d, gd, gh, gw]`, placing token `i` at raster cell `i`.
pub fn reshape_sequence_to_grid<'g>(z: Var<'g>, grid: [usize; 3]) -> Result<Var<'g>> {
    let s = z.shape();
    let n: usize = grid.iter().product();
    if s.len() != 2 || s[1] != n {
        return Err(Error::shape("reshape_sequence_to_grid", format!("{s:?} onto grid {grid:?}")));
    }
    z.reshape(&[s[0], grid[0], grid[1], grid[2]])
}

/// `[d, gd, gh, gw] -> [d, N]`.
pub fn flatten_grid(x: Var<'_>) -> Result<Var<'_>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape("flatten_grid", format!("expected [d,gd,gh,gw], got {s:?}")));
    }
    x.reshape(&[s[0], s[1] * s[2] * s[3]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::rand_tensor;
    use crate::autodiff::Graph;
    use crate::tensor::Tensor;

    #[test]
    fn token_count_and_length() {
        let g = Graph::new();
        let v = g.constant(rand_tensor(&[1, 8, 8, 8], 1));
        let seq = patchify(v, 2).unwrap();
        assert_eq!(seq.tokens.shape(), vec![64, 8]);
        assert_eq!(seq.len(), 64);
    }

    #[test]
    fn full_extent_patch_is_flattened_volume() {
        let g = Graph::new();
        let t = rand_tensor(&[2, 4, 4, 4], 2);
        let seq = patchify(g.constant(t.clone()), 4).unwrap();
        assert_eq!(seq.tokens.shape(), vec![1, 128]);
        assert_eq!(seq.tokens.value().data(), t.data());
    }

    #[test]
    fn raster_order_and_in_token_layout() {
        let g = Graph::new();
        let t = Tensor::from_fn(&[2, 4, 4, 4], |i| (i[0] * 1000 + i[1] * 100 + i[2] * 10 + i[3]) as f64);
        let seq = patchify(g.constant(t.clone()), 2).unwrap();
        let tok = seq.tokens.value();
        // token (gd=1, gh=0, gw=1) is raster index 1*4 + 0*2 + 1 = 5
        for c in 0..2 {
            for a in 0..2 {
                for b in 0..2 {
                    for e in 0..2 {
                        let want = t.get(&[c, 2 + a, b, 2 + e]);
                        assert_eq!(tok.get(&[5, ((c * 2 + a) * 2 + b) * 2 + e]), want);
                    }
                }
            }
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let g = Graph::new();
        let t = rand_tensor(&[3, 4, 6, 2], 3);
        let seq = patchify(g.constant(t.clone()), 2).unwrap();
        assert!(unpatchify(&seq).unwrap().value().bitwise_eq(&t));
        let zeros = PatchSequence { tokens: g.constant(Tensor::zeros(&[6, 24])), ..seq };
        assert_eq!(unpatchify(&zeros).unwrap().value().max_abs(), 0.0);
    }

    #[test]
    fn corrupted_source_shape_is_rejected() {
        let g = Graph::new();
        let seq = patchify(g.constant(rand_tensor(&[1, 4, 4, 4], 4)), 2).unwrap();
        let bad = PatchSequence { source_shape: [1, 4, 4, 6], ..seq };
        assert!(unpatchify(&bad).is_err());
        assert!(patchify(g.constant(rand_tensor(&[1, 4, 4, 5], 4)), 2).is_err());
    }

    #[test]
    fn embed_special_cases() {
        let g = Graph::new();
        let seq = patchify(g.constant(rand_tensor(&[1, 4, 4, 4], 5)), 2).unwrap();
        let zero = PatchEmbedding {
            projection: g.constant(Tensor::zeros(&[8, 6])),
            position: g.constant(Tensor::zeros(&[6, 8])),
        };
        assert_eq!(embed(&seq, &zero).unwrap().value().max_abs(), 0.0);

        let ident = PatchEmbedding {
            projection: g.constant(Tensor::eye(8)),
            position: g.constant(Tensor::zeros(&[8, 8])),
        };
        let z = embed(&seq, &ident).unwrap().value();
        assert!(z.bitwise_eq(&seq.tokens.value().permute(&[1, 0]).unwrap()));

        let wrong = PatchEmbedding {
            projection: g.constant(Tensor::eye(8)),
            position: g.constant(Tensor::zeros(&[8, 27])),
        };
        assert!(embed(&seq, &wrong).is_err());
    }

    #[test]
    fn embed_matches_double_loop() {
        let g = Graph::new();
        let seq = patchify(g.constant(rand_tensor(&[2, 4, 2, 4], 6)), 2).unwrap();
        let (w, e) = (rand_tensor(&[16, 5], 7), rand_tensor(&[5, 4], 8));
        let emb = PatchEmbedding { projection: g.constant(w.clone()), position: g.constant(e.clone()) };
        let z = embed(&seq, &emb).unwrap().value();
        let x = seq.tokens.value();
        let want = Tensor::from_fn(&[5, 4], |i| {
            let mut s = e.get(&[i[0], i[1]]);
            for k in 0..16 {
                s += x.get(&[i[1], k]) * w.get(&[k, i[0]]);
            }
            s
        });
        assert!(z.max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn grid_reshape_places_tokens_in_raster_cells() {
        let g = Graph::new();
        let z = g.constant(Tensor::from_fn(&[1, 8], |i| i[1] as f64));
        let grid = reshape_sequence_to_grid(z, [2, 2, 2]).unwrap().value();
        for i in 0..8 {
            assert_eq!(grid.get(&[0, i / 4, (i / 2) % 2, i % 2]), i as f64);
        }
        let back = flatten_grid(g.constant(grid)).unwrap().value();
        assert!(back.bitwise_eq(&z.value()));
        assert!(reshape_sequence_to_grid(z, [2, 2, 3]).is_err());
    }

    #[test]
    fn patch_grid_cells_follow_ramp_indices() {
        // value = 100*d + 10*h + w; the grid cell (a,b,c) of channel k holds
        // the patch-local element k = (pd, ph, pw) of patch (a,b,c).
        let g = Graph::new();
        let t = Tensor::from_fn(&[1, 4, 4, 4], |i| (100 * i[1] + 10 * i[2] + i[3]) as f64);
        let seq = patchify(g.constant(t), 2).unwrap();
        let grid = reshape_sequence_to_grid(seq.tokens.t().unwrap(), seq.grid()).unwrap().value();
        for k in 0..8 {
            let (pd, ph, pw) = (k / 4, (k / 2) % 2, k % 2);
            for a in 0..2 {
                for b in 0..2 {
                    for c in 0..2 {
                        let want = (100 * (2 * a + pd) + 10 * (2 * b + ph) + 2 * c + pw) as f64;
                        assert_eq!(grid.get(&[k, a, b, c]), want);
                    }
                }
            }
        }
    }
}
