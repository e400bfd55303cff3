//! Elementwise arithmetic, activations, reductions, shape ops, matmul and softmax.

use super::Var;
use crate::error::{Error, Result};
use crate::tensor::{numel, strides, Tensor};

/// Pointwise nonlinearities. PReLU takes its slope as a separate learnable
/// scalar, see [`Var::prelu`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// ELU with alpha = 1.
    Elu,
    Sigmoid,
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape(op, format!("cannot broadcast {a:?} with {b:?}"))),
        };
    }
    Ok(out)
}

/// Strides of `shape` right-aligned to `out_shape`, zero on broadcast axes.
fn aligned_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let s = strides(shape);
    let lead = out_shape.len() - shape.len();
    (0..out_shape.len())
        .map(|i| if i < lead || shape[i - lead] == 1 { 0 } else { s[i - lead] })
        .collect()
}

/// Materializes `t` broadcast to `out_shape`.
fn expand(t: &Tensor, out_shape: &[usize]) -> Vec<f64> {
    if t.shape() == out_shape {
        return t.data().to_vec();
    }
    let st = aligned_strides(t.shape(), out_shape);
    let n = numel(out_shape);
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let mut off = 0usize;
    let src = t.data();
    for _ in 0..n {
        out.push(src[off]);
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            off += st[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= st[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

/// Sums a full-size gradient buffer down to a broadcast operand's shape.
fn sum_to(full: Vec<f64>, out_shape: &[usize], shape: &[usize]) -> Tensor {
    if shape == out_shape {
        return Tensor::from_parts(shape.to_vec(), full);
    }
    let st = aligned_strides(shape, out_shape);
    let mut acc = vec![0.0; numel(shape)];
    let mut idx = vec![0usize; out_shape.len()];
    let mut off = 0usize;
    for v in full {
        acc[off] += v;
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            off += st[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= st[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::from_parts(shape.to_vec(), acc)
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl<'g> Var<'g> {
    fn binary(self, other: Var<'g>, kind: Binary) -> Result<Var<'g>> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let a = self.value();
        let b = other.value();
        let out_shape = broadcast_shape(name, a.shape(), b.shape())?;
        let av = expand(&a, &out_shape);
        let bv = expand(&b, &out_shape);
        let data: Vec<f64> = match kind {
            Binary::Add => av.iter().zip(&bv).map(|(x, y)| x + y).collect(),
            Binary::Sub => av.iter().zip(&bv).map(|(x, y)| x - y).collect(),
            Binary::Mul => av.iter().zip(&bv).map(|(x, y)| x * y).collect(),
            Binary::Div => av.iter().zip(&bv).map(|(x, y)| x / y).collect(),
        };
        let value = Tensor::from_parts(out_shape.clone(), data);
        let (a_shape, b_shape) = (a.shape().to_vec(), b.shape().to_vec());
        self.graph.record(name, value, &[self, other], move |g| {
            let g = g.data();
            let (ga, gb): (Vec<f64>, Vec<f64>) = match kind {
                Binary::Add => (g.to_vec(), g.to_vec()),
                Binary::Sub => (g.to_vec(), g.iter().map(|x| -x).collect()),
                Binary::Mul => (
                    g.iter().zip(&bv).map(|(g, b)| g * b).collect(),
                    g.iter().zip(&av).map(|(g, a)| g * a).collect(),
                ),
                Binary::Div => (
                    g.iter().zip(&bv).map(|(g, b)| g / b).collect(),
                    g.iter().zip(av.iter().zip(&bv)).map(|(g, (a, b))| -g * a / (b * b)).collect(),
                ),
            };
            vec![
                Some(sum_to(ga, &out_shape, &a_shape)),
                Some(sum_to(gb, &out_shape, &b_shape)),
            ]
        })
    }

    /// Elementwise sum with NumPy-style broadcasting.
    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Binary::Sub)
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Binary::Mul)
    }

    pub fn div(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Binary::Div)
    }

    fn unary(
        self,
        name: &'static str,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Var<'g>> {
        let x = self.value();
        let y = x.map(f);
        let y_saved = y.clone();
        self.graph.record(name, y, &[self], move |g| {
            let data = g
                .data()
                .iter()
                .zip(x.data().iter().zip(y_saved.data()))
                .map(|(g, (&x, &y))| g * df(x, y))
                .collect();
            vec![Some(Tensor::from_parts(g.shape().to_vec(), data))]
        })
    }

    pub fn scale(self, c: f64) -> Result<Var<'g>> {
        self.unary("scale", |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'g>> {
        self.unary("add_scalar", |x| x + c, |_, _| 1.0)
    }

    pub fn neg(self) -> Result<Var<'g>> {
        self.scale(-1.0)
    }

    pub fn exp(self) -> Result<Var<'g>> {
        self.unary("exp", f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Result<Var<'g>> {
        self.unary("ln", f64::ln, |x, _| 1.0 / x)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(self, lo: f64, hi: f64) -> Result<Var<'g>> {
        self.unary(
            "clamp",
            move |x| x.clamp(lo, hi),
            move |x, _| if x < lo || x > hi { 0.0 } else { 1.0 },
        )
    }

    pub fn activation(self, kind: Activation) -> Result<Var<'g>> {
        match kind {
            // Subgradient at 0 is the positive-side slope.
            Activation::Relu => self.unary("relu", |x| x.max(0.0), |x, _| if x >= 0.0 { 1.0 } else { 0.0 }),
            Activation::Elu => self.unary(
                "elu",
                |x| if x > 0.0 { x } else { x.exp_m1() },
                |x, y| if x > 0.0 { 1.0 } else { y + 1.0 },
            ),
            Activation::Sigmoid => self.unary("sigmoid", sigmoid, |_, y| y * (1.0 - y)),
        }
    }

    pub fn relu(self) -> Result<Var<'g>> {
        self.activation(Activation::Relu)
    }

    pub fn elu(self) -> Result<Var<'g>> {
        self.activation(Activation::Elu)
    }

    pub fn sigmoid(self) -> Result<Var<'g>> {
        self.activation(Activation::Sigmoid)
    }

    /// Parametric ReLU `max(0,x) + a*min(0,x)` with a learnable scalar slope `a`.
    pub fn prelu(self, slope: Var<'g>) -> Result<Var<'g>> {
        if slope.value().numel() != 1 {
            return Err(Error::shape("prelu", format!("slope must be a scalar, got {:?}", slope.shape())));
        }
        let a = slope.value().item();
        let x = self.value();
        let y = x.map(|v| if v >= 0.0 { v } else { a * v });
        self.graph.record("prelu", y, &[self, slope], move |g| {
            let mut gx = Vec::with_capacity(g.numel());
            let mut ga = 0.0;
            for (&g, &v) in g.data().iter().zip(x.data()) {
                if v >= 0.0 {
                    gx.push(g);
                } else {
                    gx.push(a * g);
                    ga += g * v;
                }
            }
            vec![
                Some(Tensor::from_parts(g.shape().to_vec(), gx)),
                Some(Tensor::from_parts(vec![1], vec![ga])),
            ]
        })
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(self) -> Result<Var<'g>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.graph.record("sum", Tensor::scalar(x.sum()), &[self], move |g| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean(self) -> Result<Var<'g>> {
        let n = self.value().numel() as f64;
        self.sum()?.scale(1.0 / n)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let x = self.value();
        let y = x.reshape(shape)?;
        let in_shape = x.shape().to_vec();
        self.graph.record("reshape", y, &[self], move |g| {
            vec![Some(g.reshape(&in_shape).expect("reshape backward"))]
        })
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'g>> {
        let y = self.value().permute(perm)?;
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        self.graph.record("permute", y, &[self], move |g| {
            vec![Some(g.permute(&inverse).expect("permute backward"))]
        })
    }

    /// Transpose of a matrix.
    pub fn t(self) -> Result<Var<'g>> {
        if self.shape().len() != 2 {
            return Err(Error::shape("transpose", format!("expected a matrix, got {:?}", self.shape())));
        }
        self.permute(&[1, 0])
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'g>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::invalid(
                "narrow",
                format!("axis {axis} range {start}..{} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        self.graph.record("narrow", Tensor::from_parts(out_shape, data), &[self], move |g| {
            let mut gx = vec![0.0; numel(&shape)];
            for o in 0..outer {
                let base = (o * full + start) * inner;
                gx[base..base + len * inner]
                    .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::from_parts(shape.clone(), gx))]
        })
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let values: Vec<Tensor> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(Error::invalid("concat", format!("axis {axis} for rank {}", base.len())));
        }
        for v in &values[1..] {
            let s = v.shape();
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(Error::shape("concat", format!("{base:?} vs {s:?} on axis {axis}")));
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &l) in values.iter().zip(&lens) {
                data.extend_from_slice(&v.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        first.graph.record("concat", Tensor::from_parts(out_shape, data), parts, move |g| {
            let mut grads: Vec<Vec<f64>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
            let gd = g.data();
            let mut off = 0;
            for _ in 0..outer {
                for (gv, &l) in grads.iter_mut().zip(&lens) {
                    gv.extend_from_slice(&gd[off..off + l * inner]);
                    off += l * inner;
                }
            }
            grads
                .into_iter()
                .zip(&shapes)
                .map(|(gv, s)| Some(Tensor::from_parts(s.clone(), gv)))
                .collect()
        })
    }

    /// Matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        let a = self.value();
        let b = other.value();
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let y = Tensor::from_parts(vec![m, n], matmul_nn(a.data(), b.data(), m, k, n));
        self.graph.record("matmul", y, &[self, other], move |g| {
            // dA = G B^T, dB = A^T G
            let ga = matmul_nt(g.data(), b.data(), m, n, k);
            let gb = matmul_tn(a.data(), g.data(), m, k, n);
            vec![
                Some(Tensor::from_parts(vec![m, k], ga)),
                Some(Tensor::from_parts(vec![k, n], gb)),
            ]
        })
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'g>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("softmax", format!("axis {axis} for rank {}", shape.len())));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xd = x.data();
        let mut y = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * len * inner + k * inner + i;
                let m = (0..len).map(|k| xd[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for k in 0..len {
                    let e = (xd[at(k)] - m).exp();
                    y[at(k)] = e;
                    s += e;
                }
                for k in 0..len {
                    y[at(k)] /= s;
                }
            }
        }
        let y = Tensor::from_parts(shape.clone(), y);
        let y_saved = y.clone();
        self.graph.record("softmax", y, &[self], move |g| {
            let (gd, yd) = (g.data(), y_saved.data());
            let mut gx = vec![0.0; gd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| o * len * inner + k * inner + i;
                    let dot: f64 = (0..len).map(|k| gd[at(k)] * yd[at(k)]).sum();
                    for k in 0..len {
                        gx[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
                    }
                }
            }
            vec![Some(Tensor::from_parts(shape.clone(), gx))]
        })
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `A[m,k] * B[k,n]`.
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            for (cj, &bj) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cj += aip * bj;
            }
        }
    }
    c
}

/// `A[m,k] * B[n,k]^T`.
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let ai = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] = ai.iter().zip(&b[j * k..(j + 1) * k]).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// `A[m,k]^T * B[m,n]` giving `[k,n]`.
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let bi = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            for (cj, &bj) in c[p * n..(p + 1) * n].iter_mut().zip(bi) {
                *cj += aip * bj;
            }
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape("t", &[2, 1, 4], &[3, 1]).unwrap(), vec![2, 3, 4]);
        assert_eq!(broadcast_shape("t", &[1], &[5, 6]).unwrap(), vec![5, 6]);
        assert!(broadcast_shape("t", &[2, 3], &[3, 2]).is_err());
    }

    #[test]
    fn broadcast_mul_gradient_reduces() {
        let g = Graph::new();
        let x = g.param(Tensor::from_fn(&[2, 3], |i| (i[0] * 3 + i[1]) as f64));
        let s = g.param(Tensor::full(&[1], 2.0));
        let y = x.mul(s).unwrap().sum().unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(s).unwrap().item(), 15.0);
        assert!(grads.get(x).unwrap().bitwise_eq(&Tensor::full(&[2, 3], 2.0)));
    }

    #[test]
    fn matmul_identity_and_scalar_case() {
        let g = Graph::new();
        let a = Tensor::from_fn(&[3, 4], |i| (i[0] as f64) - 0.5 * i[1] as f64);
        let av = g.constant(a.clone());
        let out = av.matmul(g.constant(Tensor::eye(4))).unwrap();
        assert!(out.value().bitwise_eq(&a));
        let s = g.constant(Tensor::full(&[1, 1], 3.0)).matmul(g.constant(Tensor::full(&[1, 1], -2.5))).unwrap();
        assert_eq!(s.item(), -7.5);
        assert!(av.matmul(av).is_err());
    }

    #[test]
    fn softmax_closed_forms() {
        let g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 2], vec![0.0, 3f64.ln()]).unwrap());
        let y = x.softmax(1).unwrap().value();
        assert!((y.data()[0] - 0.25).abs() < 1e-15);
        assert!((y.data()[1] - 0.75).abs() < 1e-15);

        let u = g.constant(Tensor::full(&[5], 7.0)).softmax(0).unwrap().value();
        assert!(u.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));

        let row = Tensor::new(vec![4], vec![0.3, -1.0, 2.0, 0.1]).unwrap();
        let a = g.constant(row.clone()).softmax(0).unwrap().value();
        let b = g.constant(row.map(|v| v + 123.0)).softmax(0).unwrap().value();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-15);
    }

    #[test]
    fn activation_values() {
        let g = Graph::new();
        let x = g.constant(Tensor::new(vec![3], vec![0.0, -1.0, 2.0]).unwrap());
        assert_eq!(x.relu().unwrap().value().data(), &[0.0, 0.0, 2.0]);
        let e = x.elu().unwrap().value();
        assert_eq!(e.data()[0], 0.0);
        assert!((e.data()[1] - ((-1f64).exp() - 1.0)).abs() < 1e-15);
        assert!((e.data()[1] + 0.63212).abs() < 1e-5);
        assert_eq!(x.sigmoid().unwrap().value().data()[0], 0.5);
        let one = g.constant(Tensor::scalar(1.0));
        assert!(x.prelu(one).unwrap().value().bitwise_eq(&x.value()));
    }

    #[test]
    fn narrow_and_concat_invert() {
        let g = Graph::new();
        let t = Tensor::from_fn(&[2, 5, 3], |i| (i[0] * 100 + i[1] * 10 + i[2]) as f64);
        let x = g.constant(t.clone());
        let a = x.narrow(1, 0, 2).unwrap();
        let b = x.narrow(1, 2, 3).unwrap();
        assert_eq!(b.value().get(&[1, 0, 2]), 122.0);
        let c = Var::concat(&[a, b], 1).unwrap();
        assert!(c.value().bitwise_eq(&t));
    }
}
