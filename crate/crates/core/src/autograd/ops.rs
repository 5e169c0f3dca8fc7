//! Primitive differentiable operations.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::Var;

/// Numpy-style broadcast of two shapes (trailing alignment, size 1 stretches).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out`, zero along broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + rank - shape.len();
        strides[oi] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visits every output offset together with the matching input offsets.
fn for_each_pair(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n: usize = out.iter().product();
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in 0..n {
        f(o, oa, ob);
        let mut d = rank;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Sums `grad` (shaped like the broadcast result) down to `target`.
pub fn sum_to_shape<T: Scalar>(grad: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    if grad.shape() == target {
        return grad.clone();
    }
    let out = grad.shape();
    let st = broadcast_strides(target, out);
    let zeros = vec![0; out.len()];
    let mut acc = Tensor::zeros(target);
    let g = grad.data();
    let a = acc.data_mut();
    for_each_pair(out, &st, &zeros, |o, t, _| a[t] += g[o]);
    acc
}

fn zip_broadcast<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    out: &[usize],
    f: impl Fn(T, T) -> T,
) -> Tensor<T> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::from_parts(out.to_vec(), data);
    }
    let sa = broadcast_strides(a.shape(), out);
    let sb = broadcast_strides(b.shape(), out);
    let n = out.iter().product();
    let mut data = vec![T::zero(); n];
    let (ad, bd) = (a.data(), b.data());
    for_each_pair(out, &sa, &sb, |o, ia, ib| data[o] = f(ad[ia], bd[ib]));
    Tensor::from_parts(out.to_vec(), data)
}

/// `g ⊙ h(a, b)` evaluated on the broadcast grid, where `g` is output-shaped.
fn grad_broadcast<T: Scalar>(
    g: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    h: impl Fn(T, T) -> T,
) -> Tensor<T> {
    let out = g.shape();
    let sa = broadcast_strides(a.shape(), out);
    let sb = broadcast_strides(b.shape(), out);
    let mut data = vec![T::zero(); g.numel()];
    let (ad, bd, gd) = (a.data(), b.data(), g.data());
    for_each_pair(out, &sa, &sb, |o, ia, ib| data[o] = gd[o] * h(ad[ia], bd[ib]));
    Tensor::from_parts(out.to_vec(), data)
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn name(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
        }
    }
}

fn unary<'t, T: Scalar>(
    x: Var<'t, T>,
    f: impl Fn(T) -> T,
    // derivative in terms of (input, output)
    df: impl Fn(T, T) -> T + 'static,
) -> Var<'t, T> {
    let out = x.value().map(f);
    x.tape().record(
        out,
        &[x],
        Box::new(move |p, y, g| {
            let data = p[0]
                .data()
                .iter()
                .zip(y.data())
                .zip(g.data())
                .map(|((&xi, &yi), &gi)| gi * df(xi, yi))
                .collect();
            vec![Some(Tensor::from_parts(y.shape().to_vec(), data))]
        }),
    )
}

impl<'t, T: Scalar> Var<'t, T> {
    fn binary(self, other: Var<'t, T>, op: BinOp) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let out_shape = broadcast_shape(a.shape(), b.shape())
            .ok_or_else(|| Error::shape(op.name(), a.shape(), b.shape()))?;
        if let BinOp::Div = op {
            if b.data().iter().any(|v| v.is_zero()) {
                return Err(Error::Numeric(format!(
                    "division by zero: denominator of shape {:?} contains 0",
                    b.shape()
                )));
            }
        }
        let out = match op {
            BinOp::Add => zip_broadcast(&a, &b, &out_shape, |x, y| x + y),
            BinOp::Sub => zip_broadcast(&a, &b, &out_shape, |x, y| x - y),
            BinOp::Mul => zip_broadcast(&a, &b, &out_shape, |x, y| x * y),
            BinOp::Div => zip_broadcast(&a, &b, &out_shape, |x, y| x / y),
        };
        drop((a, b));
        Ok(self.tape().record(
            out,
            &[self, other],
            Box::new(move |p, _, g| {
                let (a, b) = (p[0], p[1]);
                let (ga, gb) = match op {
                    BinOp::Add => (g.clone(), g.clone()),
                    BinOp::Sub => (g.clone(), g.map(|v| -v)),
                    BinOp::Mul => (
                        grad_broadcast(g, a, b, |_, y| y),
                        grad_broadcast(g, a, b, |x, _| x),
                    ),
                    BinOp::Div => (
                        grad_broadcast(g, a, b, |_, y| T::one() / y),
                        grad_broadcast(g, a, b, |x, y| -x / (y * y)),
                    ),
                };
                vec![
                    Some(sum_to_shape(&ga, a.shape())),
                    Some(sum_to_shape(&gb, b.shape())),
                ]
            }),
        ))
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinOp::Add)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinOp::Sub)
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinOp::Mul)
    }

    /// Elementwise division; a zero anywhere in the denominator is an error.
    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinOp::Div)
    }

    pub fn scale(self, k: T) -> Var<'t, T> {
        unary(self, move |v| v * k, move |_, _| k)
    }

    pub fn add_scalar(self, k: T) -> Var<'t, T> {
        unary(self, move |v| v + k, |_, _| T::one())
    }

    pub fn neg(self) -> Var<'t, T> {
        self.scale(-T::one())
    }

    pub fn square(self) -> Var<'t, T> {
        unary(self, |v| v * v, |x, _| x + x)
    }

    pub fn relu(self) -> Var<'t, T> {
        unary(
            self,
            |v| if v > T::zero() { v } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    /// Logistic sigmoid, evaluated in a form that never overflows.
    pub fn sigmoid(self) -> Var<'t, T> {
        unary(self, sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn exp(self) -> Var<'t, T> {
        unary(self, |v| v.exp(), |_, y| y)
    }

    /// Square root; inputs must be non-negative.
    pub fn sqrt(self) -> Result<Var<'t, T>> {
        if self.value().data().iter().any(|v| *v < T::zero()) {
            return Err(Error::Numeric("sqrt of negative value".into()));
        }
        Ok(unary(self, |v| v.sqrt(), |_, y| T::lit(0.5) / y))
    }

    pub fn sum(self) -> Var<'t, T> {
        let shape = self.shape();
        let total = self.value().sum();
        self.tape().record(
            Tensor::scalar(total),
            &[self],
            Box::new(move |_, _, g| vec![Some(Tensor::full(&shape, g.item()))]),
        )
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = T::from_usize(self.value().numel()).unwrap();
        self.sum().scale(T::one() / n)
    }

    /// Sums along `axis`, keeping it as a size-1 dimension.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::invalid(format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = 1;
        let x = self.value();
        let xd = x.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += xd[base + i];
                }
            }
        }
        drop(x);
        Ok(self.tape().record(
            Tensor::from_parts(out_shape, out),
            &[self],
            Box::new(move |_, _, g| {
                let gd = g.data();
                let mut gx = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    for k in 0..n {
                        let base = (o * n + k) * inner;
                        gx[base..base + inner].copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(Tensor::from_parts(shape.clone(), gx))]
            }),
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let old = self.shape();
        let out = self.value().clone().reshape(shape)?;
        Ok(self.tape().record(
            out,
            &[self],
            Box::new(move |_, _, g| vec![Some(g.clone().reshape(&old).expect("same numel"))]),
        ))
    }

    /// Matrix product of `[m,k]` by `[k,n]`.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0) {
            return Err(Error::shape("matmul", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
        let mut c = vec![T::zero(); m * n];
        T::gemm(m, k, n, a.data(), (k as isize, 1), b.data(), (n as isize, 1), T::zero(), &mut c, (n as isize, 1));
        drop((a, b));
        Ok(self.tape().record(
            Tensor::from_parts(vec![m, n], c),
            &[self, other],
            Box::new(move |p, _, g| {
                let (a, b) = (p[0].data(), p[1].data());
                let mut ga = vec![T::zero(); m * k];
                let mut gb = vec![T::zero(); k * n];
                // dA = dC · Bᵀ
                T::gemm(m, n, k, g.data(), (n as isize, 1), b, (1, n as isize), T::zero(), &mut ga, (k as isize, 1));
                // dB = Aᵀ · dC
                T::gemm(k, m, n, a, (1, k as isize), g.data(), (n as isize, 1), T::zero(), &mut gb, (n as isize, 1));
                vec![
                    Some(Tensor::from_parts(vec![m, k], ga)),
                    Some(Tensor::from_parts(vec![k, n], gb)),
                ]
            }),
        ))
    }

    pub fn transpose(self) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.rank() != 2 {
            return Err(Error::invalid(format!("transpose needs rank 2, got {:?}", x.shape())));
        }
        let (r, c) = (x.dim(0), x.dim(1));
        let out = transpose2(x.data(), r, c);
        drop(x);
        Ok(self.tape().record(
            Tensor::from_parts(vec![c, r], out),
            &[self],
            Box::new(move |_, _, g| vec![Some(Tensor::from_parts(vec![r, c], transpose2(g.data(), c, r)))]),
        ))
    }

    /// Log-softmax along `axis`, stabilised by subtracting the maximum.
    pub fn log_softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::invalid(format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let x = self.value();
        let xd = x.data();
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let mx = (0..n).map(|k| xd[at(k)]).fold(T::neg_infinity(), T::max);
                let lse = (0..n).map(|k| (xd[at(k)] - mx).exp()).sum::<T>().ln() + mx;
                for k in 0..n {
                    out[at(k)] = xd[at(k)] - lse;
                }
            }
        }
        drop(x);
        Ok(self.tape().record(
            Tensor::from_parts(shape, out),
            &[self],
            Box::new(move |_, y, g| {
                let (yd, gd) = (y.data(), g.data());
                let mut gx = vec![T::zero(); yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + i;
                        let gsum: T = (0..n).map(|k| gd[at(k)]).sum();
                        for k in 0..n {
                            gx[at(k)] = gd[at(k)] - yd[at(k)].exp() * gsum;
                        }
                    }
                }
                vec![Some(Tensor::from_parts(y.shape().to_vec(), gx))]
            }),
        ))
    }

    /// Picks `x[i, index[i]]` from a `[b, n]` matrix, giving `[b]`.
    pub fn pick(self, index: &[usize]) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if shape.len() != 2 || shape[0] != index.len() {
            return Err(Error::shape("pick", &shape, &[index.len()]));
        }
        let n = shape[1];
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(format!("index {bad} out of range for {n} columns")));
        }
        let index = index.to_vec();
        let x = self.value();
        let out: Vec<T> = index.iter().enumerate().map(|(r, &c)| x.data()[r * n + c]).collect();
        drop(x);
        Ok(self.tape().record(
            Tensor::from_parts(vec![index.len()], out),
            &[self],
            Box::new(move |_, _, g| {
                let mut gx = vec![T::zero(); index.len() * n];
                for (r, &c) in index.iter().enumerate() {
                    gx[r * n + c] = g.data()[r];
                }
                vec![Some(Tensor::from_parts(vec![index.len(), n], gx))]
            }),
        ))
    }

    /// Concatenates `[b, *]` matrices (rank 2) along the column axis.
    pub fn concat_cols(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let rows = first.shape()[0];
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            if s.len() != 2 || s[0] != rows {
                return Err(Error::shape("concat_cols", &first.shape(), &s));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![T::zero(); rows * total];
        let mut col = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let v = p.value();
            for r in 0..rows {
                out[r * total + col..r * total + col + w].copy_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
            col += w;
        }
        Ok(first.tape().record(
            Tensor::from_parts(vec![rows, total], out),
            parts,
            Box::new(move |_, _, g| {
                let mut col = 0;
                widths
                    .iter()
                    .map(|&w| {
                        let mut gp = vec![T::zero(); rows * w];
                        for r in 0..rows {
                            gp[r * w..(r + 1) * w]
                                .copy_from_slice(&g.data()[r * total + col..r * total + col + w]);
                        }
                        col += w;
                        Some(Tensor::from_parts(vec![rows, w], gp))
                    })
                    .collect()
            }),
        ))
    }

    /// Divides every row of a `[b, n]` matrix by its L2 norm.
    ///
    /// A zero row is an error rather than being silently padded.
    pub fn l2_normalize_rows(self) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::invalid(format!("l2_normalize_rows needs rank 2, got {shape:?}")));
        }
        let (rows, n) = (shape[0], shape[1]);
        let x = self.value();
        let mut norms = Vec::with_capacity(rows);
        let mut out = vec![T::zero(); rows * n];
        for r in 0..rows {
            let row = &x.data()[r * n..(r + 1) * n];
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if !(norm > T::zero()) || !norm.is_finite() {
                return Err(Error::Numeric(format!("row {r} has norm {norm}; cannot normalize")));
            }
            for (o, &v) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = v / norm;
            }
            norms.push(norm);
        }
        drop(x);
        Ok(self.tape().record(
            Tensor::from_parts(shape.clone(), out),
            &[self],
            Box::new(move |_, y, g| {
                let (yd, gd) = (y.data(), g.data());
                let mut gx = vec![T::zero(); yd.len()];
                for r in 0..rows {
                    let s = r * n..(r + 1) * n;
                    let dot: T = yd[s.clone()].iter().zip(&gd[s.clone()]).map(|(&a, &b)| a * b).sum();
                    for k in s {
                        gx[k] = (gd[k] - yd[k] * dot) / norms[r];
                    }
                }
                vec![Some(Tensor::from_parts(shape.clone(), gx))]
            }),
        ))
    }

    /// Mean of each row of `x` viewed as `[rows, cols]`; output takes `out_shape`.
    pub fn row_mean(self, cols: usize, out_shape: &[usize]) -> Result<Var<'t, T>> {
        let (rows, out_shape) = row_view(&self, cols, out_shape)?;
        let x = self.value();
        let inv = T::one() / T::from_usize(cols).unwrap();
        let out: Vec<T> = x.data().chunks_exact(cols).map(|r| r.iter().copied().sum::<T>() * inv).collect();
        drop(x);
        Ok(self.tape().record(
            Tensor::from_parts(out_shape, out),
            &[self],
            Box::new(move |p, _, g| {
                let mut gx = vec![T::zero(); rows * cols];
                for (r, chunk) in gx.chunks_exact_mut(cols).enumerate() {
                    chunk.fill(g.data()[r] * inv);
                }
                vec![Some(Tensor::from_parts(p[0].shape().to_vec(), gx))]
            }),
        ))
    }

    /// Population standard deviation of each row, `sqrt(var + eps)`.
    ///
    /// Single-element rows have no spread and yield exactly 0 with no gradient.
    pub fn row_std(self, cols: usize, eps: T, out_shape: &[usize]) -> Result<Var<'t, T>> {
        let (rows, out_shape) = row_view(&self, cols, out_shape)?;
        if cols == 1 {
            return Ok(self.tape().record(
                Tensor::zeros(&out_shape),
                &[self],
                Box::new(|p, _, _| vec![Some(Tensor::zeros(p[0].shape()))]),
            ));
        }
        let x = self.value();
        let n = T::from_usize(cols).unwrap();
        let mut means = Vec::with_capacity(rows);
        let out: Vec<T> = x
            .data()
            .chunks_exact(cols)
            .map(|r| {
                let mu = r.iter().copied().sum::<T>() / n;
                let var = r.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
                means.push(mu);
                (var + eps).sqrt()
            })
            .collect();
        drop(x);
        Ok(self.tape().record(
            Tensor::from_parts(out_shape, out),
            &[self],
            Box::new(move |p, y, g| {
                let xd = p[0].data();
                let mut gx = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    // d std / d x_k = (x_k - mu) / (n * std)
                    let k = g.data()[r] / (n * y.data()[r]);
                    for c in 0..cols {
                        gx[r * cols + c] = k * (xd[r * cols + c] - means[r]);
                    }
                }
                vec![Some(Tensor::from_parts(p[0].shape().to_vec(), gx))]
            }),
        ))
    }

    /// Maximum of each row; the gradient goes to the first maximal element.
    pub fn row_max(self, cols: usize, out_shape: &[usize]) -> Result<Var<'t, T>> {
        let (rows, out_shape) = row_view(&self, cols, out_shape)?;
        let x = self.value();
        let mut argmax = Vec::with_capacity(rows);
        let out: Vec<T> = x
            .data()
            .chunks_exact(cols)
            .map(|r| {
                let (mut best, mut at) = (r[0], 0);
                for (i, &v) in r.iter().enumerate().skip(1) {
                    if v > best {
                        best = v;
                        at = i;
                    }
                }
                argmax.push(at);
                best
            })
            .collect();
        drop(x);
        Ok(self.tape().record(
            Tensor::from_parts(out_shape, out),
            &[self],
            Box::new(move |p, _, g| {
                let mut gx = vec![T::zero(); rows * cols];
                for (r, &c) in argmax.iter().enumerate() {
                    gx[r * cols + c] = g.data()[r];
                }
                vec![Some(Tensor::from_parts(p[0].shape().to_vec(), gx))]
            }),
        ))
    }
}

fn row_view<T: Scalar>(x: &Var<'_, T>, cols: usize, out_shape: &[usize]) -> Result<(usize, Vec<usize>)> {
    let numel = x.value().numel();
    if cols == 0 || numel % cols != 0 {
        return Err(Error::invalid(format!("cannot view {numel} elements as rows of {cols}")));
    }
    let rows = numel / cols;
    if out_shape.iter().product::<usize>() != rows {
        return Err(Error::shape("row reduction", &[rows], out_shape));
    }
    Ok((rows, out_shape.to_vec()))
}

/// Logistic function clamped to the open interval (0, 1).
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    let y = if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    };
    let top = T::one() - T::epsilon() / T::lit(2.0);
    y.max(T::min_positive_value()).min(top)
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn transpose2<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}
