use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::{fan_in_uniform, Ctx, Module, Param};

/// Output length of a convolution along one axis, `None` when empty.
pub fn conv_output_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    (padded >= kernel && stride > 0).then(|| (padded - kernel) / stride + 1)
}

#[derive(Clone, Copy)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }
}

/// Range of output columns whose input column `ox·sw + kj − pw` is in bounds.
fn valid_cols(g: &Geometry, kj: usize) -> (usize, usize) {
    let lo = if g.pw > kj { (g.pw - kj).div_ceil(g.sw) } else { 0 };
    let hi = if g.w + g.pw > kj { ((g.w - 1 + g.pw - kj) / g.sw + 1).min(g.ow) } else { 0 };
    (lo.min(hi), hi)
}

/// Lays out receptive fields of one image as `[cin·kh·kw, oh·ow]`.
fn im2col<T: Scalar>(x: &[T], g: &Geometry, col: &mut [T]) {
    let p = g.p();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                let (lo, hi) = valid_cols(g, kj);
                for oy in 0..g.oh {
                    let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    let iy = (oy * g.sh + ki) as isize - g.ph as isize;
                    if iy < 0 || iy >= g.h as isize || lo == hi {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    drow[..lo].fill(T::zero());
                    drow[hi..].fill(T::zero());
                    let first = lo * g.sw + kj - g.pw;
                    if g.sw == 1 {
                        drow[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (d, s) in drow[lo..hi].iter_mut().zip(src[first..].iter().step_by(g.sw)) {
                            *d = *s;
                        }
                    }
                }
            }
        }
    }
}

/// Scatters a column matrix back onto the image, accumulating overlaps.
fn col2im<T: Scalar>(col: &[T], g: &Geometry, x: &mut [T]) {
    let p = g.p();
    for c in 0..g.cin {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * p..(row + 1) * p];
                let (lo, hi) = valid_cols(g, kj);
                if lo == hi {
                    continue;
                }
                let first = lo * g.sw + kj - g.pw;
                for oy in 0..g.oh {
                    let iy = (oy * g.sh + ki) as isize - g.ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let srow = &src[oy * g.ow + lo..oy * g.ow + hi];
                    if g.sw == 1 {
                        for (d, &s) in dst[first..first + srow.len()].iter_mut().zip(srow) {
                            *d += s;
                        }
                    } else {
                        for (d, &s) in dst[first..].iter_mut().step_by(g.sw).zip(srow) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation of `x: [n, cin, h, w]` with `w: [cout, cin, kh, kw]`.
pub fn conv2d<'t, T: Scalar>(
    x: Var<'t, T>,
    weight: Var<'t, T>,
    bias: Option<Var<'t, T>>,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Var<'t, T>> {
    let (xs, ws) = (x.shape(), weight.shape());
    if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
        return Err(Error::shape("conv2d", &xs, &ws));
    }
    let (n, cout) = (xs[0], ws[0]);
    if let Some(b) = &bias {
        if b.shape() != [cout] {
            return Err(Error::shape("conv2d bias", &b.shape(), &[cout]));
        }
    }
    let (oh, ow) = match (
        conv_output_dim(xs[2], ws[2], stride.0, padding.0),
        conv_output_dim(xs[3], ws[3], stride.1, padding.1),
    ) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => {
            return Err(Error::invalid(format!(
                "conv2d output would be empty: input {xs:?}, kernel {ws:?}, padding {padding:?}"
            )))
        }
    };
    let g = Geometry {
        cin: xs[1],
        h: xs[2],
        w: xs[3],
        kh: ws[2],
        kw: ws[3],
        sh: stride.0,
        sw: stride.1,
        ph: padding.0,
        pw: padding.1,
        oh,
        ow,
    };
    let (k, p) = (g.k(), g.p());
    let in_img = g.cin * g.h * g.w;

    let mut out = vec![T::zero(); n * cout * p];
    {
        let xv = x.value();
        let wv = weight.value();
        let mut col = vec![T::zero(); k * p];
        for s in 0..n {
            im2col(&xv.data()[s * in_img..(s + 1) * in_img], &g, &mut col);
            let o = &mut out[s * cout * p..(s + 1) * cout * p];
            T::gemm(cout, k, p, wv.data(), (k as isize, 1), &col, (p as isize, 1), T::zero(), o, (p as isize, 1));
        }
        if let Some(b) = &bias {
            let bv = b.value();
            for s in 0..n {
                for (co, &bc) in bv.data().iter().enumerate() {
                    let base = (s * cout + co) * p;
                    out[base..base + p].iter_mut().for_each(|v| *v += bc);
                }
            }
        }
    }

    let need_x = x.requires_grad();
    let mut parents = vec![x, weight];
    parents.extend(bias);
    let has_bias = bias.is_some();
    Ok(x.tape().record(
        Tensor::from_parts(vec![n, cout, oh, ow], out),
        &parents,
        Box::new(move |pv, _, gout| {
            let (xd, wd, gd) = (pv[0].data(), pv[1].data(), gout.data());
            let mut gw = vec![T::zero(); cout * k];
            let mut gx = need_x.then(|| vec![T::zero(); n * in_img]);
            let mut col = vec![T::zero(); k * p];
            let mut gcol = vec![T::zero(); if need_x { k * p } else { 0 }];
            for s in 0..n {
                let gs = &gd[s * cout * p..(s + 1) * cout * p];
                im2col(&xd[s * in_img..(s + 1) * in_img], &g, &mut col);
                // dW += dOut · colᵀ
                T::gemm(cout, p, k, gs, (p as isize, 1), &col, (1, p as isize), T::one(), &mut gw, (k as isize, 1));
                if let Some(gx) = gx.as_mut() {
                    // dcol = Wᵀ · dOut
                    T::gemm(k, cout, p, wd, (1, k as isize), gs, (p as isize, 1), T::zero(), &mut gcol, (p as isize, 1));
                    col2im(&gcol, &g, &mut gx[s * in_img..(s + 1) * in_img]);
                }
            }
            let mut grads = vec![
                gx.map(|d| Tensor::from_parts(pv[0].shape().to_vec(), d)),
                Some(Tensor::from_parts(pv[1].shape().to_vec(), gw)),
            ];
            if has_bias {
                let mut gb = vec![T::zero(); cout];
                for s in 0..n {
                    for (co, acc) in gb.iter_mut().enumerate() {
                        let base = (s * cout + co) * p;
                        *acc += gd[base..base + p].iter().copied().sum::<T>();
                    }
                }
                grads.push(Some(Tensor::from_parts(vec![cout], gb)));
            }
            grads
        }),
    ))
}

/// Convolution layer holding its weights.
#[derive(Debug, Clone)]
pub struct Conv2d<T: Scalar = f32> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl<T: Scalar> Conv2d<T> {
    /// Square `kernel`, bias-free (a batch norm always follows in this model).
    pub fn new(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        Self {
            weight: Param::new(
                format!("{name}.weight"),
                fan_in_uniform(rng, &[out_ch, in_ch, kernel, kernel], fan_in),
            ),
            bias: None,
            stride: (stride, stride),
            padding: (padding, padding),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.dim(1)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.dim(0)
    }

    pub fn forward<'t>(&self, ctx: &mut Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let w = ctx.param(&self.weight);
        let b = self.bias.as_ref().map(|b| ctx.param(b));
        conv2d(x, w, b, self.stride, self.padding)
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn params(&self) -> Vec<&Param<T>> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct six-loop cross-correlation, the reference for im2col + GEMM.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (n, cin, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (cout, kh, kw) = (w.dim(0), w.dim(2), w.dim(3));
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[n, cout, oh, ow]);
        for s in 0..n {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.at(&[s, ci, iy as usize, ix as usize]) * w.at(&[co, ci, ki, kj]);
                                    }
                                }
                            }
                        }
                        let off = ((s * cout + co) * oh + oy) * ow + ox;
                        out.data_mut()[off] = acc;
                    }
                }
            }
        }
        out
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn delta_kernel_is_identity() {
        let tape = Tape::<f64>::new();
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let x = tape.constant(Tensor::new([1, 1, 1, 1], vec![3.5]).unwrap());
        let w = tape.constant(Tensor::new([1, 1, 3, 3], k).unwrap());
        let y = conv2d(x, w, None, (1, 1), (1, 1)).unwrap();
        assert_eq!(y.value().data(), &[3.5]);
    }

    #[test]
    fn matches_naive_loops() {
        for (stride, pad, seed) in [(1, 1, 1), (2, 1, 2), (1, 0, 3), (2, 0, 4)] {
            let x = random(&[1, 2, 5, 5], seed);
            let w = random(&[3, 2, 3, 3], seed + 100);
            let tape = Tape::new();
            let y = conv2d(tape.constant(x.clone()), tape.constant(w.clone()), None, (stride, stride), (pad, pad)).unwrap();
            let expect = naive_conv(&x, &w, stride, pad);
            assert_eq!(y.shape(), expect.shape());
            for (a, b) in y.value().data().iter().zip(expect.data()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn stride_two_halves_table_geometry() {
        assert_eq!(conv_output_dim(60, 3, 2, 1), Some(30));
        assert_eq!(conv_output_dim(400, 3, 2, 1), Some(200));
        assert_eq!(conv_output_dim(15, 3, 2, 1), Some(8));
        assert_eq!(conv_output_dim(1, 3, 1, 0), None);
    }

    #[test]
    fn rejects_channel_mismatch_and_empty_output() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(matches!(conv2d(x, w, None, (1, 1), (1, 1)), Err(Error::ShapeMismatch { .. })));
        let x = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let w = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(conv2d(x, w, None, (1, 1), (0, 0)).is_err());
    }

    #[test]
    fn linear_in_input() {
        let x = random(&[1, 2, 6, 7], 9);
        let w = random(&[2, 2, 3, 3], 10);
        let tape = Tape::new();
        let y1 = conv2d(tape.constant(x.clone()), tape.constant(w.clone()), None, (1, 1), (1, 1)).unwrap();
        let y2 = conv2d(tape.constant(x.map(|v| v * -1.7)), tape.constant(w), None, (1, 1), (1, 1)).unwrap();
        for (a, b) in y1.value().data().iter().zip(y2.value().data()) {
            assert!((a * -1.7 - b).abs() < 1e-5);
        }
    }
}
