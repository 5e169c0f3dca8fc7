use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::{fan_in_uniform, Ctx, Module, Param};

/// `y = x · Wᵀ + b` for `x: [b, in]`, `W: [out, in]`, `b: [out]`.
pub fn linear<'t, T: Scalar>(x: Var<'t, T>, weight: Var<'t, T>, bias: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
    let (xs, ws) = (x.shape(), weight.shape());
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
        return Err(Error::shape("linear", &xs, &ws));
    }
    let (b, din, dout) = (xs[0], xs[1], ws[0]);
    if let Some(bias) = &bias {
        if bias.shape() != [dout] {
            return Err(Error::shape("linear bias", &bias.shape(), &[dout]));
        }
    }
    let mut y = vec![T::zero(); b * dout];
    {
        let (xv, wv) = (x.value(), weight.value());
        T::gemm(b, din, dout, xv.data(), (din as isize, 1), wv.data(), (1, din as isize), T::zero(), &mut y, (dout as isize, 1));
        if let Some(bias) = &bias {
            let bv = bias.value();
            for row in y.chunks_exact_mut(dout) {
                row.iter_mut().zip(bv.data()).for_each(|(v, &bb)| *v += bb);
            }
        }
    }
    let mut parents = vec![x, weight];
    parents.extend(bias);
    let has_bias = bias.is_some();
    Ok(x.tape().record(
        Tensor::from_parts(vec![b, dout], y),
        &parents,
        Box::new(move |p, _, g| {
            let (xd, wd, gd) = (p[0].data(), p[1].data(), g.data());
            let mut gx = vec![T::zero(); b * din];
            let mut gw = vec![T::zero(); dout * din];
            T::gemm(b, dout, din, gd, (dout as isize, 1), wd, (din as isize, 1), T::zero(), &mut gx, (din as isize, 1));
            T::gemm(dout, b, din, gd, (1, dout as isize), xd, (din as isize, 1), T::zero(), &mut gw, (din as isize, 1));
            let mut out = vec![
                Some(Tensor::from_parts(vec![b, din], gx)),
                Some(Tensor::from_parts(vec![dout, din], gw)),
            ];
            if has_bias {
                let mut gb = vec![T::zero(); dout];
                for row in gd.chunks_exact(dout) {
                    gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                }
                out.push(Some(Tensor::from_parts(vec![dout], gb)));
            }
            out
        }),
    ))
}

/// Fully connected layer.
#[derive(Debug, Clone)]
pub struct Linear<T: Scalar = f32> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(name: &str, din: usize, dout: usize, bias: bool, rng: &mut impl Rng) -> Self {
        Self {
            weight: Param::new(format!("{name}.weight"), fan_in_uniform(rng, &[dout, din], din)),
            bias: bias.then(|| Param::new(format!("{name}.bias"), Tensor::zeros(&[dout]))),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.dim(1)
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.dim(0)
    }

    pub fn forward<'t>(&self, ctx: &mut Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let w = ctx.param(&self.weight);
        let b = self.bias.as_ref().map(|b| ctx.param(b));
        linear(x, w, b)
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn params(&self) -> Vec<&Param<T>> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }
}
