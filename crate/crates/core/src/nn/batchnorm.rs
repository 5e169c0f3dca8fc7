use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::{Ctx, Module, Param};

/// `(batch, channels, spatial)` sizes for `[n, c, ...]`.
fn layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::invalid(format!("batch norm needs [n, c, ...], got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

fn check_affine<T: Scalar>(c: usize, gamma: &Var<'_, T>, beta: &Var<'_, T>) -> Result<()> {
    for v in [gamma, beta] {
        if v.shape() != [c] {
            return Err(Error::shape("batch norm", &v.shape(), &[c]));
        }
    }
    Ok(())
}

/// Training-mode batch norm over `(batch, spatial)` per channel.
///
/// Returns the output plus the batch mean and biased variance per channel.
pub fn batch_norm_train<'t, T: Scalar>(
    x: Var<'t, T>,
    gamma: Var<'t, T>,
    beta: Var<'t, T>,
    eps: T,
) -> Result<(Var<'t, T>, Vec<T>, Vec<T>)> {
    let shape = x.shape();
    let (n, c, hw) = layout(&shape)?;
    check_affine(c, &gamma, &beta)?;
    let m = T::from_usize(n * hw).unwrap();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    let mut out;
    {
        let xv = x.value();
        let xd = xv.data();
        for ch in 0..c {
            let mut s = T::zero();
            for b in 0..n {
                s += xd[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().copied().sum::<T>();
            }
            let mu = s / m;
            let mut q = T::zero();
            for b in 0..n {
                q += xd[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                    .iter()
                    .map(|&v| (v - mu) * (v - mu))
                    .sum::<T>();
            }
            mean[ch] = mu;
            var[ch] = q / m;
        }
        out = vec![T::zero(); xd.len()];
        let (gv, bv) = (gamma.value(), beta.value());
        for b in 0..n {
            for ch in 0..c {
                let inv = T::one() / (var[ch] + eps).sqrt();
                let (g, be, mu) = (gv.data()[ch], bv.data()[ch], mean[ch]);
                let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                for (o, &v) in out[r.clone()].iter_mut().zip(&xd[r]) {
                    *o = (v - mu) * inv * g + be;
                }
            }
        }
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let saved_mean = mean.clone();
    let y = x.tape().record(
        Tensor::from_parts(shape.clone(), out),
        &[x, gamma, beta],
        Box::new(move |p, _, g| {
            let (xd, gd, gamma) = (p[0].data(), g.data(), p[1].data());
            let mut gx = vec![T::zero(); xd.len()];
            let mut ggamma = vec![T::zero(); c];
            let mut gbeta = vec![T::zero(); c];
            for ch in 0..c {
                let (mu, inv) = (saved_mean[ch], inv_std[ch]);
                let (mut sg, mut sgx) = (T::zero(), T::zero());
                for b in 0..n {
                    let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                    for (&gi, &xi) in gd[r.clone()].iter().zip(&xd[r]) {
                        sg += gi;
                        sgx += gi * (xi - mu) * inv;
                    }
                }
                ggamma[ch] = sgx;
                gbeta[ch] = sg;
                let k = gamma[ch] * inv / m;
                for b in 0..n {
                    let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                    for i in r {
                        let xhat = (xd[i] - mu) * inv;
                        gx[i] = k * (m * gd[i] - sg - xhat * sgx);
                    }
                }
            }
            vec![
                Some(Tensor::from_parts(p[0].shape().to_vec(), gx)),
                Some(Tensor::from_parts(vec![c], ggamma)),
                Some(Tensor::from_parts(vec![c], gbeta)),
            ]
        }),
    );
    Ok((y, mean, var))
}

/// Inference-mode batch norm with fixed statistics.
pub fn batch_norm_eval<'t, T: Scalar>(
    x: Var<'t, T>,
    gamma: Var<'t, T>,
    beta: Var<'t, T>,
    mean: &[T],
    var: &[T],
    eps: T,
) -> Result<Var<'t, T>> {
    let shape = x.shape();
    let (n, c, hw) = layout(&shape)?;
    check_affine(c, &gamma, &beta)?;
    if mean.len() != c || var.len() != c {
        return Err(Error::shape("batch norm stats", &[mean.len(), var.len()], &[c, c]));
    }
    let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mean = mean.to_vec();
    let mut out = vec![T::zero(); shape.iter().product()];
    {
        let (xv, gv, bv) = (x.value(), gamma.value(), beta.value());
        for b in 0..n {
            for ch in 0..c {
                let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                let (s, sh) = (gv.data()[ch] * inv[ch], bv.data()[ch] - mean[ch] * gv.data()[ch] * inv[ch]);
                for (o, &v) in out[r.clone()].iter_mut().zip(&xv.data()[r]) {
                    *o = v * s + sh;
                }
            }
        }
    }
    Ok(x.tape().record(
        Tensor::from_parts(shape, out),
        &[x, gamma, beta],
        Box::new(move |p, _, g| {
            let (xd, gd, gamma) = (p[0].data(), g.data(), p[1].data());
            let mut gx = vec![T::zero(); xd.len()];
            let mut ggamma = vec![T::zero(); c];
            let mut gbeta = vec![T::zero(); c];
            for b in 0..n {
                for ch in 0..c {
                    for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                        gx[i] = gd[i] * gamma[ch] * inv[ch];
                        ggamma[ch] += gd[i] * (xd[i] - mean[ch]) * inv[ch];
                        gbeta[ch] += gd[i];
                    }
                }
            }
            vec![
                Some(Tensor::from_parts(p[0].shape().to_vec(), gx)),
                Some(Tensor::from_parts(vec![c], ggamma)),
                Some(Tensor::from_parts(vec![c], gbeta)),
            ]
        }),
    ))
}

/// Batch norm layer. Running statistics start at mean 0, variance 1, so eval
/// mode is usable before any training step.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T: Scalar = f32> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub eps: T,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), Tensor::full(&[channels], T::one())),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::lit(0.1),
            eps: T::lit(1e-5),
        }
    }

    pub fn name(&self) -> &str {
        self.gamma.name().trim_end_matches(".gamma")
    }

    pub fn forward<'t>(&mut self, ctx: &mut Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let gamma = ctx.param(&self.gamma);
        let beta = ctx.param(&self.beta);
        if !ctx.is_train() {
            return batch_norm_eval(x, gamma, beta, &self.running_mean, &self.running_var, self.eps);
        }
        let shape = x.shape();
        let count = shape[0] * shape[2..].iter().product::<usize>();
        let (y, mean, var) = batch_norm_train(x, gamma, beta, self.eps)?;
        let unbias = if count > 1 {
            T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap()
        } else {
            T::one()
        };
        let mom = self.momentum;
        for ch in 0..mean.len() {
            self.running_mean[ch] = (T::one() - mom) * self.running_mean[ch] + mom * mean[ch];
            self.running_var[ch] = (T::one() - mom) * self.running_var[ch] + mom * var[ch] * unbias;
        }
        Ok(y)
    }
}

impl<T: Scalar> Module<T> for BatchNorm2d<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn channel_stats(y: &Tensor<f64>, ch: usize) -> (f64, f64) {
        let (n, c) = (y.dim(0), y.dim(1));
        let hw = y.numel() / (n * c);
        let vals: Vec<f64> = (0..n)
            .flat_map(|b| y.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw].to_vec())
            .collect();
        let mu = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / vals.len() as f64;
        (mu, var)
    }

    fn input(seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[2, 3, 4, 4], |_| rng.random_range(-2.0..2.0) * 3.0 + 1.0)
    }

    #[test]
    fn train_mode_standardises_each_channel() {
        let tape = Tape::new();
        let mut bn = BatchNorm2d::<f64>::new("bn", 3);
        let mut ctx = Ctx::train(&tape);
        let y = bn.forward(&mut ctx, tape.constant(input(1))).unwrap().to_tensor();
        for ch in 0..3 {
            let (mu, var) = channel_stats(&y, ch);
            assert!(mu.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3, "var {var}"); // eps 1e-5 shrinks it slightly
        }
        assert!(bn.running_var.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn affine_parameters_shift_and_scale() {
        let tape = Tape::new();
        let x = tape.constant(input(2));
        let g = tape.constant(Tensor::full(&[3], 2.0));
        let b = tape.constant(Tensor::full(&[3], 3.0));
        let (y, _, _) = batch_norm_train(x, g, b, 1e-12).unwrap();
        let y = y.to_tensor();
        for ch in 0..3 {
            let (mu, var) = channel_stats(&y, ch);
            assert!((mu - 3.0).abs() < 1e-5);
            assert!((var.sqrt() - 2.0).abs() < 1e-5);
        }
    }

    #[test]
    fn invariant_to_per_channel_affine_input_rescale() {
        let x = input(3);
        let mut x2 = x.clone();
        let hw = 16;
        for b in 0..2 {
            for ch in 0..3 {
                let (a, s) = (0.5 + ch as f64, ch as f64 - 1.0);
                for v in &mut x2.data_mut()[(b * 3 + ch) * hw..(b * 3 + ch + 1) * hw] {
                    *v = *v * a + s;
                }
            }
        }
        let tape = Tape::new();
        let one = tape.constant(Tensor::full(&[3], 1.0));
        let zero = tape.constant(Tensor::zeros(&[3]));
        let (y1, _, _) = batch_norm_train(tape.constant(x), one, zero, 1e-5).unwrap();
        let (y2, _, _) = batch_norm_train(tape.constant(x2), one, zero, 1e-5).unwrap();
        for (a, b) in y1.value().data().iter().zip(y2.value().data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn eval_works_from_initial_running_stats() {
        let tape = Tape::new();
        let mut bn = BatchNorm2d::<f64>::new("bn", 3);
        let mut ctx = Ctx::eval(&tape);
        let x = input(4);
        let y = bn.forward(&mut ctx, tape.constant(x.clone())).unwrap();
        for (a, b) in y.value().data().iter().zip(x.data()) {
            assert!((a - b / (1.0f64 + 1e-5).sqrt()).abs() < 1e-12);
        }
    }
}
