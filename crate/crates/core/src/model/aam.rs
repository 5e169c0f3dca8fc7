//! Additive angular margin softmax.

use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Ctx, Module, Param};
use crate::tensor::{Scalar, Tensor};

/// Floor for `sin θ` in the margin derivative, where `dθ/dcos θ` blows up.
const SIN_FLOOR: f64 = 1e-6;

/// `cos(θ + m)` with `θ = acos(c)`, clamped to `cos π = -1` once `θ + m > π`.
fn cos_plus_margin(c: f64, m: f64) -> (f64, f64) {
    let c = c.clamp(-1.0, 1.0);
    if c < -m.cos() {
        return (-1.0, 0.0);
    }
    let sin = (1.0 - c * c).max(0.0).sqrt().clamp(0.0, 1.0);
    let value = c * m.cos() - sin * m.sin();
    let slope = m.cos() + m.sin() * c / sin.max(SIN_FLOOR);
    (value, slope)
}

/// Scaled logits: `s·cos(θ_y + m)` for the label column, `s·cos θ_j` elsewhere.
pub fn aam_logits<'t, T: Scalar>(cos: Var<'t, T>, labels: &[usize], scale: f64, margin: f64) -> Result<Var<'t, T>> {
    let shape = cos.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape("aam_logits", &shape, &[labels.len()]));
    }
    let n = shape[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
        return Err(Error::invalid(format!("label {bad} out of range for {n} classes")));
    }
    let labels = labels.to_vec();
    let s = T::lit(scale);
    let mut slopes = Vec::with_capacity(labels.len());
    let mut out = cos.value().map(|c| c * s);
    {
        let cv = cos.value();
        for (r, &y) in labels.iter().enumerate() {
            let (v, d) = cos_plus_margin(cv.data()[r * n + y].to_f64().unwrap(), margin);
            out.data_mut()[r * n + y] = T::lit(scale * v);
            slopes.push(T::lit(d));
        }
    }
    Ok(cos.tape().record(
        out,
        &[cos],
        Box::new(move |_, _, g| {
            let mut gx = g.map(|v| v * s);
            for (r, &y) in labels.iter().enumerate() {
                gx.data_mut()[r * n + y] = g.data()[r * n + y] * s * slopes[r];
            }
            vec![Some(gx)]
        }),
    ))
}

/// Mean cross-entropy of `logits: [b, n]` against `labels`.
pub fn cross_entropy<'t, T: Scalar>(logits: Var<'t, T>, labels: &[usize]) -> Result<Var<'t, T>> {
    Ok(logits.log_softmax(1)?.pick(labels)?.mean().neg())
}

/// Cosine similarities `[b, n]` between rows of `embeddings` and `weights`.
///
/// Zero-norm embeddings are an error.
pub fn cosine_matrix<'t, T: Scalar>(embeddings: Var<'t, T>, weights: Var<'t, T>) -> Result<Var<'t, T>> {
    let e = embeddings.l2_normalize_rows()?;
    let w = weights.l2_normalize_rows()?;
    e.matmul(w.transpose()?)
}

/// AAM-softmax loss; also returns the margin-free cosine matrix.
pub fn aam_loss<'t, T: Scalar>(
    embeddings: Var<'t, T>,
    weights: Var<'t, T>,
    labels: &[usize],
    scale: f64,
    margin: f64,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let cos = cosine_matrix(embeddings, weights)?;
    let logits = aam_logits(cos, labels, scale, margin)?;
    Ok((cross_entropy(logits, labels)?, cos))
}

/// Class-weight matrix and AAM hyper-parameters.
#[derive(Debug, Clone)]
pub struct AamHead<T: Scalar = f32> {
    pub weight: Param<T>,
    pub scale: f64,
    pub margin: f64,
}

impl<T: Scalar> AamHead<T> {
    pub fn new(num_classes: usize, dim: usize, scale: f64, margin: f64, rng: &mut impl Rng) -> Result<Self> {
        if !(scale > 0.0) {
            return Err(Error::Config(format!("AAM scale must be > 0, got {scale}")));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&margin) {
            return Err(Error::Config(format!("AAM margin must lie in [0, π/2), got {margin}")));
        }
        let bound = (6.0 / dim as f64).sqrt();
        let w = Tensor::from_fn(&[num_classes, dim], |_| T::lit(rng.random_range(-bound..bound)));
        Ok(Self {
            weight: Param::new("head.weight", w),
            scale,
            margin,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.weight.value.dim(0)
    }

    pub fn loss<'t>(&self, ctx: &mut Ctx<'t, T>, embeddings: Var<'t, T>, labels: &[usize]) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let w = ctx.param(&self.weight);
        aam_loss(embeddings, w, labels, self.scale, self.margin)
    }
}

impl<T: Scalar> Module<T> for AamHead<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn zero_margin_is_plain_softmax_ce() {
        let tape = Tape::new();
        let e = tape.constant(random(&[4, 8], 1));
        let w = tape.constant(random(&[5, 8], 2));
        let labels = [0, 3, 4, 1];
        let (loss, cos) = aam_loss(e, w, &labels, 30.0, 0.0).unwrap();
        let plain = cross_entropy(cos.scale(30.0), &labels).unwrap();
        assert!((loss.value().item() - plain.value().item()).abs() < 1e-6);
    }

    #[test]
    fn target_logit_when_embedding_equals_class_row() {
        let tape = Tape::new();
        let w = random(&[3, 8], 3);
        let row: Vec<f64> = w.data()[8..16].to_vec();
        let e = tape.constant(Tensor::new([1, 8], row).unwrap());
        let cos = cosine_matrix(e, tape.constant(w)).unwrap();
        let logits = aam_logits(cos, &[1], 30.0, 0.4).unwrap();
        let oracle = 30.0 * 0.4f64.cos();
        assert!((logits.value().data()[1] - oracle).abs() < 1e-9);
        assert!((oracle - 27.63183).abs() < 1e-5);
    }

    #[test]
    fn larger_margin_never_lowers_loss() {
        let tape = Tape::new();
        let e = tape.constant(random(&[6, 8], 4));
        let w = tape.constant(random(&[5, 8], 5));
        let labels = [0, 1, 2, 3, 4, 0];
        let mut prev = f64::NEG_INFINITY;
        for k in 0..=15 {
            let m = k as f64 * 0.1;
            let (loss, _) = aam_loss(e, w, &labels, 30.0, m).unwrap();
            let v = loss.value().item();
            assert!(v >= prev - 1e-12, "margin {m}: {v} < {prev}");
            prev = v;
        }
    }

    #[test]
    fn margin_clamps_past_pi() {
        let (v, d) = cos_plus_margin(-0.99, 0.4);
        assert_eq!((v, d), (-1.0, 0.0));
        let (v, _) = cos_plus_margin(1.0, 0.4);
        assert!((v - 0.4f64.cos()).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_labels_and_zero_embeddings() {
        let tape = Tape::new();
        let w = tape.constant(random(&[5, 8], 6));
        let e = tape.constant(random(&[2, 8], 7));
        assert!(aam_loss(e, w, &[0, 5], 30.0, 0.4).is_err());
        let z = tape.constant(Tensor::<f64>::zeros(&[1, 8]));
        assert!(matches!(aam_loss(z, w, &[0], 30.0, 0.4), Err(Error::Numeric(_))));
    }
}
