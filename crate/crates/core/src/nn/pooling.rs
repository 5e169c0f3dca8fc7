use std::str::FromStr;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Epsilon added under every standard-deviation square root.
pub const STD_EPS: f64 = 1e-8;

/// Statistics used by the utterance-level pooling over time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TemporalPooling {
    /// Mean over time only; flattens to `c·f` (2048 for the full model).
    #[default]
    Mean,
    /// Means followed by standard deviations; flattens to `2·c·f`.
    MeanStd,
}

impl TemporalPooling {
    pub fn as_str(self) -> &'static str {
        match self {
            TemporalPooling::Mean => "mean",
            TemporalPooling::MeanStd => "mean_std",
        }
    }

    pub fn output_dim(self, channels: usize, freq: usize) -> usize {
        match self {
            TemporalPooling::Mean => channels * freq,
            TemporalPooling::MeanStd => 2 * channels * freq,
        }
    }
}

impl FromStr for TemporalPooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "mean_std" => Ok(Self::MeanStd),
            _ => Err(Error::Config(format!("unknown temporal pooling {s:?} (mean|mean_std)"))),
        }
    }
}

/// Pools `[b, c, f, t]` over time into `[b, c·f]` (or `[b, 2·c·f]`).
///
/// Standard deviation is population-based; with a single frame it is 0.
pub fn temporal_stats_pool<'t, T: Scalar>(x: Var<'t, T>, mode: TemporalPooling) -> Result<Var<'t, T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::invalid(format!("temporal pooling needs [b, c, f, t], got {s:?}")));
    }
    let (b, cf, t) = (s[0], s[1] * s[2], s[3]);
    let mean = x.row_mean(t, &[b, cf])?;
    match mode {
        TemporalPooling::Mean => Ok(mean),
        TemporalPooling::MeanStd => {
            let std = x.row_std(t, T::lit(STD_EPS), &[b, cf])?;
            Var::concat_cols(&[mean, std])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_over_time_gives_zero_spread() {
        let tape = Tape::<f64>::new();
        let x = Tensor::from_fn(&[1, 2, 3, 5], |i| (i / 5) as f64);
        let y = temporal_stats_pool(tape.constant(x), TemporalPooling::MeanStd).unwrap();
        let y = y.to_tensor();
        assert_eq!(y.shape(), &[1, 12]);
        for k in 0..6 {
            assert_eq!(y.data()[k], k as f64);
            assert!(y.data()[6 + k] <= STD_EPS.sqrt() + 1e-15);
        }
    }

    #[test]
    fn matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::from_fn(&[1, 2, 2, 5], |_| rng.random_range(-2.0..2.0));
        let tape = Tape::new();
        let y = temporal_stats_pool(tape.constant(x.clone()), TemporalPooling::MeanStd).unwrap().to_tensor();
        for c in 0..2 {
            for f in 0..2 {
                let vals: Vec<f64> = (0..5).map(|t| x.at(&[0, c, f, t])).collect();
                let mu = vals.iter().sum::<f64>() / 5.0;
                let sd = (vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 5.0 + STD_EPS).sqrt();
                assert!((y.data()[c * 2 + f] - mu).abs() < 1e-12);
                assert!((y.data()[4 + c * 2 + f] - sd).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn full_model_flatten_is_2048() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 256, 8, 50]));
        let y = temporal_stats_pool(x, TemporalPooling::Mean).unwrap();
        assert_eq!(y.shape(), vec![1, 2048]);
        assert_eq!(TemporalPooling::MeanStd.output_dim(256, 8), 4096);
    }

    #[test]
    fn single_frame_std_is_zero() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[1, 1, 2, 1], |i| i as f64 + 1.0));
        let y = temporal_stats_pool(x, TemporalPooling::MeanStd).unwrap();
        assert_eq!(y.value().data(), &[1.0, 2.0, 0.0, 0.0]);
    }
}
