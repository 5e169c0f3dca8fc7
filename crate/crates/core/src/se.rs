//! Squeeze-and-excitation channel attention.
//!
//! An SE unit squeezes each feature map `[f, t]` to a statistic, runs the
//! pooled vector through a small FC stack ending in a sigmoid, and rescales
//! every channel by the resulting gate in `(0, 1)`.
//!
//! FC stack for `h` layers, input width `d` (`C`, or `2C` for `mean_std`),
//! bottleneck `w = max(1, floor(C / r))`:
//!
//! * `h = 1`: `d → C`
//! * `h ≥ 2`: `d → w → … → w → C` (`h - 2` interior `w → w` layers)
//!
//! All layers carry biases; interior activations are ReLU.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{BasicBlock, Ctx, Linear, Module, Param, SeAttachment, STD_EPS};
use crate::tensor::{Scalar, Tensor};

/// Statistic used to squeeze a feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SqueezePooling {
    Max,
    Mean,
    Std,
    /// All channel means followed by all channel standard deviations.
    MeanStd,
}

impl SqueezePooling {
    pub const ALL: [SqueezePooling; 4] = [Self::Max, Self::Mean, Self::Std, Self::MeanStd];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Max => "max",
            Self::Mean => "mean",
            Self::Std => "std",
            Self::MeanStd => "mean_std",
        }
    }

    /// Width of the squeezed vector for `channels` feature maps.
    pub fn output_dim(self, channels: usize) -> usize {
        match self {
            Self::MeanStd => 2 * channels,
            _ => channels,
        }
    }
}

impl FromStr for SqueezePooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown SE pooling {s:?} (max|mean|std|mean_std)")))
    }
}

impl fmt::Display for SqueezePooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Where the SE unit sits relative to a residual block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Integration {
    /// On the residual branch, before the summation.
    Standard,
    /// On the block input; the skip path keeps the ungated input.
    Pre,
    /// After the summation and final ReLU.
    Post,
    /// On the skip path only.
    Identity,
}

impl Integration {
    pub const ALL: [Integration; 4] = [Self::Standard, Self::Pre, Self::Post, Self::Identity];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Standard => "standard",
            Self::Pre => "pre",
            Self::Post => "post",
            Self::Identity => "identity",
        }
    }
}

impl FromStr for Integration {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown SE integration {s:?} (standard|pre|post|identity)")))
    }
}

impl fmt::Display for Integration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One point of the SE ablation space. An empty stage set disables SE.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SeConfig {
    pub pooling: SqueezePooling,
    pub reduction: usize,
    pub hidden_layers: usize,
    pub integration: Integration,
    pub stages: BTreeSet<usize>,
}

impl Default for SeConfig {
    /// Stages 1 and 2, `r = 4`, two FC layers, mean+std squeeze, standard wiring.
    fn default() -> Self {
        Self {
            pooling: SqueezePooling::MeanStd,
            reduction: 4,
            hidden_layers: 2,
            integration: Integration::Standard,
            stages: BTreeSet::from([1, 2]),
        }
    }
}

impl SeConfig {
    pub fn disabled() -> Self {
        Self {
            stages: BTreeSet::new(),
            ..Self::default()
        }
    }

    pub fn is_enabled(&self) -> bool {
        !self.stages.is_empty()
    }

    pub fn applies_to(&self, stage: usize) -> bool {
        self.stages.contains(&stage)
    }

    pub fn validate(&self) -> Result<()> {
        if self.reduction == 0 {
            return Err(Error::Config("se.reduction must be ≥ 1".into()));
        }
        if self.hidden_layers == 0 {
            return Err(Error::Config("se.hidden_layers must be ≥ 1".into()));
        }
        if let Some(&s) = self.stages.iter().find(|&&s| !(1..=4).contains(&s)) {
            return Err(Error::Config(format!("se.stages: stage {s} not in 1..=4")));
        }
        Ok(())
    }

    /// Comma list, e.g. `"1,2"`; empty for no SE.
    pub fn stages_string(&self) -> String {
        self.stages.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")
    }

    pub fn parse_stages(s: &str) -> Result<BTreeSet<usize>> {
        let s = s.trim();
        if s.is_empty() || s == "none" {
            return Ok(BTreeSet::new());
        }
        s.split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("se.stages: bad stage {p:?}")))
            })
            .collect()
    }

    /// Bottleneck width for `channels`; `r > C` is rejected.
    pub fn hidden_width(&self, channels: usize) -> Result<usize> {
        if self.reduction > channels {
            return Err(Error::Config(format!(
                "se.reduction {} exceeds channel count {channels}",
                self.reduction
            )));
        }
        Ok((channels / self.reduction).max(1))
    }
}

/// Closed-form parameter count (weights + biases) of one SE unit.
pub fn unit_param_count(channels: usize, pooling: SqueezePooling, reduction: usize, hidden_layers: usize) -> usize {
    let d = pooling.output_dim(channels);
    let w = (channels / reduction).max(1);
    match hidden_layers {
        0 => 0,
        1 => d * channels + channels,
        h => (d * w + w) + (h - 2) * (w * w + w) + (w * channels + channels),
    }
}

/// Squeezes `[b, c, f, t]` to `[b, d]` over both spatial axes.
pub fn squeeze<'t, T: Scalar>(x: Var<'t, T>, pooling: SqueezePooling) -> Result<Var<'t, T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::invalid(format!("squeeze needs [b, c, f, t], got {s:?}")));
    }
    let (b, c, area) = (s[0], s[1], s[2] * s[3]);
    let eps = T::lit(STD_EPS);
    match pooling {
        SqueezePooling::Max => x.row_max(area, &[b, c]),
        SqueezePooling::Mean => x.row_mean(area, &[b, c]),
        SqueezePooling::Std => x.row_std(area, eps, &[b, c]),
        SqueezePooling::MeanStd => {
            let mean = x.row_mean(area, &[b, c])?;
            let std = x.row_std(area, eps, &[b, c])?;
            Var::concat_cols(&[mean, std])
        }
    }
}

/// Rescales channel `c` of `x: [b, c, f, t]` by `gates[b, c]`.
pub fn se_apply<'t, T: Scalar>(x: Var<'t, T>, gates: Var<'t, T>) -> Result<Var<'t, T>> {
    let (xs, gs) = (x.shape(), gates.shape());
    if xs.len() != 4 || gs != xs[..2] {
        return Err(Error::shape("se_apply", &xs, &gs));
    }
    let (b, c, area) = (xs[0], xs[1], xs[2] * xs[3]);
    let out = {
        let (xv, gv) = (x.value(), gates.value());
        let mut out = xv.clone();
        for (plane, &s) in out.data_mut().chunks_exact_mut(area).zip(gv.data()) {
            plane.iter_mut().for_each(|v| *v *= s);
        }
        out
    };
    Ok(x.tape().record(
        out,
        &[x, gates],
        Box::new(move |p, _, g| {
            let (xd, sd) = (p[0].data(), p[1].data());
            let mut gx = g.clone();
            let mut gs = vec![T::zero(); b * c];
            for (i, (gplane, xplane)) in gx.data_mut().chunks_exact_mut(area).zip(xd.chunks_exact(area)).enumerate() {
                gs[i] = gplane.iter().zip(xplane).map(|(&gv, &xv)| gv * xv).sum();
                gplane.iter_mut().for_each(|v| *v *= sd[i]);
            }
            vec![Some(gx), Some(Tensor::from_parts(vec![b, c], gs))]
        }),
    ))
}

/// Excitation network plus its squeeze statistic.
#[derive(Debug, Clone)]
pub struct SeUnit<T: Scalar = f32> {
    pub pooling: SqueezePooling,
    pub channels: usize,
    pub layers: Vec<Linear<T>>,
}

impl<T: Scalar> SeUnit<T> {
    pub fn new(name: &str, channels: usize, cfg: &SeConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.pooling.output_dim(channels);
        let w = cfg.hidden_width(channels)?;
        let h = cfg.hidden_layers;
        let mut dims = vec![d];
        dims.extend(std::iter::repeat_n(w, h - 1));
        dims.push(channels);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, io)| Linear::new(&format!("{name}.fc{i}"), io[0], io[1], true, rng))
            .collect();
        Ok(Self {
            pooling: cfg.pooling,
            channels,
            layers,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    /// FC stack on a squeezed `[b, d]` vector, giving gates `[b, c]`.
    pub fn excite<'t>(&self, ctx: &mut Ctx<'t, T>, z: Var<'t, T>) -> Result<Var<'t, T>> {
        let zs = z.shape();
        if zs.len() != 2 || zs[1] != self.input_dim() {
            return Err(Error::shape("excite", &zs, &[zs.first().copied().unwrap_or(0), self.input_dim()]));
        }
        let last = self.layers.len() - 1;
        let mut h = z;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(ctx, h)?;
            h = if i == last { h.sigmoid() } else { h.relu() };
        }
        Ok(h)
    }

    /// Squeeze, excite and rescale; returns `(gated x, gates)`.
    pub fn forward<'t>(&self, ctx: &mut Ctx<'t, T>, x: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let z = squeeze(x, self.pooling)?;
        let gates = self.excite(ctx, z)?;
        Ok((se_apply(x, gates)?, gates))
    }
}

impl<T: Scalar> Module<T> for SeUnit<T> {
    fn params(&self) -> Vec<&Param<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

/// Attaches an SE unit to `block` following `cfg.integration`.
///
/// PRE gates the block input, so its unit is sized by the input width; the
/// other strategies gate tensors at the output width.
pub fn integrate_se<T: Scalar>(mut block: BasicBlock<T>, cfg: &SeConfig, rng: &mut impl Rng) -> Result<BasicBlock<T>> {
    let channels = match cfg.integration {
        Integration::Pre => block.in_channels(),
        _ => block.out_channels(),
    };
    let unit = SeUnit::new(&format!("{}.se", block.name()), channels, cfg, rng)?;
    block.se = Some(SeAttachment {
        integration: cfg.integration,
        unit,
    });
    Ok(block)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    fn channel_1357(tape: &Tape<f64>) -> Var<'_, f64> {
        tape.constant(Tensor::new([1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap())
    }

    #[test]
    fn squeeze_statistics_on_known_channel() {
        let tape = Tape::new();
        let x = channel_1357(&tape);
        let item = |p| squeeze(x, p).unwrap().value().data().to_vec();
        assert_eq!(item(SqueezePooling::Mean), vec![4.0]);
        assert_eq!(item(SqueezePooling::Max), vec![7.0]);
        // population variance of {1,3,5,7} is 5
        assert!((item(SqueezePooling::Std)[0] - 2.2360680).abs() < 1e-6);
        let ms = item(SqueezePooling::MeanStd);
        assert_eq!(ms.len(), 2);
        assert_eq!(ms[0], 4.0);
    }

    #[test]
    fn constant_channel_has_zero_std() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 2.5));
        let v = squeeze(x, SqueezePooling::MeanStd).unwrap().to_tensor();
        assert_eq!(v.data()[0], 2.5);
        assert!(v.data()[1].abs() <= 1e-4);
    }

    #[test]
    fn zero_unit_gates_at_one_half() {
        let tape = Tape::<f64>::new();
        let mut unit = SeUnit::new("se", 4, &SeConfig::default(), &mut rng()).unwrap();
        for p in unit.params_mut() {
            p.value.fill(0.0);
        }
        let x = Tensor::from_fn(&[2, 4, 3, 3], |i| i as f64 - 30.0);
        let mut ctx = Ctx::eval(&tape);
        let (y, g) = unit.forward(&mut ctx, tape.constant(x.clone())).unwrap();
        assert!(g.value().data().iter().all(|&v| v == 0.5));
        for (a, b) in y.value().data().iter().zip(x.data()) {
            assert_eq!(*a, 0.5 * b);
        }
    }

    fn identity_unit() -> SeUnit<f64> {
        let cfg = SeConfig {
            reduction: 1,
            pooling: SqueezePooling::Mean,
            ..SeConfig::default()
        };
        let mut unit = SeUnit::new("se", 2, &cfg, &mut rng()).unwrap();
        for l in &mut unit.layers {
            l.weight.value = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
            l.bias.as_mut().unwrap().value.fill(0.0);
        }
        unit
    }

    #[test]
    fn identity_fc_excitation_hand_values() {
        let tape = Tape::new();
        let unit = identity_unit();
        let mut ctx = Ctx::eval(&tape);
        let z = tape.constant(Tensor::new([1, 2], vec![2.0, -4.0]).unwrap());
        let s = unit.excite(&mut ctx, z).unwrap().to_tensor();
        // relu -> [2, 0], sigmoid -> [0.8808, 0.5]
        assert!((s.data()[0] - 0.880797).abs() < 1e-6);
        assert_eq!(s.data()[1], 0.5);

        let x = tape.constant(Tensor::new([1, 2, 1, 1], vec![2.0, -4.0]).unwrap());
        let (y, _) = unit.forward(&mut ctx, x).unwrap();
        assert!((y.value().data()[0] - 1.761594).abs() < 1e-6);
        assert_eq!(y.value().data()[1], -2.0);
    }

    #[test]
    fn saturated_bias_passes_input_through() {
        let tape = Tape::<f64>::new();
        let mut unit = SeUnit::new("se", 4, &SeConfig::default(), &mut rng()).unwrap();
        unit.layers.last_mut().unwrap().bias.as_mut().unwrap().value.fill(100.0);
        let x = Tensor::from_fn(&[1, 4, 2, 2], |i| i as f64 * 0.3 - 1.0);
        let mut ctx = Ctx::eval(&tape);
        let (y, _) = unit.forward(&mut ctx, tape.constant(x.clone())).unwrap();
        for (a, b) in y.value().data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn layer_widths_follow_depth_and_pooling() {
        let dims = |pooling, h| {
            let cfg = SeConfig { pooling, hidden_layers: h, reduction: 4, ..SeConfig::default() };
            SeUnit::<f32>::new("se", 16, &cfg, &mut rng())
                .unwrap()
                .layers
                .iter()
                .map(|l| (l.in_dim(), l.out_dim()))
                .collect::<Vec<_>>()
        };
        assert_eq!(dims(SqueezePooling::Mean, 1), vec![(16, 16)]);
        assert_eq!(dims(SqueezePooling::Mean, 2), vec![(16, 4), (4, 16)]);
        assert_eq!(dims(SqueezePooling::MeanStd, 2), vec![(32, 4), (4, 16)]);
        assert_eq!(dims(SqueezePooling::Mean, 4), vec![(16, 4), (4, 4), (4, 4), (4, 16)]);
    }

    #[test]
    fn closed_form_count_matches_stored_tensors() {
        assert_eq!(unit_param_count(128, SqueezePooling::Mean, 4, 2), 8352);
        for pooling in SqueezePooling::ALL {
            for r in [1, 2, 4, 8] {
                for h in 1..=4 {
                    let cfg = SeConfig { pooling, reduction: r, hidden_layers: h, ..SeConfig::default() };
                    let unit = SeUnit::<f32>::new("se", 32, &cfg, &mut rng()).unwrap();
                    assert_eq!(unit.num_params(), unit_param_count(32, pooling, r, h));
                }
            }
        }
    }

    #[test]
    fn reduction_larger_than_channels_is_rejected() {
        let cfg = SeConfig { reduction: 32, ..SeConfig::default() };
        assert!(SeUnit::<f32>::new("se", 16, &cfg, &mut rng()).is_err());
    }

    #[test]
    fn config_tokens_parse() {
        assert_eq!("mean_std".parse::<SqueezePooling>().unwrap(), SqueezePooling::MeanStd);
        assert_eq!("identity".parse::<Integration>().unwrap(), Integration::Identity);
        assert!("sideways".parse::<Integration>().is_err());
        assert_eq!(SeConfig::parse_stages("1, 2").unwrap(), BTreeSet::from([1, 2]));
        assert!(SeConfig::parse_stages("").unwrap().is_empty());
        assert!(SeConfig::parse_stages("1,x").is_err());
    }
}
