//! ResNet-34 speaker embedding extractor with optional SE units.
//!
//! Topology at scale 1 with a 60×400 input (freq × time, channels last in
//! the printed order, stored as `[batch, channels, freq, time]`):
//!
//! | layer   | blocks | stride | output        |
//! |---------|--------|--------|---------------|
//! | stem    | 3×3    | 1      | 60 × 400 × 128 |
//! | stage 1 | 3      | 1      | 60 × 400 × 128 |
//! | stage 2 | 4      | 2      | 30 × 200 × 128 |
//! | stage 3 | 6      | 2      | 15 × 100 × 256 |
//! | stage 4 | 3      | 2      | 8 × 50 × 256   |
//! | pooling | mean over time, flattened | | 2048 |
//! | dense   |        |        | 256 (embedding) |
//! | head    | AAM softmax |   | N speakers     |

mod aam;
mod checkpoint;
mod optim;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{
    conv_output_dim, temporal_stats_pool, BasicBlock, BatchNorm2d, Conv2d, Ctx, GateCapture, Linear, Module, Param,
    Probe, TemporalPooling,
};
use crate::se::{integrate_se, unit_param_count, Integration, SeConfig};
use crate::tensor::{Scalar, Tensor};

pub use aam::{aam_logits, aam_loss, cosine_matrix, cross_entropy, AamHead};
pub use checkpoint::{architecture_text, from_container, load_checkpoint, save_checkpoint, to_container};
pub use optim::{Sgd, StepSchedule};

/// ResNet topology and head description.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub stage_blocks: [usize; 4],
    pub stage_channels: [usize; 4],
    pub stage_strides: [usize; 4],
    pub stem_channels: usize,
    pub input_mel_bins: usize,
    pub segment_frames: usize,
    pub embedding_dim: usize,
    pub num_speakers: usize,
    /// Multiplies every convolution width; embedding size is not scaled.
    pub scale_factor: f64,
    pub pooling: TemporalPooling,
    pub aam_scale: f64,
    pub aam_margin: f64,
}

impl ModelSpec {
    /// Full-size ResNet-34 from the reference recipe.
    pub fn resnet34(num_speakers: usize) -> Self {
        Self {
            stage_blocks: [3, 4, 6, 3],
            stage_channels: [128, 128, 256, 256],
            stage_strides: [1, 2, 2, 2],
            stem_channels: 128,
            input_mel_bins: 60,
            segment_frames: 400,
            embedding_dim: 256,
            num_speakers,
            scale_factor: 1.0,
            pooling: TemporalPooling::Mean,
            aam_scale: 30.0,
            aam_margin: 0.4,
        }
    }

    /// Same topology at 1/8 width (16, 16, 32, 32 channels).
    pub fn toy(num_speakers: usize) -> Self {
        Self {
            scale_factor: 0.125,
            ..Self::resnet34(num_speakers)
        }
    }

    fn scaled(&self, width: usize) -> usize {
        ((width as f64 * self.scale_factor).round() as usize).max(1)
    }

    pub fn stem_width(&self) -> usize {
        self.scaled(self.stem_channels)
    }

    /// Channel width of `stage` (1-based).
    pub fn stage_width(&self, stage: usize) -> usize {
        self.scaled(self.stage_channels[stage - 1])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_speakers < 2 {
            return bad(format!("model needs ≥ 2 speakers, got {}", self.num_speakers));
        }
        if self.embedding_dim == 0 || self.input_mel_bins == 0 || self.stem_channels == 0 {
            return bad("embedding_dim, mel_bins and stem_channels must be positive".into());
        }
        if !(self.scale_factor > 0.0) {
            return bad(format!("model.scale must be > 0, got {}", self.scale_factor));
        }
        if self.stage_blocks.contains(&0) || self.stage_channels.contains(&0) || self.stage_strides.contains(&0) {
            return bad("stage blocks, channels and strides must be positive".into());
        }
        Ok(())
    }

    /// `(freq, time, channels)` after each stage for a `freq × time` input.
    pub fn stage_geometry(&self, freq: usize, time: usize) -> Vec<(usize, usize, usize)> {
        let (mut f, mut t) = (freq, time);
        (1..=4)
            .map(|s| {
                let st = self.stage_strides[s - 1];
                f = conv_output_dim(f, 3, st, 1).unwrap_or(0);
                t = conv_output_dim(t, 3, st, 1).unwrap_or(0);
                (f, t, self.stage_width(s))
            })
            .collect()
    }

    /// Width of the pooled vector fed to the embedding layer.
    pub fn pooled_dim(&self) -> usize {
        let (f, _, c) = self.stage_geometry(self.input_mel_bins, self.segment_frames)[3];
        self.pooling.output_dim(c, f)
    }

    /// Shortest input that keeps at least one frame per stride-2 reduction.
    pub fn min_frames(&self) -> usize {
        self.stage_strides.iter().product()
    }
}

/// Output of a forward pass.
pub struct Forward<'t, T: Scalar> {
    pub embedding: Var<'t, T>,
    /// `[b, c, f, t]` after each stage.
    pub stage_shapes: Vec<Vec<usize>>,
    pub pooled_dim: usize,
}

/// The speaker network: stem, four residual stages, pooling, embedding
/// layer and AAM head.
#[derive(Debug, Clone)]
pub struct SpeakerNet<T: Scalar = f32> {
    pub spec: ModelSpec,
    pub se: SeConfig,
    pub stem: Conv2d<T>,
    pub stem_bn: BatchNorm2d<T>,
    pub stages: Vec<Vec<BasicBlock<T>>>,
    pub dense: Linear<T>,
    pub head: AamHead<T>,
}

impl<T: Scalar> SpeakerNet<T> {
    /// Builds and initialises the network from `seed`.
    pub fn build(spec: &ModelSpec, se: &SeConfig, seed: u64) -> Result<Self> {
        spec.validate()?;
        se.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = Conv2d::new("stem.conv", 1, spec.stem_width(), 3, 1, 1, &mut rng);
        let stem_bn = BatchNorm2d::new("stem.bn", spec.stem_width());
        let mut stages = Vec::with_capacity(4);
        let mut in_ch = spec.stem_width();
        for s in 1..=4 {
            let out_ch = spec.stage_width(s);
            let mut blocks = Vec::with_capacity(spec.stage_blocks[s - 1]);
            for b in 0..spec.stage_blocks[s - 1] {
                let stride = if b == 0 { spec.stage_strides[s - 1] } else { 1 };
                let mut block = BasicBlock::new(&format!("stage{s}.block{b}"), in_ch, out_ch, stride, &mut rng);
                if se.applies_to(s) {
                    block = integrate_se(block, se, &mut rng)?;
                }
                blocks.push(block);
                in_ch = out_ch;
            }
            stages.push(blocks);
        }
        let dense = Linear::new("embedding", spec.pooled_dim(), spec.embedding_dim, true, &mut rng);
        let head = AamHead::new(spec.num_speakers, spec.embedding_dim, spec.aam_scale, spec.aam_margin, &mut rng)?;
        Ok(Self {
            spec: spec.clone(),
            se: se.clone(),
            stem,
            stem_bn,
            stages,
            dense,
            head,
        })
    }

    pub fn batch_norms(&self) -> Vec<&BatchNorm2d<T>> {
        let mut v = vec![&self.stem_bn];
        v.extend(self.stages.iter().flatten().flat_map(|b| b.batch_norms()));
        v
    }

    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm2d<T>> {
        let mut v = vec![&mut self.stem_bn];
        v.extend(self.stages.iter_mut().flatten().flat_map(|b| b.batch_norms_mut()));
        v
    }

    /// Parameters belonging to SE units.
    pub fn se_params(&self) -> Vec<&Param<T>> {
        self.params().into_iter().filter(|p| p.name().contains(".se.")).collect()
    }

    /// Embedding for `x: [b, 1, freq, time]`.
    pub fn forward<'t>(&mut self, ctx: &mut Ctx<'t, T>, x: Var<'t, T>) -> Result<Forward<'t, T>> {
        let xs = x.shape();
        if xs.len() != 4 || xs[1] != 1 || xs[2] != self.spec.input_mel_bins {
            return Err(Error::shape("model input", &xs, &[xs[0], 1, self.spec.input_mel_bins, 0]));
        }
        if xs[3] < self.spec.min_frames() {
            return Err(Error::invalid(format!(
                "input has {} frames; the network needs at least {}",
                xs[3],
                self.spec.min_frames()
            )));
        }
        let h = self.stem.forward(ctx, x)?;
        let mut h = self.stem_bn.forward(ctx, h)?.relu();
        let mut stage_shapes = Vec::with_capacity(4);
        let probe = ctx.probe;
        for (si, blocks) in self.stages.iter_mut().enumerate() {
            let last_se = blocks.iter().rposition(|b| b.se.is_some());
            for (bi, block) in blocks.iter_mut().enumerate() {
                let (out, gates) = block.forward(ctx, h)?;
                h = out;
                let keep = match probe {
                    Probe::Off => false,
                    Probe::LastPerStage => Some(bi) == last_se,
                    Probe::AllBlocks => true,
                };
                if let (true, Some(g)) = (keep, gates) {
                    ctx.captured.push(GateCapture {
                        stage: si + 1,
                        block: bi,
                        gates: g.to_tensor(),
                    });
                }
            }
            stage_shapes.push(h.shape());
        }
        let pooled = temporal_stats_pool(h, self.spec.pooling)?;
        let pooled_dim = pooled.shape()[1];
        let embedding = self.dense.forward(ctx, pooled)?;
        Ok(Forward {
            embedding,
            stage_shapes,
            pooled_dim,
        })
    }

    /// Eval-mode embedding of one `[freq, time]` feature matrix.
    pub fn extract_embedding(&mut self, features: &Tensor<T>) -> Result<Tensor<T>> {
        let (f, t) = match features.shape() {
            [f, t] => (*f, *t),
            [1, 1, f, t] => (*f, *t),
            s => return Err(Error::invalid(format!("features must be [freq, time], got {s:?}"))),
        };
        let tape = Tape::new();
        let mut ctx = Ctx::eval(&tape);
        let x = tape.constant(features.clone().reshape(&[1, 1, f, t])?);
        let out = self.forward(&mut ctx, x)?;
        let e = out.embedding.to_tensor();
        let dim = e.numel();
        e.reshape(&[dim])
    }

    /// Eval-mode forward that also returns the requested SE gates.
    pub fn probe(&mut self, features: &Tensor<T>, probe: Probe) -> Result<(Tensor<T>, Vec<GateCapture<T>>)> {
        let (f, t) = match features.shape() {
            [f, t] => (*f, *t),
            s => return Err(Error::invalid(format!("features must be [freq, time], got {s:?}"))),
        };
        let tape = Tape::new();
        let mut ctx = Ctx::eval(&tape);
        ctx.probe = probe;
        let x = tape.constant(features.clone().reshape(&[1, 1, f, t])?);
        let out = self.forward(&mut ctx, x)?;
        let e = out.embedding.to_tensor();
        let dim = e.numel();
        Ok((e.reshape(&[dim])?, ctx.captured))
    }
}

impl<T: Scalar> Module<T> for SpeakerNet<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.stem.params();
        v.extend(self.stem_bn.params());
        v.extend(self.stages.iter().flatten().flat_map(|b| b.params()));
        v.extend(self.dense.params());
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.stem.params_mut();
        v.extend(self.stem_bn.params_mut());
        v.extend(self.stages.iter_mut().flatten().flat_map(|b| b.params_mut()));
        v.extend(self.dense.params_mut());
        v.extend(self.head.params_mut());
        v
    }
}

/// SE parameter total predicted from the topology alone.
pub fn closed_form_se_params(spec: &ModelSpec, se: &SeConfig) -> usize {
    let mut total = 0;
    let mut in_ch = spec.stem_width();
    for s in 1..=4 {
        let out_ch = spec.stage_width(s);
        for _ in 0..spec.stage_blocks[s - 1] {
            if se.applies_to(s) {
                let c = if se.integration == Integration::Pre { in_ch } else { out_ch };
                total += unit_param_count(c, se.pooling, se.reduction, se.hidden_layers);
            }
            in_ch = out_ch;
        }
    }
    total
}

/// Loss and accuracy of one optimisation step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
    pub batch: usize,
}

/// Index of the largest value in each row of `[b, n]`.
pub fn argmax_rows<T: Scalar>(m: &Tensor<T>) -> Vec<usize> {
    let n = m.dim(1);
    m.data()
        .chunks_exact(n)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

/// One SGD step on `batch: [b, 1, freq, time]`; returns the pre-update loss.
///
/// A non-finite loss or gradient aborts before the update, naming the first
/// affected parameter.
pub fn train_step<T: Scalar>(
    model: &mut SpeakerNet<T>,
    batch: Tensor<T>,
    labels: &[usize],
    opt: &mut Sgd<T>,
) -> Result<StepStats> {
    let tape = Tape::new();
    let mut ctx = Ctx::train(&tape);
    let x = tape.constant(batch);
    let out = model.forward(&mut ctx, x)?;
    let (loss, cos) = model.head.loss(&mut ctx, out.embedding, labels)?;
    let loss_value = loss.value().item().to_f64().unwrap_or(f64::NAN);
    let correct = argmax_rows(&cos.value())
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    tape.backward(loss)?;
    ctx.accumulate_grads(model.params_mut())?;
    drop(ctx);

    let bad_grad = model
        .params()
        .into_iter()
        .find(|p| !p.grad.all_finite())
        .map(|p| p.name().to_string());
    if !loss_value.is_finite() || bad_grad.is_some() {
        return Err(Error::Numeric(format!(
            "non-finite training state (loss {loss_value}); first non-finite gradient: {}",
            bad_grad.as_deref().unwrap_or("none")
        )));
    }
    opt.step(model.params_mut())?;
    for p in model.params_mut() {
        p.zero_grad();
    }
    Ok(StepStats {
        loss: loss_value,
        correct,
        batch: labels.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_geometry_matches_topology_table() {
        let spec = ModelSpec::resnet34(10);
        assert_eq!(
            spec.stage_geometry(60, 400),
            vec![(60, 400, 128), (30, 200, 128), (15, 100, 256), (8, 50, 256)]
        );
        assert_eq!(spec.pooled_dim(), 2048);
        assert_eq!(spec.min_frames(), 8);
    }

    #[test]
    fn toy_widths_are_one_eighth() {
        let spec = ModelSpec::toy(4);
        assert_eq!(spec.stem_width(), 16);
        assert_eq!((1..=4).map(|s| spec.stage_width(s)).collect::<Vec<_>>(), vec![16, 16, 32, 32]);
    }

    #[test]
    fn empty_stage_set_matches_se_free_build() {
        let spec = ModelSpec::toy(4);
        let a = SpeakerNet::<f32>::build(&spec, &SeConfig::disabled(), 1).unwrap();
        let b = SpeakerNet::<f32>::build(
            &spec,
            &SeConfig { stages: Default::default(), ..SeConfig::default() },
            1,
        )
        .unwrap();
        assert_eq!(a.num_params(), b.num_params());
        assert!(a.se_params().is_empty());
    }

    #[test]
    fn census_matches_closed_form() {
        let spec = ModelSpec::toy(4);
        let base = SpeakerNet::<f32>::build(&spec, &SeConfig::disabled(), 1).unwrap().num_params();
        for integration in Integration::ALL {
            let se = SeConfig { integration, stages: [1, 2, 3].into(), ..SeConfig::default() };
            let net = SpeakerNet::<f32>::build(&spec, &se, 1).unwrap();
            assert_eq!(net.num_params() - base, closed_form_se_params(&spec, &se));
            assert_eq!(net.se_params().iter().map(|p| p.numel()).sum::<usize>(), closed_form_se_params(&spec, &se));
        }
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(SpeakerNet::<f32>::build(&ModelSpec::toy(1), &SeConfig::disabled(), 0).is_err());
        let se = SeConfig { reduction: 64, ..SeConfig::default() };
        assert!(SpeakerNet::<f32>::build(&ModelSpec::toy(4), &se, 0).is_err());
    }

    #[test]
    fn too_short_input_is_rejected() {
        let mut net = SpeakerNet::<f32>::build(&ModelSpec::toy(3), &SeConfig::default(), 0).unwrap();
        assert!(net.extract_embedding(&Tensor::zeros(&[60, 7])).is_err());
    }
}
