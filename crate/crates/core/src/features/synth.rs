use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::NUM_MEL;

/// One labelled `[60, T]` feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFeatures {
    pub utterance_id: String,
    pub speaker_id: String,
    pub speaker_index: usize,
    pub features: Tensor<f32>,
}

/// Parameters of the synthetic log-mel corpus.
///
/// Each speaker owns a smooth spectral envelope and a rank-`rank` set of
/// spectral shapes driven at speaker-specific modulation rates. Every
/// utterance adds band- and time-correlated noise plus white noise and a
/// random channel tilt, both scaled by `noise_level`.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub num_speakers: usize,
    pub utts_per_speaker: usize,
    pub frames_per_utt: usize,
    pub rank: usize,
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_speakers: 20,
            utts_per_speaker: 50,
            frames_per_utt: 400,
            rank: 3,
            noise_level: 0.5,
            seed: 0,
        }
    }
}

struct Speaker {
    envelope: Vec<f64>,
    shapes: Vec<Vec<f64>>,
    rates: Vec<f64>,
}

const ENVELOPE_TERMS: usize = 6;
const COLORED_AMP: f64 = 0.25;
const COLORED_RHO: f64 = 0.8;
const MODULATION_AMP: f64 = 0.8;

fn smooth_curve(rng: &mut ChaCha8Rng, amp: f64) -> Vec<f64> {
    let terms: Vec<(f64, f64, f64)> = (1..=ENVELOPE_TERMS)
        .map(|k| {
            let a: f64 = rng.sample(StandardNormal);
            (a * amp / k as f64, k as f64, rng.random::<f64>() * std::f64::consts::TAU)
        })
        .collect();
    (0..NUM_MEL)
        .map(|f| {
            let x = f as f64 / NUM_MEL as f64 * std::f64::consts::PI;
            terms.iter().map(|(a, k, p)| a * (k * x + p).cos()).sum()
        })
        .collect()
}

fn speaker_rng(seed: u64, speaker: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + speaker as u64);
    rng
}

fn utterance_rng(seed: u64, speaker: usize, utt: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000_0000_0000);
    rng.set_stream(((speaker as u64) << 32) | utt as u64);
    rng
}

fn make_speaker(seed: u64, index: usize, rank: usize) -> Speaker {
    let mut rng = speaker_rng(seed, index);
    // A shared downward slope keeps envelopes looking like speech spectra.
    let envelope = smooth_curve(&mut rng, 2.0)
        .into_iter()
        .enumerate()
        .map(|(f, v)| v - 3.0 * f as f64 / NUM_MEL as f64)
        .collect();
    let shapes = (0..rank).map(|_| smooth_curve(&mut rng, 1.0)).collect();
    let rates = (0..rank).map(|_| rng.random_range(0.04..0.2)).collect();
    Speaker { envelope, shapes, rates }
}

fn make_utterance(spk: &Speaker, frames: usize, noise: f64, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let phases: Vec<f64> = spk.rates.iter().map(|_| rng.random::<f64>() * std::f64::consts::TAU).collect();
    let tilt: f64 = rng.sample::<f64, _>(StandardNormal) * noise;
    let innov = (1.0 - COLORED_RHO * COLORED_RHO).sqrt();
    let mut colored = vec![0.0f64; NUM_MEL];
    for c in colored.iter_mut() {
        *c = rng.sample(StandardNormal);
    }
    let mut out = vec![0f32; NUM_MEL * frames];
    let mut fresh = vec![0.0f64; NUM_MEL];
    for t in 0..frames {
        let mods: Vec<f64> = spk
            .rates
            .iter()
            .zip(&phases)
            .map(|(r, p)| MODULATION_AMP * (std::f64::consts::TAU * r * t as f64 + p).sin())
            .collect();
        for v in fresh.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        for f in 0..NUM_MEL {
            // neighbouring bands share innovations
            let lo = fresh[f.saturating_sub(1)];
            let hi = fresh[(f + 1).min(NUM_MEL - 1)];
            let band = (lo + 2.0 * fresh[f] + hi) / 6f64.sqrt();
            colored[f] = COLORED_RHO * colored[f] + innov * band;
        }
        for f in 0..NUM_MEL {
            let structured: f64 = spk.shapes.iter().zip(&mods).map(|(s, m)| s[f] * m).sum();
            let white: f64 = rng.sample(StandardNormal);
            let channel = tilt * (f as f64 / NUM_MEL as f64 - 0.5);
            let v = spk.envelope[f] + structured + COLORED_AMP * colored[f] + noise * white + channel;
            out[f * frames + t] = v as f32;
        }
    }
    Tensor::from_parts(vec![NUM_MEL, frames], out)
}

/// Generates `utts_per_speaker` utterances for every speaker.
///
/// `split` selects an independent set of utterances from the same
/// speakers, so train and eval partitions share speaker identities without
/// sharing recordings.
pub fn generate_synthetic_corpus(spec: &SynthSpec, split: u32) -> Result<Vec<LabeledFeatures>> {
    if spec.num_speakers == 0 || spec.utts_per_speaker == 0 || spec.frames_per_utt == 0 {
        return Err(Error::invalid("synthetic corpus needs at least one speaker, utterance and frame"));
    }
    if spec.num_speakers < 2 {
        return Err(Error::invalid("synthetic corpus needs at least 2 speakers"));
    }
    if !(spec.noise_level >= 0.0 && spec.noise_level.is_finite()) {
        return Err(Error::invalid(format!("noise level {} must be finite and >= 0", spec.noise_level)));
    }
    let mut out = Vec::with_capacity(spec.num_speakers * spec.utts_per_speaker);
    for s in 0..spec.num_speakers {
        let spk = make_speaker(spec.seed, s, spec.rank);
        for u in 0..spec.utts_per_speaker {
            let global = split as usize * spec.utts_per_speaker + u;
            let mut rng = utterance_rng(spec.seed, s, global);
            out.push(LabeledFeatures {
                utterance_id: format!("spk{s:03}-{split}-{u:04}"),
                speaker_id: format!("spk{s:03}"),
                speaker_index: s,
                features: make_utterance(&spk, spec.frames_per_utt, spec.noise_level, &mut rng),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile(x: &Tensor<f32>) -> Vec<f64> {
        let t = x.dim(1);
        (0..NUM_MEL)
            .map(|f| x.data()[f * t..(f + 1) * t].iter().map(|&v| v as f64).sum::<f64>() / t as f64)
            .collect()
    }

    fn corr(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn deterministic_and_split_dependent() {
        let spec = SynthSpec {
            num_speakers: 3,
            utts_per_speaker: 2,
            frames_per_utt: 50,
            ..Default::default()
        };
        let a = generate_synthetic_corpus(&spec, 0).unwrap();
        let b = generate_synthetic_corpus(&spec, 0).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_corpus(&spec, 1).unwrap();
        assert_ne!(a[0].features, c[0].features);
        assert_eq!(a.len(), 6);
        assert_eq!(a[0].features.shape(), &[60, 50]);
    }

    #[test]
    fn noiseless_profiles_are_speaker_stable() {
        let spec = SynthSpec {
            num_speakers: 20,
            utts_per_speaker: 3,
            noise_level: 0.0,
            ..Default::default()
        };
        let data = generate_synthetic_corpus(&spec, 0).unwrap();
        for s in 0..20 {
            let utts: Vec<_> = data.iter().filter(|u| u.speaker_index == s).collect();
            for i in 0..utts.len() {
                for j in i + 1..utts.len() {
                    let c = corr(&profile(&utts[i].features), &profile(&utts[j].features));
                    assert!(c > 0.99, "speaker {s}: {c}");
                }
            }
        }
    }
}
