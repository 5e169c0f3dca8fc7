//! Acoustic front end: log-mel filterbanks, energy VAD, fixed-length
//! chunking, WAV input and the synthetic speaker corpus.

mod synth;
mod wav;

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use synth::{generate_synthetic_corpus, LabeledFeatures, SynthSpec};
pub use wav::read_wav;

pub const SAMPLE_RATE: u32 = 16_000;
/// 25 ms analysis window.
pub const WINDOW: usize = 400;
/// 10 ms hop; 400 frames span 4 s.
pub const HOP: usize = 160;
pub const NFFT: usize = 512;
pub const NUM_MEL: usize = 60;
pub const MEL_LOW_HZ: f64 = 20.0;
pub const MEL_HIGH_HZ: f64 = 7600.0;
pub const LOG_FLOOR: f64 = 1e-10;
/// Frames more than this far below the loudest frame are dropped.
pub const VAD_THRESHOLD_DB: f64 = 35.0;

/// Mono 16 kHz audio with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioSegment {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub speaker_id: String,
    pub utterance_id: String,
}

impl AudioSegment {
    pub fn new(samples: Vec<f32>, speaker_id: impl Into<String>, utterance_id: impl Into<String>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("audio segment is empty"));
        }
        Ok(Self {
            samples,
            sample_rate: SAMPLE_RATE,
            speaker_id: speaker_id.into(),
            utterance_id: utterance_id.into(),
        })
    }

    pub fn num_frames(&self) -> usize {
        num_frames(self.samples.len())
    }
}

/// Frames produced for `n` samples: `floor((n − 400) / 160) + 1`, or 0.
pub fn num_frames(n: usize) -> usize {
    if n < WINDOW {
        0
    } else {
        (n - WINDOW) / HOP + 1
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters on the HTK mel scale over the power spectrum.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    centers_hz: Vec<f64>,
    /// Sparse `(first bin, weights)` per filter.
    filters: Vec<(usize, Vec<f64>)>,
}

impl Default for MelFilterbank {
    fn default() -> Self {
        Self::new(NUM_MEL, MEL_LOW_HZ, MEL_HIGH_HZ)
    }
}

impl MelFilterbank {
    pub fn new(num_filters: usize, low_hz: f64, high_hz: f64) -> Self {
        let (lo, hi) = (hz_to_mel(low_hz), hz_to_mel(high_hz));
        let edges: Vec<f64> = (0..num_filters + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (num_filters + 1) as f64))
            .collect();
        let bin_hz = SAMPLE_RATE as f64 / NFFT as f64;
        let filters = edges
            .windows(3)
            .map(|e| {
                let (l, c, r) = (e[0], e[1], e[2]);
                let first = (l / bin_hz).ceil() as usize;
                let last = ((r / bin_hz).floor() as usize).min(NFFT / 2);
                let weights = (first..=last)
                    .map(|k| {
                        let f = k as f64 * bin_hz;
                        if f <= c {
                            (f - l) / (c - l)
                        } else {
                            (r - f) / (r - c)
                        }
                        .max(0.0)
                    })
                    .collect();
                (first, weights)
            })
            .collect();
        Self {
            centers_hz: edges[1..=num_filters].to_vec(),
            filters,
        }
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    pub fn len(&self) -> usize {
        self.filters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filters.is_empty()
    }

    /// Filter energies for one power spectrum of `NFFT / 2 + 1` bins.
    pub fn apply(&self, power: &[f64], out: &mut [f64]) {
        for ((first, w), o) in self.filters.iter().zip(out.iter_mut()) {
            *o = w.iter().zip(&power[*first..]).map(|(a, b)| a * b).sum();
        }
    }
}

fn hamming() -> Vec<f64> {
    (0..WINDOW)
        .map(|n| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (WINDOW - 1) as f64).cos())
        .collect()
}

/// Frame-level spectral analysis shared by `logmel` and the VAD.
pub struct FrontEnd {
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    mel: MelFilterbank,
}

impl Default for FrontEnd {
    fn default() -> Self {
        Self::new()
    }
}

impl FrontEnd {
    pub fn new() -> Self {
        Self {
            window: hamming(),
            fft: FftPlanner::new().plan_fft_forward(NFFT),
            mel: MelFilterbank::default(),
        }
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.mel
    }

    /// `[60, T]` natural-log mel energies floored at `1e-10`.
    pub fn logmel(&self, audio: &AudioSegment) -> Result<Tensor<f32>> {
        check_rate(audio)?;
        let t = audio.num_frames();
        if t == 0 {
            return Err(Error::invalid(format!(
                "audio {} has {} samples, shorter than one {WINDOW}-sample window",
                audio.utterance_id,
                audio.samples.len()
            )));
        }
        let nmel = self.mel.len();
        let mut out = vec![0f32; nmel * t];
        let mut buf = vec![Complex::new(0.0, 0.0); NFFT];
        let mut power = vec![0.0; NFFT / 2 + 1];
        let mut energies = vec![0.0; nmel];
        for frame in 0..t {
            let start = frame * HOP;
            for (i, b) in buf.iter_mut().enumerate() {
                let v = if i < WINDOW { audio.samples[start + i] as f64 * self.window[i] } else { 0.0 };
                *b = Complex::new(v, 0.0);
            }
            self.fft.process(&mut buf);
            for (p, b) in power.iter_mut().zip(&buf) {
                *p = b.norm_sqr();
            }
            self.mel.apply(&power, &mut energies);
            for (m, &e) in energies.iter().enumerate() {
                out[m * t + frame] = e.max(LOG_FLOOR).ln() as f32;
            }
        }
        Tensor::new([nmel, t], out)
    }
}

fn check_rate(audio: &AudioSegment) -> Result<()> {
    if audio.sample_rate != SAMPLE_RATE {
        return Err(Error::invalid(format!(
            "audio {} is {} Hz; only {SAMPLE_RATE} Hz is supported",
            audio.utterance_id, audio.sample_rate
        )));
    }
    Ok(())
}

/// Log-mel features of `audio` with a one-off front end.
pub fn logmel(audio: &AudioSegment) -> Result<Tensor<f32>> {
    FrontEnd::new().logmel(audio)
}

/// Per-frame log of total frame power (the C0-style energy term).
///
/// Frames that are exactly silent get `-inf`.
pub fn frame_log_energy(audio: &AudioSegment) -> Vec<f64> {
    (0..audio.num_frames())
        .map(|f| {
            let frame = &audio.samples[f * HOP..f * HOP + WINDOW];
            frame.iter().map(|&s| (s as f64) * (s as f64)).sum::<f64>().ln()
        })
        .collect()
}

/// Keeps frames whose energy is within `threshold_db` of the loudest frame.
///
/// Silent (`-inf`) frames are never kept, so an all-silent input yields an
/// all-false mask.
pub fn energy_vad(log_energy: &[f64], threshold_db: f64) -> Vec<bool> {
    let max = log_energy.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let floor = max - threshold_db / 10.0 * std::f64::consts::LN_10;
    log_energy.iter().map(|&e| e.is_finite() && e >= floor).collect()
}

/// Drops masked-out frames; an empty result is a "no speech" error.
pub fn apply_vad(features: &Tensor<f32>, mask: &[bool]) -> Result<Tensor<f32>> {
    let (rows, t) = (features.dim(0), features.dim(1));
    if mask.len() != t {
        return Err(Error::shape("vad mask", &[mask.len()], features.shape()));
    }
    let kept: Vec<usize> = (0..t).filter(|&i| mask[i]).collect();
    if kept.is_empty() {
        return Err(Error::invalid("no speech: VAD dropped every frame"));
    }
    let mut out = Vec::with_capacity(rows * kept.len());
    for r in 0..rows {
        out.extend(kept.iter().map(|&i| features.data()[r * t + i]));
    }
    Tensor::new([rows, kept.len()], out)
}

/// Log-mel plus VAD trimming for one WAV file.
pub fn features_from_audio(front: &FrontEnd, audio: &AudioSegment) -> Result<Tensor<f32>> {
    let feats = front.logmel(audio)?;
    let mask = energy_vad(&frame_log_energy(audio), VAD_THRESHOLD_DB);
    apply_vad(&feats, &mask)
}

/// Splits `[rows, T]` into non-overlapping `len`-frame chunks.
///
/// A trailing remainder becomes one more chunk, completed by wrapping back
/// to the first frames, provided the input has at least `len / 2` frames;
/// shorter inputs yield no chunks.
pub fn chunk(features: &Tensor<f32>, len: usize) -> Vec<Tensor<f32>> {
    let (rows, t) = (features.dim(0), features.dim(1));
    if len == 0 || t < len.div_ceil(2) {
        return Vec::new();
    }
    let full = t / len;
    let mut starts: Vec<usize> = (0..full).map(|i| i * len).collect();
    if t % len != 0 {
        starts.push(full * len);
    }
    starts
        .into_iter()
        .map(|start| {
            let mut out = Vec::with_capacity(rows * len);
            for r in 0..rows {
                let row = &features.data()[r * t..(r + 1) * t];
                out.extend((0..len).map(|k| row[(start + k) % t]));
            }
            Tensor::from_parts(vec![rows, len], out)
        })
        .collect()
}
