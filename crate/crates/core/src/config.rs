//! Run configuration: TOML with dotted keys, every key validated.
//!
//! ```toml
//! seed = 7
//! model.scale_factor = 0.125
//! se.stages = "1,2"
//! [optim]
//! lr = 0.2
//! ```
//!
//! Tables and dotted keys are interchangeable. Unknown keys are errors.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::nn::{Probe, TemporalPooling};
use crate::se::SeConfig;

/// Environment variable that overrides `seed`.
pub const SEED_ENV: &str = "SEVERIF_SEED";

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_decay: f64,
    /// Fractions of total steps at which the learning rate decays.
    pub lr_milestones: Vec<f64>,
    /// Fixed training batch used by the overfit check.
    pub overfit_steps: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 0.2,
            momentum: 0.9,
            weight_decay: 2e-4,
            batch_size: 32,
            epochs: 10,
            lr_decay: 0.1,
            lr_milestones: vec![0.5, 0.75],
            overfit_steps: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub dir: PathBuf,
    pub num_speakers: usize,
    pub utts_per_speaker: usize,
    pub eval_utts_per_speaker: usize,
    pub frames_per_utt: usize,
    pub signature_rank: usize,
    pub noise_level: f64,
    /// Optional WAV manifests; when set, features come from audio instead
    /// of the synthetic generator.
    pub wav_manifest: Option<PathBuf>,
    pub eval_wav_manifest: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data"),
            num_speakers: 20,
            utts_per_speaker: 50,
            eval_utts_per_speaker: 10,
            frames_per_utt: 400,
            signature_rank: 3,
            noise_level: 0.5,
            wav_manifest: None,
            eval_wav_manifest: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub p_target: f64,
    pub cost_miss: f64,
    pub cost_fa: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            p_target: 0.01,
            cost_miss: 1.0,
            cost_fa: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisConfig {
    pub probe: Probe,
    pub num_speakers: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            probe: Probe::LastPerStage,
            num_speakers: 7,
        }
    }
}

/// Everything a command needs. `model.num_speakers` is not a key: it comes
/// from the corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelSpec,
    pub se: SeConfig,
    pub optim: OptimConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub analysis: AnalysisConfig,
}

impl Default for RunConfig {
    /// Desk-scale defaults: the 1/8-width network, full recipe otherwise.
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            model: ModelSpec::toy(2),
            se: SeConfig::default(),
            optim: OptimConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

/// Every accepted key, in output order.
pub const KEYS: &[&str] = &[
    "seed",
    "output_dir",
    "model.scale_factor",
    "model.stage_blocks",
    "model.stage_channels",
    "model.stage_strides",
    "model.stem_channels",
    "model.segment_frames",
    "model.embedding_dim",
    "model.pooling",
    "model.aam_scale",
    "model.aam_margin",
    "se.pooling",
    "se.reduction",
    "se.hidden_layers",
    "se.integration",
    "se.stages",
    "optim.lr",
    "optim.momentum",
    "optim.weight_decay",
    "optim.batch_size",
    "optim.epochs",
    "optim.lr_decay",
    "optim.lr_milestones",
    "optim.overfit_steps",
    "data.dir",
    "data.num_speakers",
    "data.utts_per_speaker",
    "data.eval_utts_per_speaker",
    "data.frames_per_utt",
    "data.signature_rank",
    "data.noise_level",
    "data.wav_manifest",
    "data.eval_wav_manifest",
    "eval.p_target",
    "eval.cost_miss",
    "eval.cost_fa",
    "analysis.probe",
    "analysis.num_speakers",
];

fn kind_error(key: &str, want: &str, v: &Value) -> Error {
    Error::Config(format!("{key}: expected {want}, got {v}"))
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(kind_error(key, "a number", v)),
    }
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        _ => Err(kind_error(key, "a non-negative integer", v)),
    }
}

fn as_str<'v>(key: &str, v: &'v Value) -> Result<&'v str> {
    v.as_str().ok_or_else(|| kind_error(key, "a string", v))
}

fn as_quad(key: &str, v: &Value) -> Result<[usize; 4]> {
    let items = v.as_array().ok_or_else(|| kind_error(key, "an array of 4 integers", v))?;
    let vals: Vec<usize> = items.iter().map(|x| as_usize(key, x)).collect::<Result<_>>()?;
    vals.try_into().map_err(|_| kind_error(key, "an array of 4 integers", v))
}

fn as_stages(key: &str, v: &Value) -> Result<BTreeSet<usize>> {
    match v {
        Value::String(s) => SeConfig::parse_stages(s),
        Value::Integer(_) => Ok(BTreeSet::from([as_usize(key, v)?])),
        Value::Array(a) => a.iter().map(|x| as_usize(key, x)).collect(),
        _ => Err(kind_error(key, "a comma list such as \"1,2\"", v)),
    }
}

fn probe_name(p: Probe) -> &'static str {
    match p {
        Probe::Off => "off",
        Probe::LastPerStage => "last",
        Probe::AllBlocks => "all",
    }
}

fn flatten(prefix: &str, table: &Table, out: &mut Vec<(String, Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            _ => out.push((key, v.clone())),
        }
    }
}

/// Parses TOML text into `(dotted key, value)` pairs.
pub fn parse_pairs(text: &str, origin: &Path) -> Result<Vec<(String, Value)>> {
    let table: Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Config(format!("{}: {}", origin.display(), e.message())))?;
    let mut out = Vec::new();
    flatten("", &table, &mut out);
    Ok(out)
}

/// Parses the value side of a `key=value` override. Bare words that are not
/// valid TOML are taken as strings, so `se.pooling=max` works unquoted.
pub fn parse_override(spec: &str) -> Result<(String, Value)> {
    let (k, v) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let value = format!("v = {}", v.trim())
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(v.trim().to_string()));
    Ok((k.trim().to_string(), value))
}

impl RunConfig {
    /// Reads `path` (when given) over the defaults, then applies
    /// `SEVERIF_SEED` if set.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            for (k, v) in parse_pairs(&text, p)? {
                cfg.set(&k, &v)?;
            }
        }
        cfg.apply_env()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(s) = std::env::var(SEED_ENV) {
            self.seed = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn set_override(&mut self, spec: &str) -> Result<()> {
        let (k, v) = parse_override(spec)?;
        self.set(&k, &v)
    }

    pub fn set(&mut self, key: &str, v: &Value) -> Result<()> {
        let m = &mut self.model;
        match key {
            "seed" => self.seed = as_usize(key, v)? as u64,
            "output_dir" => self.output_dir = as_str(key, v)?.into(),
            "model.scale_factor" => m.scale_factor = as_f64(key, v)?,
            "model.stage_blocks" => m.stage_blocks = as_quad(key, v)?,
            "model.stage_channels" => m.stage_channels = as_quad(key, v)?,
            "model.stage_strides" => m.stage_strides = as_quad(key, v)?,
            "model.stem_channels" => m.stem_channels = as_usize(key, v)?,
            "model.segment_frames" => m.segment_frames = as_usize(key, v)?,
            "model.embedding_dim" => m.embedding_dim = as_usize(key, v)?,
            "model.pooling" => m.pooling = as_str(key, v)?.parse::<TemporalPooling>()?,
            "model.aam_scale" => m.aam_scale = as_f64(key, v)?,
            "model.aam_margin" => m.aam_margin = as_f64(key, v)?,
            "se.pooling" => self.se.pooling = as_str(key, v)?.parse()?,
            "se.reduction" => self.se.reduction = as_usize(key, v)?,
            "se.hidden_layers" => self.se.hidden_layers = as_usize(key, v)?,
            "se.integration" => self.se.integration = as_str(key, v)?.parse()?,
            "se.stages" => self.se.stages = as_stages(key, v)?,
            "optim.lr" => self.optim.lr = as_f64(key, v)?,
            "optim.momentum" => self.optim.momentum = as_f64(key, v)?,
            "optim.weight_decay" => self.optim.weight_decay = as_f64(key, v)?,
            "optim.batch_size" => self.optim.batch_size = as_usize(key, v)?,
            "optim.epochs" => self.optim.epochs = as_usize(key, v)?,
            "optim.lr_decay" => self.optim.lr_decay = as_f64(key, v)?,
            "optim.lr_milestones" => {
                let a = v.as_array().ok_or_else(|| kind_error(key, "an array of fractions", v))?;
                self.optim.lr_milestones = a.iter().map(|x| as_f64(key, x)).collect::<Result<_>>()?;
            }
            "optim.overfit_steps" => self.optim.overfit_steps = as_usize(key, v)?,
            "data.dir" => self.data.dir = as_str(key, v)?.into(),
            "data.num_speakers" => self.data.num_speakers = as_usize(key, v)?,
            "data.utts_per_speaker" => self.data.utts_per_speaker = as_usize(key, v)?,
            "data.eval_utts_per_speaker" => self.data.eval_utts_per_speaker = as_usize(key, v)?,
            "data.frames_per_utt" => self.data.frames_per_utt = as_usize(key, v)?,
            "data.signature_rank" => self.data.signature_rank = as_usize(key, v)?,
            "data.noise_level" => self.data.noise_level = as_f64(key, v)?,
            "data.wav_manifest" => self.data.wav_manifest = Some(as_str(key, v)?.into()),
            "data.eval_wav_manifest" => self.data.eval_wav_manifest = Some(as_str(key, v)?.into()),
            "eval.p_target" => self.eval.p_target = as_f64(key, v)?,
            "eval.cost_miss" => self.eval.cost_miss = as_f64(key, v)?,
            "eval.cost_fa" => self.eval.cost_fa = as_f64(key, v)?,
            "analysis.probe" => {
                self.analysis.probe = match as_str(key, v)? {
                    "last" => Probe::LastPerStage,
                    "all" => Probe::AllBlocks,
                    s => return Err(Error::Config(format!("analysis.probe: {s:?} is not last|all"))),
                }
            }
            "analysis.num_speakers" => self.analysis.num_speakers = as_usize(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Current value of `key` as TOML.
    pub fn get(&self, key: &str) -> Result<Value> {
        let m = &self.model;
        let int = |u: usize| Value::Integer(u as i64);
        let quad = |q: [usize; 4]| Value::Array(q.iter().map(|&x| int(x)).collect());
        let path = |p: &Path| Value::String(p.display().to_string());
        Ok(match key {
            "seed" => Value::Integer(self.seed as i64),
            "output_dir" => path(&self.output_dir),
            "model.scale_factor" => Value::Float(m.scale_factor),
            "model.stage_blocks" => quad(m.stage_blocks),
            "model.stage_channels" => quad(m.stage_channels),
            "model.stage_strides" => quad(m.stage_strides),
            "model.stem_channels" => int(m.stem_channels),
            "model.segment_frames" => int(m.segment_frames),
            "model.embedding_dim" => int(m.embedding_dim),
            "model.pooling" => Value::String(m.pooling.as_str().into()),
            "model.aam_scale" => Value::Float(m.aam_scale),
            "model.aam_margin" => Value::Float(m.aam_margin),
            "se.pooling" => Value::String(self.se.pooling.as_str().into()),
            "se.reduction" => int(self.se.reduction),
            "se.hidden_layers" => int(self.se.hidden_layers),
            "se.integration" => Value::String(self.se.integration.as_str().into()),
            "se.stages" => Value::String(self.se.stages_string()),
            "optim.lr" => Value::Float(self.optim.lr),
            "optim.momentum" => Value::Float(self.optim.momentum),
            "optim.weight_decay" => Value::Float(self.optim.weight_decay),
            "optim.batch_size" => int(self.optim.batch_size),
            "optim.epochs" => int(self.optim.epochs),
            "optim.lr_decay" => Value::Float(self.optim.lr_decay),
            "optim.lr_milestones" => Value::Array(self.optim.lr_milestones.iter().map(|&x| Value::Float(x)).collect()),
            "optim.overfit_steps" => int(self.optim.overfit_steps),
            "data.dir" => path(&self.data.dir),
            "data.num_speakers" => int(self.data.num_speakers),
            "data.utts_per_speaker" => int(self.data.utts_per_speaker),
            "data.eval_utts_per_speaker" => int(self.data.eval_utts_per_speaker),
            "data.frames_per_utt" => int(self.data.frames_per_utt),
            "data.signature_rank" => int(self.data.signature_rank),
            "data.noise_level" => Value::Float(self.data.noise_level),
            "data.wav_manifest" => path(self.data.wav_manifest.as_deref().unwrap_or(Path::new(""))),
            "data.eval_wav_manifest" => path(self.data.eval_wav_manifest.as_deref().unwrap_or(Path::new(""))),
            "eval.p_target" => Value::Float(self.eval.p_target),
            "eval.cost_miss" => Value::Float(self.eval.cost_miss),
            "eval.cost_fa" => Value::Float(self.eval.cost_fa),
            "analysis.probe" => Value::String(probe_name(self.analysis.probe).into()),
            "analysis.num_speakers" => int(self.analysis.num_speakers),
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        })
    }

    /// Resolved configuration as dotted-key TOML; parsing it back gives an
    /// equal config.
    pub fn to_toml(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            let v = self.get(key).expect("listed key");
            let unset = matches!(&v, Value::String(p) if p.is_empty())
                && matches!(*key, "data.wav_manifest" | "data.eval_wav_manifest");
            if !unset {
                let _ = writeln!(s, "{key} = {v}");
            }
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.data.num_speakers < 2 {
            return bad(format!("data.num_speakers must be ≥ 2, got {}", self.data.num_speakers));
        }
        ModelSpec {
            num_speakers: self.data.num_speakers,
            ..self.model.clone()
        }
        .validate()?;
        self.se.validate()?;
        if self.model.segment_frames < self.model.min_frames() {
            return bad(format!(
                "model.segment_frames {} is below the network minimum {}",
                self.model.segment_frames,
                self.model.min_frames()
            ));
        }
        if !(self.model.aam_scale > 0.0) || !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.model.aam_margin) {
            return bad("model.aam_scale must be > 0 and model.aam_margin in [0, π/2)".into());
        }
        let o = &self.optim;
        if !(o.lr >= 0.0) || !(0.0..1.0).contains(&o.momentum) || !(o.weight_decay >= 0.0) {
            return bad("optim.lr ≥ 0, optim.momentum in [0, 1) and optim.weight_decay ≥ 0 required".into());
        }
        if o.batch_size == 0 || o.epochs == 0 {
            return bad("optim.batch_size and optim.epochs must be ≥ 1".into());
        }
        if !(o.lr_decay > 0.0) || o.lr_milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return bad("optim.lr_decay must be > 0 and milestones in [0, 1]".into());
        }
        let d = &self.data;
        if d.utts_per_speaker == 0 || d.frames_per_utt == 0 || d.signature_rank == 0 {
            return bad("data.utts_per_speaker, frames_per_utt and signature_rank must be ≥ 1".into());
        }
        if d.eval_utts_per_speaker < 2 {
            return bad("data.eval_utts_per_speaker must be ≥ 2 (enrol and test halves)".into());
        }
        if !(d.noise_level >= 0.0 && d.noise_level.is_finite()) {
            return bad(format!("data.noise_level must be ≥ 0, got {}", d.noise_level));
        }
        let e = &self.eval;
        if !(e.p_target > 0.0 && e.p_target < 1.0) || !(e.cost_miss > 0.0) || !(e.cost_fa > 0.0) {
            return bad("eval.p_target in (0, 1) and positive costs required".into());
        }
        if self.analysis.num_speakers < 2 {
            return bad("analysis.num_speakers must be ≥ 2".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tables_and_dotted_keys_agree() {
        let a = parse_pairs("[optim]\nlr = 0.1\n[se]\nstages = \"1,3\"", Path::new("a")).unwrap();
        let b = parse_pairs("optim.lr = 0.1\nse.stages = [1, 3]", Path::new("b")).unwrap();
        let (mut ca, mut cb) = (RunConfig::default(), RunConfig::default());
        for (k, v) in a {
            ca.set(&k, &v).unwrap();
        }
        for (k, v) in b {
            cb.set(&k, &v).unwrap();
        }
        assert_eq!(ca, cb);
        assert_eq!(ca.se.stages, BTreeSet::from([1, 3]));
    }

    #[test]
    fn unknown_keys_are_fatal() {
        let mut c = RunConfig::default();
        assert!(matches!(c.set("optim.learning_rate", &Value::Float(0.1)), Err(Error::Config(_))));
        assert!(c.set_override("se.pooling=median").is_err());
        assert!(c.set_override("optim.batch_size=-1").is_err());
    }

    #[test]
    fn resolved_text_round_trips() {
        let mut c = RunConfig::default();
        c.set_override("se.pooling=max").unwrap();
        c.set_override("se.stages=").unwrap();
        c.set_override("optim.weight_decay=2e-4").unwrap();
        c.set_override("data.wav_manifest=train.tsv").unwrap();
        let text = c.to_toml();
        let mut back = RunConfig::default();
        for (k, v) in parse_pairs(&text, Path::new("r")).unwrap() {
            back.set(&k, &v).unwrap();
        }
        assert_eq!(back, c);
        assert!(!back.se.is_enabled());
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut c = RunConfig::default();
        c.validate().unwrap();
        c.data.num_speakers = 1;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.model.segment_frames = 4;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.eval.p_target = 1.0;
        assert!(c.validate().is_err());
    }
}
