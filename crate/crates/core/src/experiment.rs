//! End-to-end workflow: corpus on disk, training, trial lists, scoring,
//! ablation sweeps and excitation analysis.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::analysis::{capture_excitations, AnalysisReport};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::features::{chunk, features_from_audio, generate_synthetic_corpus, read_wav, FrontEnd, LabeledFeatures, SynthSpec};
use crate::metrics::{score_trials, scores_to_text, trials_to_text, DcfParams, Label, MetricsReport, ScoreSet, Trial};
use crate::model::{closed_form_se_params, save_checkpoint, train_step, ModelSpec, Sgd, SpeakerNet, StepSchedule};
use crate::nn::Module;
use crate::se::{Integration, SeConfig};
use crate::sevx::Container;
use crate::tensor::Tensor;

pub const TRAIN_SPLIT: &str = "train";
pub const EVAL_SPLIT: &str = "eval";

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn manifest_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.tsv"))
}

pub fn cache_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.sevx"))
}

pub fn trials_path(dir: &Path) -> PathBuf {
    dir.join("trials.txt")
}

/// One manifest line: `utterance_id<TAB>speaker_id<TAB>path`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub utterance_id: String,
    pub speaker_id: String,
    pub path: PathBuf,
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut offset = 0u64;
    let mut out = Vec::new();
    for (i, line) in text.split_inclusive('\n').enumerate() {
        let at = offset;
        offset += line.len() as u64;
        let line = line.trim_end_matches(['\n', '\r']);
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 || f.iter().any(|s| s.is_empty()) {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: at,
                msg: format!("line {}: expected utterance_id<TAB>speaker_id<TAB>path", i + 1),
            });
        }
        out.push(ManifestEntry {
            utterance_id: f[0].into(),
            speaker_id: f[1].into(),
            path: f[2].into(),
        });
    }
    Ok(out)
}

/// Writes `<split>.tsv` and the `<split>.sevx` feature cache.
pub fn write_corpus(dir: &Path, split: &str, utts: &[LabeledFeatures]) -> Result<()> {
    let cache = cache_path(dir, split);
    let cache_name = cache.file_name().unwrap().to_string_lossy().into_owned();
    let mut manifest = String::new();
    let mut c = Container::new(format!("kind = \"severif.features\"\nsplit = \"{split}\"\n"));
    for u in utts {
        let _ = writeln!(manifest, "{}\t{}\t{cache_name}", u.utterance_id, u.speaker_id);
        c.push(u.utterance_id.clone(), u.features.clone())?;
    }
    write_file(&manifest_path(dir, split), &manifest)?;
    c.save(&cache)
}

/// Reads a split back; speaker indices follow sorted speaker ids.
pub fn read_corpus(dir: &Path, split: &str) -> Result<Vec<LabeledFeatures>> {
    let mpath = manifest_path(dir, split);
    let entries = parse_manifest(&read_file(&mpath)?, &mpath)?;
    let mut caches: HashMap<PathBuf, Container> = HashMap::new();
    let speakers: BTreeSet<&str> = entries.iter().map(|e| e.speaker_id.as_str()).collect();
    let index: HashMap<&str, usize> = speakers.iter().enumerate().map(|(i, s)| (*s, i)).collect();
    let mut out = Vec::with_capacity(entries.len());
    for e in &entries {
        let cpath = dir.join(&e.path);
        if !caches.contains_key(&cpath) {
            caches.insert(cpath.clone(), Container::load(&cpath)?);
        }
        let features = caches[&cpath].get(&e.utterance_id).cloned().ok_or_else(|| Error::Format {
            path: cpath.clone(),
            offset: 0,
            msg: format!("feature cache has no entry for {}", e.utterance_id),
        })?;
        out.push(LabeledFeatures {
            utterance_id: e.utterance_id.clone(),
            speaker_id: e.speaker_id.clone(),
            speaker_index: index[e.speaker_id.as_str()],
            features,
        });
    }
    if out.is_empty() {
        return Err(Error::invalid(format!("{} lists no utterances", mpath.display())));
    }
    Ok(out)
}

fn features_from_wav_manifest(manifest: &Path) -> Result<Vec<LabeledFeatures>> {
    let entries = parse_manifest(&read_file(manifest)?, manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let front = FrontEnd::new();
    entries
        .iter()
        .map(|e| {
            let wav = base.join(&e.path);
            let audio = read_wav(&wav, &e.speaker_id, &e.utterance_id)?;
            let features = features_from_audio(&front, &audio)
                .map_err(|err| Error::invalid(format!("{}: {err}", wav.display())))?;
            Ok(LabeledFeatures {
                utterance_id: e.utterance_id.clone(),
                speaker_id: e.speaker_id.clone(),
                speaker_index: 0,
                features,
            })
        })
        .collect()
}

pub fn synth_spec(cfg: &RunConfig, utts_per_speaker: usize) -> SynthSpec {
    SynthSpec {
        num_speakers: cfg.data.num_speakers,
        utts_per_speaker,
        frames_per_utt: cfg.data.frames_per_utt,
        rank: cfg.data.signature_rank,
        noise_level: cfg.data.noise_level,
        seed: cfg.seed,
    }
}

/// What `make_data` wrote.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSummary {
    pub train_utterances: usize,
    pub eval_utterances: usize,
    pub speakers: usize,
    pub trials: usize,
}

/// Generates (or ingests) train and eval splits plus the trial list.
pub fn make_data(cfg: &RunConfig) -> Result<DataSummary> {
    cfg.validate()?;
    let (train, eval) = match (&cfg.data.wav_manifest, &cfg.data.eval_wav_manifest) {
        (Some(t), Some(e)) => (features_from_wav_manifest(t)?, features_from_wav_manifest(e)?),
        (None, None) => (
            generate_synthetic_corpus(&synth_spec(cfg, cfg.data.utts_per_speaker), 0)?,
            generate_synthetic_corpus(&synth_spec(cfg, cfg.data.eval_utts_per_speaker), 1)?,
        ),
        _ => return Err(Error::Config("data.wav_manifest and data.eval_wav_manifest must be set together".into())),
    };
    let dir = &cfg.data.dir;
    write_corpus(dir, TRAIN_SPLIT, &train)?;
    write_corpus(dir, EVAL_SPLIT, &eval)?;
    let trials = make_trials(&eval, cfg.seed)?;
    write_file(&trials_path(dir), &trials_to_text(&trials))?;
    let speakers: BTreeSet<&str> = train.iter().map(|u| u.speaker_id.as_str()).collect();
    Ok(DataSummary {
        train_utterances: train.len(),
        eval_utterances: eval.len(),
        speakers: speakers.len(),
        trials: trials.len(),
    })
}

/// Same-speaker targets between each speaker's first and second half of
/// utterances, plus as many seeded different-speaker nontargets.
pub fn make_trials(eval: &[LabeledFeatures], seed: u64) -> Result<Vec<Trial>> {
    let mut by_spk: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for u in eval {
        by_spk.entry(&u.speaker_id).or_default().push(&u.utterance_id);
    }
    let mut halves = Vec::new();
    for (spk, utts) in &mut by_spk {
        utts.sort();
        if utts.len() < 2 {
            return Err(Error::invalid(format!("speaker {spk} needs ≥ 2 eval utterances for trials")));
        }
        let (enroll, test) = utts.split_at(utts.len() / 2);
        halves.push((enroll.to_vec(), test.to_vec()));
    }
    if halves.len() < 2 {
        return Err(Error::invalid("trials need at least 2 eval speakers"));
    }
    let mut trials = Vec::new();
    for (enroll, test) in &halves {
        for e in enroll {
            for t in test {
                trials.push(Trial::new(*e, *t, Label::Target)?);
            }
        }
    }
    let targets = trials.len();
    let possible: usize = (0..halves.len())
        .map(|i| halves[i].0.len() * halves.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, h)| h.1.len()).sum::<usize>())
        .sum();
    let wanted = targets.min(possible);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x7e1a15);
    let mut seen = HashSet::new();
    while seen.len() < wanted {
        let i = rng.random_range(0..halves.len());
        let mut j = rng.random_range(0..halves.len() - 1);
        if j >= i {
            j += 1;
        }
        let e = halves[i].0[rng.random_range(0..halves[i].0.len())];
        let t = halves[j].1[rng.random_range(0..halves[j].1.len())];
        if seen.insert((e, t)) {
            trials.push(Trial::new(e, t, Label::Nontarget)?);
        }
    }
    Ok(trials)
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
    pub elapsed_s: f64,
}

pub const LOG_HEADER: &str = "step\tepoch\tlr\tloss\taccuracy\twall_time_s";

impl LogRow {
    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{}\t{:e}\t{:.6}\t{:.4}\t{:.2}",
            self.step, self.epoch, self.lr, self.loss, self.accuracy, self.elapsed_s
        )
    }
}

pub struct TrainOutcome {
    pub model: SpeakerNet,
    pub log: Vec<LogRow>,
    /// Accuracy (margin-free cosine argmax) over the final epoch.
    pub train_accuracy: f64,
    pub speakers: Vec<String>,
}

/// Model spec for `num_speakers` classes under `cfg`.
pub fn model_spec(cfg: &RunConfig, num_speakers: usize) -> ModelSpec {
    ModelSpec {
        num_speakers,
        ..cfg.model.clone()
    }
}

fn stack_batch(chunks: &[Tensor<f32>], idx: &[usize]) -> Result<Tensor<f32>> {
    let (f, t) = (chunks[0].dim(0), chunks[0].dim(1));
    let mut data = Vec::with_capacity(idx.len() * f * t);
    for &i in idx {
        data.extend_from_slice(chunks[i].data());
    }
    Tensor::new([idx.len(), 1, f, t], data)
}

/// Trains from scratch. The minibatch order depends only on the seed and
/// the data, so it is shared by every configuration.
pub fn train_model(cfg: &RunConfig, train: &[LabeledFeatures], mut on_step: impl FnMut(&LogRow)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let speakers: Vec<String> = train
        .iter()
        .map(|u| u.speaker_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let index: HashMap<&str, usize> = speakers.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let len = cfg.model.segment_frames;
    let mut chunks = Vec::new();
    let mut labels = Vec::new();
    for u in train {
        for c in chunk(&u.features, len) {
            chunks.push(c);
            labels.push(index[u.speaker_id.as_str()]);
        }
    }
    if chunks.is_empty() {
        return Err(Error::invalid(format!("no training chunks of {len} frames")));
    }
    let spec = model_spec(cfg, speakers.len());
    let mut model = SpeakerNet::build(&spec, &cfg.se, cfg.seed)?;
    let batch = cfg.optim.batch_size.min(chunks.len());
    let per_epoch = chunks.len() / batch;
    let total = per_epoch * cfg.optim.epochs;
    let schedule = StepSchedule {
        base_lr: cfg.optim.lr,
        total_steps: total,
        milestones: cfg.optim.lr_milestones.clone(),
        decay: cfg.optim.lr_decay,
    };
    let mut opt = Sgd::new(cfg.optim.lr, cfg.optim.momentum, cfg.optim.weight_decay);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(0xba7c4);
    let start = Instant::now();
    let mut log = Vec::with_capacity(total);
    let mut order: Vec<usize> = (0..chunks.len()).collect();
    let (mut correct, mut seen) = (0, 0);
    let mut step = 0;
    for epoch in 0..cfg.optim.epochs {
        order.shuffle(&mut order_rng);
        (correct, seen) = (0, 0);
        for b in 0..per_epoch {
            let idx = &order[b * batch..(b + 1) * batch];
            let x = stack_batch(&chunks, idx)?;
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            opt.lr = schedule.lr_at(step);
            let stats = train_step(&mut model, x, &y, &mut opt)
                .map_err(|e| match e {
                    Error::Numeric(m) => Error::Numeric(format!("step {step}: {m}")),
                    e => e,
                })?;
            correct += stats.correct;
            seen += stats.batch;
            let row = LogRow {
                step,
                epoch,
                lr: opt.lr,
                loss: stats.loss,
                accuracy: stats.correct as f64 / stats.batch as f64,
                elapsed_s: start.elapsed().as_secs_f64(),
            };
            on_step(&row);
            log.push(row);
            step += 1;
        }
    }
    Ok(TrainOutcome {
        model,
        log,
        train_accuracy: correct as f64 / seen.max(1) as f64,
        speakers,
    })
}

/// Losses over `steps` updates on one fixed random batch.
pub fn overfit_losses(cfg: &RunConfig, batch: usize, frames: usize, steps: usize) -> Result<Vec<f64>> {
    cfg.validate()?;
    let n = cfg.data.num_speakers;
    let spec = model_spec(cfg, n);
    let mut model = SpeakerNet::build(&spec, &cfg.se, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0x0f17);
    let x = Tensor::from_fn(&[batch, 1, spec.input_mel_bins, frames], |_| rng.sample::<f32, _>(StandardNormal));
    let labels: Vec<usize> = (0..batch).map(|i| i % n).collect();
    let mut opt = Sgd::new(cfg.optim.lr, cfg.optim.momentum, cfg.optim.weight_decay);
    (0..steps)
        .map(|_| Ok(train_step(&mut model, x.clone(), &labels, &mut opt)?.loss))
        .collect()
}

/// Eval-mode embeddings, in input order.
pub fn extract_embeddings(model: &mut SpeakerNet, utts: &[LabeledFeatures]) -> Result<Vec<(String, Vec<f32>)>> {
    utts.iter()
        .map(|u| Ok((u.utterance_id.clone(), model.extract_embedding(&u.features)?.into_data())))
        .collect()
}

pub fn embeddings_container(embs: &[(String, Vec<f32>)]) -> Result<Container> {
    let mut c = Container::new("kind = \"severif.embeddings\"\n");
    for (id, e) in embs {
        c.push(id.clone(), Tensor::new([e.len()], e.clone())?)?;
    }
    Ok(c)
}

pub fn embeddings_from_container(c: &Container) -> HashMap<String, Vec<f32>> {
    c.tensors().iter().map(|(n, t)| (n.clone(), t.data().to_vec())).collect()
}

pub fn dcf_params(cfg: &RunConfig) -> DcfParams {
    DcfParams {
        p_target: cfg.eval.p_target,
        cost_miss: cfg.eval.cost_miss,
        cost_fa: cfg.eval.cost_fa,
    }
}

/// Parameter counts reported by training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Census {
    pub total: usize,
    pub se: usize,
    pub closed_form_se: usize,
    /// Total of the same network built without SE.
    pub baseline_total: usize,
}

pub fn census(spec: &ModelSpec, se: &SeConfig, model: &SpeakerNet) -> Result<Census> {
    let baseline = SpeakerNet::<f32>::build(spec, &SeConfig::disabled(), 0)?;
    Ok(Census {
        total: model.num_params(),
        se: model.se_params().iter().map(|p| p.numel()).sum(),
        closed_form_se: closed_form_se_params(spec, se),
        baseline_total: baseline.num_params(),
    })
}

/// Output of one train + score run.
pub struct RunResult {
    pub metrics: MetricsReport,
    pub train_accuracy: f64,
    pub census: Census,
    pub final_loss: f64,
    pub model: SpeakerNet,
}

/// Trains on `<data>/train` and writes `config.toml`, `train_log.tsv`,
/// `model.sevx` and `train_summary.txt` under `out`.
pub fn train_run(cfg: &RunConfig, out: &Path, mut on_step: impl FnMut(&LogRow)) -> Result<(TrainOutcome, Census)> {
    cfg.validate()?;
    write_file(&out.join("config.toml"), &cfg.to_toml())?;
    let train = read_corpus(&cfg.data.dir, TRAIN_SPLIT)?;
    let mut log_text = format!("{LOG_HEADER}\n");
    let outcome = train_model(cfg, &train, |r| {
        log_text.push_str(&r.to_tsv());
        log_text.push('\n');
        on_step(r);
    });
    write_file(&out.join("train_log.tsv"), &log_text)?;
    let outcome = outcome?;
    save_checkpoint(&outcome.model, &out.join("model.sevx"))?;
    let census = census(&outcome.model.spec, &outcome.model.se, &outcome.model)?;
    write_file(
        &out.join("train_summary.txt"),
        &format!(
            "train_accuracy = {:?}\nfinal_loss = {:?}\nsteps = {}\nnum_params = {}\nse_params = {}\nclosed_form_se_params = {}\nbaseline_params = {}\n",
            outcome.train_accuracy,
            outcome.log.last().map(|r| r.loss).unwrap_or(f64::NAN),
            outcome.log.len(),
            census.total,
            census.se,
            census.closed_form_se,
            census.baseline_total
        ),
    )?;
    Ok((outcome, census))
}

/// `train_run` followed by `score_split` into the same directory.
pub fn run_experiment(cfg: &RunConfig, out: &Path, on_step: impl FnMut(&LogRow)) -> Result<RunResult> {
    let (mut outcome, census) = train_run(cfg, out, on_step)?;
    let (_, metrics) = score_split(cfg, &mut outcome.model, out)?;
    Ok(RunResult {
        metrics,
        train_accuracy: outcome.train_accuracy,
        census,
        final_loss: outcome.log.last().map(|r| r.loss).unwrap_or(f64::NAN),
        model: outcome.model,
    })
}

/// Extracts eval embeddings, scores the trial list and writes
/// `scores.txt` and `metrics.txt` under `out`.
pub fn score_split(cfg: &RunConfig, model: &mut SpeakerNet, out: &Path) -> Result<(ScoreSet, MetricsReport)> {
    let eval = read_corpus(&cfg.data.dir, EVAL_SPLIT)?;
    let trials = crate::metrics::read_trials(&trials_path(&cfg.data.dir))?;
    let embs = extract_embeddings(model, &eval)?;
    let table: HashMap<String, Vec<f32>> = embs.into_iter().collect();
    let scores = score_trials(&table, &trials)?;
    let metrics = MetricsReport::compute(&scores, &dcf_params(cfg))?;
    write_file(&out.join("scores.txt"), &scores_to_text(&scores))?;
    write_file(&out.join("metrics.txt"), &metrics.to_text())?;
    Ok((scores, metrics))
}

/// `key=v1/v2/...` axes of an ablation grid.
pub fn parse_grid(specs: &[String]) -> Result<Vec<(String, Vec<String>)>> {
    specs
        .iter()
        .map(|s| {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("grid axis {s:?} is not key=v1/v2")))?;
            let vals: Vec<String> = v.split('/').map(|x| x.trim().to_string()).collect();
            if k.trim().is_empty() || vals.is_empty() {
                return Err(Error::Config(format!("grid axis {s:?} is empty")));
            }
            Ok((k.trim().to_string(), vals))
        })
        .collect()
}

/// Cartesian product of the axes, first axis slowest.
pub fn grid_cells(axes: &[(String, Vec<String>)]) -> Vec<Vec<(String, String)>> {
    axes.iter().fold(vec![Vec::new()], |acc, (k, vals)| {
        acc.iter()
            .flat_map(|prefix| {
                vals.iter().map(move |v| {
                    let mut c = prefix.clone();
                    c.push((k.clone(), v.clone()));
                    c
                })
            })
            .collect()
    })
}

pub fn cell_name(cell: &[(String, String)]) -> String {
    if cell.is_empty() {
        return "default".into();
    }
    cell.iter()
        .map(|(k, v)| {
            let v = if v.is_empty() { "none" } else { v.as_str() };
            format!("{k}={v}")
        })
        .collect::<Vec<_>>()
        .join("__")
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || ".,=_-".contains(c) { c } else { '_' })
        .collect()
}

/// Why a configuration cannot be built, if it cannot (`r > C`).
pub fn infeasibility(spec: &ModelSpec, se: &SeConfig) -> Option<String> {
    let mut in_ch = spec.stem_width();
    for s in 1..=4 {
        let out_ch = spec.stage_width(s);
        if se.applies_to(s) {
            let c = if se.integration == Integration::Pre { in_ch.min(out_ch) } else { out_ch };
            if se.reduction > c {
                return Some(format!("se.reduction {} exceeds {c} channels at stage {s}", se.reduction));
            }
        }
        in_ch = out_ch;
    }
    None
}

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub name: String,
    pub settings: Vec<(String, String)>,
    pub status: String,
    pub eer_percent: Option<f64>,
    pub min_dcf: Option<f64>,
    pub train_accuracy: Option<f64>,
    pub se_params: Option<usize>,
}

fn read_kv(path: &Path) -> Result<HashMap<String, String>> {
    Ok(read_file(path)?
        .lines()
        .filter_map(|l| l.split_once(" = "))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect())
}

fn cached_cell(dir: &Path) -> Option<(f64, f64, f64, usize)> {
    let m = read_kv(&dir.join("metrics.txt")).ok()?;
    let t = read_kv(&dir.join("train_summary.txt")).ok()?;
    Some((
        m.get("eer_percent")?.parse().ok()?,
        m.get("min_dcf")?.parse().ok()?,
        t.get("train_accuracy")?.parse().ok()?,
        t.get("se_params")?.parse().ok()?,
    ))
}

/// Trains and scores every grid cell under `out/cells/<name>`. Cells that
/// already have results are reused; infeasible cells are skipped.
pub fn ablate(
    base: &RunConfig,
    cells: &[Vec<(String, String)>],
    out: &Path,
    mut notice: impl FnMut(&str),
) -> Result<Vec<CellResult>> {
    let mut results = Vec::new();
    for cell in cells.iter().cloned() {
        let name = cell_name(&cell);
        let mut cfg = base.clone();
        for (k, v) in &cell {
            cfg.set_override(&format!("{k}={v}"))?;
        }
        let dir = out.join("cells").join(&name);
        let mut r = CellResult {
            name: name.clone(),
            settings: cell.clone(),
            status: String::new(),
            eer_percent: None,
            min_dcf: None,
            train_accuracy: None,
            se_params: None,
        };
        let probe_spec = model_spec(&cfg, cfg.data.num_speakers.max(2));
        if let Some(why) = infeasibility(&probe_spec, &cfg.se) {
            notice(&format!("skipping cell {name}: {why}"));
            r.status = "skipped".into();
            results.push(r);
            continue;
        }
        cfg.validate()?;
        if let Some((eer, dcf, acc, se)) = cached_cell(&dir) {
            notice(&format!("reusing cell {name}"));
            (r.eer_percent, r.min_dcf, r.train_accuracy, r.se_params) = (Some(eer), Some(dcf), Some(acc), Some(se));
            r.status = "cached".into();
        } else {
            notice(&format!("running cell {name}"));
            let run = run_experiment(&cfg, &dir, |_| {})?;
            r.eer_percent = Some(run.metrics.eer_percent());
            r.min_dcf = Some(run.metrics.min_dcf);
            r.train_accuracy = Some(run.train_accuracy);
            r.se_params = Some(run.census.se);
            r.status = "ok".into();
        }
        results.push(r);
    }
    write_file(&out.join("results.tsv"), &results_tsv(&results))?;
    Ok(results)
}

/// One column per grid key; `-` marks a key left at its base value.
pub fn results_tsv(rows: &[CellResult]) -> String {
    let mut keys: Vec<&str> = Vec::new();
    for r in rows {
        for (k, _) in &r.settings {
            if !keys.contains(&k.as_str()) {
                keys.push(k);
            }
        }
    }
    let mut s = String::from("cell");
    for k in &keys {
        let _ = write!(s, "\t{k}");
    }
    s.push_str("\tstatus\teer_percent\tmin_dcf\ttrain_accuracy\tse_params\n");
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
    for r in rows {
        s.push_str(&r.name);
        for k in &keys {
            let v = r.settings.iter().find(|(rk, _)| rk == k).map(|(_, v)| v.as_str());
            let _ = write!(s, "\t{}", match v {
                None => "-",
                Some("") => "none",
                Some(v) => v,
            });
        }
        let _ = writeln!(
            s,
            "\t{}\t{}\t{}\t{}\t{}",
            r.status,
            opt(r.eer_percent),
            r.min_dcf.map(|x| format!("{x:.5}")).unwrap_or_else(|| "-".into()),
            opt(r.train_accuracy),
            r.se_params.map(|x| x.to_string()).unwrap_or_else(|| "-".into())
        );
    }
    s
}

/// Picks `cfg.analysis.num_speakers` eval speakers at random (seeded), runs
/// capture on their utterances and writes `analysis.txt`,
/// `excitations.sevx` and `excitations.tsv` under `out`.
pub fn analyze(cfg: &RunConfig, model: &mut SpeakerNet, eval: &[LabeledFeatures], out: &Path) -> Result<AnalysisReport> {
    let mut speakers: Vec<String> = eval
        .iter()
        .map(|u| u.speaker_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0xa7a1);
    speakers.shuffle(&mut rng);
    speakers.truncate(cfg.analysis.num_speakers);
    speakers.sort();
    let chosen: HashSet<&str> = speakers.iter().map(String::as_str).collect();
    let utts: Vec<LabeledFeatures> = eval.iter().filter(|u| chosen.contains(u.speaker_id.as_str())).cloned().collect();
    let records = capture_excitations(model, &utts, cfg.analysis.probe)?;
    let report = AnalysisReport::build(&records, &speakers)?;
    write_file(&out.join("analysis.txt"), &report.to_text())?;
    report.to_container()?.save(&out.join("excitations.sevx"))?;
    write_file(&out.join("excitations.tsv"), &report.to_tsv())?;
    Ok(report)
}

/// One-axis-at-a-time variations around the default SE configuration,
/// covering the stage, reduction, depth, integration and pooling tables.
pub fn standard_grid() -> Vec<Vec<(String, String)>> {
    let axes: [(&str, &[&str]); 5] = [
        ("se.stages", &["none", "1", "1,2", "1,2,3", "1,2,3,4"]),
        ("se.reduction", &["1", "2", "4", "8"]),
        ("se.hidden_layers", &["1", "2", "3", "4"]),
        ("se.integration", &["standard", "pre", "post", "identity"]),
        ("se.pooling", &["max", "mean", "std", "mean_std"]),
    ];
    let default = RunConfig::default();
    let mut seen = HashSet::new();
    let mut cells = Vec::new();
    for (k, vals) in axes {
        for v in vals {
            let mut cfg = default.clone();
            cfg.set_override(&format!("{k}={v}")).expect("grid values are valid");
            if seen.insert(cfg.se.clone()) {
                cells.push(vec![(k.to_string(), v.to_string())]);
            }
        }
    }
    cells
}
