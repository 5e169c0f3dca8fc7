use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn severif(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_severif"))
        .current_dir(dir)
        .env_remove("SEVERIF_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn sha(path: &Path) -> Vec<u8> {
    Sha256::digest(fs::read(path).unwrap()).to_vec()
}

/// A corpus and recipe small enough to train in a few seconds.
const TINY: &str = r#"
seed = 4
[model]
segment_frames = 32
[optim]
batch_size = 8
epochs = 1
[data]
dir = "data"
num_speakers = 3
utts_per_speaker = 4
eval_utts_per_speaker = 4
frames_per_utt = 40
"#;

fn tiny_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    let o = severif(dir.path(), &["--config", "tiny.toml", "make-data"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    dir
}

#[test]
fn make_data_default_spec_and_idempotence() {
    let dir = tempfile::tempdir().unwrap();
    let o = severif(dir.path(), &["make-data"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let manifest = fs::read_to_string(dir.path().join("data/train.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 20 * 50);
    let speakers: std::collections::BTreeSet<&str> = manifest.lines().map(|l| l.split('\t').nth(1).unwrap()).collect();
    assert_eq!(speakers.len(), 20);

    let first = sha(&dir.path().join("data/train.sevx"));
    let o = severif(dir.path(), &["make-data"]);
    assert_eq!(code(&o), 0);
    assert_eq!(sha(&dir.path().join("data/train.sevx")), first);
}

#[test]
fn seed_env_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let run = |seed: &str, sub: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_severif"))
            .current_dir(dir.path())
            .env("SEVERIF_SEED", seed)
            .args(["--set", &format!("data.dir={sub}"), "--set", "data.utts_per_speaker=2"])
            .args(["--set", "data.eval_utts_per_speaker=2", "make-data"])
            .output()
            .unwrap();
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        sha(&dir.path().join(sub).join("train.sevx"))
    };
    assert_eq!(run("7", "a"), run("7", "b"));
    assert_ne!(run("7", "a"), run("8", "c"));
    let o = Command::new(env!("CARGO_BIN_EXE_severif"))
        .current_dir(dir.path())
        .env("SEVERIF_SEED", "seven")
        .arg("make-data")
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
}

#[test]
fn config_and_usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = severif(dir.path(), &["--set", "data.num_speakers=1", "make-data"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("num_speakers"), "{}", stderr(&o));

    let o = severif(dir.path(), &["--set", "se.squeze=mean", "make-data"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("se.squeze"));

    fs::write(dir.path().join("bad.toml"), "[optim]\nlearning_rate = 0.1\n").unwrap();
    assert_eq!(code(&severif(dir.path(), &["--config", "bad.toml", "make-data"])), 1);
    assert_eq!(code(&severif(dir.path(), &["no-such-command"])), 1);
    assert_eq!(code(&severif(dir.path(), &["--help"])), 0);
}

#[test]
fn missing_and_corrupt_artifacts_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = severif(dir.path(), &["analyze", "--checkpoint", "nope.sevx"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("nope.sevx"));

    fs::write(dir.path().join("junk.sevx"), b"SEVX\x01\x00\x00\x00\xff").unwrap();
    let o = severif(dir.path(), &["analyze", "--checkpoint", "junk.sevx"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("offset"), "{}", stderr(&o));

    fs::write(dir.path().join("t.txt"), "a b target\nc d nontarget\n").unwrap();
    fs::write(dir.path().join("s.txt"), "a b 0.9\nc d oops\n").unwrap();
    let o = severif(dir.path(), &["metrics", "--scores", "s.txt", "--trials", "t.txt"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("s.txt: offset 8"), "{}", stderr(&o));
}

#[test]
fn metrics_on_hand_built_scores() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("trials.txt"), "e1 t1 target\ne2 t2 target\ne3 t3 nontarget\ne4 t4 nontarget\n").unwrap();
    fs::write(dir.path().join("scores.txt"), "e1 t1 0.8\ne2 t2 0.4\ne3 t3 0.6\ne4 t4 0.2\n").unwrap();
    let o = severif(
        dir.path(),
        &["metrics", "--scores", "scores.txt", "--trials", "trials.txt", "--out", "m.txt"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = fs::read_to_string(dir.path().join("m.txt")).unwrap();
    assert!(report.contains("eer_percent = 50"), "{report}");
    assert!(report.contains("num_target = 2"));
    assert_eq!(String::from_utf8_lossy(&o.stdout), report);
}

#[test]
fn gradcheck_command_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = severif(dir.path(), &["gradcheck", "--seeds", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.lines().count() > 20);
    assert!(!out.contains("FAIL"));
}

#[test]
fn train_reports_census_and_writes_artifacts() {
    let dir = tiny_dir();
    let o = severif(dir.path(), &["--config", "tiny.toml", "train", "--out", "run"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    let expected = severif::model::closed_form_se_params(
        &severif::model::ModelSpec::toy(3),
        &severif::se::SeConfig::default(),
    );
    assert!(out.contains(&format!("closed form {expected}, delta vs SE-free network {expected}")), "{out}");
    let log = fs::read_to_string(dir.path().join("run/train_log.tsv")).unwrap();
    assert!(log.starts_with("step\tepoch\tlr\tloss"));
    assert!(log.lines().count() > 1);
    let frozen = fs::read_to_string(dir.path().join("run/config.toml")).unwrap();
    assert!(frozen.contains("se.reduction = 4"), "{frozen}");

    let rerun = severif(dir.path(), &["--config", "run/config.toml", "train", "--out", "run2"]);
    assert_eq!(code(&rerun), 0, "{}", stderr(&rerun));
    let losses = |p: &str| {
        fs::read_to_string(dir.path().join(p))
            .unwrap()
            .lines()
            .map(|l| l.split('\t').nth(3).unwrap().to_string())
            .collect::<Vec<_>>()
    };
    assert_eq!(losses("run/train_log.tsv"), losses("run2/train_log.tsv"));
    assert_eq!(sha(&dir.path().join("run/model.sevx")), sha(&dir.path().join("run2/model.sevx")));
}

#[test]
fn single_cell_ablation_equals_train_then_score() {
    let dir = tiny_dir();
    let cfg = ["--config", "tiny.toml"];
    let run = |args: &[&str]| {
        let o = severif(dir.path(), &[&cfg[..], args].concat());
        assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
        o
    };
    run(&["train", "--out", "manual"]);
    run(&["score", "--checkpoint", "manual/model.sevx", "--out", "manual/scores.txt"]);
    run(&["metrics", "--scores", "manual/scores.txt", "--out", "manual/metrics.txt"]);
    run(&["ablate", "--grid", "se.reduction=4", "--out", "sweep"]);

    let cell = dir.path().join("sweep/cells/se.reduction=4");
    for f in ["model.sevx", "scores.txt", "metrics.txt"] {
        assert_eq!(sha(&cell.join(f)), sha(&dir.path().join("manual").join(f)), "{f}");
    }

    run(&["extract", "--checkpoint", "manual/model.sevx", "--out", "emb.sevx"]);
    run(&["score", "--embeddings", "emb.sevx", "--out", "from_emb.txt"]);
    assert_eq!(sha(&dir.path().join("from_emb.txt")), sha(&dir.path().join("manual/scores.txt")));
}

#[test]
fn ablation_cells_are_independent_and_infeasible_cells_skip() {
    let dir = tiny_dir();
    let grid = ["--config", "tiny.toml", "ablate", "--grid", "se.pooling=max/mean", "--grid", "se.reduction=2/32"];
    let o = severif(dir.path(), &[&grid[..], &["--out", "sweep"]].concat());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("skipping cell se.pooling=max__se.reduction=32"), "{}", stderr(&o));
    let table = fs::read_to_string(dir.path().join("sweep/results.tsv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "cell\tse.pooling\tse.reduction\tstatus\teer_percent\tmin_dcf\ttrain_accuracy\tse_params");
    assert_eq!(lines.len(), 5);
    assert_eq!(table.matches("\tskipped\t").count(), 2);

    let cell = dir.path().join("sweep/cells/se.pooling=mean__se.reduction=2");
    let before = sha(&cell.join("model.sevx"));
    let metrics = fs::read(cell.join("metrics.txt")).unwrap();
    fs::remove_dir_all(&cell).unwrap();
    let o = severif(dir.path(), &[&grid[..], &["--out", "sweep"]].concat());
    assert_eq!(code(&o), 0);
    assert!(stderr(&o).contains("reusing cell se.pooling=max__se.reduction=2"));
    assert!(stderr(&o).contains("running cell se.pooling=mean__se.reduction=2"));
    assert_eq!(sha(&cell.join("model.sevx")), before);
    assert_eq!(fs::read(cell.join("metrics.txt")).unwrap(), metrics);
}

#[test]
fn analyze_needs_se_units() {
    let dir = tiny_dir();
    let o = severif(dir.path(), &["--config", "tiny.toml", "--set", "se.stages=", "train", "--out", "plain"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = severif(dir.path(), &["--config", "tiny.toml", "analyze", "--checkpoint", "plain/model.sevx"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("no SE stages to probe"), "{}", stderr(&o));
}

#[test]
fn analyze_writes_report_matrix_and_tsv() {
    let dir = tiny_dir();
    let set = ["--config", "tiny.toml", "--set", "analysis.num_speakers=3"];
    let o = severif(dir.path(), &[&set[..], &["train", "--out", "run"]].concat());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = severif(dir.path(), &[&set[..], &["analyze", "--checkpoint", "run/model.sevx", "--out", "an"]].concat());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("across_speaker_dispersion"));
    let m = severif::sevx::Container::load(&dir.path().join("an/excitations.sevx")).unwrap();
    let across = m.get("stage1.block2.across_mean").expect("stage 1 matrix");
    assert_eq!(across.shape(), &[16, 3]);
    let tsv = fs::read_to_string(dir.path().join("an/excitations.tsv")).unwrap();
    assert!(tsv.starts_with("kind\tstage\tblock\tspeaker\tchannel"));
}

#[test]
fn wav_manifest_ingestion() {
    let dir = tempfile::tempdir().unwrap();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: 16000,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut manifest = String::new();
    let mut eval = String::new();
    for s in 0..2 {
        for u in 0..3 {
            let name = format!("s{s}u{u}.wav");
            let mut w = hound::WavWriter::create(dir.path().join(&name), spec).unwrap();
            let f = 200.0 + 150.0 * s as f64 + 10.0 * u as f64;
            for i in 0..8000 {
                let v = (2.0 * std::f64::consts::PI * f * i as f64 / 16000.0).sin() * 8000.0;
                w.write_sample(v as i16).unwrap();
            }
            w.finalize().unwrap();
            let line = format!("s{s}u{u}\tspk{s}\t{name}\n");
            manifest.push_str(&line);
            eval.push_str(&line);
        }
    }
    fs::write(dir.path().join("train.list"), manifest).unwrap();
    fs::write(dir.path().join("eval.list"), eval).unwrap();
    let o = severif(
        dir.path(),
        &["--set", "data.wav_manifest=train.list", "--set", "data.eval_wav_manifest=eval.list", "make-data"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let c = severif::sevx::Container::load(&dir.path().join("data/train.sevx")).unwrap();
    assert_eq!(c.len(), 6);
    assert_eq!(c.get("s0u0").unwrap().shape(), &[60, 48]);

    let o = severif(dir.path(), &["--set", "data.wav_manifest=train.list", "make-data"]);
    assert_eq!(code(&o), 1);
}
