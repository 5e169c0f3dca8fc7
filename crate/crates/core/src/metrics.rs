//! Verification scoring: cosine scores, EER and minimum normalized DCF.
//!
//! Thresholds follow one convention throughout: a trial is accepted when
//! `score >= threshold`, so `FRR(t) = P(target < t)` and
//! `FAR(t) = P(nontarget >= t)`.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Target,
    Nontarget,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Target => "target",
            Label::Nontarget => "nontarget",
        }
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "target" => Ok(Label::Target),
            "nontarget" => Ok(Label::Nontarget),
            _ => Err(Error::invalid(format!("trial label {s:?} is not target|nontarget"))),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Trial {
    pub enroll: String,
    pub test: String,
    pub label: Label,
}

impl Trial {
    pub fn new(enroll: impl Into<String>, test: impl Into<String>, label: Label) -> Result<Self> {
        let (enroll, test) = (enroll.into(), test.into());
        if enroll.is_empty() || test.is_empty() {
            return Err(Error::invalid("trial ids must be nonempty"));
        }
        Ok(Self { enroll, test, label })
    }
}

/// Scored trials.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreSet {
    pub entries: Vec<(Trial, f64)>,
}

impl ScoreSet {
    /// Target and nontarget scores; both must be present and finite.
    pub fn split(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tar = Vec::new();
        let mut non = Vec::new();
        for (t, s) in &self.entries {
            if !s.is_finite() {
                return Err(Error::Numeric(format!("score for {} {} is {s}", t.enroll, t.test)));
            }
            match t.label {
                Label::Target => tar.push(*s),
                Label::Nontarget => non.push(*s),
            }
        }
        check_classes(&tar, &non)?;
        Ok((tar, non))
    }
}

fn check_classes(tar: &[f64], non: &[f64]) -> Result<()> {
    if tar.is_empty() || non.is_empty() {
        return Err(Error::invalid(format!(
            "metrics need both classes; got {} target and {} nontarget scores",
            tar.len(),
            non.len()
        )));
    }
    Ok(())
}

/// Detection cost parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcfParams {
    pub p_target: f64,
    pub cost_miss: f64,
    pub cost_fa: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        Self {
            p_target: 0.01,
            cost_miss: 1.0,
            cost_fa: 1.0,
        }
    }
}

impl DcfParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_target > 0.0 && self.p_target < 1.0) || !(self.cost_miss > 0.0) || !(self.cost_fa > 0.0) {
            return Err(Error::invalid(format!("invalid DCF parameters {self:?}")));
        }
        Ok(())
    }
}

pub fn cosine_score(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine score", &[a.len()], &[b.len()]));
    }
    let (mut dot, mut na, mut nb) = (0f64, 0f64, 0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric("cosine score of a zero-norm embedding".into()));
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// One threshold of the ROC sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

/// Operating points at every distinct score, ascending, plus `+inf`
/// (reject everything).
pub fn operating_points(tar: &[f64], non: &[f64]) -> Result<Vec<OperatingPoint>> {
    check_classes(tar, non)?;
    let mut t = tar.to_vec();
    let mut n = non.to_vec();
    t.sort_by(f64::total_cmp);
    n.sort_by(f64::total_cmp);
    let mut all: Vec<f64> = t.iter().chain(&n).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    all.push(f64::INFINITY);
    let (nt, nn) = (t.len() as f64, n.len() as f64);
    let (mut ti, mut ni) = (0, 0);
    Ok(all
        .into_iter()
        .map(|thr| {
            while ti < t.len() && t[ti] < thr {
                ti += 1;
            }
            while ni < n.len() && n[ni] < thr {
                ni += 1;
            }
            OperatingPoint {
                threshold: thr,
                frr: ti as f64 / nt,
                far: (n.len() - ni) as f64 / nn,
            }
        })
        .collect())
}

/// Equal error rate in `[0, 1]`, linearly interpolated between the two
/// operating points that bracket the FAR/FRR crossing.
pub fn eer(tar: &[f64], non: &[f64]) -> Result<f64> {
    let pts = operating_points(tar, non)?;
    eer_from_points(&pts)
}

fn eer_from_points(pts: &[OperatingPoint]) -> Result<f64> {
    // FRR rises and FAR falls along the sweep; the last point has FRR 1, FAR 0.
    let i = pts
        .iter()
        .position(|p| p.frr >= p.far)
        .expect("sweep ends with FRR 1 and FAR 0");
    let p1 = pts[i];
    if i == 0 || p1.frr == p1.far {
        return Ok(p1.frr.max(p1.far).min(1.0));
    }
    let p0 = pts[i - 1];
    let d0 = p0.frr - p0.far;
    let d1 = p1.frr - p1.far;
    let alpha = -d0 / (d1 - d0);
    Ok(p0.frr + alpha * (p1.frr - p0.frr))
}

/// Minimum normalized detection cost over all thresholds, including the
/// accept-all and reject-all extremes.
pub fn min_dcf(tar: &[f64], non: &[f64], params: &DcfParams) -> Result<f64> {
    params.validate()?;
    let pts = operating_points(tar, non)?;
    Ok(min_dcf_from_points(&pts, params))
}

fn min_dcf_from_points(pts: &[OperatingPoint], p: &DcfParams) -> f64 {
    let norm = (p.cost_miss * p.p_target).min(p.cost_fa * (1.0 - p.p_target));
    // Accept-all (FRR 0, FAR 1) is covered by the lowest threshold.
    pts.iter()
        .map(|o| p.cost_miss * p.p_target * o.frr + p.cost_fa * (1.0 - p.p_target) * o.far)
        .fold(f64::INFINITY, f64::min)
        / norm
}

/// Summary written by the `metrics` command.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub eer: f64,
    pub min_dcf: f64,
    pub num_target: usize,
    pub num_nontarget: usize,
}

impl MetricsReport {
    pub fn compute(scores: &ScoreSet, params: &DcfParams) -> Result<Self> {
        params.validate()?;
        let (tar, non) = scores.split()?;
        let pts = operating_points(&tar, &non)?;
        Ok(Self {
            eer: eer_from_points(&pts)?,
            min_dcf: min_dcf_from_points(&pts, params),
            num_target: tar.len(),
            num_nontarget: non.len(),
        })
    }

    pub fn eer_percent(&self) -> f64 {
        100.0 * self.eer
    }

    pub fn to_text(&self) -> String {
        format!(
            "eer_percent = {:?}\nmin_dcf = {:?}\nnum_target = {}\nnum_nontarget = {}\n",
            self.eer_percent(),
            self.min_dcf,
            self.num_target,
            self.num_nontarget
        )
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Yields `(byte offset, line number, fields)` for nonblank lines.
fn fields(text: &str) -> impl Iterator<Item = (u64, usize, Vec<&str>)> {
    let mut offset = 0u64;
    text.split_inclusive('\n').enumerate().filter_map(move |(i, line)| {
        let at = offset;
        offset += line.len() as u64;
        let f: Vec<&str> = line.split_whitespace().collect();
        (!f.is_empty()).then_some((at, i + 1, f))
    })
}

fn line_error(path: &Path, offset: u64, line: usize, msg: impl fmt::Display) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset,
        msg: format!("line {line}: {msg}"),
    }
}

/// Trial file lines: `enroll_id test_id target|nontarget`.
pub fn parse_trials(text: &str, path: &Path) -> Result<Vec<Trial>> {
    fields(text)
        .map(|(off, line, f)| {
            if f.len() != 3 {
                return Err(line_error(path, off, line, format!("expected 3 fields, got {}", f.len())));
            }
            let label = f[2].parse().map_err(|e| line_error(path, off, line, e))?;
            Trial::new(f[0], f[1], label)
        })
        .collect()
}

pub fn read_trials(path: &Path) -> Result<Vec<Trial>> {
    parse_trials(&read_text(path)?, path)
}

pub fn trials_to_text(trials: &[Trial]) -> String {
    trials
        .iter()
        .map(|t| format!("{} {} {}\n", t.enroll, t.test, t.label))
        .collect()
}

/// Score file lines: `enroll_id test_id score`.
pub fn parse_scores(text: &str, path: &Path) -> Result<Vec<(String, String, f64)>> {
    fields(text)
        .map(|(off, line, f)| {
            if f.len() != 3 {
                return Err(line_error(path, off, line, format!("expected 3 fields, got {}", f.len())));
            }
            let s: f64 = f[2]
                .parse()
                .map_err(|_| line_error(path, off, line, format!("bad score {:?}", f[2])))?;
            Ok((f[0].to_string(), f[1].to_string(), s))
        })
        .collect()
}

pub fn scores_to_text(scores: &ScoreSet) -> String {
    scores
        .entries
        .iter()
        .map(|(t, s)| format!("{} {} {s:?}\n", t.enroll, t.test))
        .collect()
}

/// Attaches labels from `trials` to the raw scores in a score file.
pub fn label_scores(raw: Vec<(String, String, f64)>, trials: &[Trial], path: &Path) -> Result<ScoreSet> {
    let labels: HashMap<(&str, &str), Label> = trials
        .iter()
        .map(|t| ((t.enroll.as_str(), t.test.as_str()), t.label))
        .collect();
    let entries = raw
        .into_iter()
        .map(|(e, t, s)| {
            let label = *labels.get(&(e.as_str(), t.as_str())).ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                offset: 0,
                msg: format!("score for {e} {t} has no matching trial"),
            })?;
            Ok((Trial::new(e, t, label)?, s))
        })
        .collect::<Result<_>>()?;
    Ok(ScoreSet { entries })
}

/// Scores every trial from an embedding table.
pub fn score_trials(embeddings: &HashMap<String, Vec<f32>>, trials: &[Trial]) -> Result<ScoreSet> {
    let get = |id: &str| {
        embeddings
            .get(id)
            .ok_or_else(|| Error::invalid(format!("no embedding for utterance {id}")))
    };
    let entries = trials
        .iter()
        .map(|t| Ok((t.clone(), cosine_score(get(&t.enroll)?, get(&t.test)?)?)))
        .collect::<Result<_>>()?;
    Ok(ScoreSet { entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        let e = [0.3f32, -1.2, 2.0];
        assert!((cosine_score(&e, &e).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f32> = e.iter().map(|v| -v).collect();
        assert!((cosine_score(&e, &neg).unwrap() + 1.0).abs() < 1e-12);
        let c = cosine_score(&[1.0, 0.0, 0.0], &[1.0, 1.0, 0.0]).unwrap();
        assert!((c - 0.70711).abs() < 1e-5);
        assert!(cosine_score(&[0.0; 3], &e).is_err());
    }

    #[test]
    fn eer_examples() {
        assert_eq!(eer(&[0.9, 0.8], &[0.2, 0.1]).unwrap(), 0.0);
        assert_eq!(eer(&[0.8, 0.4], &[0.6, 0.2]).unwrap(), 0.5);
        assert!(eer(&[0.5], &[]).is_err());
    }

    #[test]
    fn interpolates_between_points() {
        // (FRR, FAR) at 0.6 is (1/3, 1/2) and at 0.7 is (2/3, 1/2); the
        // crossing sits halfway along that segment.
        let e = eer(&[0.2, 0.6, 0.9], &[0.4, 0.7]).unwrap();
        assert!((e - 0.5).abs() < 1e-12);
        let pts = operating_points(&[0.2, 0.6, 0.9], &[0.4, 0.7]).unwrap();
        assert_eq!(pts.len(), 6);
        assert_eq!((pts[0].frr, pts[0].far), (0.0, 1.0));
        assert_eq!((pts[5].frr, pts[5].far), (1.0, 0.0));
    }

    #[test]
    fn min_dcf_examples() {
        let p = DcfParams::default();
        assert_eq!(min_dcf(&[0.9, 0.8], &[0.2, 0.1], &p).unwrap(), 0.0);
        assert!((min_dcf(&[0.5], &[0.6], &p).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn file_formats() {
        let text = "a b target\n\nc d nontarget\n";
        let trials = parse_trials(text, Path::new("t")).unwrap();
        assert_eq!(trials.len(), 2);
        assert_eq!(trials_to_text(&trials), "a b target\nc d nontarget\n");
        let err = parse_trials("a b target\nc d maybe\n", Path::new("t")).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 11, .. }), "{err}");

        let raw = parse_scores("a b 0.5\nc d -0.25\n", Path::new("s")).unwrap();
        let set = label_scores(raw, &trials, Path::new("s")).unwrap();
        let r = MetricsReport::compute(&set, &DcfParams::default()).unwrap();
        assert_eq!((r.num_target, r.num_nontarget), (1, 1));
        assert!(r.to_text().starts_with("eer_percent = 0.0\n"));
    }
}
