//! SE gate statistics: per-speaker mean excitation across speakers and the
//! spread of excitations within one speaker.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::features::LabeledFeatures;
use crate::model::SpeakerNet;
use crate::nn::Probe;
use crate::sevx::Container;
use crate::tensor::Tensor;

/// Gate vector of one SE unit for one segment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExcitationRecord {
    pub stage: usize,
    pub block: usize,
    pub weights: Vec<f32>,
    pub utterance_id: String,
    pub speaker_id: String,
}

impl ExcitationRecord {
    pub fn site(&self) -> Site {
        Site {
            stage: self.stage,
            block: self.block,
        }
    }
}

/// One probed SE unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Site {
    pub stage: usize,
    pub block: usize,
}

/// Channel-wise statistics of a speaker's gates at one site.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerProfile {
    pub speaker_id: String,
    pub site: Site,
    pub mean: Vec<f64>,
    /// Population std; all zeros for a single segment.
    pub std: Vec<f64>,
    pub num_segments: usize,
}

impl SpeakerProfile {
    fn from_rows(speaker_id: &str, site: Site, rows: &[&[f32]]) -> Self {
        let c = rows[0].len();
        let n = rows.len() as f64;
        let mut mean = vec![0f64; c];
        for r in rows {
            for (m, &v) in mean.iter_mut().zip(r.iter()) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0f64; c];
        for r in rows {
            for ((s, &v), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
                *s += (v as f64 - m).powi(2);
            }
        }
        Self {
            speaker_id: speaker_id.to_string(),
            site,
            mean,
            std: var.into_iter().map(|v| (v / n).sqrt()).collect(),
            num_segments: rows.len(),
        }
    }

    /// Mean over channels of the within-speaker std.
    pub fn mean_std(&self) -> f64 {
        self.std.iter().sum::<f64>() / self.std.len() as f64
    }
}

/// Runs each utterance through the model in eval mode and keeps the gates
/// of the probed SE units.
pub fn capture_excitations(
    model: &mut SpeakerNet,
    utterances: &[LabeledFeatures],
    probe: Probe,
) -> Result<Vec<ExcitationRecord>> {
    if !model.se.is_enabled() {
        return Err(Error::invalid("no SE stages to probe: the model has no SE units"));
    }
    let probe = if probe == Probe::Off { Probe::LastPerStage } else { probe };
    let mut out = Vec::new();
    for u in utterances {
        let (_, caps) = model.probe(&u.features, probe)?;
        for cap in caps {
            out.push(ExcitationRecord {
                stage: cap.stage,
                block: cap.block,
                weights: cap.gates.into_data(),
                utterance_id: u.utterance_id.clone(),
                speaker_id: u.speaker_id.clone(),
            });
        }
    }
    Ok(out)
}

/// Per-site speaker means plus the dispersion scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct AcrossSpeaker {
    pub speakers: Vec<String>,
    pub profiles: BTreeMap<Site, Vec<SpeakerProfile>>,
    /// Mean over channels of the population std across speaker means.
    pub dispersion: BTreeMap<Site, f64>,
}

fn group<'r>(records: &'r [ExcitationRecord]) -> BTreeMap<(Site, &'r str), Vec<&'r [f32]>> {
    let mut g: BTreeMap<(Site, &str), Vec<&[f32]>> = BTreeMap::new();
    for r in records {
        g.entry((r.site(), r.speaker_id.as_str())).or_default().push(&r.weights);
    }
    g
}

fn check_widths(records: &[ExcitationRecord]) -> Result<()> {
    let mut widths: BTreeMap<Site, usize> = BTreeMap::new();
    for r in records {
        if r.weights.is_empty() {
            return Err(Error::invalid(format!("empty gate vector for {}", r.utterance_id)));
        }
        let w = *widths.entry(r.site()).or_insert(r.weights.len());
        if w != r.weights.len() {
            return Err(Error::shape("excitation record", &[w], &[r.weights.len()]));
        }
    }
    Ok(())
}

pub fn across_speaker_profile(records: &[ExcitationRecord], speakers: &[String]) -> Result<AcrossSpeaker> {
    let uniq: BTreeSet<&String> = speakers.iter().collect();
    if uniq.len() < 2 || uniq.len() != speakers.len() {
        return Err(Error::invalid("across-speaker analysis needs at least 2 distinct speakers"));
    }
    check_widths(records)?;
    let groups = group(records);
    let sites: BTreeSet<Site> = records.iter().map(|r| r.site()).collect();
    let mut profiles = BTreeMap::new();
    let mut dispersion = BTreeMap::new();
    for &site in &sites {
        let per: Vec<SpeakerProfile> = speakers
            .iter()
            .map(|s| {
                let rows = groups.get(&(site, s.as_str())).ok_or_else(|| {
                    Error::invalid(format!("speaker {s} has no records at stage {} block {}", site.stage, site.block))
                })?;
                Ok(SpeakerProfile::from_rows(s, site, rows))
            })
            .collect::<Result<_>>()?;
        let means: Vec<&[f64]> = per.iter().map(|p| p.mean.as_slice()).collect();
        dispersion.insert(site, spread(&means));
        profiles.insert(site, per);
    }
    Ok(AcrossSpeaker {
        speakers: speakers.to_vec(),
        profiles,
        dispersion,
    })
}

/// Mean over channels of the population std across `rows`.
fn spread(rows: &[&[f64]]) -> f64 {
    let c = rows[0].len();
    let n = rows.len() as f64;
    let total: f64 = (0..c)
        .map(|ch| {
            let m = rows.iter().map(|r| r[ch]).sum::<f64>() / n;
            (rows.iter().map(|r| (r[ch] - m).powi(2)).sum::<f64>() / n).sqrt()
        })
        .sum();
    total / c as f64
}

/// Mean and std of one speaker's gates at every probed site.
pub fn within_speaker_profile(records: &[ExcitationRecord], speaker: &str) -> Result<Vec<SpeakerProfile>> {
    check_widths(records)?;
    let groups = group(records);
    let sites: BTreeSet<Site> = records.iter().map(|r| r.site()).collect();
    sites
        .into_iter()
        .map(|site| {
            let rows = groups.get(&(site, speaker)).map(Vec::as_slice).unwrap_or(&[]);
            if rows.len() < 2 {
                return Err(Error::invalid(format!(
                    "speaker {speaker} has {} segments at stage {}; within-speaker analysis needs 2",
                    rows.len(),
                    site.stage
                )));
            }
            Ok(SpeakerProfile::from_rows(speaker, site, rows))
        })
        .collect()
}

/// Across-speaker table plus within-speaker profiles for the same speakers.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisReport {
    pub across: AcrossSpeaker,
    pub within: Vec<Vec<SpeakerProfile>>,
}

impl AnalysisReport {
    pub fn build(records: &[ExcitationRecord], speakers: &[String]) -> Result<Self> {
        let across = across_speaker_profile(records, speakers)?;
        let within = speakers
            .iter()
            .map(|s| within_speaker_profile(records, s))
            .collect::<Result<_>>()?;
        Ok(Self { across, within })
    }

    /// Dispersion at the last probed block of `stage`, if probed.
    pub fn stage_dispersion(&self, stage: usize) -> Option<f64> {
        self.across
            .dispersion
            .iter()
            .filter(|(s, _)| s.stage == stage)
            .last()
            .map(|(_, &d)| d)
    }

    fn within_summary(&self, site: Site) -> f64 {
        let v: Vec<f64> = self
            .within
            .iter()
            .flatten()
            .filter(|p| p.site == site)
            .map(SpeakerProfile::mean_std)
            .collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    /// Human-readable summary. Channel order within each stage is by
    /// descending mean activation over speakers; this is only for display.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "speakers = {}", self.across.speakers.join(","));
        for (site, d) in &self.across.dispersion {
            let profiles = &self.across.profiles[site];
            let c = profiles[0].mean.len();
            let avg: Vec<f64> = (0..c)
                .map(|ch| profiles.iter().map(|p| p.mean[ch]).sum::<f64>() / profiles.len() as f64)
                .collect();
            let mut order: Vec<usize> = (0..c).collect();
            order.sort_by(|&a, &b| avg[b].total_cmp(&avg[a]).then(a.cmp(&b)));
            let _ = writeln!(
                s,
                "stage {} block {}: channels {c}, across_speaker_dispersion {:.6}, within_speaker_std {:.6}",
                site.stage,
                site.block,
                d,
                self.within_summary(*site)
            );
            let shown: Vec<String> = order.iter().take(8).map(|&ch| format!("{ch}:{:.3}", avg[ch])).collect();
            let _ = writeln!(s, "  top channels by mean activation: {}", shown.join(" "));
        }
        match (self.stage_dispersion(1), self.stage_dispersion(4)) {
            (Some(d1), Some(d4)) => {
                let verdict = if d4 > d1 { "holds" } else { "does not hold" };
                let _ = writeln!(
                    s,
                    "empirical expectation stage4 > stage1 dispersion: {verdict} ({d4:.6} vs {d1:.6})"
                );
            }
            _ => {
                let _ = writeln!(s, "empirical expectation stage4 > stage1 dispersion: not measurable (stage 1 or 4 has no SE)");
            }
        }
        s
    }

    /// Per-site `[channels, speakers]` matrices of mean activation.
    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new(format!(
            "kind = \"severif.excitations\"\nspeakers = \"{}\"\n",
            self.across.speakers.join(",")
        ));
        for (site, profiles) in &self.across.profiles {
            let ch = profiles[0].mean.len();
            let n = profiles.len();
            let data = (0..ch)
                .flat_map(|k| profiles.iter().map(move |p| p.mean[k] as f32))
                .collect();
            c.push(format!("stage{}.block{}.across_mean", site.stage, site.block), Tensor::new([ch, n], data)?)?;
        }
        for profiles in &self.within {
            for p in profiles {
                let base = format!("stage{}.block{}.{}", p.site.stage, p.site.block, p.speaker_id);
                let ch = p.mean.len();
                c.push(format!("{base}.within_mean"), Tensor::new([ch], p.mean.iter().map(|&v| v as f32).collect())?)?;
                c.push(format!("{base}.within_std"), Tensor::new([ch], p.std.iter().map(|&v| v as f32).collect())?)?;
            }
        }
        Ok(c)
    }

    /// Flat rows: `kind stage block speaker channel mean std num_segments`.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("kind\tstage\tblock\tspeaker\tchannel\tmean\tstd\tnum_segments\n");
        let rows = self
            .across
            .profiles
            .values()
            .flatten()
            .map(|p| ("across", p))
            .chain(self.within.iter().flatten().map(|p| ("within", p)));
        for (kind, p) in rows {
            for ch in 0..p.mean.len() {
                let _ = writeln!(
                    s,
                    "{kind}\t{}\t{}\t{}\t{ch}\t{:.8}\t{:.8}\t{}",
                    p.site.stage, p.site.block, p.speaker_id, p.mean[ch], p.std[ch], p.num_segments
                );
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(stage: usize, spk: &str, utt: &str, w: &[f32]) -> ExcitationRecord {
        ExcitationRecord {
            stage,
            block: 0,
            weights: w.to_vec(),
            utterance_id: utt.into(),
            speaker_id: spk.into(),
        }
    }

    #[test]
    fn two_point_std_is_half_the_gap() {
        let r = [rec(1, "a", "u1", &[0.2, 0.9]), rec(1, "a", "u2", &[0.6, 0.5])];
        let p = &within_speaker_profile(&r, "a").unwrap()[0];
        assert!((p.std[0] - 0.2).abs() < 1e-7 && (p.std[1] - 0.2).abs() < 1e-7);
        assert!((p.mean_std() - 0.2).abs() < 1e-7);
        assert!(within_speaker_profile(&r[..1], "a").is_err());
    }

    #[test]
    fn identical_inputs_have_zero_dispersion() {
        let w = [0.3f32, 0.7, 0.1];
        let r: Vec<_> = ["a", "b", "c"].iter().map(|s| rec(2, s, "u", &w)).collect();
        let spk: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let a = across_speaker_profile(&r, &spk).unwrap();
        assert_eq!(a.dispersion.values().copied().collect::<Vec<_>>(), vec![0.0]);
        assert!(across_speaker_profile(&r, &spk[..1]).is_err());
        let missing = vec!["a".to_string(), "z".to_string()];
        assert!(across_speaker_profile(&r, &missing).is_err());
    }

    #[test]
    fn report_mentions_the_stage_comparison() {
        let mut r = Vec::new();
        for (s, spk) in ["a", "b"].iter().enumerate() {
            for u in 0..2 {
                let x = 0.1 + 0.1 * u as f32;
                r.push(rec(1, spk, &format!("{spk}{u}"), &[x, x]));
                r.push(rec(4, spk, &format!("{spk}{u}"), &[x + 0.5 * s as f32, x]));
            }
        }
        let spk = vec!["a".to_string(), "b".to_string()];
        let rep = AnalysisReport::build(&r, &spk).unwrap();
        assert!(rep.stage_dispersion(4).unwrap() > rep.stage_dispersion(1).unwrap());
        assert!(rep.to_text().contains("stage4 > stage1 dispersion: holds"));
        assert_eq!(rep.to_container().unwrap().get("stage4.block0.across_mean").unwrap().shape(), &[2, 2]);
        assert_eq!(rep.to_tsv().lines().count(), 1 + 2 * 2 * 2 + 2 * 2 * 2);
    }
}
