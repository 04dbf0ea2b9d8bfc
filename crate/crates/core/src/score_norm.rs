//! Score normalization: adaptive symmetric s-norm against a per-speaker
//! cohort, and per-trial-type channel normalization fitted on development
//! scores.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingSet, ScoreSet, TrialType};
use crate::error::{Error, Result};

pub const DEFAULT_TOP_N: usize = 400;

/// Per-speaker mean embeddings in the raw embedding space. The active
/// scoring representation (chain or compact factor) is applied afterwards,
/// exactly as for trial embeddings.
#[derive(Debug, Clone)]
pub struct Cohort {
    pub speaker_ids: Vec<String>,
    dim: usize,
    vectors: Vec<f64>, // row-major
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.speaker_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speaker_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    /// View the cohort as an embedding set (ids are speaker ids) so the
    /// scoring representation can be applied with the usual machinery.
    pub fn to_embedding_set(&self) -> Result<EmbeddingSet> {
        let meta = self
            .speaker_ids
            .iter()
            .map(|s| crate::data::SegmentMeta {
                speaker: s.clone(),
                ..Default::default()
            })
            .collect();
        EmbeddingSet::new(self.speaker_ids.clone(), self.dim, self.vectors.clone(), meta)
    }
}

/// Average embeddings per speaker (raw space). Every segment must carry a
/// speaker label.
pub fn build_cohort(set: &EmbeddingSet) -> Result<Cohort> {
    let mut missing = 0usize;
    for i in 0..set.len() {
        if !set.meta(i).has_speaker() {
            missing += 1;
        }
    }
    if missing > 0 {
        return Err(Error::data(format!(
            "cohort construction requires speaker labels; {missing} segment(s) are unlabeled"
        )));
    }
    let groups = crate::preprocess::speaker_groups(set);
    let d = set.dim();
    let mut speaker_ids = Vec::with_capacity(groups.len());
    let mut vectors = Vec::with_capacity(groups.len() * d);
    for (speaker, rows) in groups {
        let mut mean = vec![0.0; d];
        for &i in &rows {
            for (m, v) in mean.iter_mut().zip(set.row(i)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= rows.len() as f64;
        }
        speaker_ids.push(speaker);
        vectors.extend(mean);
    }
    if speaker_ids.len() < DEFAULT_TOP_N {
        log::warn!(
            "cohort has {} speakers, below the default top-{} selection",
            speaker_ids.len(),
            DEFAULT_TOP_N
        );
    }
    Ok(Cohort {
        speaker_ids,
        dim: d,
        vectors,
    })
}

/// Mean and unbiased std of the `top_n` highest cohort scores. Ties at the
/// cutoff value are all included, so the selection is order-free.
fn top_n_stats(scores: &[f64], top_n: usize) -> Result<(f64, f64)> {
    if scores.is_empty() {
        return Err(Error::data("empty cohort score list"));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("non-finite cohort score"));
    let selected: &[f64] = if sorted.len() <= top_n {
        &sorted
    } else {
        let cutoff = sorted[top_n - 1];
        let end = sorted.partition_point(|&v| v >= cutoff);
        &sorted[..end]
    };
    let n = selected.len() as f64;
    let mean = selected.iter().sum::<f64>() / n;
    if selected.len() < 2 {
        return Ok((mean, 0.0));
    }
    let var = selected.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

/// Adaptive symmetric s-norm:
/// `s' = ((s - mu_e)/sigma_e + (s - mu_t)/sigma_t) / 2`, with the
/// statistics taken over the `top_n` highest cohort scores of the
/// enrollment model and of the test segment.
pub fn adaptive_snorm(
    scores: &ScoreSet,
    enroll_cohort: &HashMap<String, Vec<f64>>,
    test_cohort: &HashMap<String, Vec<f64>>,
    top_n: usize,
) -> Result<ScoreSet> {
    if top_n == 0 {
        return Err(Error::data("s-norm top_n must be >= 1"));
    }
    let mut enroll_stats: HashMap<&str, (f64, f64)> = HashMap::new();
    let mut test_stats: HashMap<&str, (f64, f64)> = HashMap::new();
    let mut entries = Vec::with_capacity(scores.entries.len());
    for e in &scores.entries {
        let (mu_e, sd_e) = match enroll_stats.get(e.model_id.as_str()) {
            Some(&s) => s,
            None => {
                let list = enroll_cohort.get(&e.model_id).ok_or_else(|| {
                    Error::data(format!("no cohort scores for model '{}'", e.model_id))
                })?;
                if list.len() < top_n {
                    log::warn!(
                        "model '{}' has {} cohort scores, below top_n={top_n}; using all",
                        e.model_id,
                        list.len()
                    );
                }
                let s = top_n_stats(list, top_n)?;
                enroll_stats.insert(e.model_id.as_str(), s);
                s
            }
        };
        let (mu_t, sd_t) = match test_stats.get(e.test_id.as_str()) {
            Some(&s) => s,
            None => {
                let list = test_cohort.get(&e.test_id).ok_or_else(|| {
                    Error::data(format!("no cohort scores for segment '{}'", e.test_id))
                })?;
                if list.len() < top_n {
                    log::warn!(
                        "segment '{}' has {} cohort scores, below top_n={top_n}; using all",
                        e.test_id,
                        list.len()
                    );
                }
                let s = top_n_stats(list, top_n)?;
                test_stats.insert(e.test_id.as_str(), s);
                s
            }
        };
        if sd_e <= 0.0 || sd_t <= 0.0 {
            return Err(Error::numeric(format!(
                "zero cohort score deviation for trial ({}, {})",
                e.model_id, e.test_id
            )));
        }
        let normalized = 0.5 * ((e.score - mu_e) / sd_e + (e.score - mu_t) / sd_t);
        let mut out = e.clone();
        out.score = normalized;
        entries.push(out);
    }
    ScoreSet::new(
        entries,
        format!("{} + s-norm(top_n={top_n})", scores.provenance),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TypeStats {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

/// Per-trial-type affine normalization statistics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ChannelStats {
    stats: BTreeMap<TrialType, TypeStats>,
}

impl ChannelStats {
    pub fn get(&self, t: TrialType) -> Option<&TypeStats> {
        self.stats.get(&t)
    }

    pub fn types(&self) -> impl Iterator<Item = (&TrialType, &TypeStats)> {
        self.stats.iter()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let repr: BTreeMap<&str, &TypeStats> = self
            .stats
            .iter()
            .map(|(k, v)| (k.as_str(), v))
            .collect();
        let text = serde_json::to_string_pretty(&repr)
            .map_err(|e| Error::data(format!("channel stats serialization: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let repr: BTreeMap<String, TypeStats> = serde_json::from_str(&text)
            .map_err(|e| Error::parse(path, 1, format!("bad channel stats file: {e}")))?;
        let mut stats = BTreeMap::new();
        for (k, v) in repr {
            let t = TrialType::parse(&k)
                .ok_or_else(|| Error::data(format!("unknown trial type '{k}'")))?;
            if v.std <= 0.0 {
                return Err(Error::data(format!("non-positive std for trial type '{k}'")));
            }
            stats.insert(t, v);
        }
        Ok(ChannelStats { stats })
    }
}

/// Fit per-type mean/std (unbiased) from labeled development scores. Types
/// with fewer than two scores are rejected; trials with unknown type are
/// skipped.
pub fn fit_channel_stats(dev_scores: &ScoreSet) -> Result<ChannelStats> {
    let mut by_type: BTreeMap<TrialType, Vec<f64>> = BTreeMap::new();
    for e in &dev_scores.entries {
        if e.trial_type != TrialType::Unknown {
            by_type.entry(e.trial_type).or_default().push(e.score);
        }
    }
    if by_type.is_empty() {
        return Err(Error::data(
            "development scores carry no trial_type labels",
        ));
    }
    let mut stats = BTreeMap::new();
    for (t, list) in by_type {
        if list.len() < 2 {
            return Err(Error::data(format!(
                "trial type '{}' has {} development score(s); need >= 2",
                t.as_str(),
                list.len()
            )));
        }
        let n = list.len() as f64;
        let mean = list.iter().sum::<f64>() / n;
        let var = list.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        let std = var.sqrt();
        if std <= 0.0 {
            return Err(Error::numeric(format!(
                "zero score deviation for trial type '{}'",
                t.as_str()
            )));
        }
        stats.insert(
            t,
            TypeStats {
                mean,
                std,
                count: list.len(),
            },
        );
    }
    Ok(ChannelStats { stats })
}

/// `s' = (s - mean_type) / std_type`; every trial's type must be present in
/// the statistics.
pub fn channel_norm(scores: &ScoreSet, stats: &ChannelStats) -> Result<ScoreSet> {
    let mut entries = Vec::with_capacity(scores.entries.len());
    for e in &scores.entries {
        let ts = stats.get(e.trial_type).ok_or_else(|| {
            Error::data(format!(
                "no channel statistics for trial type '{}' (trial {}, {})",
                e.trial_type.as_str(),
                e.model_id,
                e.test_id
            ))
        })?;
        let mut out = e.clone();
        out.score = (e.score - ts.mean) / ts.std;
        entries.push(out);
    }
    ScoreSet::new(entries, format!("{} + channel-norm", scores.provenance))
}
