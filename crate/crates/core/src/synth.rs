//! Ground-truth generative sampler. Produces embedding sets with
//! speaker / language / gender / channel structure from known covariances,
//! plus matched trial lists, so pipeline behavior can be checked against
//! construction-time truth.
//!
//! Sampling is reproducible and parallelism-independent: speaker `i` draws
//! from a ChaCha12 stream derived from the spec seed with stream id
//! `i + 1`, so each speaker's randomness is self-contained.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use nalgebra::{DMatrix, DVector};

use crate::data::{
    Channel, EmbeddingSet, Gender, Key, Model, SegmentMeta, Trial, TrialList, TrialType,
};
use crate::error::{Error, Result};
use crate::linalg;
use crate::par;

/// Covariance specification: scalar times identity, diagonal, or a full
/// row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovSpec {
    Isotropic(f64),
    Diagonal(Vec<f64>),
    Full(Vec<f64>),
}

impl CovSpec {
    fn to_matrix(&self, d: usize) -> Result<DMatrix<f64>> {
        let m = match self {
            CovSpec::Isotropic(v) => {
                if *v < 0.0 {
                    return Err(Error::data("isotropic covariance must be >= 0"));
                }
                DMatrix::identity(d, d) * *v
            }
            CovSpec::Diagonal(diag) => {
                if diag.len() != d {
                    return Err(Error::data(format!(
                        "diagonal covariance has {} entries, expected {d}",
                        diag.len()
                    )));
                }
                if diag.iter().any(|v| *v < 0.0) {
                    return Err(Error::data("diagonal covariance entries must be >= 0"));
                }
                DMatrix::from_diagonal(&DVector::from_row_slice(diag))
            }
            CovSpec::Full(flat) => {
                if flat.len() != d * d {
                    return Err(Error::data(format!(
                        "full covariance has {} entries, expected {}",
                        flat.len(),
                        d * d
                    )));
                }
                let m = DMatrix::from_row_iterator(d, d, flat.iter().copied());
                if (&m - m.transpose()).amax() > 1e-10 * m.amax().max(1.0) {
                    return Err(Error::data("full covariance is not symmetric"));
                }
                m
            }
        };
        Ok(m)
    }

    /// Factor G with G G' equal to the covariance (PSD square root via
    /// eigendecomposition so singular covariances sample fine).
    fn factor(&self, d: usize) -> Result<DMatrix<f64>> {
        let m = self.to_matrix(d)?;
        let (values, vectors) = linalg::sym_eigen_desc(&m);
        let max = values.first().copied().unwrap_or(0.0).max(0.0);
        let mut g = vectors;
        for j in 0..d {
            let v = values[j];
            if v < -1e-10 * max.max(1.0) {
                return Err(Error::data("covariance is not positive semi-definite"));
            }
            let root = v.max(0.0).sqrt();
            for i in 0..d {
                g[(i, j)] *= root;
            }
        }
        Ok(g)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageSpec {
    pub name: String,
    pub mean_shift: Vec<f64>,
    pub share: f64,
}

/// Generative description of a synthetic embedding set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub dim: usize,
    pub n_speakers: usize,
    pub sessions_per_speaker: usize,
    pub languages: Vec<LanguageSpec>,
    /// Added as +/- shift by speaker gender.
    pub gender_shift: Vec<f64>,
    /// Added to mic sessions only (channel is drawn 50/50 per session).
    pub channel_shift: Vec<f64>,
    pub between_cov: CovSpec,
    pub within_cov: CovSpec,
    pub seed: u64,
    /// Global mean; zero when absent.
    #[serde(default)]
    pub mean: Option<Vec<f64>>,
    /// Dataset label stamped on every segment.
    #[serde(default)]
    pub dataset: Option<String>,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::data("synth dim must be >= 1"));
        }
        if self.n_speakers == 0 || self.sessions_per_speaker == 0 {
            return Err(Error::data("synth needs speakers and sessions >= 1"));
        }
        if self.languages.is_empty() {
            return Err(Error::data("synth needs at least one language"));
        }
        let share_sum: f64 = self.languages.iter().map(|l| l.share).sum();
        if (share_sum - 1.0).abs() > 1e-9 || self.languages.iter().any(|l| l.share < 0.0) {
            return Err(Error::data("language shares must be >= 0 and sum to 1"));
        }
        for l in &self.languages {
            if l.mean_shift.len() != self.dim {
                return Err(Error::data(format!(
                    "language '{}' shift has dim {}, expected {}",
                    l.name,
                    l.mean_shift.len(),
                    self.dim
                )));
            }
        }
        for (name, v) in [("gender_shift", &self.gender_shift), ("channel_shift", &self.channel_shift)] {
            if v.len() != self.dim {
                return Err(Error::data(format!(
                    "{name} has dim {}, expected {}",
                    v.len(),
                    self.dim
                )));
            }
        }
        if let Some(m) = &self.mean {
            if m.len() != self.dim {
                return Err(Error::data("mean has wrong dimension"));
            }
        }
        Ok(())
    }
}

struct SpeakerBlock {
    rows: Vec<f64>,
    metas: Vec<SegmentMeta>,
    ids: Vec<String>,
}

/// Draw the embedding set described by the spec. Same seed, same bytes,
/// regardless of thread count.
pub fn sample(spec: &SynthSpec) -> Result<EmbeddingSet> {
    spec.validate()?;
    let d = spec.dim;
    let between = spec.between_cov.factor(d)?;
    let within = spec.within_cov.factor(d)?;
    let mean = match &spec.mean {
        Some(m) => DVector::from_row_slice(m),
        None => DVector::zeros(d),
    };
    let dataset = spec.dataset.clone().unwrap_or_else(|| "synth".to_string());

    let mut shares_cum = Vec::with_capacity(spec.languages.len());
    let mut acc = 0.0;
    for l in &spec.languages {
        acc += l.share;
        shares_cum.push(acc);
    }

    let blocks: Vec<SpeakerBlock> = par::map_indexed(spec.n_speakers, |s| {
        let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
        rng.set_stream(s as u64 + 1);

        let u: f64 = rng.gen();
        let lang_idx = shares_cum.partition_point(|&c| c < u).min(spec.languages.len() - 1);
        let lang = &spec.languages[lang_idx];
        let gender = if rng.gen_bool(0.5) { Gender::Male } else { Gender::Female };
        let g_sign = if gender == Gender::Male { 1.0 } else { -1.0 };

        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        let y = &between * z;

        let mut base = mean.clone() + y;
        for j in 0..d {
            base[j] += lang.mean_shift[j] + g_sign * spec.gender_shift[j];
        }

        let mut rows = Vec::with_capacity(spec.sessions_per_speaker * d);
        let mut metas = Vec::with_capacity(spec.sessions_per_speaker);
        let mut ids = Vec::with_capacity(spec.sessions_per_speaker);
        for k in 0..spec.sessions_per_speaker {
            let channel = if rng.gen_bool(0.5) { Channel::Tel } else { Channel::Mic };
            let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
            let eps = &within * z;
            for j in 0..d {
                let c = if channel == Channel::Mic { spec.channel_shift[j] } else { 0.0 };
                rows.push(base[j] + c + eps[j]);
            }
            ids.push(format!("spk{s:05}-s{k}"));
            metas.push(SegmentMeta {
                speaker: format!("spk{s:05}"),
                language: lang.name.clone(),
                gender,
                channel,
                dataset: dataset.clone(),
            });
        }
        SpeakerBlock { rows, metas, ids }
    });

    let n = spec.n_speakers * spec.sessions_per_speaker;
    let mut ids = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * d);
    let mut metas = Vec::with_capacity(n);
    for b in blocks {
        ids.extend(b.ids);
        data.extend(b.rows);
        metas.extend(b.metas);
    }
    EmbeddingSet::new(ids, d, data, metas)
}

/// Trial-list construction parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialSpec {
    pub n_target: usize,
    pub n_nontarget: usize,
    /// 1 or 3 enrollment sessions per model.
    pub sessions_per_model: usize,
    pub seed: u64,
}

/// Build a trial list over the set: one model per eligible speaker
/// (first `sessions_per_model` segments enroll, the rest are the test
/// pool). Target trials pair a model with its own held-out segments;
/// nontarget trials pair distinct speakers, matched on gender and language
/// when those labels are known (cross-gender and cross-language nontargets
/// are absent from the evaluation protocol this mirrors). Trial types come
/// from the segment channel labels.
pub fn make_trials(set: &EmbeddingSet, spec: &TrialSpec) -> Result<TrialList> {
    if spec.sessions_per_model != 1 && spec.sessions_per_model != 3 {
        return Err(Error::data("sessions_per_model must be 1 or 3"));
    }
    if spec.n_target == 0 && spec.n_nontarget == 0 {
        return Err(Error::data("trial spec requests no trials"));
    }
    let groups = crate::preprocess::speaker_groups(set);
    struct Candidate {
        speaker: String,
        enroll: Vec<usize>,
        pool: Vec<usize>,
        gender: Gender,
        language: String,
    }
    let mut candidates = Vec::new();
    for (speaker, rows) in &groups {
        if rows.len() < spec.sessions_per_model + 1 {
            continue;
        }
        let enroll = rows[..spec.sessions_per_model].to_vec();
        let pool = rows[spec.sessions_per_model..].to_vec();
        let meta = set.meta(rows[0]);
        candidates.push(Candidate {
            speaker: speaker.clone(),
            enroll,
            pool,
            gender: meta.gender,
            language: meta.language.clone(),
        });
    }
    if candidates.len() < 2 {
        return Err(Error::data(format!(
            "trial construction needs >= 2 speakers with {} + 1 segments, found {}",
            spec.sessions_per_model,
            candidates.len()
        )));
    }

    let mut models = Vec::with_capacity(candidates.len());
    for c in &candidates {
        models.push(Model {
            id: format!("m-{}", c.speaker),
            segments: c.enroll.iter().map(|&i| set.id(i).to_string()).collect(),
        });
    }

    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let mut used = std::collections::HashSet::new();
    let mut trials = Vec::with_capacity(spec.n_target + spec.n_nontarget);

    let trial_type = |c: &Candidate, test_idx: usize| {
        TrialType::from_channels(set.meta(c.enroll[0]).channel, set.meta(test_idx).channel)
    };

    let max_attempts = 50 * (spec.n_target + spec.n_nontarget).max(1000);
    let mut attempts = 0usize;
    let mut n_target = 0usize;
    while n_target < spec.n_target {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::data(format!(
                "insufficient segments: generated {n_target}/{} unique target trials",
                spec.n_target
            )));
        }
        let c = &candidates[rng.gen_range(0..candidates.len())];
        let test_idx = c.pool[rng.gen_range(0..c.pool.len())];
        let model_id = format!("m-{}", c.speaker);
        if used.insert((model_id.clone(), test_idx)) {
            trials.push(Trial {
                model_id,
                test_id: set.id(test_idx).to_string(),
                key: Key::Target,
                trial_type: trial_type(c, test_idx),
            });
            n_target += 1;
        }
    }

    attempts = 0;
    let mut n_nontarget = 0usize;
    while n_nontarget < spec.n_nontarget {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::data(format!(
                "insufficient segments: generated {n_nontarget}/{} unique nontarget trials",
                spec.n_nontarget
            )));
        }
        let a = &candidates[rng.gen_range(0..candidates.len())];
        let b = &candidates[rng.gen_range(0..candidates.len())];
        if a.speaker == b.speaker {
            continue;
        }
        // mirror a matched-trial protocol when labels exist
        if a.gender != Gender::Unk && b.gender != Gender::Unk && a.gender != b.gender {
            continue;
        }
        if a.language != crate::data::UNK && b.language != crate::data::UNK && a.language != b.language
        {
            continue;
        }
        let test_idx = b.pool[rng.gen_range(0..b.pool.len())];
        let model_id = format!("m-{}", a.speaker);
        if used.insert((model_id.clone(), test_idx)) {
            trials.push(Trial {
                model_id,
                test_id: set.id(test_idx).to_string(),
                key: Key::Nontarget,
                trial_type: trial_type(a, test_idx),
            });
            n_nontarget += 1;
        }
    }

    TrialList::new(models, trials)
}
