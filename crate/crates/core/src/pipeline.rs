//! Scoring orchestration: applies the preprocessing chain, resolves trial
//! lists against embeddings, dispatches to the configured backend, and
//! computes cohort score lists for adaptive s-norm.
//!
//! Trials are streamed in blocks (default 65536) and scored data-parallel
//! within each block; per-model and per-test-segment statistics are
//! precomputed once, so results are identical for any thread count or
//! block size.

use std::collections::HashMap;

use nalgebra::DVector;

use crate::data::{EmbeddingSet, ScoreEntry, ScoreSet, Trial, TrialList, TrialType};
use crate::error::{Error, Result};
use crate::logit::{cosine_score, CompactFactor};
use crate::mixture::{MixtureEnrollStats, MixtureScorer, MixtureTestStats, PldaMixture};
use crate::par;
use crate::plda::{EnrollMode, EnrollStats, PldaModel, PldaScorer, TestStats};
use crate::preprocess::PreprocessChain;
use crate::score_norm::Cohort;

/// Default number of trials scored per parallel block.
pub const SCORE_BLOCK: usize = 65536;

pub enum ScoringBackend {
    Plda(PldaModel),
    Mixture(PldaMixture),
    Cosine,
    CosineCl(CompactFactor),
}

impl ScoringBackend {
    pub fn kind(&self) -> &'static str {
        match self {
            ScoringBackend::Plda(_) => "plda",
            ScoringBackend::Mixture(_) => "mixture",
            ScoringBackend::Cosine => "cosine",
            ScoringBackend::CosineCl(_) => "cosine-cl",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScoreOptions {
    pub enroll_mode: EnrollMode,
    pub block_size: usize,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        ScoreOptions {
            enroll_mode: EnrollMode::SetLikelihood,
            block_size: SCORE_BLOCK,
        }
    }
}

/// Apply the chain when present.
fn representation(
    chain: Option<&PreprocessChain>,
    emb: &EmbeddingSet,
) -> Result<EmbeddingSet> {
    match chain {
        Some(c) if !c.is_empty() => c.apply(emb),
        _ => Ok(emb.clone()),
    }
}

/// Resolve each model's enrollment segments to row indices of `rep`.
fn resolve_models(rep: &EmbeddingSet, trials: &TrialList) -> Result<Vec<Vec<usize>>> {
    trials
        .models()
        .iter()
        .map(|m| {
            m.segments
                .iter()
                .map(|seg| {
                    rep.position(seg).ok_or_else(|| {
                        Error::data(format!(
                            "enrollment segment '{seg}' of model '{}' not found in embeddings",
                            m.id
                        ))
                    })
                })
                .collect()
        })
        .collect()
}

/// Distinct test segment ids in trial order: the ids, an id -> position
/// index, and the resolved embedding rows.
type ResolvedTests<'a> = (Vec<&'a str>, HashMap<&'a str, usize>, Vec<usize>);

fn resolve_tests<'a>(rep: &EmbeddingSet, trials: &'a [Trial]) -> Result<ResolvedTests<'a>> {
    let mut ids = Vec::new();
    let mut index = HashMap::new();
    let mut rows = Vec::new();
    for t in trials {
        if !index.contains_key(t.test_id.as_str()) {
            let row = rep.position(&t.test_id).ok_or_else(|| {
                Error::data(format!("test segment '{}' not found in embeddings", t.test_id))
            })?;
            index.insert(t.test_id.as_str(), ids.len());
            ids.push(t.test_id.as_str());
            rows.push(row);
        }
    }
    Ok((ids, index, rows))
}

fn mean_of_rows(rep: &EmbeddingSet, rows: &[usize]) -> DVector<f64> {
    let mut mean = DVector::zeros(rep.dim());
    for &i in rows {
        mean += rep.row_vector(i);
    }
    mean / rows.len() as f64
}

/// Trial type to report: the list's own label wins; otherwise derived from
/// the channel labels of the first enrollment segment and the test segment.
fn effective_trial_type(
    t: &Trial,
    rep: &EmbeddingSet,
    model_rows: &[usize],
    test_row: usize,
) -> TrialType {
    if t.trial_type != TrialType::Unknown {
        return t.trial_type;
    }
    TrialType::from_channels(rep.meta(model_rows[0]).channel, rep.meta(test_row).channel)
}

enum ModelSide {
    Plda(Vec<EnrollStats>),
    Mixture(Vec<MixtureEnrollStats>),
    Vector(Vec<DVector<f64>>),
}

enum TestSide {
    Plda(Vec<TestStats>),
    Mixture(Vec<MixtureTestStats>),
    Vector(Vec<DVector<f64>>),
}

/// Backend state with per-model and per-test precomputation done.
struct Prepared<'a> {
    backend: &'a ScoringBackend,
    plda_scorer: Option<PldaScorer>,
    mixture_scorer: Option<MixtureScorer>,
    models: ModelSide,
    tests: TestSide,
}

impl<'a> Prepared<'a> {
    fn score_pair(&self, model_idx: usize, test_idx: usize) -> Result<f64> {
        match (&self.models, &self.tests) {
            (ModelSide::Plda(ms), TestSide::Plda(ts)) => {
                let scorer = self.plda_scorer.as_ref().expect("plda scorer");
                Ok(scorer.llr(&ms[model_idx], &ts[test_idx]))
            }
            (ModelSide::Mixture(ms), TestSide::Mixture(ts)) => {
                let scorer = self.mixture_scorer.as_ref().expect("mixture scorer");
                Ok(scorer.llr(&ms[model_idx], &ts[test_idx]))
            }
            (ModelSide::Vector(ms), TestSide::Vector(ts)) => {
                cosine_score(&ms[model_idx], &ts[test_idx])
            }
            _ => unreachable!("mismatched prepared sides"),
        }
    }
}

fn prepare<'a>(
    backend: &'a ScoringBackend,
    rep: &EmbeddingSet,
    model_rows: &[Vec<usize>],
    test_rows: &[usize],
    opts: &ScoreOptions,
) -> Result<Prepared<'a>> {
    let enroll_rows_for = |rows: &Vec<usize>| -> Vec<Vec<f64>> {
        match opts.enroll_mode {
            EnrollMode::SetLikelihood => rows
                .iter()
                .map(|&i| rep.row(i).to_vec())
                .collect(),
            EnrollMode::Average => vec![mean_of_rows(rep, rows).as_slice().to_vec()],
        }
    };
    let enroll_sizes = |model_rows: &[Vec<usize>]| -> Vec<usize> {
        match opts.enroll_mode {
            EnrollMode::SetLikelihood => {
                let mut sizes: Vec<usize> = model_rows.iter().map(|r| r.len()).collect();
                sizes.push(1); // cohort rows score as single sessions
                sizes.sort_unstable();
                sizes.dedup();
                sizes
            }
            EnrollMode::Average => vec![1],
        }
    };

    match backend {
        ScoringBackend::Plda(model) => {
            if model.dim() != rep.dim() {
                return Err(Error::data(format!(
                    "plda model dim {} does not match representation dim {}",
                    model.dim(),
                    rep.dim()
                )));
            }
            let scorer = PldaScorer::new(model, &enroll_sizes(model_rows))?;
            let models = ModelSide::Plda(
                model_rows
                    .iter()
                    .map(|rows| {
                        let owned = enroll_rows_for(rows);
                        let slices: Vec<&[f64]> = owned.iter().map(|v| v.as_slice()).collect();
                        scorer.enroll_stats(&slices)
                    })
                    .collect::<Result<Vec<_>>>()?,
            );
            let tests = TestSide::Plda(
                par::map_slice(test_rows, |&row| scorer.test_stats(rep.row(row)))
                    .into_iter()
                    .collect::<Result<Vec<_>>>()?,
            );
            Ok(Prepared {
                backend,
                plda_scorer: Some(scorer),
                mixture_scorer: None,
                models,
                tests,
            })
        }
        ScoringBackend::Mixture(mix) => {
            if mix.dim() != rep.dim() {
                return Err(Error::data(format!(
                    "mixture dim {} does not match representation dim {}",
                    mix.dim(),
                    rep.dim()
                )));
            }
            let scorer = MixtureScorer::new(mix, &enroll_sizes(model_rows))?;
            let models = ModelSide::Mixture(
                model_rows
                    .iter()
                    .map(|rows| {
                        let owned = enroll_rows_for(rows);
                        let slices: Vec<&[f64]> = owned.iter().map(|v| v.as_slice()).collect();
                        scorer.enroll_stats(&slices)
                    })
                    .collect::<Result<Vec<_>>>()?,
            );
            let tests = TestSide::Mixture(
                par::map_slice(test_rows, |&row| scorer.test_stats(rep.row(row)))
                    .into_iter()
                    .collect::<Result<Vec<_>>>()?,
            );
            Ok(Prepared {
                backend,
                plda_scorer: None,
                mixture_scorer: Some(scorer),
                models,
                tests,
            })
        }
        ScoringBackend::Cosine => {
            let models = ModelSide::Vector(
                model_rows.iter().map(|rows| mean_of_rows(rep, rows)).collect(),
            );
            let tests =
                TestSide::Vector(test_rows.iter().map(|&row| rep.row_vector(row)).collect());
            Ok(Prepared {
                backend,
                plda_scorer: None,
                mixture_scorer: None,
                models,
                tests,
            })
        }
        ScoringBackend::CosineCl(factor) => {
            if factor.dim() != rep.dim() {
                return Err(Error::data(format!(
                    "compact factor dim {} does not match embeddings dim {}",
                    factor.dim(),
                    rep.dim()
                )));
            }
            let models = ModelSide::Vector(
                model_rows
                    .iter()
                    .map(|rows| factor.project(&mean_of_rows(rep, rows)))
                    .collect::<Result<Vec<_>>>()?,
            );
            let tests = TestSide::Vector(
                test_rows
                    .iter()
                    .map(|&row| factor.project_slice(rep.row(row)))
                    .collect::<Result<Vec<_>>>()?,
            );
            Ok(Prepared {
                backend,
                plda_scorer: None,
                mixture_scorer: None,
                models,
                tests,
            })
        }
    }
}

/// Score every trial of the list. The chain, when given, is applied to all
/// embeddings first; multi-session enrollments are combined per the enroll
/// mode (joint set likelihood for PLDA backends, representation-space mean
/// for cosine backends).
pub fn score_trials(
    backend: &ScoringBackend,
    chain: Option<&PreprocessChain>,
    emb: &EmbeddingSet,
    trials: &TrialList,
    opts: &ScoreOptions,
) -> Result<ScoreSet> {
    if matches!(backend, ScoringBackend::CosineCl(_)) && chain.is_some() {
        return Err(Error::config(
            "cosine-cl scores raw embeddings through the compact factor; preprocessing chains \
             are fitted on projected embeddings instead (fit-chain --pre-factor)",
        ));
    }
    let rep = representation(chain, emb)?;
    let model_rows = resolve_models(&rep, trials)?;
    let (_, test_index, test_rows) = resolve_tests(&rep, trials.trials())?;
    let prepared = prepare(backend, &rep, &model_rows, &test_rows, opts)?;

    let mut entries = Vec::with_capacity(trials.len());
    for block in trials.trials().chunks(opts.block_size.max(1)) {
        let scored: Vec<Result<ScoreEntry>> = par::map_slice(block, |t| {
            let model_idx = trials.model_position(&t.model_id).expect("validated model");
            let test_idx = test_index[t.test_id.as_str()];
            let score = prepared.score_pair(model_idx, test_idx)?;
            Ok(ScoreEntry {
                model_id: t.model_id.clone(),
                test_id: t.test_id.clone(),
                score,
                key: t.key,
                trial_type: effective_trial_type(
                    t,
                    &rep,
                    &model_rows[model_idx],
                    test_rows[test_idx],
                ),
            })
        });
        for s in scored {
            entries.push(s?);
        }
    }
    let chain_note = match chain {
        Some(c) if !c.is_empty() => format!("chain[{}]", c.steps().len()),
        _ => "no-chain".to_string(),
    };
    ScoreSet::new(
        entries,
        format!("{} {} trials={}", backend.kind(), chain_note, trials.len()),
    )
}

/// Cohort score lists for adaptive s-norm: every enrollment model and every
/// distinct test segment scored against each cohort entry (cohort order).
pub struct CohortScores {
    pub per_model: HashMap<String, Vec<f64>>,
    pub per_segment: HashMap<String, Vec<f64>>,
}

pub fn cohort_scores(
    backend: &ScoringBackend,
    chain: Option<&PreprocessChain>,
    emb: &EmbeddingSet,
    trials: &TrialList,
    cohort: &Cohort,
    opts: &ScoreOptions,
) -> Result<CohortScores> {
    if cohort.is_empty() {
        return Err(Error::data("empty cohort"));
    }
    if cohort.dim() != emb.dim() {
        return Err(Error::data(format!(
            "cohort dim {} does not match embeddings dim {}",
            cohort.dim(),
            emb.dim()
        )));
    }
    let rep = representation(chain, emb)?;
    let cohort_rep = representation(chain, &cohort.to_embedding_set()?)?;

    let model_rows = resolve_models(&rep, trials)?;
    let (test_ids, _, test_rows) = resolve_tests(&rep, trials.trials())?;
    let prepared = prepare(backend, &rep, &model_rows, &test_rows, opts)?;

    // cohort rows act once as test segments (against models) and once as
    // single-session enrollments (against test segments)
    let m = cohort_rep.len();
    let (cohort_as_test, cohort_as_enroll) = match &prepared.backend {
        ScoringBackend::Plda(_) => {
            let scorer = prepared.plda_scorer.as_ref().expect("plda scorer");
            let tests: Vec<TestStats> =
                par::map_indexed(m, |j| scorer.test_stats(cohort_rep.row(j)))
                    .into_iter()
                    .collect::<Result<Vec<_>>>()?;
            let enrolls: Vec<EnrollStats> =
                par::map_indexed(m, |j| scorer.enroll_stats(&[cohort_rep.row(j)]))
                    .into_iter()
                    .collect::<Result<Vec<_>>>()?;
            (TestSide::Plda(tests), ModelSide::Plda(enrolls))
        }
        ScoringBackend::Mixture(_) => {
            let scorer = prepared.mixture_scorer.as_ref().expect("mixture scorer");
            let tests: Vec<MixtureTestStats> =
                par::map_indexed(m, |j| scorer.test_stats(cohort_rep.row(j)))
                    .into_iter()
                    .collect::<Result<Vec<_>>>()?;
            let enrolls: Vec<MixtureEnrollStats> =
                par::map_indexed(m, |j| scorer.enroll_stats(&[cohort_rep.row(j)]))
                    .into_iter()
                    .collect::<Result<Vec<_>>>()?;
            (TestSide::Mixture(tests), ModelSide::Mixture(enrolls))
        }
        ScoringBackend::Cosine => {
            let vecs: Vec<DVector<f64>> = (0..m).map(|j| cohort_rep.row_vector(j)).collect();
            (TestSide::Vector(vecs.clone()), ModelSide::Vector(vecs))
        }
        ScoringBackend::CosineCl(factor) => {
            let vecs: Vec<DVector<f64>> = (0..m)
                .map(|j| factor.project_slice(cohort_rep.row(j)))
                .collect::<Result<Vec<_>>>()?;
            (TestSide::Vector(vecs.clone()), ModelSide::Vector(vecs))
        }
    };

    let model_vs_cohort = Prepared {
        backend: prepared.backend,
        plda_scorer: None,
        mixture_scorer: None,
        models: prepared.models,
        tests: cohort_as_test,
    };
    // scorers are shared by reference through small shims below
    let score_model_cohort = |mi: usize, cj: usize| -> Result<f64> {
        match (&model_vs_cohort.models, &model_vs_cohort.tests) {
            (ModelSide::Plda(ms), TestSide::Plda(ts)) => Ok(prepared
                .plda_scorer
                .as_ref()
                .expect("plda scorer")
                .llr(&ms[mi], &ts[cj])),
            (ModelSide::Mixture(ms), TestSide::Mixture(ts)) => Ok(prepared
                .mixture_scorer
                .as_ref()
                .expect("mixture scorer")
                .llr(&ms[mi], &ts[cj])),
            (ModelSide::Vector(ms), TestSide::Vector(ts)) => cosine_score(&ms[mi], &ts[cj]),
            _ => unreachable!(),
        }
    };
    let score_cohort_test = |cj: usize, ti: usize| -> Result<f64> {
        match (&cohort_as_enroll, &prepared.tests) {
            (ModelSide::Plda(cs), TestSide::Plda(ts)) => Ok(prepared
                .plda_scorer
                .as_ref()
                .expect("plda scorer")
                .llr(&cs[cj], &ts[ti])),
            (ModelSide::Mixture(cs), TestSide::Mixture(ts)) => Ok(prepared
                .mixture_scorer
                .as_ref()
                .expect("mixture scorer")
                .llr(&cs[cj], &ts[ti])),
            (ModelSide::Vector(cs), TestSide::Vector(ts)) => cosine_score(&cs[cj], &ts[ti]),
            _ => unreachable!(),
        }
    };

    let per_model_lists: Vec<Result<Vec<f64>>> =
        par::map_indexed(trials.models().len(), |mi| {
            (0..m).map(|cj| score_model_cohort(mi, cj)).collect()
        });
    let mut per_model = HashMap::with_capacity(trials.models().len());
    for (model, list) in trials.models().iter().zip(per_model_lists) {
        per_model.insert(model.id.clone(), list?);
    }

    let per_segment_lists: Vec<Result<Vec<f64>>> = par::map_indexed(test_ids.len(), |ti| {
        (0..m).map(|cj| score_cohort_test(cj, ti)).collect()
    });
    let mut per_segment = HashMap::with_capacity(test_ids.len());
    for (id, list) in test_ids.iter().zip(per_segment_lists) {
        per_segment.insert(id.to_string(), list?);
    }

    Ok(CohortScores {
        per_model,
        per_segment,
    })
}
