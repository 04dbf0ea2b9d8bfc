//! Language-dependent PLDA mixture: one component per language, scored as a
//! weighted average of the component LLRs. Each trial's weights are the
//! mean of the enrollment-side and test-side component posteriors,
//! `w_p = (P(R_e|M_p) + P(R_t|M_p)) / 2`, with the set likelihoods
//! normalized against a prior in the log domain.

use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingSet, UNK};
use crate::error::{Error, Result};
use crate::par;
use crate::plda::{self, EnrollStats, PldaModel, PldaScorer, TestStats, TrainOptions};
use crate::preprocess::speaker_groups;

#[derive(Debug, Clone)]
pub struct MixtureComponent {
    pub language: String,
    pub model: PldaModel,
}

/// Mixture of per-language PLDA models with a prior over components.
#[derive(Debug, Clone)]
pub struct PldaMixture {
    components: Vec<MixtureComponent>,
    prior: Vec<f64>,
}

impl PldaMixture {
    pub fn new(components: Vec<MixtureComponent>, prior: Vec<f64>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::data("mixture needs at least one component"));
        }
        if prior.len() != components.len() {
            return Err(Error::data("prior length differs from component count"));
        }
        let sum: f64 = prior.iter().sum();
        if prior.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-12 {
            return Err(Error::data(
                "prior entries must be non-negative and sum to 1",
            ));
        }
        let dim = components[0].model.dim();
        for c in &components {
            if c.model.dim() != dim {
                return Err(Error::data("mixture components have differing dimensions"));
            }
        }
        let mut langs: Vec<&str> = components.iter().map(|c| c.language.as_str()).collect();
        langs.sort_unstable();
        langs.dedup();
        if langs.len() != components.len() {
            return Err(Error::data("mixture languages are not unique"));
        }
        Ok(PldaMixture { components, prior })
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    pub fn dim(&self) -> usize {
        self.components[0].model.dim()
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    /// Per-component posterior of a session set (log-domain normalized).
    pub fn language_weights(&self, sessions: &[DVector<f64>]) -> Result<Vec<f64>> {
        let logliks = self
            .components
            .iter()
            .map(|c| c.model.marginal_loglik(sessions))
            .collect::<Result<Vec<f64>>>()?;
        posterior_weights(&self.prior, &logliks)
    }

    /// Weighted-average LLR over components; weights are the mean of the
    /// enrollment and test posteriors.
    pub fn score(&self, enroll: &[DVector<f64>], test: &DVector<f64>) -> Result<f64> {
        let w_e = self.language_weights(enroll)?;
        let w_t = self.language_weights(std::slice::from_ref(test))?;
        let mut score = 0.0;
        for (i, c) in self.components.iter().enumerate() {
            let w = 0.5 * (w_e[i] + w_t[i]);
            score += w * c.model.llr_score(enroll, test)?;
        }
        Ok(score)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let repr = MixtureRepr {
            components: self
                .components
                .iter()
                .map(|c| ComponentRepr {
                    language: c.language.clone(),
                    model: plda::ModelRepr::from(&c.model),
                })
                .collect(),
            prior: self.prior.clone(),
        };
        let text = serde_json::to_string(&repr)
            .map_err(|e| Error::data(format!("mixture serialization: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let repr: MixtureRepr = serde_json::from_str(&text)
            .map_err(|e| Error::parse(path, 1, format!("bad mixture file: {e}")))?;
        let components = repr
            .components
            .into_iter()
            .map(|c| {
                Ok(MixtureComponent {
                    language: c.language,
                    model: c.model.try_into()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        PldaMixture::new(components, repr.prior)
    }
}

#[derive(Serialize, Deserialize)]
struct ComponentRepr {
    language: String,
    model: plda::ModelRepr,
}

#[derive(Serialize, Deserialize)]
struct MixtureRepr {
    components: Vec<ComponentRepr>,
    prior: Vec<f64>,
}

/// Normalize `log prior + loglik` over components in the log domain.
fn posterior_weights(prior: &[f64], logliks: &[f64]) -> Result<Vec<f64>> {
    let logs: Vec<f64> = prior
        .iter()
        .zip(logliks)
        .map(|(&p, &ll)| if p > 0.0 { p.ln() + ll } else { f64::NEG_INFINITY })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::numeric(
            "all mixture component likelihoods underflowed",
        ));
    }
    let mut weights: Vec<f64> = logs.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= sum;
    }
    Ok(weights)
}

/// Train one PLDA per requested language on that language's segments only,
/// with a uniform prior. Components train in parallel.
pub fn train_mixture(
    set: &EmbeddingSet,
    languages: &[String],
    opts: &TrainOptions,
) -> Result<PldaMixture> {
    if languages.is_empty() {
        return Err(Error::data("mixture training needs at least one language"));
    }
    let mut subsets = Vec::with_capacity(languages.len());
    for lang in languages {
        if lang == UNK {
            return Err(Error::data("cannot train a mixture component on 'unk'"));
        }
        let rows: Vec<usize> = (0..set.len())
            .filter(|&i| set.meta(i).language == *lang)
            .collect();
        if rows.is_empty() {
            return Err(Error::data(format!(
                "language '{lang}' absent from training metadata"
            )));
        }
        let subset = set.select(&rows)?;
        let speakers = speaker_groups(&subset).len();
        if speakers < 2 {
            return Err(Error::data(format!(
                "language '{lang}' has {speakers} speaker(s); mixture training needs >= 2"
            )));
        }
        subsets.push(subset);
    }

    let trained: Vec<Result<PldaModel>> =
        par::map_slice(&subsets, |subset| plda::train_plda(subset, opts));
    let mut components = Vec::with_capacity(languages.len());
    for (lang, model) in languages.iter().zip(trained) {
        components.push(MixtureComponent {
            language: lang.clone(),
            model: model?,
        });
    }
    let prior = vec![1.0 / languages.len() as f64; languages.len()];
    PldaMixture::new(components, prior)
}

/// Cached per-trial scorer over all mixture components: component scorers
/// plus enrollment/test statistics and posteriors computed once per model
/// and per segment.
pub struct MixtureScorer {
    scorers: Vec<PldaScorer>,
    prior: Vec<f64>,
}

/// Per-enrollment-model cache entry.
pub struct MixtureEnrollStats {
    per_component: Vec<EnrollStats>,
    weights: Vec<f64>,
}

/// Per-test-segment cache entry.
pub struct MixtureTestStats {
    per_component: Vec<TestStats>,
    weights: Vec<f64>,
}

impl MixtureScorer {
    pub fn new(mixture: &PldaMixture, enroll_sizes: &[usize]) -> Result<Self> {
        let scorers = mixture
            .components
            .iter()
            .map(|c| PldaScorer::new(&c.model, enroll_sizes))
            .collect::<Result<Vec<_>>>()?;
        Ok(MixtureScorer {
            scorers,
            prior: mixture.prior.clone(),
        })
    }

    pub fn dim(&self) -> usize {
        self.scorers[0].dim()
    }

    pub fn enroll_stats(&self, rows: &[&[f64]]) -> Result<MixtureEnrollStats> {
        let per_component = self
            .scorers
            .iter()
            .map(|s| s.enroll_stats(rows))
            .collect::<Result<Vec<_>>>()?;
        let logliks: Vec<f64> = per_component.iter().map(|s| s.logp).collect();
        let weights = posterior_weights(&self.prior, &logliks)?;
        Ok(MixtureEnrollStats {
            per_component,
            weights,
        })
    }

    pub fn test_stats(&self, row: &[f64]) -> Result<MixtureTestStats> {
        let per_component = self
            .scorers
            .iter()
            .map(|s| s.test_stats(row))
            .collect::<Result<Vec<_>>>()?;
        let logliks: Vec<f64> = per_component.iter().map(|s| s.logp).collect();
        let weights = posterior_weights(&self.prior, &logliks)?;
        Ok(MixtureTestStats {
            per_component,
            weights,
        })
    }

    /// Weighted average of component LLRs; the weights of a
    /// single-component mixture are exactly 1, making this bit-identical to
    /// plain PLDA scoring.
    pub fn llr(&self, enroll: &MixtureEnrollStats, test: &MixtureTestStats) -> f64 {
        let mut score = 0.0;
        for (i, scorer) in self.scorers.iter().enumerate() {
            let w = 0.5 * (enroll.weights[i] + test.weights[i]);
            score += w * scorer.llr(&enroll.per_component[i], &test.per_component[i]);
        }
        score
    }
}
