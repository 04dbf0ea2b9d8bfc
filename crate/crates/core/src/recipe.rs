//! Textual recipes for preprocessing chains.
//!
//! A recipe is a comma-separated list of step tokens fitted in order on the
//! training set, each step seeing the data as transformed by the previous
//! ones:
//!
//! - `nap:<gender|language|dataset>[:k]` - nuisance attribute projection
//!   (default k = number of label classes - 1)
//! - `pca-remove[:k]` - drop the k leading total-covariance directions
//!   (default 2)
//! - `pca:<out_dim>` - PCA rotation to `out_dim` dimensions
//! - `center` - subtract the training mean
//! - `lda[:out_dim]` - Fisher LDA (default 100)
//! - `ln` - length normalization

use crate::data::EmbeddingSet;
use crate::error::{Error, Result};
use crate::preprocess::{
    estimate_center, fit_lda, fit_nap, fit_pca, remove_top_pca, NuisanceLabel, PreprocessChain,
    Transform,
};

pub const DEFAULT_RECIPE: &str = "nap:gender:1,center,lda:100,ln";
pub const DEFAULT_LDA_DIM: usize = 100;
pub const DEFAULT_PCA_REMOVE: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RecipeStep {
    Nap { label: NuisanceLabel, k: Option<usize> },
    PcaRemove { k: usize },
    Pca { out_dim: usize },
    Center,
    Lda { out_dim: usize },
    LengthNorm,
}

impl RecipeStep {
    pub fn describe(&self) -> String {
        match self {
            RecipeStep::Nap { label, k } => match k {
                Some(k) => format!("nap:{}:{k}", label.as_str()),
                None => format!("nap:{}", label.as_str()),
            },
            RecipeStep::PcaRemove { k } => format!("pca-remove:{k}"),
            RecipeStep::Pca { out_dim } => format!("pca:{out_dim}"),
            RecipeStep::Center => "center".to_string(),
            RecipeStep::Lda { out_dim } => format!("lda:{out_dim}"),
            RecipeStep::LengthNorm => "ln".to_string(),
        }
    }
}

fn parse_count(token: &str, what: &str, part: &str) -> Result<usize> {
    part.parse::<usize>()
        .map_err(|_| Error::config(format!("bad {what} '{part}' in recipe token '{token}'")))
}

/// Parse a recipe string into steps.
pub fn parse_recipe(recipe: &str) -> Result<Vec<RecipeStep>> {
    let mut steps = Vec::new();
    for token in recipe.split(',') {
        let token = token.trim();
        if token.is_empty() {
            return Err(Error::config("empty recipe token"));
        }
        let parts: Vec<&str> = token.split(':').collect();
        let step = match parts[0] {
            "nap" => {
                if parts.len() < 2 || parts.len() > 3 {
                    return Err(Error::config(format!(
                        "recipe token '{token}': expected nap:<label>[:k]"
                    )));
                }
                let label = NuisanceLabel::parse(parts[1]).ok_or_else(|| {
                    Error::config(format!(
                        "recipe token '{token}': unknown nuisance label '{}'",
                        parts[1]
                    ))
                })?;
                let k = match parts.get(2) {
                    Some(p) => Some(parse_count(token, "direction count", p)?),
                    None => None,
                };
                RecipeStep::Nap { label, k }
            }
            "pca-remove" => {
                if parts.len() > 2 {
                    return Err(Error::config(format!(
                        "recipe token '{token}': expected pca-remove[:k]"
                    )));
                }
                let k = match parts.get(1) {
                    Some(p) => parse_count(token, "direction count", p)?,
                    None => DEFAULT_PCA_REMOVE,
                };
                RecipeStep::PcaRemove { k }
            }
            "pca" => {
                if parts.len() != 2 {
                    return Err(Error::config(format!(
                        "recipe token '{token}': expected pca:<out_dim>"
                    )));
                }
                RecipeStep::Pca {
                    out_dim: parse_count(token, "output dim", parts[1])?,
                }
            }
            "center" => {
                if parts.len() != 1 {
                    return Err(Error::config(format!("recipe token '{token}': expected center")));
                }
                RecipeStep::Center
            }
            "lda" => {
                if parts.len() > 2 {
                    return Err(Error::config(format!(
                        "recipe token '{token}': expected lda[:out_dim]"
                    )));
                }
                let out_dim = match parts.get(1) {
                    Some(p) => parse_count(token, "output dim", p)?,
                    None => DEFAULT_LDA_DIM,
                };
                RecipeStep::Lda { out_dim }
            }
            "ln" => {
                if parts.len() != 1 {
                    return Err(Error::config(format!("recipe token '{token}': expected ln")));
                }
                RecipeStep::LengthNorm
            }
            other => {
                return Err(Error::config(format!("unknown recipe step '{other}'")))
            }
        };
        steps.push(step);
    }
    if steps.is_empty() {
        return Err(Error::config("empty recipe"));
    }
    Ok(steps)
}

fn count_label_classes(set: &EmbeddingSet, label: NuisanceLabel) -> usize {
    let mut seen = std::collections::HashSet::new();
    for m in set.metas() {
        let v = match label {
            NuisanceLabel::Gender => m.gender.as_str(),
            NuisanceLabel::Language => m.language.as_str(),
            NuisanceLabel::Dataset => m.dataset.as_str(),
        };
        if v != crate::data::UNK {
            seen.insert(v.to_string());
        }
    }
    seen.len()
}

/// Fit every step of the recipe in order on the training set. Returns the
/// chain together with a per-step dimension summary for display.
pub fn fit_chain(
    set: &EmbeddingSet,
    steps: &[RecipeStep],
) -> Result<(PreprocessChain, Vec<String>)> {
    let mut chain = PreprocessChain::default();
    let mut current = set.clone();
    let mut summary = Vec::with_capacity(steps.len());
    for step in steps {
        let transform = match step {
            RecipeStep::Nap { label, k } => {
                let k = match k {
                    Some(k) => *k,
                    None => {
                        let classes = count_label_classes(&current, *label);
                        if classes < 2 {
                            return Err(Error::data(format!(
                                "nap on '{}' needs >= 2 label classes, found {classes}",
                                label.as_str()
                            )));
                        }
                        classes - 1
                    }
                };
                fit_nap(&current, *label, k)?
            }
            RecipeStep::PcaRemove { k } => remove_top_pca(&current, *k)?,
            RecipeStep::Pca { out_dim } => fit_pca(&current, *out_dim)?,
            RecipeStep::Center => estimate_center(&current)?,
            RecipeStep::Lda { out_dim } => fit_lda(&current, *out_dim)?,
            RecipeStep::LengthNorm => Transform::LengthNorm { dim: current.dim() },
        };
        summary.push(format!(
            "{} ({} -> {})",
            step.describe(),
            transform.in_dim(),
            transform.out_dim()
        ));
        let single = PreprocessChain::new(vec![transform.clone()])?;
        current = single.apply(&current)?;
        chain.push(transform)?;
    }
    Ok((chain, summary))
}
