//! Embedding pre-processing: nuisance attribute projection, centering, PCA,
//! LDA, length normalization, and the covariance-spectrum diagnostic.
//!
//! Transforms are fitted on training data and collected into an ordered
//! [`PreprocessChain`] that is applied identically at score time. Fitting is
//! deterministic: eigenvalues are sorted and every eigenvector's sign is
//! fixed (largest-magnitude component positive), so serialized chains are
//! byte-reproducible.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingSet, SegmentMeta, UNK};
use crate::error::{Error, Result};
use crate::linalg;
use crate::par;

/// Which metadata field NAP removes variability for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NuisanceLabel {
    Gender,
    Language,
    Dataset,
}

impl NuisanceLabel {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gender" => Some(NuisanceLabel::Gender),
            "language" | "lang" => Some(NuisanceLabel::Language),
            "dataset" | "db" => Some(NuisanceLabel::Dataset),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            NuisanceLabel::Gender => "gender",
            NuisanceLabel::Language => "language",
            NuisanceLabel::Dataset => "dataset",
        }
    }

    fn value<'a>(&self, meta: &'a SegmentMeta) -> &'a str {
        match self {
            NuisanceLabel::Gender => meta.gender.as_str(),
            NuisanceLabel::Language => &meta.language,
            NuisanceLabel::Dataset => &meta.dataset,
        }
    }
}

/// One fitted step of the chain.
#[derive(Debug, Clone, PartialEq)]
pub enum Transform {
    /// x -> x - mean
    Center { mean: DVector<f64> },
    /// x -> (I - U U') x with U a d x k orthonormal nuisance basis.
    ProjectOut { basis: DMatrix<f64> },
    /// x -> A x with A out_dim x in_dim.
    LinearMap { matrix: DMatrix<f64> },
    /// x -> x / ||x||
    LengthNorm { dim: usize },
}

impl Transform {
    pub fn in_dim(&self) -> usize {
        match self {
            Transform::Center { mean } => mean.len(),
            Transform::ProjectOut { basis } => basis.nrows(),
            Transform::LinearMap { matrix } => matrix.ncols(),
            Transform::LengthNorm { dim } => *dim,
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Transform::Center { mean } => mean.len(),
            Transform::ProjectOut { basis } => basis.nrows(),
            Transform::LinearMap { matrix } => matrix.nrows(),
            Transform::LengthNorm { dim } => *dim,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Transform::Center { .. } => "center",
            Transform::ProjectOut { .. } => "project_out",
            Transform::LinearMap { .. } => "linear_map",
            Transform::LengthNorm { .. } => "length_norm",
        }
    }

    /// Validate structural invariants (orthonormal basis, finite params).
    pub fn validate(&self) -> Result<()> {
        match self {
            Transform::Center { mean } => {
                if mean.iter().any(|v| !v.is_finite()) {
                    return Err(Error::data("center transform has non-finite mean"));
                }
            }
            Transform::ProjectOut { basis } => {
                if basis.iter().any(|v| !v.is_finite()) {
                    return Err(Error::data("project_out basis has non-finite values"));
                }
                let gram = basis.transpose() * basis;
                let k = basis.ncols();
                for i in 0..k {
                    for j in 0..k {
                        let want = if i == j { 1.0 } else { 0.0 };
                        if (gram[(i, j)] - want).abs() > 1e-10 {
                            return Err(Error::data(
                                "project_out basis columns are not orthonormal",
                            ));
                        }
                    }
                }
            }
            Transform::LinearMap { matrix } => {
                if matrix.iter().any(|v| !v.is_finite()) {
                    return Err(Error::data("linear_map has non-finite values"));
                }
            }
            Transform::LengthNorm { .. } => {}
        }
        Ok(())
    }

    pub fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.in_dim() {
            return Err(Error::data(format!(
                "{} expects dim {}, got {}",
                self.kind(),
                self.in_dim(),
                x.len()
            )));
        }
        match self {
            Transform::Center { mean } => Ok(x - mean),
            Transform::ProjectOut { basis } => {
                let coeffs = basis.transpose() * x;
                Ok(x - basis * coeffs)
            }
            Transform::LinearMap { matrix } => Ok(matrix * x),
            Transform::LengthNorm { .. } => length_normalize(x),
        }
    }
}

/// x / ||x||, rejecting zero-norm input.
pub fn length_normalize(x: &DVector<f64>) -> Result<DVector<f64>> {
    let norm = x.norm();
    if norm <= 0.0 {
        return Err(Error::numeric("zero-norm embedding"));
    }
    Ok(x / norm)
}

/// Ordered sequence of transforms with matching dimensions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PreprocessChain {
    steps: Vec<Transform>,
}

impl PreprocessChain {
    pub fn new(steps: Vec<Transform>) -> Result<Self> {
        let mut chain = PreprocessChain { steps: Vec::new() };
        for s in steps {
            chain.push(s)?;
        }
        Ok(chain)
    }

    pub fn push(&mut self, step: Transform) -> Result<()> {
        step.validate()?;
        if let Some(last) = self.steps.last() {
            if last.out_dim() != step.in_dim() {
                return Err(Error::data(format!(
                    "chain dimension mismatch: {} outputs {}, {} expects {}",
                    last.kind(),
                    last.out_dim(),
                    step.kind(),
                    step.in_dim()
                )));
            }
        }
        self.steps.push(step);
        Ok(())
    }

    pub fn steps(&self) -> &[Transform] {
        &self.steps
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn in_dim(&self) -> Option<usize> {
        self.steps.first().map(Transform::in_dim)
    }

    pub fn out_dim(&self) -> Option<usize> {
        self.steps.last().map(Transform::out_dim)
    }

    /// Apply every step in order to one vector.
    pub fn apply_vec(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let mut v = x.clone();
        for s in &self.steps {
            v = s.apply(&v)?;
        }
        Ok(v)
    }

    /// Apply the chain to every row, preserving ids and metadata. Rows are
    /// independent, so this runs data-parallel.
    pub fn apply(&self, set: &EmbeddingSet) -> Result<EmbeddingSet> {
        if self.steps.is_empty() {
            return Ok(set.clone());
        }
        if set.dim() != self.in_dim().unwrap() {
            return Err(Error::data(format!(
                "chain expects dim {}, set has dim {}",
                self.in_dim().unwrap(),
                set.dim()
            )));
        }
        let out_dim = self.out_dim().unwrap();
        let rows: Vec<Result<Vec<f64>>> = par::map_indexed(set.len(), |i| {
            self.apply_vec(&set.row_vector(i))
                .map(|v| v.as_slice().to_vec())
        });
        let mut data = Vec::with_capacity(set.len() * out_dim);
        for r in rows {
            data.extend_from_slice(&r?);
        }
        set.with_vectors(out_dim, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let repr = ChainRepr::from(self);
        let text = serde_json::to_string_pretty(&repr)
            .map_err(|e| Error::data(format!("chain serialization: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let repr: ChainRepr = serde_json::from_str(&text)
            .map_err(|e| Error::parse(path, 1, format!("bad chain file: {e}")))?;
        repr.try_into()
    }
}

#[derive(Serialize, Deserialize)]
struct StepRepr {
    kind: String,
    in_dim: usize,
    out_dim: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean: Option<Vec<f64>>,
    /// Row-major k x d basis (each row one nuisance direction).
    #[serde(skip_serializing_if = "Option::is_none")]
    basis: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    k: Option<usize>,
    /// Row-major out_dim x in_dim matrix.
    #[serde(skip_serializing_if = "Option::is_none")]
    matrix: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct ChainRepr {
    steps: Vec<StepRepr>,
}

impl From<&PreprocessChain> for ChainRepr {
    fn from(chain: &PreprocessChain) -> Self {
        let steps = chain
            .steps
            .iter()
            .map(|s| {
                let mut repr = StepRepr {
                    kind: s.kind().to_string(),
                    in_dim: s.in_dim(),
                    out_dim: s.out_dim(),
                    mean: None,
                    basis: None,
                    k: None,
                    matrix: None,
                };
                match s {
                    Transform::Center { mean } => {
                        repr.mean = Some(mean.iter().copied().collect());
                    }
                    Transform::ProjectOut { basis } => {
                        repr.k = Some(basis.ncols());
                        // stored row-major with each basis vector as one row
                        let mut flat = Vec::with_capacity(basis.ncols() * basis.nrows());
                        for j in 0..basis.ncols() {
                            flat.extend(basis.column(j).iter().copied());
                        }
                        repr.basis = Some(flat);
                    }
                    Transform::LinearMap { matrix } => {
                        let mut flat = Vec::with_capacity(matrix.len());
                        for i in 0..matrix.nrows() {
                            flat.extend(matrix.row(i).iter().copied());
                        }
                        repr.matrix = Some(flat);
                    }
                    Transform::LengthNorm { .. } => {}
                }
                repr
            })
            .collect();
        ChainRepr { steps }
    }
}

impl TryFrom<ChainRepr> for PreprocessChain {
    type Error = Error;

    fn try_from(repr: ChainRepr) -> Result<Self> {
        let mut steps = Vec::with_capacity(repr.steps.len());
        for s in repr.steps {
            let step = match s.kind.as_str() {
                "center" => {
                    let mean = s
                        .mean
                        .ok_or_else(|| Error::data("center step missing mean"))?;
                    Transform::Center {
                        mean: DVector::from_vec(mean),
                    }
                }
                "project_out" => {
                    let k = s.k.ok_or_else(|| Error::data("project_out missing k"))?;
                    let flat = s
                        .basis
                        .ok_or_else(|| Error::data("project_out missing basis"))?;
                    if flat.len() != k * s.in_dim {
                        return Err(Error::data("project_out basis has wrong size"));
                    }
                    let mut basis = DMatrix::zeros(s.in_dim, k);
                    for j in 0..k {
                        for i in 0..s.in_dim {
                            basis[(i, j)] = flat[j * s.in_dim + i];
                        }
                    }
                    Transform::ProjectOut { basis }
                }
                "linear_map" => {
                    let flat = s
                        .matrix
                        .ok_or_else(|| Error::data("linear_map missing matrix"))?;
                    if flat.len() != s.out_dim * s.in_dim {
                        return Err(Error::data("linear_map matrix has wrong size"));
                    }
                    Transform::LinearMap {
                        matrix: DMatrix::from_row_iterator(
                            s.out_dim,
                            s.in_dim,
                            flat.iter().copied(),
                        ),
                    }
                }
                "length_norm" => Transform::LengthNorm { dim: s.in_dim },
                other => return Err(Error::data(format!("unknown transform kind '{other}'"))),
            };
            steps.push(step);
        }
        PreprocessChain::new(steps)
    }
}

/// Mean-subtraction transform from the column mean of the set.
pub fn estimate_center(set: &EmbeddingSet) -> Result<Transform> {
    if set.is_empty() {
        return Err(Error::data("cannot estimate center of an empty set"));
    }
    let mean = linalg::row_mean(set.raw_data(), set.len(), set.dim());
    Ok(Transform::Center { mean })
}

/// Group row indices by a label value, skipping unknowns.
fn label_groups<'a>(
    set: &'a EmbeddingSet,
    value: impl Fn(&'a SegmentMeta) -> &'a str,
) -> HashMap<&'a str, Vec<usize>> {
    let mut groups: HashMap<&str, Vec<usize>> = HashMap::new();
    for i in 0..set.len() {
        let v = value(set.meta(i));
        if v != UNK {
            groups.entry(v).or_default().push(i);
        }
    }
    groups
}

/// Between-class covariance of class means with equal weight per class.
fn between_class_covariance(set: &EmbeddingSet, groups: &[Vec<usize>]) -> DMatrix<f64> {
    let d = set.dim();
    let c = groups.len();
    let mut means: Vec<DVector<f64>> = Vec::with_capacity(c);
    for g in groups {
        let mut m = DVector::zeros(d);
        for &i in g {
            for j in 0..d {
                m[j] += set.row(i)[j];
            }
        }
        means.push(m / g.len() as f64);
    }
    let grand = means.iter().fold(DVector::zeros(d), |acc, m| acc + m) / c as f64;
    let mut cov = DMatrix::zeros(d, d);
    for m in &means {
        let centered = m - &grand;
        cov.ger(1.0 / c as f64, &centered, &centered, 1.0);
    }
    cov
}

/// Nuisance attribute projection: remove the top-k directions of the
/// between-label-class covariance (classes weighted equally). Segments with
/// unknown labels are excluded from fitting but still transformed later.
pub fn fit_nap(set: &EmbeddingSet, label: NuisanceLabel, k: usize) -> Result<Transform> {
    let d = set.dim();
    if k == 0 || k >= d {
        return Err(Error::data(format!(
            "nap requires 1 <= k < dim, got k={k}, dim={d}"
        )));
    }
    let groups = label_groups(set, |m| label.value(m));
    if groups.len() < 2 {
        return Err(Error::data(format!(
            "nap on '{}' needs >= 2 label classes, found {}",
            label.as_str(),
            groups.len()
        )));
    }
    let mut ordered: Vec<(&str, Vec<usize>)> = groups.into_iter().collect();
    ordered.sort_by(|a, b| a.0.cmp(b.0));
    if k > ordered.len() - 1 {
        log::warn!(
            "nap on '{}': removing {} directions with only {} classes (rank {})",
            label.as_str(),
            k,
            ordered.len(),
            ordered.len() - 1
        );
    }
    let class_rows: Vec<Vec<usize>> = ordered.into_iter().map(|(_, v)| v).collect();
    let cov = between_class_covariance(set, &class_rows);
    let (_, vectors) = linalg::sym_eigen_desc(&cov);
    let basis = vectors.columns(0, k).clone_owned();
    let t = Transform::ProjectOut { basis };
    t.validate()?;
    Ok(t)
}

/// (I - U U') x.
pub fn apply_projection(t: &Transform, x: &DVector<f64>) -> Result<DVector<f64>> {
    match t {
        Transform::ProjectOut { .. } => t.apply(x),
        _ => Err(Error::data("apply_projection expects a project_out transform")),
    }
}

fn total_covariance_eigen(set: &EmbeddingSet) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = set.len();
    let d = set.dim();
    let mean = linalg::row_mean(set.raw_data(), n, d);
    let cov = linalg::scatter(set.rows(), &mean, d) / n as f64;
    Ok(linalg::sym_eigen_desc(&cov))
}

/// PCA rotation to the leading `out_dim` directions of the total
/// covariance, eigenvalues non-increasing.
pub fn fit_pca(set: &EmbeddingSet, out_dim: usize) -> Result<Transform> {
    let n = set.len();
    let d = set.dim();
    if out_dim == 0 || out_dim > d.min(n.saturating_sub(1)) {
        return Err(Error::data(format!(
            "pca out_dim must be in 1..=min(n-1, d) = {}, got {out_dim}",
            d.min(n.saturating_sub(1))
        )));
    }
    let (values, vectors) = total_covariance_eigen(set)?;
    let rank = linalg::spectral_rank(&values);
    if out_dim > rank {
        return Err(Error::data(format!(
            "pca out_dim {out_dim} exceeds covariance rank {rank}"
        )));
    }
    // rows of the map are the leading eigenvectors
    let matrix = vectors.columns(0, out_dim).transpose();
    Ok(Transform::LinearMap { matrix })
}

/// Remove the `k` leading total-covariance directions (PCA-based nuisance
/// suppression).
pub fn remove_top_pca(set: &EmbeddingSet, k: usize) -> Result<Transform> {
    let d = set.dim();
    if k == 0 || k >= d {
        return Err(Error::data(format!(
            "pca removal requires 1 <= k < dim, got k={k}, dim={d}"
        )));
    }
    let (values, vectors) = total_covariance_eigen(set)?;
    let rank = linalg::spectral_rank(&values);
    if k > rank {
        return Err(Error::data(format!(
            "pca removal of {k} directions exceeds covariance rank {rank}"
        )));
    }
    let basis = vectors.columns(0, k).clone_owned();
    let t = Transform::ProjectOut { basis };
    t.validate()?;
    Ok(t)
}

/// Per-speaker grouping used by LDA, PLDA and the spectra diagnostic.
/// Returns (speaker, row indices) sorted by speaker id; unknown speakers are
/// skipped.
pub fn speaker_groups(set: &EmbeddingSet) -> Vec<(String, Vec<usize>)> {
    let mut groups: HashMap<&str, Vec<usize>> = HashMap::new();
    for i in 0..set.len() {
        let m = set.meta(i);
        if m.has_speaker() {
            groups.entry(&m.speaker).or_default().push(i);
        }
    }
    let mut ordered: Vec<(String, Vec<usize>)> = groups
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    ordered.sort_by(|a, b| a.0.cmp(&b.0));
    ordered
}

struct ClassScatter {
    within: DMatrix<f64>,
    between: DMatrix<f64>,
    n_used: usize,
    n_classes: usize,
}

/// Per-segment-weighted within and between speaker scatters, normalized by
/// the number of retained segments.
fn speaker_scatters(set: &EmbeddingSet, groups: &[(String, Vec<usize>)]) -> ClassScatter {
    let d = set.dim();
    let n: usize = groups.iter().map(|(_, g)| g.len()).sum();
    let mut grand = DVector::zeros(d);
    for (_, g) in groups {
        for &i in g {
            for j in 0..d {
                grand[j] += set.row(i)[j];
            }
        }
    }
    grand /= n as f64;

    let mut within = DMatrix::zeros(d, d);
    let mut between = DMatrix::zeros(d, d);
    for (_, g) in groups {
        let mut m = DVector::zeros(d);
        for &i in g {
            for j in 0..d {
                m[j] += set.row(i)[j];
            }
        }
        m /= g.len() as f64;
        for &i in g {
            let mut c = DVector::zeros(d);
            for j in 0..d {
                c[j] = set.row(i)[j] - m[j];
            }
            within.ger(1.0, &c, &c, 1.0);
        }
        let cb = &m - &grand;
        between.ger(g.len() as f64, &cb, &cb, 1.0);
    }
    within /= n as f64;
    between /= n as f64;
    ClassScatter {
        within,
        between,
        n_used: n,
        n_classes: groups.len(),
    }
}

/// Fisher LDA to `out_dim` dimensions. Rows of the returned map whiten the
/// within-speaker covariance (projected within-class covariance is the
/// identity). Speakers with a single segment are dropped from fitting.
pub fn fit_lda(set: &EmbeddingSet, out_dim: usize) -> Result<Transform> {
    let d = set.dim();
    let mut groups = speaker_groups(set);
    let dropped: Vec<String> = groups
        .iter()
        .filter(|(_, g)| g.len() < 2)
        .map(|(s, _)| s.clone())
        .collect();
    if !dropped.is_empty() {
        log::warn!(
            "lda: dropping {} single-segment speakers from fitting",
            dropped.len()
        );
        groups.retain(|(_, g)| g.len() >= 2);
    }
    if groups.len() <= out_dim {
        return Err(Error::data(format!(
            "lda needs more speakers than output dims: {} speakers, out_dim {out_dim}",
            groups.len()
        )));
    }
    if out_dim == 0 || out_dim > d {
        return Err(Error::data(format!(
            "lda out_dim must be in 1..=dim={d}, got {out_dim}"
        )));
    }
    let scatter = speaker_scatters(set, &groups);
    let mut within = scatter.within;
    if linalg::regularize_covariance(&mut within) {
        log::warn!("lda: within-speaker covariance regularized");
    }
    let chol = linalg::cholesky(&within, "within-speaker covariance")?;

    // whiten the between scatter: T = L^-1 Sb L^-T, then eigendecompose
    let l = chol.l();
    let mut t = scatter.between.clone();
    l.solve_lower_triangular_mut(&mut t);
    let mut t = t.transpose();
    l.solve_lower_triangular_mut(&mut t);
    let t = (&t + t.transpose()) * 0.5;

    let (values, vectors) = linalg::sym_eigen_desc(&t);
    let rank = linalg::spectral_rank(&values).min(scatter.n_classes - 1);
    if out_dim > rank {
        return Err(Error::data(format!(
            "lda out_dim {out_dim} exceeds between-speaker rank {rank}"
        )));
    }

    // rows: v_j' L^-1, computed by back-substitution on L'
    let mut matrix = DMatrix::zeros(out_dim, d);
    for j in 0..out_dim {
        let mut row = vectors.column(j).clone_owned();
        l.transpose().solve_upper_triangular_mut(&mut row);
        linalg::fix_sign(&mut row);
        matrix.set_row(j, &row.transpose());
    }
    Ok(Transform::LinearMap { matrix })
}

/// Spectra of the total covariance together with the within- and
/// across-speaker diagonals in its eigenbasis (eigenvalues ascending). The
/// law of total covariance makes `within + across = total` hold exactly.
#[derive(Debug, Clone)]
pub struct CovarianceSpectra {
    pub total_eigs: Vec<f64>,
    pub within_diag: Vec<f64>,
    pub across_diag: Vec<f64>,
}

pub fn covariance_spectra(set: &EmbeddingSet) -> Result<CovarianceSpectra> {
    let groups = speaker_groups(set);
    let usable = groups.iter().filter(|(_, g)| g.len() >= 2).count();
    if usable < 2 {
        return Err(Error::data(
            "covariance spectra need at least 2 speakers with at least 2 segments",
        ));
    }
    let scatter = speaker_scatters(set, &groups);
    if scatter.n_used < set.dim() {
        log::warn!(
            "covariance spectra from {} labeled segments in dim {}; estimates may be degenerate",
            scatter.n_used,
            set.dim()
        );
    }
    let total = &scatter.within + &scatter.between;
    let (values, vectors) = linalg::sym_eigen_asc(&total);

    let within_rot = vectors.transpose() * &scatter.within * &vectors;
    let across_rot = vectors.transpose() * &scatter.between * &vectors;
    Ok(CovarianceSpectra {
        total_eigs: values,
        within_diag: within_rot.diagonal().iter().copied().collect(),
        across_diag: across_rot.diagonal().iter().copied().collect(),
    })
}
