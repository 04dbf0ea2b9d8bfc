//! Two-covariance PLDA: EM training, set marginal likelihoods, and the
//! verification log-likelihood ratio for 1-3 enrollment sessions.
//!
//! The model is `r = mu + y + eps` with speaker latent `y ~ N(0, B)` and
//! residual `eps ~ N(0, W)`. A set of sessions sharing one speaker is
//! jointly Gaussian with `Cov(r_i, r_j) = B + delta_ij W`, which gives the
//! closed-form set marginal
//!
//! ```text
//! log p(R) = -(n d / 2) ln 2pi - 1/2 [(n-1) ln|W| + ln|W + nB|]
//!            - 1/2 [ sum_i x_i' W^-1 x_i - s' W^-1 s / n + s' (W+nB)^-1 s / n ]
//! ```
//!
//! with `x_i = r_i - mu` and `s = sum x_i`. All quadratic forms go through
//! Cholesky factors; no covariance is ever inverted explicitly.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::data::EmbeddingSet;
use crate::error::{Error, Result};
use crate::linalg;
use crate::preprocess::speaker_groups;

const LN_2PI: f64 = 1.8378770664093453;

/// How multi-session enrollments are combined at score time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EnrollMode {
    /// Joint set likelihood with a shared speaker latent.
    #[default]
    SetLikelihood,
    /// Average the enrollment embeddings into one pseudo-session.
    Average,
}

impl EnrollMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "set" => Some(EnrollMode::SetLikelihood),
            "average" => Some(EnrollMode::Average),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub iterations: usize,
    pub subspace_rank: Option<usize>,
    pub seed: u64,
    /// Relative log-likelihood change below which EM stops early.
    pub tol: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            iterations: 50,
            subspace_rank: None,
            seed: 0,
            tol: 1e-7,
        }
    }
}

/// Trained two-covariance model.
#[derive(Debug, Clone)]
pub struct PldaModel {
    mu: DVector<f64>,
    b: DMatrix<f64>,
    w: DMatrix<f64>,
    pub subspace_rank: Option<usize>,
    pub iterations_run: usize,
    pub final_loglik: f64,
    /// Training log-likelihood after each EM iteration (in-memory only).
    pub loglik_history: Vec<f64>,
}

impl PldaModel {
    pub fn new(mu: DVector<f64>, b: DMatrix<f64>, w: DMatrix<f64>) -> Result<Self> {
        let d = mu.len();
        if b.nrows() != d || b.ncols() != d || w.nrows() != d || w.ncols() != d {
            return Err(Error::data("plda covariance dimensions do not match mean"));
        }
        if mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::data("plda mean has non-finite values"));
        }
        for m in [&b, &w] {
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::data("plda covariance has non-finite values"));
            }
            if (m - m.transpose()).amax() > 1e-10 * m.amax().max(1.0) {
                return Err(Error::data("plda covariance is not symmetric"));
            }
        }
        let (w_eigs, _) = linalg::sym_eigen_asc(&w);
        if w_eigs[0] <= 0.0 {
            return Err(Error::numeric(
                "within-speaker covariance is not positive definite",
            ));
        }
        let (b_eigs, _) = linalg::sym_eigen_asc(&b);
        if b_eigs[0] < -1e-10 * b_eigs[d - 1].abs().max(1.0) {
            return Err(Error::numeric(
                "between-speaker covariance is not positive semi-definite",
            ));
        }
        Ok(PldaModel {
            mu,
            b,
            w,
            subspace_rank: None,
            iterations_run: 0,
            final_loglik: f64::NAN,
            loglik_history: Vec::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn between(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn within(&self) -> &DMatrix<f64> {
        &self.w
    }

    /// Log marginal density of a session set sharing one speaker latent.
    pub fn marginal_loglik(&self, sessions: &[DVector<f64>]) -> Result<f64> {
        let scorer = PldaScorer::new(self, &[sessions.len().max(1)])?;
        scorer.marginal(sessions)
    }

    /// Verification LLR: `log p(enroll u test | same) - log p(enroll) - log p(test)`.
    pub fn llr_score(&self, enroll: &[DVector<f64>], test: &DVector<f64>) -> Result<f64> {
        let scorer = PldaScorer::new(self, &[enroll.len().max(1)])?;
        let m = scorer.enroll_stats_vecs(enroll)?;
        let t = scorer.test_stats(test.as_slice())?;
        Ok(scorer.llr(&m, &t))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let repr = ModelRepr::from(self);
        let text = serde_json::to_string(&repr)
            .map_err(|e| Error::data(format!("model serialization: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let repr: ModelRepr = serde_json::from_str(&text)
            .map_err(|e| Error::parse(path, 1, format!("bad model file: {e}")))?;
        repr.try_into()
    }
}

#[derive(Serialize, Deserialize)]
pub(crate) struct ModelRepr {
    pub dim: usize,
    pub mu: Vec<f64>,
    /// Row-major dim x dim.
    pub b: Vec<f64>,
    pub w: Vec<f64>,
    pub subspace_rank: Option<usize>,
    pub iterations_run: usize,
    /// Absent until the model has been trained.
    pub final_loglik: Option<f64>,
}

impl From<&PldaModel> for ModelRepr {
    fn from(m: &PldaModel) -> Self {
        let flat = |mat: &DMatrix<f64>| {
            let mut v = Vec::with_capacity(mat.len());
            for i in 0..mat.nrows() {
                v.extend(mat.row(i).iter().copied());
            }
            v
        };
        ModelRepr {
            dim: m.dim(),
            mu: m.mu.iter().copied().collect(),
            b: flat(&m.b),
            w: flat(&m.w),
            subspace_rank: m.subspace_rank,
            iterations_run: m.iterations_run,
            final_loglik: if m.final_loglik.is_finite() {
                Some(m.final_loglik)
            } else {
                None
            },
        }
    }
}

impl TryFrom<ModelRepr> for PldaModel {
    type Error = Error;

    fn try_from(r: ModelRepr) -> Result<Self> {
        if r.mu.len() != r.dim || r.b.len() != r.dim * r.dim || r.w.len() != r.dim * r.dim {
            return Err(Error::data("model arrays do not match declared dim"));
        }
        let mut model = PldaModel::new(
            DVector::from_vec(r.mu),
            DMatrix::from_row_iterator(r.dim, r.dim, r.b.iter().copied()),
            DMatrix::from_row_iterator(r.dim, r.dim, r.w.iter().copied()),
        )?;
        model.subspace_rank = r.subspace_rank;
        model.iterations_run = r.iterations_run;
        model.final_loglik = r.final_loglik.unwrap_or(f64::NAN);
        Ok(model)
    }
}

/// Precomputed per-trial statistics for one enrollment model.
#[derive(Debug, Clone)]
pub struct EnrollStats {
    n: usize,
    /// sum_i x_i' W^-1 x_i over enrollment sessions
    a_sum: f64,
    /// L_W^-1 s
    zw: DVector<f64>,
    qw: f64,
    /// L_{n+1}^-1 s (joint factor for this model's enrollment count)
    zj: DVector<f64>,
    qj: f64,
    /// log p(enrollment set)
    pub logp: f64,
}

/// Precomputed per-trial statistics for one test segment.
#[derive(Debug, Clone)]
pub struct TestStats {
    /// L_W^-1 x
    zw: DVector<f64>,
    ww: f64,
    /// (n', L_{n'}^-1 x, quadratic) for every joint size in use
    zj: Vec<(usize, DVector<f64>, f64)>,
    /// log p({x})
    pub logp: f64,
}

impl TestStats {
    fn joint(&self, n: usize) -> &(usize, DVector<f64>, f64) {
        self.zj
            .iter()
            .find(|(m, _, _)| *m == n)
            .expect("joint factor missing; scorer built without this enrollment size")
    }
}

/// Factorized scorer: Cholesky factors of `W` and `W + nB` for every session
/// count in play, so each trial costs two dot products.
pub struct PldaScorer {
    mu: DVector<f64>,
    dim: usize,
    chol_w: Cholesky<f64, Dyn>,
    logdet_w: f64,
    /// n -> (chol(W + nB), logdet)
    factors: HashMap<usize, (Cholesky<f64, Dyn>, f64)>,
    joint_sizes: Vec<usize>,
}

impl PldaScorer {
    /// Build factors for the given enrollment sizes (plus the implied joint
    /// and singleton sizes).
    pub fn new(model: &PldaModel, enroll_sizes: &[usize]) -> Result<Self> {
        let dim = model.dim();
        let chol_w = linalg::cholesky(&model.w, "within-speaker covariance")?;
        let logdet_w = linalg::logdet(&chol_w);
        let mut sizes: Vec<usize> = vec![1];
        for &n in enroll_sizes {
            if n == 0 {
                return Err(Error::data("empty session set"));
            }
            sizes.push(n);
            sizes.push(n + 1);
        }
        sizes.sort_unstable();
        sizes.dedup();
        let mut factors = HashMap::new();
        for &n in &sizes {
            let m = &model.w + &model.b * n as f64;
            let chol = linalg::cholesky(&m, "W + nB")?;
            let logdet = linalg::logdet(&chol);
            factors.insert(n, (chol, logdet));
        }
        let joint_sizes = enroll_sizes
            .iter()
            .map(|&n| n + 1)
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        Ok(PldaScorer {
            mu: model.mu.clone(),
            dim,
            chol_w,
            logdet_w,
            factors,
            joint_sizes,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn centered(&self, row: &[f64]) -> Result<DVector<f64>> {
        if row.len() != self.dim {
            return Err(Error::data(format!(
                "plda expects dim {}, got {}",
                self.dim,
                row.len()
            )));
        }
        let mut x = DVector::from_column_slice(row);
        x -= &self.mu;
        Ok(x)
    }

    fn marginal_from_parts(&self, n: usize, a_sum: f64, qw: f64, qn: f64) -> f64 {
        let (_, logdet_n) = &self.factors[&n];
        -0.5 * (n * self.dim) as f64 * LN_2PI
            - 0.5 * ((n as f64 - 1.0) * self.logdet_w + logdet_n)
            - 0.5 * (a_sum - qw / n as f64 + qn / n as f64)
    }

    /// Log marginal density of a session set (shared latent).
    pub fn marginal(&self, sessions: &[DVector<f64>]) -> Result<f64> {
        if sessions.is_empty() {
            return Err(Error::data("empty session set"));
        }
        let n = sessions.len();
        if !self.factors.contains_key(&n) {
            return Err(Error::data(format!(
                "scorer not built for session count {n}"
            )));
        }
        let mut a_sum = 0.0;
        let mut s = DVector::zeros(self.dim);
        for r in sessions {
            let x = self.centered(r.as_slice())?;
            a_sum += linalg::inv_quad(&self.chol_w, &x);
            s += x;
        }
        let qw = linalg::inv_quad(&self.chol_w, &s);
        let (chol_n, _) = &self.factors[&n];
        let qn = linalg::inv_quad(chol_n, &s);
        Ok(self.marginal_from_parts(n, a_sum, qw, qn))
    }

    /// Precompute enrollment-side statistics from raw rows.
    pub fn enroll_stats(&self, rows: &[&[f64]]) -> Result<EnrollStats> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::data("empty enrollment set"));
        }
        let joint = n + 1;
        if !self.factors.contains_key(&joint) {
            return Err(Error::data(format!(
                "scorer not built for enrollment size {n}"
            )));
        }
        let mut a_sum = 0.0;
        let mut s = DVector::zeros(self.dim);
        for row in rows {
            let x = self.centered(row)?;
            a_sum += linalg::inv_quad(&self.chol_w, &x);
            s += x;
        }
        let zw = linalg::solve_lower(&self.chol_w, &s);
        let qw = zw.norm_squared();
        let (chol_n, _) = &self.factors[&n];
        let qn = linalg::inv_quad(chol_n, &s);
        let logp = self.marginal_from_parts(n, a_sum, qw, qn);

        let (chol_j, _) = &self.factors[&joint];
        let zj = linalg::solve_lower(chol_j, &s);
        let qj = zj.norm_squared();
        Ok(EnrollStats {
            n,
            a_sum,
            zw,
            qw,
            zj,
            qj,
            logp,
        })
    }

    pub fn enroll_stats_vecs(&self, rows: &[DVector<f64>]) -> Result<EnrollStats> {
        let slices: Vec<&[f64]> = rows.iter().map(|v| v.as_slice()).collect();
        self.enroll_stats(&slices)
    }

    /// Precompute test-side statistics from a raw row.
    pub fn test_stats(&self, row: &[f64]) -> Result<TestStats> {
        let x = self.centered(row)?;
        let zw = linalg::solve_lower(&self.chol_w, &x);
        let ww = zw.norm_squared();
        let (chol_1, _) = &self.factors[&1];
        let q1 = linalg::inv_quad(chol_1, &x);
        let logp = self.marginal_from_parts(1, ww, ww, q1);
        let mut zj = Vec::with_capacity(self.joint_sizes.len());
        for &n in &self.joint_sizes {
            let (chol, _) = &self.factors[&n];
            let z = linalg::solve_lower(chol, &x);
            let q = z.norm_squared();
            zj.push((n, z, q));
        }
        Ok(TestStats { zw, ww, zj, logp })
    }

    /// Verification LLR from precomputed statistics.
    pub fn llr(&self, enroll: &EnrollStats, test: &TestStats) -> f64 {
        let n = enroll.n + 1;
        let (_, zj, qj) = test.joint(n);
        let qw_joint = enroll.qw + 2.0 * enroll.zw.dot(&test.zw) + test.ww;
        let qn_joint = enroll.qj + 2.0 * enroll.zj.dot(zj) + qj;
        let a_sum = enroll.a_sum + test.ww;
        let logp_joint = self.marginal_from_parts(n, a_sum, qw_joint, qn_joint);
        logp_joint - enroll.logp - test.logp
    }
}

/// Per-speaker EM sufficient statistics plus the global session moments.
struct EmData {
    /// (session count, session sum) per speaker
    speakers: Vec<(usize, DVector<f64>)>,
    /// sum_i r_i r_i'
    second_moment: DMatrix<f64>,
    /// sum_i r_i
    total_sum: DVector<f64>,
    n_total: usize,
}

impl EmData {
    fn collect(set: &EmbeddingSet, groups: &[(String, Vec<usize>)]) -> EmData {
        let d = set.dim();
        let mut speakers = Vec::with_capacity(groups.len());
        let mut second_moment = DMatrix::zeros(d, d);
        let mut total_sum = DVector::zeros(d);
        let mut n_total = 0usize;
        let mut x = DVector::zeros(d);
        for (_, rows) in groups {
            let mut sum = DVector::zeros(d);
            for &i in rows {
                let row = set.row(i);
                for j in 0..d {
                    x[j] = row[j];
                    sum[j] += row[j];
                }
                second_moment.ger(1.0, &x, &x, 1.0);
            }
            total_sum += &sum;
            n_total += rows.len();
            speakers.push((rows.len(), sum));
        }
        EmData {
            speakers,
            second_moment,
            total_sum,
            n_total,
        }
    }
}

enum EmState {
    Full { b: DMatrix<f64> },
    Subspace { f: DMatrix<f64> },
}

impl EmState {
    fn to_model(&self, mu: &DVector<f64>, w: &DMatrix<f64>) -> Result<PldaModel> {
        let b = match self {
            EmState::Full { b } => (b + b.transpose()) * 0.5,
            EmState::Subspace { f } => {
                let b = f * f.transpose();
                (&b + b.transpose()) * 0.5
            }
        };
        let w = (w + w.transpose()) * 0.5;
        PldaModel::new(mu.clone(), b, w)
    }
}

/// One full-rank EM iteration: posteriors of the speaker latents under
/// `(mu, B, W)`, then a joint M-step over all three parameters.
fn em_step_full(
    data: &EmData,
    mu: &DVector<f64>,
    b: &DMatrix<f64>,
    w: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let d = mu.len();
    // posterior for a speaker with n sessions and centered sum c:
    //   mean  m = B (W + nB)^-1 c
    //   cov     = B - n B (W + nB)^-1 B
    let mut by_count: HashMap<usize, (DMatrix<f64>, DMatrix<f64>)> = HashMap::new();
    for (n, _) in &data.speakers {
        if by_count.contains_key(n) {
            continue;
        }
        let m = w + b * *n as f64;
        let chol = linalg::cholesky(&m, "W + nB")?;
        let p = chol.solve(b); // (W + nB)^-1 B
        let cov = b - (b * &p) * *n as f64;
        by_count.insert(*n, (p, cov));
    }

    let mut r_yy = DMatrix::zeros(d, d); // sum_s E[y y']
    let mut r_ny = DVector::zeros(d); // sum_s n_s m_s
    let mut r_nyy = DMatrix::zeros(d, d); // sum_s n_s E[y y']
    let mut c_ry = DMatrix::zeros(d, d); // sum_s s_s m_s'
    for (n, sum) in &data.speakers {
        let (p, cov) = &by_count[n];
        let c = sum - mu * *n as f64;
        let m = p.transpose() * &c;
        let mut eyy = cov.clone();
        eyy.ger(1.0, &m, &m, 1.0);
        r_yy += &eyy;
        r_ny.axpy(*n as f64, &m, 1.0);
        r_nyy += eyy * *n as f64;
        c_ry.ger(1.0, sum, &m, 1.0);
    }

    let n = data.n_total as f64;
    let mu_new = (&data.total_sum - &r_ny) / n;
    let b_new = &r_yy / data.speakers.len() as f64;

    let mut w_new = data.second_moment.clone();
    w_new.ger(-1.0, &data.total_sum, &mu_new, 1.0);
    w_new.ger(-1.0, &mu_new, &data.total_sum, 1.0);
    w_new.ger(n, &mu_new, &mu_new, 1.0);
    w_new -= &c_ry;
    w_new -= c_ry.transpose();
    w_new.ger(1.0, &mu_new, &r_ny, 1.0);
    w_new.ger(1.0, &r_ny, &mu_new, 1.0);
    w_new += &r_nyy;
    w_new /= n;
    let w_new = (&w_new + w_new.transpose()) * 0.5;
    Ok((mu_new, b_new, w_new))
}

/// One subspace EM iteration for `B = F F'` with latent prior `z ~ N(0, I)`:
/// a joint regression update of `(mu, F)` followed by the residual update
/// of `W`.
fn em_step_subspace(
    data: &EmData,
    mu: &DVector<f64>,
    f: &DMatrix<f64>,
    w: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let d = mu.len();
    let rank = f.ncols();
    let chol_w = linalg::cholesky(w, "within-speaker covariance")?;
    let winv_f = chol_w.solve(f); // W^-1 F
    let g = winv_f.transpose(); // F' W^-1, rank x d
    let gf = &g * f; // F' W^-1 F, rank x rank

    let mut by_count: HashMap<usize, Cholesky<f64, Dyn>> = HashMap::new();
    for (n, _) in &data.speakers {
        if by_count.contains_key(n) {
            continue;
        }
        let p = DMatrix::identity(rank, rank) + &gf * *n as f64;
        by_count.insert(*n, linalg::cholesky(&p, "latent precision")?);
    }

    // regression of sessions on [1, z]
    let mut a_z = DMatrix::zeros(d, rank); // sum_s s_s m_s'
    let mut r_ny = DVector::zeros(rank); // sum_s n_s m_s
    let mut r_nzz = DMatrix::zeros(rank, rank); // sum_s n_s E[z z']
    for (n, sum) in &data.speakers {
        let chol_p = &by_count[n];
        let c = sum - mu * *n as f64;
        let m = chol_p.solve(&(&g * &c));
        let mut ezz = chol_p.inverse();
        ezz.ger(1.0, &m, &m, 1.0);
        a_z.ger(1.0, sum, &m, 1.0);
        r_ny.axpy(*n as f64, &m, 1.0);
        r_nzz += ezz * *n as f64;
    }

    // normal equations over the stacked parameter [mu, F] (d x (1+rank))
    let n = data.n_total as f64;
    let mut a = DMatrix::zeros(d, 1 + rank);
    a.set_column(0, &data.total_sum);
    for j in 0..rank {
        a.set_column(1 + j, &a_z.column(j).clone_owned());
    }
    let mut c = DMatrix::zeros(1 + rank, 1 + rank);
    c[(0, 0)] = n;
    for j in 0..rank {
        c[(0, 1 + j)] = r_ny[j];
        c[(1 + j, 0)] = r_ny[j];
        for i in 0..rank {
            c[(1 + i, 1 + j)] = r_nzz[(i, j)];
        }
    }
    let c = (&c + c.transpose()) * 0.5;
    let chol_c = linalg::cholesky(&c, "regression moment matrix")?;
    // [mu, F] = A C^-1  <=>  C [mu, F]' = A'
    let params = chol_c.solve(&a.transpose()).transpose();

    let mu_new = params.column(0).clone_owned();
    let f_new = params.columns(1, rank).clone_owned();

    let mut w_new = data.second_moment.clone();
    w_new -= &params * a.transpose();
    w_new /= n;
    let w_new = (&w_new + w_new.transpose()) * 0.5;
    Ok((mu_new, f_new, w_new))
}

/// Total log-likelihood of the training set under the model, speakers
/// independent.
fn training_loglik(data: &EmData, groups: &[(String, Vec<usize>)], set: &EmbeddingSet, model: &PldaModel) -> Result<f64> {
    let sizes: Vec<usize> = data.speakers.iter().map(|(n, _)| *n).collect();
    let scorer = PldaScorer::new(model, &sizes)?;
    let mut total = 0.0;
    for (_, rows) in groups {
        let vecs: Vec<DVector<f64>> = rows.iter().map(|&i| set.row_vector(i)).collect();
        total += scorer.marginal(&vecs)?;
    }
    Ok(total)
}

/// EM training of the two-covariance model. Initialization is deterministic
/// (data mean, within/between scatters); a `subspace_rank` below the feature
/// dimension switches to a factor-analysis parameterization `B = F F'` with
/// a seeded random orthonormal init for `F`.
pub fn train_plda(set: &EmbeddingSet, opts: &TrainOptions) -> Result<PldaModel> {
    let d = set.dim();
    let groups = speaker_groups(set);
    if groups.len() < 2 {
        return Err(Error::data(format!(
            "plda training needs >= 2 speakers, found {}",
            groups.len()
        )));
    }
    if let Some(rank) = opts.subspace_rank {
        if rank == 0 || rank > d {
            return Err(Error::data(format!(
                "subspace_rank must be in 1..=dim={d}, got {rank}"
            )));
        }
    }
    if opts.iterations == 0 {
        return Err(Error::data("plda training needs iterations >= 1"));
    }
    let data = EmData::collect(set, &groups);
    if data.n_total <= d {
        log::warn!(
            "plda training with {} segments in dim {d}; covariance estimates may be poor",
            data.n_total
        );
    }

    // deterministic init: data mean, within scatter, scatter of speaker means
    let mut mu = &data.total_sum / data.n_total as f64;
    let mut w = DMatrix::zeros(d, d);
    let mut speaker_means: Vec<(usize, DVector<f64>)> = Vec::with_capacity(groups.len());
    for (n, sum) in &data.speakers {
        speaker_means.push((*n, sum / *n as f64));
    }
    {
        // within scatter = E[r r'] - E over speakers of n_s m_s m_s'
        w += &data.second_moment;
        for (n, m) in &speaker_means {
            w.ger(-(*n as f64), m, m, 1.0);
        }
        w /= data.n_total as f64;
    }
    let mean_of_means = speaker_means
        .iter()
        .fold(DVector::zeros(d), |acc, (_, m)| acc + m)
        / speaker_means.len() as f64;
    let mut b = DMatrix::zeros(d, d);
    for (_, m) in &speaker_means {
        let c = m - &mean_of_means;
        b.ger(1.0 / speaker_means.len() as f64, &c, &c, 1.0);
    }

    let mut w = (&w + w.transpose()) * 0.5;
    if linalg::regularize_covariance(&mut w) {
        log::warn!("plda: within-speaker covariance regularized at init");
        let (eigs, _) = linalg::sym_eigen_asc(&w);
        if eigs[0] <= 0.0 {
            return Err(Error::numeric(
                "within-speaker covariance singular even after regularization",
            ));
        }
    }

    let mut em = match opts.subspace_rank {
        None => EmState::Full { b },
        Some(rank) => {
            // seeded random orthonormal columns, scaled to the average
            // between-class variance so the init is in the data's range
            let mut rng = ChaCha12Rng::seed_from_u64(opts.seed);
            let mut g = DMatrix::zeros(d, rank);
            for j in 0..rank {
                for i in 0..d {
                    g[(i, j)] = rng.sample::<f64, _>(rand_distr::StandardNormal);
                }
            }
            let q = g.qr().q();
            let scale = (b.trace() / d as f64).max(1e-12).sqrt();
            EmState::Subspace { f: q * scale }
        }
    };

    let mut loglik_prev = f64::NEG_INFINITY;
    let mut iterations_run = 0;
    let mut final_loglik = f64::NAN;
    let mut history = Vec::with_capacity(opts.iterations);
    for iter in 0..opts.iterations {
        let (mu_new, state_new, mut w_new) = match &em {
            EmState::Full { b } => {
                let (mu_new, b_new, w_new) = em_step_full(&data, &mu, b, &w)?;
                (mu_new, EmState::Full { b: b_new }, w_new)
            }
            EmState::Subspace { f } => {
                let (mu_new, f_new, w_new) = em_step_subspace(&data, &mu, f, &w)?;
                (mu_new, EmState::Subspace { f: f_new }, w_new)
            }
        };
        if linalg::regularize_covariance(&mut w_new) {
            let (eigs, _) = linalg::sym_eigen_asc(&w_new);
            if eigs[0] <= 0.0 {
                return Err(Error::numeric(
                    "within-speaker covariance collapsed during EM",
                ));
            }
            log::warn!("plda: within-speaker covariance regularized at iteration {iter}");
        }
        mu = mu_new;
        w = w_new;
        em = state_new;

        let model = em.to_model(&mu, &w)?;
        let ll = training_loglik(&data, &groups, set, &model)?;
        iterations_run = iter + 1;
        final_loglik = ll;
        history.push(ll);
        if loglik_prev.is_finite() {
            let denom = loglik_prev.abs().max(1.0);
            if ll + 1e-8 * denom < loglik_prev {
                log::warn!(
                    "plda: log-likelihood decreased at iteration {iter} ({loglik_prev} -> {ll})"
                );
            }
            if ((ll - loglik_prev) / denom).abs() < opts.tol {
                break;
            }
        }
        loglik_prev = ll;
    }

    let mut model = em.to_model(&mu, &w)?;
    model.subspace_rank = opts.subspace_rank;
    model.iterations_run = iterations_run;
    model.final_loglik = final_loglik;
    model.loglik_history = history;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SegmentMeta;
    use proptest::prelude::*;
    use rand::Rng;

    /// Brute-force log density of a stacked joint Gaussian with blocks
    /// `Cov(r_i, r_j) = B + delta_ij W`, built explicitly. Independent of
    /// the factorized path above.
    pub(crate) fn stacked_gaussian_loglik(
        mu: &DVector<f64>,
        b: &DMatrix<f64>,
        w: &DMatrix<f64>,
        sessions: &[DVector<f64>],
    ) -> f64 {
        let d = mu.len();
        let n = sessions.len();
        let nd = n * d;
        let mut cov = DMatrix::zeros(nd, nd);
        let mut x = DVector::zeros(nd);
        for i in 0..n {
            for j in 0..n {
                for a in 0..d {
                    for c in 0..d {
                        let mut v = b[(a, c)];
                        if i == j {
                            v += w[(a, c)];
                        }
                        cov[(i * d + a, j * d + c)] = v;
                    }
                }
            }
            for a in 0..d {
                x[i * d + a] = sessions[i][a] - mu[a];
            }
        }
        let chol = Cholesky::new(cov).expect("joint covariance must be PD");
        let logdet: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        let mut z = x.clone();
        chol.l().solve_lower_triangular_mut(&mut z);
        -0.5 * (nd as f64 * LN_2PI + logdet + z.norm_squared())
    }

    pub(crate) fn stacked_llr(
        mu: &DVector<f64>,
        b: &DMatrix<f64>,
        w: &DMatrix<f64>,
        enroll: &[DVector<f64>],
        test: &DVector<f64>,
    ) -> f64 {
        let mut joint = enroll.to_vec();
        joint.push(test.clone());
        stacked_gaussian_loglik(mu, b, w, &joint)
            - stacked_gaussian_loglik(mu, b, w, enroll)
            - stacked_gaussian_loglik(mu, b, w, std::slice::from_ref(test))
    }

    fn scalar_model(mu: f64, b: f64, w: f64) -> PldaModel {
        PldaModel::new(
            DVector::from_vec(vec![mu]),
            DMatrix::from_row_slice(1, 1, &[b]),
            DMatrix::from_row_slice(1, 1, &[w]),
        )
        .unwrap()
    }

    pub(crate) fn random_spd(rng: &mut impl Rng, d: usize, scale: f64) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                a[(i, j)] = rng.sample::<f64, _>(rand_distr::StandardNormal);
            }
        }
        let mut m = &a * a.transpose() * (scale / d as f64);
        for i in 0..d {
            m[(i, i)] += 0.05 * scale;
        }
        m
    }

    #[test]
    fn marginal_scalar_example() {
        // d=1, mu=0, B=1, W=1, R={0}: N(0; 0, 2) = -0.5 ln(4 pi)
        let model = scalar_model(0.0, 1.0, 1.0);
        let ll = model
            .marginal_loglik(&[DVector::from_vec(vec![0.0])])
            .unwrap();
        let expected = -0.5 * (2.0 * std::f64::consts::PI * 2.0).ln();
        assert!((ll - expected).abs() < 1e-12);
        assert!((ll - (-1.26551)).abs() < 1e-5);
    }

    #[test]
    fn marginal_decouples_when_b_is_zero() {
        let model = scalar_model(0.0, 0.0, 1.0);
        let x1 = 0.7;
        let x2 = -1.3;
        let ll = model
            .marginal_loglik(&[DVector::from_vec(vec![x1]), DVector::from_vec(vec![x2])])
            .unwrap();
        let n = |x: f64| -0.5 * (LN_2PI + x * x);
        assert!((ll - (n(x1) + n(x2))).abs() < 1e-12);
    }

    #[test]
    fn marginal_matches_stacked_gaussian() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let d = 3;
        for _ in 0..20 {
            let b = random_spd(&mut rng, d, 1.0);
            let w = random_spd(&mut rng, d, 1.0);
            let mu = DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0));
            let model = PldaModel::new(mu.clone(), b.clone(), w.clone()).unwrap();
            let sessions: Vec<DVector<f64>> = (0..3)
                .map(|_| DVector::from_fn(d, |_, _| rng.gen_range(-2.0..2.0)))
                .collect();
            let fast = model.marginal_loglik(&sessions).unwrap();
            let slow = stacked_gaussian_loglik(&mu, &b, &w, &sessions);
            assert!((fast - slow).abs() < 1e-8, "fast {fast} vs slow {slow}");
        }
    }

    #[test]
    fn singleton_marginal_is_gaussian_density() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let d = 4;
        let b = random_spd(&mut rng, d, 2.0);
        let w = random_spd(&mut rng, d, 1.0);
        let mu = DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0));
        let model = PldaModel::new(mu.clone(), b.clone(), w.clone()).unwrap();
        let r = DVector::from_fn(d, |_, _| rng.gen_range(-2.0..2.0));
        let fast = model.marginal_loglik(std::slice::from_ref(&r)).unwrap();

        let total = &b + &w;
        let chol = Cholesky::new(total).unwrap();
        let logdet: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        let mut z = &r - &mu;
        chol.l().solve_lower_triangular_mut(&mut z);
        let direct = -0.5 * (d as f64 * LN_2PI + logdet + z.norm_squared());
        assert!((fast - direct).abs() < 1e-10);
    }

    #[test]
    fn llr_scalar_example() {
        // same-speaker cov [[2,1],[1,2]] vs product of two N(0,2)
        let model = scalar_model(0.0, 1.0, 1.0);
        let llr = model
            .llr_score(&[DVector::from_vec(vec![0.0])], &DVector::from_vec(vec![0.0]))
            .unwrap();
        let expected = (2.0 / 3.0f64.sqrt()).ln();
        assert!((llr - expected).abs() < 1e-12, "llr {llr} vs {expected}");
        assert!((llr - 0.14384).abs() < 1e-5);
    }

    #[test]
    fn llr_is_zero_without_speaker_variability() {
        let model = scalar_model(0.3, 0.0, 1.7);
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..10 {
            let e: Vec<DVector<f64>> = (0..rng.gen_range(1..=3))
                .map(|_| DVector::from_vec(vec![rng.gen_range(-3.0..3.0)]))
                .collect();
            let t = DVector::from_vec(vec![rng.gen_range(-3.0..3.0)]);
            let llr = model.llr_score(&e, &t).unwrap();
            assert!(llr.abs() < 1e-12, "llr {llr} should vanish for B=0");
        }
    }

    #[test]
    fn llr_single_enrollment_is_symmetric() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let d = 3;
        let b = random_spd(&mut rng, d, 1.5);
        let w = random_spd(&mut rng, d, 0.8);
        let mu = DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0));
        let model = PldaModel::new(mu, b, w).unwrap();
        for _ in 0..10 {
            let a = DVector::from_fn(d, |_, _| rng.gen_range(-2.0..2.0));
            let c = DVector::from_fn(d, |_, _| rng.gen_range(-2.0..2.0));
            let ab = model.llr_score(std::slice::from_ref(&a), &c).unwrap();
            let ba = model.llr_score(std::slice::from_ref(&c), &a).unwrap();
            assert!((ab - ba).abs() < 1e-10);
        }
    }

    #[test]
    fn llr_translation_equivariance() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let d = 3;
        let b = random_spd(&mut rng, d, 1.0);
        let w = random_spd(&mut rng, d, 1.0);
        let mu = DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0));
        let shift = DVector::from_fn(d, |_, _| rng.gen_range(-5.0..5.0));
        let m1 = PldaModel::new(mu.clone(), b.clone(), w.clone()).unwrap();
        let m2 = PldaModel::new(&mu + &shift, b, w).unwrap();
        let e = DVector::from_fn(d, |_, _| rng.gen_range(-2.0..2.0));
        let t = DVector::from_fn(d, |_, _| rng.gen_range(-2.0..2.0));
        let s1 = m1.llr_score(std::slice::from_ref(&e), &t).unwrap();
        let s2 = m2.llr_score(&[&e + &shift], &(&t + &shift)).unwrap();
        assert!((s1 - s2).abs() < 1e-10);
    }

    /// Sample two-covariance data with `y = y_factor * z`, so singular
    /// between-speaker covariances (`B = y_factor y_factor'`) work too.
    fn synth_speakers(
        rng: &mut ChaCha12Rng,
        mu: &DVector<f64>,
        y_factor: &DMatrix<f64>,
        w: &DMatrix<f64>,
        speakers: usize,
        sessions: usize,
    ) -> EmbeddingSet {
        let d = mu.len();
        let k = y_factor.ncols();
        let lw = Cholesky::new(w.clone()).unwrap();
        let mut ids = Vec::new();
        let mut rows = Vec::new();
        let mut metas = Vec::new();
        for s in 0..speakers {
            let z = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
            let y = y_factor * z;
            for k in 0..sessions {
                let z = DVector::from_fn(d, |_, _| {
                    rng.sample::<f64, _>(rand_distr::StandardNormal)
                });
                let r = mu + &y + lw.l() * z;
                ids.push(format!("s{s}-{k}"));
                rows.push(r.iter().copied().collect::<Vec<f64>>());
                metas.push(SegmentMeta {
                    speaker: format!("spk{s}"),
                    ..SegmentMeta::default()
                });
            }
        }
        let dim = d;
        let data = rows.into_iter().flatten().collect();
        EmbeddingSet::new(ids, dim, data, metas).unwrap()
    }

    #[test]
    fn em_recovers_generating_covariances() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let d = 8;
        // concentrated spectrum so a few hundred speakers pin B down
        let mut b = DMatrix::zeros(d, d);
        for i in 0..d {
            b[(i, i)] = 4.0 * 0.6f64.powi(i as i32);
        }
        let w = DMatrix::identity(d, d);
        let mu = DVector::from_element(d, 0.5);
        let lb = Cholesky::new(b.clone()).unwrap().l().clone_owned();
        let set = synth_speakers(&mut rng, &mu, &lb, &w, 500, 8);
        let model = train_plda(&set, &TrainOptions::default()).unwrap();
        let rel_b = (model.between() - &b).norm() / b.norm();
        let rel_w = (model.within() - &w).norm() / w.norm();
        assert!(rel_b < 0.2, "B relative error {rel_b}");
        assert!(rel_w < 0.1, "W relative error {rel_w}");
    }

    #[test]
    fn em_loglik_is_monotone() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let d = 5;
        let b = random_spd(&mut rng, d, 2.0);
        let w = random_spd(&mut rng, d, 1.0);
        let mu = DVector::zeros(d);
        let lb = Cholesky::new(b.clone()).unwrap().l().clone_owned();
        let set = synth_speakers(&mut rng, &mu, &lb, &w, 60, 4);

        // run EM step by step and track the likelihood by retraining with
        // increasing iteration caps (deterministic, so prefixes agree)
        let mut last = f64::NEG_INFINITY;
        for iters in 1..=8 {
            let model = train_plda(
                &set,
                &TrainOptions {
                    iterations: iters,
                    tol: 0.0,
                    ..TrainOptions::default()
                },
            )
            .unwrap();
            let ll = model.final_loglik;
            assert!(
                ll >= last - 1e-8 * last.abs().max(1.0),
                "log-likelihood decreased: {last} -> {ll}"
            );
            last = ll;
        }
    }

    #[test]
    fn duplicated_rows_collapse_w_and_error() {
        let mut rows = Vec::new();
        let mut metas = Vec::new();
        let mut ids = Vec::new();
        for s in 0..5 {
            let v = vec![s as f64, -(s as f64), 1.0];
            for k in 0..3 {
                ids.push(format!("s{s}-{k}"));
                rows.push(v.clone());
                metas.push(SegmentMeta {
                    speaker: format!("spk{s}"),
                    ..SegmentMeta::default()
                });
            }
        }
        let set = EmbeddingSet::new(ids, 3, rows.into_iter().flatten().collect(), metas).unwrap();
        let err = train_plda(&set, &TrainOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "got {err}");
    }

    #[test]
    fn subspace_training_caps_between_rank() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let d = 6;
        let rank = 2;
        // ground truth B of rank 2
        let mut f = DMatrix::zeros(d, rank);
        for j in 0..rank {
            for i in 0..d {
                f[(i, j)] = rng.sample::<f64, _>(rand_distr::StandardNormal);
            }
        }
        let b = &f * f.transpose();
        let w = DMatrix::identity(d, d);
        let mu = DVector::zeros(d);
        let set = synth_speakers(&mut rng, &mu, &f, &w, 300, 6);
        let model = train_plda(
            &set,
            &TrainOptions {
                subspace_rank: Some(rank),
                iterations: 80,
                ..TrainOptions::default()
            },
        )
        .unwrap();
        let (eigs, _) = linalg::sym_eigen_desc(model.between());
        assert!(
            linalg::spectral_rank(&eigs) <= rank,
            "B rank exceeds cap: {eigs:?}"
        );
        let rel_b = (model.between() - &b).norm() / b.norm();
        assert!(rel_b < 0.25, "B relative error {rel_b}");
    }

    #[test]
    fn single_speaker_errors() {
        let set = EmbeddingSet::new(
            vec!["a".into(), "b".into()],
            1,
            vec![1.0, 2.0],
            vec![
                SegmentMeta {
                    speaker: "spk0".into(),
                    ..SegmentMeta::default()
                };
                2
            ],
        )
        .unwrap();
        assert!(train_plda(&set, &TrainOptions::default()).is_err());
    }

    #[test]
    fn mean_target_llr_exceeds_mean_nontarget_llr() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let d = 4;
        let b = random_spd(&mut rng, d, 1.0);
        let w = random_spd(&mut rng, d, 1.0);
        let mu = DVector::zeros(d);
        let model = PldaModel::new(mu.clone(), b.clone(), w.clone()).unwrap();
        let lb = Cholesky::new(b).unwrap();
        let lw = Cholesky::new(w).unwrap();
        let draw = |rng: &mut ChaCha12Rng, l: &Cholesky<f64, Dyn>| -> DVector<f64> {
            l.l() * DVector::from_fn(d, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal))
        };
        let mut target_sum = 0.0;
        let mut nontarget_sum = 0.0;
        let n = 400;
        for _ in 0..n {
            let y = draw(&mut rng, &lb);
            let e = &y + draw(&mut rng, &lw);
            let t_same = &y + draw(&mut rng, &lw);
            let y2 = draw(&mut rng, &lb);
            let t_diff = &y2 + draw(&mut rng, &lw);
            target_sum += model.llr_score(std::slice::from_ref(&e), &t_same).unwrap();
            nontarget_sum += model.llr_score(&[e], &t_diff).unwrap();
        }
        assert!(
            target_sum / n as f64 > nontarget_sum / n as f64,
            "mean target LLR {} should exceed mean nontarget LLR {}",
            target_sum / n as f64,
            nontarget_sum / n as f64
        );
    }

    #[test]
    fn model_round_trips_through_json() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let d = 3;
        let model = PldaModel::new(
            DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0)),
            random_spd(&mut rng, d, 1.0),
            random_spd(&mut rng, d, 1.0),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        model.save(&path).unwrap();
        let loaded = PldaModel::load(&path).unwrap();
        assert_eq!(loaded.mu(), model.mu());
        assert_eq!(loaded.between(), model.between());
        assert_eq!(loaded.within(), model.within());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn llr_matches_brute_force(
            seed in 0u64..10_000,
            n_enroll in 1usize..=3,
            d in 1usize..=4,
        ) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let b = random_spd(&mut rng, d, 1.0);
            let w = random_spd(&mut rng, d, 1.0);
            let mu = DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0));
            let model = PldaModel::new(mu.clone(), b.clone(), w.clone()).unwrap();
            let enroll: Vec<DVector<f64>> = (0..n_enroll)
                .map(|_| DVector::from_fn(d, |_, _| rng.gen_range(-2.0..2.0)))
                .collect();
            let test = DVector::from_fn(d, |_, _| rng.gen_range(-2.0..2.0));
            let fast = model.llr_score(&enroll, &test).unwrap();
            let slow = stacked_llr(&mu, &b, &w, &enroll, &test);
            prop_assert!((fast - slow).abs() < 1e-8, "fast {} vs slow {}", fast, slow);
        }
    }
}
