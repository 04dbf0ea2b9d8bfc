//! Logit-space (cl-embedding) scoring in compact form.
//!
//! Logits are `l = K r` for a classifier head `K` of shape `N_s x d`.
//! Since the cosine between two logit vectors only depends on `K'K`, a
//! factor `M` with `M'M = K'K` lets the same scores be computed from the
//! d-dimensional projections `M r`. The factor is the upper-triangular
//! Cholesky factor when `K'K` is positive definite, and a symmetric
//! eigendecomposition square root when it is singular (for example when
//! `N_s < d`). Fusion of two heads over the same speaker set reduces to the
//! same trick on the concatenated head `[K1, K2]` with weighted, stacked
//! embeddings.

use std::io::{BufReader, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingSet, ScoreEntry, ScoreSet, TrialList};
use crate::error::{Error, Result};
use crate::par;

/// Classifier-head weights, one row per training speaker.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    k: DMatrix<f64>,
    pub unit_rows: bool,
}

impl ClassifierHead {
    pub fn new(k: DMatrix<f64>, unit_rows: bool) -> Result<Self> {
        if k.is_empty() {
            return Err(Error::data("classifier head is empty"));
        }
        if k.iter().any(|v| !v.is_finite()) {
            return Err(Error::data("classifier head has non-finite values"));
        }
        if unit_rows {
            for i in 0..k.nrows() {
                let norm = k.row(i).norm();
                if (norm - 1.0).abs() > 1e-6 {
                    return Err(Error::data(format!(
                        "head row {i} has norm {norm}, expected unit rows"
                    )));
                }
            }
        }
        Ok(ClassifierHead { k, unit_rows })
    }

    pub fn n_speakers(&self) -> usize {
        self.k.nrows()
    }

    pub fn dim(&self) -> usize {
        self.k.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.k
    }

    /// l = K r.
    pub fn logits(&self, r: &DVector<f64>) -> Result<DVector<f64>> {
        if r.len() != self.dim() {
            return Err(Error::data(format!(
                "head expects dim {}, got {}",
                self.dim(),
                r.len()
            )));
        }
        Ok(&self.k * r)
    }

    /// Load from `<stem>.f32` (row-major little-endian float32) plus the
    /// `<stem>.json` sidecar `{n_speakers, dim, unit_rows}`.
    pub fn load(path: &Path) -> Result<Self> {
        let stem = head_stem(path);
        let sidecar: HeadSidecar =
            serde_json::from_reader(BufReader::new(std::fs::File::open(stem.with_extension("json"))?))
                .map_err(|e| {
                    Error::parse(&stem.with_extension("json"), 1, format!("malformed header: {e}"))
                })?;
        let mut bytes = Vec::new();
        std::fs::File::open(stem.with_extension("f32"))?.read_to_end(&mut bytes)?;
        let expected = sidecar.n_speakers * sidecar.dim * 4;
        if bytes.len() != expected {
            return Err(Error::data(format!(
                "size mismatch: head declares {}x{} float32 ({} bytes), file has {}",
                sidecar.n_speakers,
                sidecar.dim,
                expected,
                bytes.len()
            )));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let k = DMatrix::from_row_iterator(sidecar.n_speakers, sidecar.dim, values);
        ClassifierHead::new(k, sidecar.unit_rows)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let stem = head_stem(path);
        let mut data = std::io::BufWriter::new(std::fs::File::create(stem.with_extension("f32"))?);
        for i in 0..self.k.nrows() {
            for j in 0..self.k.ncols() {
                data.write_all(&(self.k[(i, j)] as f32).to_le_bytes())?;
            }
        }
        data.flush()?;
        let sidecar = HeadSidecar {
            n_speakers: self.n_speakers(),
            dim: self.dim(),
            unit_rows: self.unit_rows,
        };
        std::fs::write(
            stem.with_extension("json"),
            serde_json::to_string_pretty(&sidecar).expect("sidecar serialization"),
        )?;
        Ok(())
    }
}

fn head_stem(path: &Path) -> std::path::PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some("f32") | Some("json") => path.with_extension(""),
        _ => path.to_path_buf(),
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeadSidecar {
    n_speakers: usize,
    dim: usize,
    unit_rows: bool,
}

/// Which factorization produced a compact factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorizationKind {
    Cholesky,
    EigenSqrt,
}

/// `d x d` factor with `M'M = K'K`.
#[derive(Debug, Clone)]
pub struct CompactFactor {
    m: DMatrix<f64>,
    pub factorization: FactorizationKind,
}

impl CompactFactor {
    pub fn dim(&self) -> usize {
        self.m.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    /// M r.
    pub fn project(&self, r: &DVector<f64>) -> Result<DVector<f64>> {
        if r.len() != self.dim() {
            return Err(Error::data(format!(
                "compact factor expects dim {}, got {}",
                self.dim(),
                r.len()
            )));
        }
        Ok(&self.m * r)
    }

    pub fn project_slice(&self, r: &[f64]) -> Result<DVector<f64>> {
        self.project(&DVector::from_column_slice(r))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut matrix = Vec::with_capacity(self.m.len());
        for i in 0..self.m.nrows() {
            matrix.extend(self.m.row(i).iter().copied());
        }
        let repr = FactorRepr {
            dim: self.dim(),
            matrix,
            factorization: self.factorization,
        };
        let text = serde_json::to_string(&repr)
            .map_err(|e| Error::data(format!("factor serialization: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let repr: FactorRepr = serde_json::from_str(&text)
            .map_err(|e| Error::parse(path, 1, format!("bad factor file: {e}")))?;
        if repr.matrix.len() != repr.dim * repr.dim {
            return Err(Error::data("factor matrix does not match declared dim"));
        }
        Ok(CompactFactor {
            m: DMatrix::from_row_iterator(repr.dim, repr.dim, repr.matrix.iter().copied()),
            factorization: repr.factorization,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct FactorRepr {
    dim: usize,
    /// Row-major dim x dim.
    matrix: Vec<f64>,
    factorization: FactorizationKind,
}

/// Factor the head's Gram matrix: upper-triangular Cholesky when `K'K` is
/// positive definite, symmetric eigen square root otherwise (eigenvalues
/// below `1e-12 * max` clamp to zero).
pub fn compact_factor(head: &ClassifierHead) -> Result<CompactFactor> {
    let gram = head.k.transpose() * &head.k;
    let gram = (&gram + gram.transpose()) * 0.5;
    if let Some(chol) = nalgebra::Cholesky::new(gram.clone()) {
        // l() is lower-triangular, so its transpose is the upper factor
        // with M'M = L L' = K'K
        return Ok(CompactFactor {
            m: chol.l().transpose(),
            factorization: FactorizationKind::Cholesky,
        });
    }
    let (values, vectors) = crate::linalg::sym_eigen_desc(&gram);
    let max = values.first().copied().unwrap_or(0.0).max(0.0);
    if max <= 0.0 {
        return Err(Error::numeric("head Gram matrix is zero"));
    }
    let d = gram.nrows();
    let mut m = DMatrix::zeros(d, d);
    for j in 0..d {
        let lambda = if values[j] > 1e-12 * max { values[j] } else { 0.0 };
        let root = lambda.sqrt();
        for i in 0..d {
            // rows of M are sqrt(lambda_j) v_j'
            m[(j, i)] = root * vectors[(i, j)];
        }
    }
    Ok(CompactFactor {
        m,
        factorization: FactorizationKind::EigenSqrt,
    })
}

/// a'b / (||a|| ||b||).
pub fn cosine_score(a: &DVector<f64>, b: &DVector<f64>) -> Result<f64> {
    let na = a.norm();
    let nb = b.norm();
    if na <= 0.0 || nb <= 0.0 {
        return Err(Error::numeric("zero-norm vector in cosine score"));
    }
    Ok((a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Compact factor for the fused head `[K1, K2]` (dimension d1 + d2). The
/// heads must share the training-speaker set and ordering; only the speaker
/// counts are verifiable here and are checked.
pub fn fuse_heads(h1: &ClassifierHead, h2: &ClassifierHead) -> Result<CompactFactor> {
    if h1.n_speakers() != h2.n_speakers() {
        return Err(Error::data(format!(
            "fused heads disagree on speaker count: {} vs {}",
            h1.n_speakers(),
            h2.n_speakers()
        )));
    }
    let n = h1.n_speakers();
    let d1 = h1.dim();
    let d2 = h2.dim();
    let mut k = DMatrix::zeros(n, d1 + d2);
    k.view_mut((0, 0), (n, d1)).copy_from(&h1.k);
    k.view_mut((0, d1), (n, d2)).copy_from(&h2.k);
    compact_factor(&ClassifierHead::new(k, false)?)
}

/// Stacked fused embedding `[w1 r1, w2 r2]` matching [`fuse_heads`]: the
/// cosine of two fused projections equals the cosine of the weighted
/// average logits `w1 K1 r1 + w2 K2 r2`.
pub fn fuse_embedding(r1: &[f64], r2: &[f64], w1: f64, w2: f64) -> Result<Vec<f64>> {
    if !(w1.is_finite() && w2.is_finite()) {
        return Err(Error::data("non-finite fusion weights"));
    }
    let mut out = Vec::with_capacity(r1.len() + r2.len());
    out.extend(r1.iter().map(|v| v * w1));
    out.extend(r2.iter().map(|v| v * w2));
    Ok(out)
}

/// Score a trial list with compact logit-space cosine. Embeddings are the
/// raw extractor embeddings; multi-session enrollments are averaged in the
/// raw space before projection.
pub fn score_cl_trials(
    factor: &CompactFactor,
    trials: &TrialList,
    emb: &EmbeddingSet,
) -> Result<ScoreSet> {
    if emb.dim() != factor.dim() {
        return Err(Error::data(format!(
            "compact factor dim {} does not match embeddings dim {}",
            factor.dim(),
            emb.dim()
        )));
    }
    // project each model's averaged enrollment and every test segment once
    let mut model_proj = std::collections::HashMap::new();
    for model in trials.models() {
        let mut mean = DVector::zeros(emb.dim());
        for seg in &model.segments {
            let idx = emb.position(seg).ok_or_else(|| {
                Error::data(format!("enrollment segment '{seg}' not found in embeddings"))
            })?;
            mean += emb.row_vector(idx);
        }
        mean /= model.segments.len() as f64;
        model_proj.insert(model.id.as_str(), factor.project(&mean)?);
    }

    let mut test_proj = std::collections::HashMap::new();
    for t in trials.trials() {
        if !test_proj.contains_key(t.test_id.as_str()) {
            let idx = emb.position(&t.test_id).ok_or_else(|| {
                Error::data(format!("test segment '{}' not found in embeddings", t.test_id))
            })?;
            test_proj.insert(t.test_id.as_str(), factor.project(&emb.row_vector(idx))?);
        }
    }

    let scored: Vec<Result<ScoreEntry>> = par::map_slice(trials.trials(), |t| {
        let e = &model_proj[t.model_id.as_str()];
        let x = &test_proj[t.test_id.as_str()];
        Ok(ScoreEntry {
            model_id: t.model_id.clone(),
            test_id: t.test_id.clone(),
            score: cosine_score(e, x)?,
            key: t.key,
            trial_type: t.trial_type,
        })
    });
    let entries = scored.into_iter().collect::<Result<Vec<_>>>()?;
    ScoreSet::new(entries, "cosine-cl")
}
