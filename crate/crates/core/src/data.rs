//! Core containers: embedding sets with per-segment metadata, trial lists,
//! and score sets. All of them are immutable after construction and safe to
//! share read-only across scoring workers.

use std::collections::{HashMap, HashSet};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const UNK: &str = "unk";

/// Maximum number of enrollment sessions per model.
pub const MAX_ENROLL_SESSIONS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Gender {
    Male,
    Female,
    Unk,
}

impl Gender {
    pub fn parse(s: &str) -> Option<Gender> {
        match s {
            "m" => Some(Gender::Male),
            "f" => Some(Gender::Female),
            UNK => Some(Gender::Unk),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Gender::Male => "m",
            Gender::Female => "f",
            Gender::Unk => UNK,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Channel {
    Tel,
    Mic,
    Unk,
}

impl Channel {
    pub fn parse(s: &str) -> Option<Channel> {
        match s {
            "tel" => Some(Channel::Tel),
            "mic" => Some(Channel::Mic),
            UNK => Some(Channel::Unk),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Channel::Tel => "tel",
            Channel::Mic => "mic",
            Channel::Unk => UNK,
        }
    }
}

/// Per-segment labels. String fields use `"unk"` for unknown.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentMeta {
    pub speaker: String,
    pub language: String,
    pub gender: Gender,
    pub channel: Channel,
    pub dataset: String,
}

impl Default for SegmentMeta {
    fn default() -> Self {
        SegmentMeta {
            speaker: UNK.to_string(),
            language: UNK.to_string(),
            gender: Gender::Unk,
            channel: Channel::Unk,
            dataset: UNK.to_string(),
        }
    }
}

impl SegmentMeta {
    pub fn has_speaker(&self) -> bool {
        self.speaker != UNK
    }
}

/// A set of fixed-dimension embeddings keyed by segment id, with metadata
/// attached to every segment (fields may be unknown).
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    dim: usize,
    data: Vec<f64>, // row-major, len == ids.len() * dim
    meta: Vec<SegmentMeta>,
}

impl EmbeddingSet {
    pub fn new(
        ids: Vec<String>,
        dim: usize,
        data: Vec<f64>,
        meta: Vec<SegmentMeta>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::data("embedding dimension must be >= 1"));
        }
        if data.len() != ids.len() * dim {
            return Err(Error::data(format!(
                "size mismatch: {} ids with dim {} require {} values, got {}",
                ids.len(),
                dim,
                ids.len() * dim,
                data.len()
            )));
        }
        if meta.len() != ids.len() {
            return Err(Error::data("metadata count differs from id count"));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::data(format!("non-finite embedding value {bad}")));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::data(format!("duplicate segment id '{id}'")));
            }
        }
        Ok(EmbeddingSet {
            ids,
            index,
            dim,
            data,
            meta,
        })
    }

    /// Build from per-row vectors with all-unknown metadata.
    pub fn from_rows(ids: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::data("no records"));
        }
        let dim = rows[0].len();
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::data(format!(
                    "dimension mismatch: row {} has {} values, expected {}",
                    i,
                    r.len(),
                    dim
                )));
            }
        }
        let data: Vec<f64> = rows.into_iter().flatten().collect();
        let meta = vec![SegmentMeta::default(); ids.len()];
        EmbeddingSet::new(ids, dim, data, meta)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_vector(&self, i: usize) -> DVector<f64> {
        DVector::from_column_slice(self.row(i))
    }

    pub fn meta(&self, i: usize) -> &SegmentMeta {
        &self.meta[i]
    }

    pub fn metas(&self) -> &[SegmentMeta] {
        &self.meta
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.len()).map(|i| self.row(i))
    }

    /// `n x d` matrix view (copies into column-major storage).
    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_iterator(self.len(), self.dim, self.data.iter().copied())
    }

    pub fn raw_data(&self) -> &[f64] {
        &self.data
    }

    /// Same ids and metadata over a new, possibly lower-dimensional matrix.
    pub fn with_vectors(&self, dim: usize, data: Vec<f64>) -> Result<EmbeddingSet> {
        EmbeddingSet::new(self.ids.clone(), dim, data, self.meta.clone())
    }

    /// Replace metadata by joining on segment id; ids absent from the map
    /// keep all-unknown metadata.
    pub fn with_metadata(mut self, table: &HashMap<String, SegmentMeta>) -> EmbeddingSet {
        for (i, id) in self.ids.iter().enumerate() {
            if let Some(m) = table.get(id) {
                self.meta[i] = m.clone();
            }
        }
        self
    }

    /// Subset by row indices, preserving order.
    pub fn select(&self, indices: &[usize]) -> Result<EmbeddingSet> {
        let mut ids = Vec::with_capacity(indices.len());
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        let mut meta = Vec::with_capacity(indices.len());
        for &i in indices {
            ids.push(self.ids[i].clone());
            data.extend_from_slice(self.row(i));
            meta.push(self.meta[i].clone());
        }
        EmbeddingSet::new(ids, self.dim, data, meta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Key {
    Target,
    Nontarget,
    Unknown,
}

impl Key {
    pub fn parse(s: &str) -> Option<Key> {
        match s {
            "target" => Some(Key::Target),
            "nontarget" => Some(Key::Nontarget),
            "unknown" => Some(Key::Unknown),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Key::Target => "target",
            Key::Nontarget => "nontarget",
            Key::Unknown => "unknown",
        }
    }
}

/// Channel pairing of a trial, enrollment side first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TrialType {
    TelTel,
    MicMic,
    TelMic,
    MicTel,
    Unknown,
}

impl TrialType {
    pub fn parse(s: &str) -> Option<TrialType> {
        match s {
            "tel-tel" => Some(TrialType::TelTel),
            "mic-mic" => Some(TrialType::MicMic),
            "tel-mic" => Some(TrialType::TelMic),
            "mic-tel" => Some(TrialType::MicTel),
            "unknown" => Some(TrialType::Unknown),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            TrialType::TelTel => "tel-tel",
            TrialType::MicMic => "mic-mic",
            TrialType::TelMic => "tel-mic",
            TrialType::MicTel => "mic-tel",
            TrialType::Unknown => "unknown",
        }
    }

    /// Derive from per-segment channel labels (enrollment side first).
    pub fn from_channels(enroll: Channel, test: Channel) -> TrialType {
        match (enroll, test) {
            (Channel::Tel, Channel::Tel) => TrialType::TelTel,
            (Channel::Mic, Channel::Mic) => TrialType::MicMic,
            (Channel::Tel, Channel::Mic) => TrialType::TelMic,
            (Channel::Mic, Channel::Tel) => TrialType::MicTel,
            _ => TrialType::Unknown,
        }
    }
}

/// One enrollment model: 1-3 enrollment segments under a model id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Model {
    pub id: String,
    pub segments: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub model_id: String,
    pub test_id: String,
    pub key: Key,
    pub trial_type: TrialType,
}

/// Models plus the (model, test-segment) pairs to score.
#[derive(Debug, Clone)]
pub struct TrialList {
    models: Vec<Model>,
    model_index: HashMap<String, usize>,
    trials: Vec<Trial>,
}

impl TrialList {
    pub fn new(models: Vec<Model>, trials: Vec<Trial>) -> Result<Self> {
        let mut model_index = HashMap::with_capacity(models.len());
        for (i, m) in models.iter().enumerate() {
            if m.segments.is_empty() || m.segments.len() > MAX_ENROLL_SESSIONS {
                return Err(Error::data(format!(
                    "model '{}' has {} enrollment segments, expected 1-{}",
                    m.id,
                    m.segments.len(),
                    MAX_ENROLL_SESSIONS
                )));
            }
            if model_index.insert(m.id.clone(), i).is_some() {
                return Err(Error::data(format!("duplicate model id '{}'", m.id)));
            }
        }
        let mut seen = HashSet::with_capacity(trials.len());
        for t in &trials {
            if !model_index.contains_key(&t.model_id) {
                return Err(Error::data(format!(
                    "trial references unknown model '{}'",
                    t.model_id
                )));
            }
            if !seen.insert((t.model_id.clone(), t.test_id.clone())) {
                return Err(Error::data(format!(
                    "duplicate trial ({}, {})",
                    t.model_id, t.test_id
                )));
            }
        }
        Ok(TrialList {
            models,
            model_index,
            trials,
        })
    }

    pub fn models(&self) -> &[Model] {
        &self.models
    }

    pub fn model(&self, id: &str) -> Option<&Model> {
        self.model_index.get(id).map(|&i| &self.models[i])
    }

    pub fn model_position(&self, id: &str) -> Option<usize> {
        self.model_index.get(id).copied()
    }

    pub fn trials(&self) -> &[Trial] {
        &self.trials
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreEntry {
    pub model_id: String,
    pub test_id: String,
    pub score: f64,
    pub key: Key,
    pub trial_type: TrialType,
}

/// Per-trial scores in trial order, plus a free-form provenance note
/// describing the pipeline that produced them.
#[derive(Debug, Clone, Default)]
pub struct ScoreSet {
    pub entries: Vec<ScoreEntry>,
    pub provenance: String,
}

impl ScoreSet {
    pub fn new(entries: Vec<ScoreEntry>, provenance: impl Into<String>) -> Result<Self> {
        for e in &entries {
            if !e.score.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite score for trial ({}, {})",
                    e.model_id, e.test_id
                )));
            }
        }
        Ok(ScoreSet {
            entries,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// True when any entry carries a known key or trial type; decides
    /// whether the label columns are written out.
    pub fn has_labels(&self) -> bool {
        self.entries
            .iter()
            .any(|e| e.key != Key::Unknown || e.trial_type != TrialType::Unknown)
    }
}
