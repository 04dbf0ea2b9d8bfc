//! On-disk formats.
//!
//! - embeddings TSV: `id<TAB>v1<TAB>...<TAB>vd`, no header
//! - embeddings raw: `<stem>.f32` (row-major little-endian float32),
//!   `<stem>.json` sidecar `{"dim":d,"count":n,"dtype":"f32","order":"row-major"}`,
//!   `<stem>.ids` (one id per line)
//! - metadata TSV: header `segment_id speaker_id language gender channel dataset`
//! - models TSV: `model_id<TAB>seg1[,seg2[,seg3]]`, no header
//! - trials TSV: `model_id<TAB>test_segment_id[<TAB>key][<TAB>trial_type]`, no header
//! - scores TSV: header `model_id test_segment_id score[ key trial_type]`
//!
//! Floats are written in the shortest representation that round-trips, so a
//! write/load cycle preserves scores and TSV embeddings exactly (raw
//! embeddings round-trip at float32 precision by construction).
//!
//! A metadata sidecar named `<stem>.meta.tsv` is joined automatically when
//! present next to an embedding file; ids it does not cover keep
//! all-unknown labels.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::data::{
    Channel, EmbeddingSet, Gender, Key, Model, ScoreEntry, ScoreSet, SegmentMeta, Trial,
    TrialList, TrialType,
};
use crate::error::{Error, Result};

/// Embedding storage format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingFormat {
    Tsv,
    Raw,
}

impl EmbeddingFormat {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tsv" => Some(EmbeddingFormat::Tsv),
            "raw" => Some(EmbeddingFormat::Raw),
            _ => None,
        }
    }

    /// Guess from a path extension: `.f32`, `.json`, `.ids` mean raw,
    /// anything else TSV.
    pub fn infer(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("f32") | Some("json") | Some("ids") => EmbeddingFormat::Raw,
            _ => EmbeddingFormat::Tsv,
        }
    }
}

/// Strip a known embedding extension to get the stem shared by the raw
/// triple and the metadata sidecar.
fn file_stem(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some("f32") | Some("json") | Some("ids") | Some("tsv") => path.with_extension(""),
        _ => path.to_path_buf(),
    }
}

fn meta_sidecar(path: &Path) -> PathBuf {
    let mut p = file_stem(path).into_os_string();
    p.push(".meta.tsv");
    PathBuf::from(p)
}

/// Load embeddings in the given format, joining the `<stem>.meta.tsv`
/// sidecar when present.
pub fn load_embeddings(path: &Path, format: EmbeddingFormat) -> Result<EmbeddingSet> {
    let set = match format {
        EmbeddingFormat::Tsv => load_embeddings_tsv(path)?,
        EmbeddingFormat::Raw => load_embeddings_raw(path)?,
    };
    let sidecar = meta_sidecar(path);
    if sidecar.is_file() {
        let table = load_metadata(&sidecar)?;
        Ok(set.with_metadata(&table))
    } else {
        Ok(set)
    }
}

fn load_embeddings_tsv(path: &Path) -> Result<EmbeddingSet> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut ids = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut dim: Option<usize> = None;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let id = fields
            .next()
            .ok_or_else(|| Error::parse(path, lineno + 1, "empty row"))?;
        let mut row = Vec::with_capacity(dim.unwrap_or(0));
        for f in fields {
            let v: f64 = f
                .parse()
                .map_err(|_| Error::parse(path, lineno + 1, format!("bad float '{f}'")))?;
            if !v.is_finite() {
                return Err(Error::parse(path, lineno + 1, "non-finite value"));
            }
            row.push(v);
        }
        if row.is_empty() {
            return Err(Error::parse(path, lineno + 1, "row has no values"));
        }
        match dim {
            None => dim = Some(row.len()),
            Some(d) if d != row.len() => {
                return Err(Error::parse(
                    path,
                    lineno + 1,
                    format!("dimension mismatch: expected {d}, got {}", row.len()),
                ))
            }
            _ => {}
        }
        ids.push(id.to_string());
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::data(format!("no records in {}", path.display())));
    }
    EmbeddingSet::from_rows(ids, rows)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSidecar {
    dim: usize,
    count: usize,
    dtype: String,
    order: String,
}

fn load_embeddings_raw(path: &Path) -> Result<EmbeddingSet> {
    let stem = file_stem(path);
    let data_path = stem.with_extension("f32");
    let sidecar_path = stem.with_extension("json");
    let ids_path = stem.with_extension("ids");

    let sidecar: RawSidecar = serde_json::from_reader(BufReader::new(File::open(&sidecar_path)?))
        .map_err(|e| Error::parse(&sidecar_path, 1, format!("malformed header: {e}")))?;
    if sidecar.dtype != "f32" {
        return Err(Error::parse(
            &sidecar_path,
            1,
            format!("malformed header: unsupported dtype '{}'", sidecar.dtype),
        ));
    }
    if sidecar.order != "row-major" {
        return Err(Error::parse(
            &sidecar_path,
            1,
            format!("malformed header: unsupported order '{}'", sidecar.order),
        ));
    }
    if sidecar.dim == 0 {
        return Err(Error::parse(&sidecar_path, 1, "malformed header: dim 0"));
    }

    let mut bytes = Vec::new();
    File::open(&data_path)?.read_to_end(&mut bytes)?;
    let expected = sidecar
        .count
        .checked_mul(sidecar.dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::parse(&sidecar_path, 1, "malformed header: size overflow"))?;
    if bytes.len() != expected {
        return Err(Error::data(format!(
            "size mismatch: {} declares {}x{} float32 ({} bytes), file has {} bytes",
            sidecar_path.display(),
            sidecar.count,
            sidecar.dim,
            expected,
            bytes.len()
        )));
    }

    let mut ids = Vec::with_capacity(sidecar.count);
    for line in BufReader::new(File::open(&ids_path)?).lines() {
        let line = line?;
        if !line.is_empty() {
            ids.push(line);
        }
    }
    if ids.len() != sidecar.count {
        return Err(Error::data(format!(
            "size mismatch: {} ids but sidecar declares count {}",
            ids.len(),
            sidecar.count
        )));
    }
    if sidecar.count == 0 {
        return Err(Error::data(format!("no records in {}", data_path.display())));
    }

    let mut data = Vec::with_capacity(sidecar.count * sidecar.dim);
    for chunk in bytes.chunks_exact(4) {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(Error::data(format!(
                "non-finite value in {}",
                data_path.display()
            )));
        }
        data.push(v as f64);
    }
    let meta = vec![SegmentMeta::default(); ids.len()];
    EmbeddingSet::new(ids, sidecar.dim, data, meta)
}

/// Write embeddings in the given format (raw writes the f32/json/ids
/// triple next to the stem of `path`). Metadata is written separately via
/// [`save_metadata`].
pub fn save_embeddings(set: &EmbeddingSet, path: &Path, format: EmbeddingFormat) -> Result<()> {
    match format {
        EmbeddingFormat::Tsv => save_embeddings_tsv(set, path),
        EmbeddingFormat::Raw => save_embeddings_raw(set, path),
    }
}

fn save_embeddings_tsv(set: &EmbeddingSet, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for i in 0..set.len() {
        write!(w, "{}", set.id(i))?;
        for v in set.row(i) {
            write!(w, "\t{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

fn save_embeddings_raw(set: &EmbeddingSet, path: &Path) -> Result<()> {
    let stem = file_stem(path);
    let mut data = BufWriter::new(File::create(stem.with_extension("f32"))?);
    for v in set.raw_data() {
        data.write_all(&(*v as f32).to_le_bytes())?;
    }
    data.flush()?;

    let sidecar = serde_json::json!({
        "dim": set.dim(),
        "count": set.len(),
        "dtype": "f32",
        "order": "row-major",
    });
    std::fs::write(
        stem.with_extension("json"),
        serde_json::to_string_pretty(&sidecar).expect("sidecar serialization"),
    )?;

    let mut ids = BufWriter::new(File::create(stem.with_extension("ids"))?);
    for id in set.ids() {
        writeln!(ids, "{id}")?;
    }
    ids.flush()?;
    Ok(())
}

const META_HEADER: &str = "segment_id\tspeaker_id\tlanguage\tgender\tchannel\tdataset";

/// Load a metadata table keyed by segment id.
pub fn load_metadata(path: &Path) -> Result<HashMap<String, SegmentMeta>> {
    let reader = BufReader::new(File::open(path)?);
    let mut table = HashMap::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        if lineno == 0 {
            if line != META_HEADER {
                return Err(Error::parse(
                    path,
                    1,
                    format!("malformed header (expected '{}')", META_HEADER.replace('\t', " ")),
                ));
            }
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(Error::parse(
                path,
                lineno + 1,
                format!("expected 6 columns, got {}", fields.len()),
            ));
        }
        let gender = Gender::parse(fields[3])
            .ok_or_else(|| Error::parse(path, lineno + 1, format!("bad gender '{}'", fields[3])))?;
        let channel = Channel::parse(fields[4]).ok_or_else(|| {
            Error::parse(path, lineno + 1, format!("bad channel '{}'", fields[4]))
        })?;
        let meta = SegmentMeta {
            speaker: fields[1].to_string(),
            language: fields[2].to_string(),
            gender,
            channel,
            dataset: fields[5].to_string(),
        };
        if table.insert(fields[0].to_string(), meta).is_some() {
            return Err(Error::parse(
                path,
                lineno + 1,
                format!("duplicate segment id '{}'", fields[0]),
            ));
        }
    }
    Ok(table)
}

pub fn save_metadata(set: &EmbeddingSet, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{META_HEADER}")?;
    for i in 0..set.len() {
        let m = set.meta(i);
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}",
            set.id(i),
            m.speaker,
            m.language,
            m.gender.as_str(),
            m.channel.as_str(),
            m.dataset
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Load a trial list from a trials file and its models file.
pub fn load_trials(trials_path: &Path, models_path: &Path) -> Result<TrialList> {
    let mut models = Vec::new();
    for (lineno, line) in BufReader::new(File::open(models_path)?).lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let id = fields
            .next()
            .filter(|s| !s.is_empty())
            .ok_or_else(|| Error::parse(models_path, lineno + 1, "missing model id"))?;
        let segs = fields
            .next()
            .ok_or_else(|| Error::parse(models_path, lineno + 1, "missing segment list"))?;
        let segments: Vec<String> = segs
            .split(',')
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect();
        models.push(Model {
            id: id.to_string(),
            segments,
        });
    }

    let mut trials = Vec::new();
    for (lineno, line) in BufReader::new(File::open(trials_path)?).lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 2 || fields.len() > 4 {
            return Err(Error::parse(
                trials_path,
                lineno + 1,
                format!("expected 2-4 columns, got {}", fields.len()),
            ));
        }
        let key = match fields.get(2) {
            Some(s) => Key::parse(s)
                .ok_or_else(|| Error::parse(trials_path, lineno + 1, format!("bad key '{s}'")))?,
            None => Key::Unknown,
        };
        let trial_type = match fields.get(3) {
            Some(s) => TrialType::parse(s).ok_or_else(|| {
                Error::parse(trials_path, lineno + 1, format!("bad trial type '{s}'"))
            })?,
            None => TrialType::Unknown,
        };
        trials.push(Trial {
            model_id: fields[0].to_string(),
            test_id: fields[1].to_string(),
            key,
            trial_type,
        });
    }
    TrialList::new(models, trials)
}

pub fn save_models(list: &TrialList, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for m in list.models() {
        writeln!(w, "{}\t{}", m.id, m.segments.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_trials(list: &TrialList, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in list.trials() {
        writeln!(
            w,
            "{}\t{}\t{}\t{}",
            t.model_id,
            t.test_id,
            t.key.as_str(),
            t.trial_type.as_str()
        )?;
    }
    w.flush()?;
    Ok(())
}

const SCORE_HEADER: &str = "model_id\ttest_segment_id\tscore";
const SCORE_HEADER_LABELED: &str = "model_id\ttest_segment_id\tscore\tkey\ttrial_type";

/// Write scores in input order. The key/trial_type columns are emitted only
/// when at least one entry carries a known label.
pub fn write_scores(scores: &ScoreSet, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let labeled = scores.has_labels();
    writeln!(w, "{}", if labeled { SCORE_HEADER_LABELED } else { SCORE_HEADER })?;
    for e in &scores.entries {
        if labeled {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}",
                e.model_id,
                e.test_id,
                e.score,
                e.key.as_str(),
                e.trial_type.as_str()
            )?;
        } else {
            writeln!(w, "{}\t{}\t{}", e.model_id, e.test_id, e.score)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_scores(path: &Path) -> Result<ScoreSet> {
    let reader = BufReader::new(File::open(path)?);
    let mut entries = Vec::new();
    let mut labeled = false;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        if lineno == 0 {
            labeled = match line.as_str() {
                SCORE_HEADER => false,
                SCORE_HEADER_LABELED => true,
                _ => {
                    return Err(Error::parse(
                        path,
                        1,
                        "malformed header (expected score columns)",
                    ))
                }
            };
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let expected = if labeled { 5 } else { 3 };
        if fields.len() != expected {
            return Err(Error::parse(
                path,
                lineno + 1,
                format!("expected {expected} columns, got {}", fields.len()),
            ));
        }
        let score: f64 = fields[2]
            .parse()
            .map_err(|_| Error::parse(path, lineno + 1, format!("bad score '{}'", fields[2])))?;
        let (key, trial_type) = if labeled {
            (
                Key::parse(fields[3]).ok_or_else(|| {
                    Error::parse(path, lineno + 1, format!("bad key '{}'", fields[3]))
                })?,
                TrialType::parse(fields[4]).ok_or_else(|| {
                    Error::parse(path, lineno + 1, format!("bad trial type '{}'", fields[4]))
                })?,
            )
        } else {
            (Key::Unknown, TrialType::Unknown)
        };
        entries.push(ScoreEntry {
            model_id: fields[0].to_string(),
            test_id: fields[1].to_string(),
            score,
            key,
            trial_type,
        });
    }
    ScoreSet::new(entries, format!("loaded from {}", path.display()))
}
