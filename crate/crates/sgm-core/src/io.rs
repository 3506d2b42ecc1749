//! On-disk formats: corpus files, checkpoints, and score-matrix dumps.
//!
//! * `graphs.json` — human-diffable graph structure and vocabulary.
//! * `features.bin` — magic `SGMF`, u32 row count, u32 dim, then f32
//!   row-major node features: object rows for all graphs in declaration
//!   order, then relationship rows in the same order.
//! * checkpoint — magic `SGMC`, u32 format version, a length-prefixed JSON
//!   metadata block, then length-prefixed named f64 blobs (parameters in
//!   canonical order, then Adam first/second moments).
//!
//! All writers produce deterministic bytes for identical inputs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adam::AdamState;
use crate::error::{Result, SgmError};
use crate::graph::{Corpus, ObjectNode, RelationshipNode, TextualSceneGraph, VisualSceneGraph};
use crate::model::{ModelConfig, SgmModel};
use crate::tensor::Tensor;
use crate::trainer::{Checkpoint, EpochStats, TrainConfig};

const FEATURES_MAGIC: &[u8; 4] = b"SGMF";
const CHECKPOINT_MAGIC: &[u8; 4] = b"SGMC";
const CHECKPOINT_VERSION: u32 = 1;

// ─── graphs.json ────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct GraphsFile {
    d1: usize,
    c_o: usize,
    c_r: usize,
    vocab: Vec<String>,
    pairs: Vec<PairJson>,
}

#[derive(Serialize, Deserialize)]
struct PairJson {
    objects: Vec<ObjJson>,
    relationships: Vec<RelJson>,
    tokens: Vec<usize>,
    paths: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct ObjJson {
    label: usize,
}

#[derive(Serialize, Deserialize)]
struct RelJson {
    label: usize,
    sub: usize,
    obj: usize,
}

/// Writes a corpus as `graphs.json` + `features.bin`.
pub fn save_corpus(
    corpus: &Corpus,
    graphs_path: impl AsRef<Path>,
    features_path: impl AsRef<Path>,
) -> Result<()> {
    let file = GraphsFile {
        d1: corpus.d1,
        c_o: corpus.c_o,
        c_r: corpus.c_r,
        vocab: corpus.vocab.clone(),
        pairs: corpus
            .pairs
            .iter()
            .map(|(vsg, tsg)| PairJson {
                objects: vsg
                    .objects
                    .iter()
                    .map(|o| ObjJson { label: o.label_id })
                    .collect(),
                relationships: vsg
                    .relationships
                    .iter()
                    .map(|r| RelJson {
                        label: r.label_id,
                        sub: r.subject_idx,
                        obj: r.object_idx,
                    })
                    .collect(),
                tokens: tsg.tokens.clone(),
                paths: tsg.triplet_paths.clone(),
            })
            .collect(),
    };
    let mut json = serde_json::to_string_pretty(&file)
        .map_err(|e| SgmError::contract(format!("corpus serialization failed: {e}")))?;
    json.push('\n');
    write_bytes(graphs_path.as_ref(), json.as_bytes())?;

    let mut rows: Vec<&[f64]> = Vec::new();
    for (vsg, _) in &corpus.pairs {
        for o in &vsg.objects {
            rows.push(&o.feature);
        }
    }
    for (vsg, _) in &corpus.pairs {
        for r in &vsg.relationships {
            rows.push(&r.feature);
        }
    }
    let mut bytes = Vec::with_capacity(12 + rows.len() * corpus.d1 * 4);
    bytes.extend_from_slice(FEATURES_MAGIC);
    bytes.extend_from_slice(&(rows.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&(corpus.d1 as u32).to_le_bytes());
    for row in rows {
        for &x in row {
            bytes.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    write_bytes(features_path.as_ref(), &bytes)
}

/// Loads and fully validates a corpus from its two files.
pub fn load_corpus(
    graphs_path: impl AsRef<Path>,
    features_path: impl AsRef<Path>,
) -> Result<Corpus> {
    let graphs_path = graphs_path.as_ref();
    let text = read_bytes(graphs_path)?;
    let text = String::from_utf8(text)
        .map_err(|e| SgmError::parse(graphs_path, format!("not UTF-8: {e}")))?;
    let file: GraphsFile = serde_json::from_str(&text)
        .map_err(|e| SgmError::parse(graphs_path, e.to_string()))?;

    let features_path = features_path.as_ref();
    let bytes = read_bytes(features_path)?;
    let mut cursor = Cursor::new(features_path, &bytes);
    let magic = cursor.take(4)?;
    if magic != FEATURES_MAGIC {
        return Err(SgmError::Integrity(format!(
            "{}: bad magic {:?}, expected \"SGMF\"",
            features_path.display(),
            String::from_utf8_lossy(magic)
        )));
    }
    let count = cursor.u32()? as usize;
    let dim = cursor.u32()? as usize;
    if dim != file.d1 {
        return Err(SgmError::Integrity(format!(
            "feature dim {dim} does not match declared d1={}",
            file.d1
        )));
    }
    let expected: usize = file
        .pairs
        .iter()
        .map(|p| p.objects.len() + p.relationships.len())
        .sum();
    if count != expected {
        return Err(SgmError::Integrity(format!(
            "feature file has {count} rows but graphs declare {expected} nodes"
        )));
    }
    let mut features = Vec::with_capacity(count);
    for _ in 0..count {
        features.push(cursor.f32_row(dim)?);
    }

    let mut next = 0usize;
    let mut take_row = || {
        let row = std::mem::take(&mut features[next]);
        next += 1;
        row
    };
    let mut pairs: Vec<(VisualSceneGraph, TextualSceneGraph)> = file
        .pairs
        .iter()
        .map(|p| {
            let objects = p
                .objects
                .iter()
                .map(|o| ObjectNode {
                    feature: take_row(),
                    label_id: o.label,
                })
                .collect();
            (
                VisualSceneGraph {
                    objects,
                    relationships: Vec::new(),
                },
                TextualSceneGraph {
                    tokens: p.tokens.clone(),
                    triplet_paths: p.paths.clone(),
                },
            )
        })
        .collect();
    for (p, pair) in file.pairs.iter().zip(pairs.iter_mut()) {
        pair.0.relationships = p
            .relationships
            .iter()
            .map(|r| RelationshipNode {
                feature: take_row(),
                label_id: r.label,
                subject_idx: r.sub,
                object_idx: r.obj,
            })
            .collect();
    }

    let corpus = Corpus {
        d1: file.d1,
        c_o: file.c_o,
        c_r: file.c_r,
        vocab: file.vocab,
        pairs,
    };
    corpus.check()?;
    Ok(corpus)
}

// ─── Checkpoints ────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    train_config: TrainConfig,
    model_config: ModelConfig,
    epoch: usize,
    history: Vec<EpochStats>,
    adam_step: u64,
    adam_lr: f64,
    adam_beta1: f64,
    adam_beta2: f64,
    adam_eps: f64,
}

/// Serializes a checkpoint; identical checkpoints produce identical bytes.
pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let meta = CheckpointMeta {
        train_config: ckpt.config.clone(),
        model_config: ckpt.model.config.clone(),
        epoch: ckpt.epoch,
        history: ckpt.history.clone(),
        adam_step: ckpt.adam.step,
        adam_lr: ckpt.adam.lr,
        adam_beta1: ckpt.adam.beta1,
        adam_beta2: ckpt.adam.beta2,
        adam_eps: ckpt.adam.eps,
    };
    let meta_json = serde_json::to_vec(&meta)
        .map_err(|e| SgmError::contract(format!("checkpoint serialization failed: {e}")))?;

    let mut bytes = Vec::new();
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&meta_json);

    for (name, tensor) in ckpt.model.named_params() {
        push_blob(&mut bytes, &name, &tensor.values);
    }
    for (name, _) in ckpt.model.named_params() {
        push_blob(&mut bytes, &format!("adam.m.{name}"), &ckpt.adam.first_moment[&name]);
        push_blob(&mut bytes, &format!("adam.v.{name}"), &ckpt.adam.second_moment[&name]);
    }
    write_bytes(path.as_ref(), &bytes)
}

/// Reads a checkpoint back; the result is bitwise equal to what was saved.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let mut cursor = Cursor::new(path, &bytes);
    let magic = cursor.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(SgmError::Integrity(format!(
            "{}: bad magic {:?}, expected \"SGMC\"",
            path.display(),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = cursor.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(SgmError::Integrity(format!(
            "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let meta_len = cursor.u64()? as usize;
    let meta_bytes = cursor.take(meta_len)?;
    let meta: CheckpointMeta = serde_json::from_slice(meta_bytes)
        .map_err(|e| SgmError::parse(path, format!("checkpoint metadata: {e}")))?;

    let mut model = SgmModel::new(meta.model_config.clone(), 0)?;
    let names: Vec<(String, usize)> = model
        .named_params()
        .into_iter()
        .map(|(n, t)| (n, t.len()))
        .collect();
    for (name, len) in &names {
        let values = cursor.named_blob(name, *len)?;
        model.set_param(name, values)?;
    }

    let mut adam = AdamState::new(meta.adam_lr, names.iter().map(|(n, l)| (n.as_str(), *l)));
    adam.step = meta.adam_step;
    adam.beta1 = meta.adam_beta1;
    adam.beta2 = meta.adam_beta2;
    adam.eps = meta.adam_eps;
    for (name, len) in &names {
        let m = cursor.named_blob(&format!("adam.m.{name}"), *len)?;
        let v = cursor.named_blob(&format!("adam.v.{name}"), *len)?;
        adam.first_moment.insert(name.clone(), m);
        adam.second_moment.insert(name.clone(), v);
    }

    Ok(Checkpoint {
        config: meta.train_config,
        epoch: meta.epoch,
        model,
        adam,
        history: meta.history,
    })
}

// ─── Score-matrix dumps ─────────────────────────────────────────────────

/// Writes a matrix in the `features.bin` layout (f32 rows).
pub fn save_matrix(matrix: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let (rows, cols) = (matrix.rows(), matrix.cols());
    let mut bytes = Vec::with_capacity(12 + rows * cols * 4);
    bytes.extend_from_slice(FEATURES_MAGIC);
    bytes.extend_from_slice(&(rows as u32).to_le_bytes());
    bytes.extend_from_slice(&(cols as u32).to_le_bytes());
    for &x in &matrix.values {
        bytes.extend_from_slice(&(x as f32).to_le_bytes());
    }
    write_bytes(path.as_ref(), &bytes)
}

/// Reads a matrix written by [`save_matrix`] (values pass through f32).
pub fn load_matrix(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let mut cursor = Cursor::new(path, &bytes);
    let magic = cursor.take(4)?;
    if magic != FEATURES_MAGIC {
        return Err(SgmError::Integrity(format!(
            "{}: bad magic, expected \"SGMF\"",
            path.display()
        )));
    }
    let rows = cursor.u32()? as usize;
    let cols = cursor.u32()? as usize;
    let mut values = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        values.extend(cursor.f32_row(cols)?);
    }
    Ok(Tensor::new(vec![rows, cols], values))
}

// ─── Byte-level helpers ─────────────────────────────────────────────────

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| SgmError::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| SgmError::io(path, e))
}

fn push_blob(bytes: &mut Vec<u8>, name: &str, values: &[f64]) {
    bytes.extend_from_slice(&(name.len() as u32).to_le_bytes());
    bytes.extend_from_slice(name.as_bytes());
    bytes.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for &x in values {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(path: &'a Path, bytes: &'a [u8]) -> Self {
        Cursor {
            path,
            bytes,
            pos: 0,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(SgmError::Integrity(format!(
                "{}: unexpected end of file at byte {} (wanted {n} more)",
                self.path.display(),
                self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32_row(&mut self, dim: usize) -> Result<Vec<f64>> {
        let raw = self.take(dim * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    /// Reads the next blob and checks it carries the expected name and
    /// element count.
    fn named_blob(&mut self, expected_name: &str, expected_len: usize) -> Result<Vec<f64>> {
        let name_len = self.u32()? as usize;
        let name_bytes = self.take(name_len)?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| SgmError::Integrity("blob name is not UTF-8".to_string()))?;
        if name != expected_name {
            return Err(SgmError::Integrity(format!(
                "expected parameter blob '{expected_name}', found '{name}'"
            )));
        }
        let count = self.u64()? as usize;
        if count != expected_len {
            return Err(SgmError::Integrity(format!(
                "parameter '{name}' has {count} values, expected {expected_len}"
            )));
        }
        let raw = self.take(count * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_synthetic, SynthSpec};
    use crate::trainer::train;

    fn dir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn corpus_round_trip_is_identity() {
        for relation_only in [false, true] {
            let spec = SynthSpec {
                relation_only,
                ..SynthSpec::default()
            };
            let corpus = generate_synthetic(7, 5, &spec).unwrap();
            let d = dir();
            let g = d.path().join("graphs.json");
            let f = d.path().join("features.bin");
            save_corpus(&corpus, &g, &f).unwrap();
            let loaded = load_corpus(&g, &f).unwrap();
            assert_eq!(corpus, loaded);
        }
    }

    #[test]
    fn minimal_hand_written_files_load() {
        let d = dir();
        let g = d.path().join("graphs.json");
        let f = d.path().join("features.bin");
        fs::write(
            &g,
            r#"{"d1":2,"c_o":1,"c_r":1,"vocab":["<unk>","cat"],
               "pairs":[{"objects":[{"label":0}],"relationships":[],
                         "tokens":[1],"paths":[]}]}"#,
        )
        .unwrap();
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"SGMF");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&0.5f32.to_le_bytes());
        bytes.extend_from_slice(&(-1.5f32).to_le_bytes());
        fs::write(&f, bytes).unwrap();

        let corpus = load_corpus(&g, &f).unwrap();
        assert_eq!(corpus.pairs.len(), 1);
        assert_eq!(corpus.pairs[0].0.objects.len(), 1);
        assert_eq!(corpus.pairs[0].0.objects[0].feature, vec![0.5, -1.5]);
    }

    #[test]
    fn dangling_relationship_endpoint_is_a_validation_error() {
        let d = dir();
        let g = d.path().join("graphs.json");
        let f = d.path().join("features.bin");
        fs::write(
            &g,
            r#"{"d1":1,"c_o":2,"c_r":1,"vocab":["<unk>","a"],
               "pairs":[{"objects":[{"label":0},{"label":1}],
                         "relationships":[{"label":0,"sub":0,"obj":99}],
                         "tokens":[1],"paths":[]}]}"#,
        )
        .unwrap();
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"SGMF");
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        for _ in 0..3 {
            bytes.extend_from_slice(&0.0f32.to_le_bytes());
        }
        fs::write(&f, bytes).unwrap();

        let err = load_corpus(&g, &f).unwrap_err();
        assert!(matches!(err, SgmError::Validation(_)), "{err}");
        assert!(err.to_string().contains("99"), "{err}");
    }

    #[test]
    fn malformed_json_reports_the_line() {
        let d = dir();
        let g = d.path().join("graphs.json");
        let f = d.path().join("features.bin");
        fs::write(&g, "{\n  \"d1\": 2,\n  oops\n}").unwrap();
        fs::write(&f, b"SGMF").unwrap();
        let err = load_corpus(&g, &f).unwrap_err();
        assert!(matches!(err, SgmError::Parse { .. }), "{err}");
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn feature_file_integrity_errors() {
        let corpus = generate_synthetic(1, 3, &SynthSpec::default()).unwrap();
        let d = dir();
        let g = d.path().join("graphs.json");
        let f = d.path().join("features.bin");
        save_corpus(&corpus, &g, &f).unwrap();

        let good = fs::read(&f).unwrap();

        // Wrong magic.
        let mut bad = good.clone();
        bad[0] = b'X';
        fs::write(&f, &bad).unwrap();
        assert!(matches!(load_corpus(&g, &f), Err(SgmError::Integrity(_))));

        // Truncated payload.
        fs::write(&f, &good[..good.len() - 3]).unwrap();
        let err = load_corpus(&g, &f).unwrap_err();
        assert!(err.to_string().contains("unexpected end"), "{err}");

        // Row-count mismatch against the declared graphs.
        let mut short = good.clone();
        short[4..8].copy_from_slice(&2u32.to_le_bytes());
        short.truncate(12 + 2 * corpus.d1 * 4);
        fs::write(&f, &short).unwrap();
        let err = load_corpus(&g, &f).unwrap_err();
        assert!(err.to_string().contains("declare"), "{err}");

        // Missing file is an I/O error.
        let missing = load_corpus(d.path().join("nope.json"), &f).unwrap_err();
        assert!(matches!(missing, SgmError::Io { .. }));
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let corpus = generate_synthetic(
            3,
            6,
            &SynthSpec {
                d1: 4,
                objects_per_pair: 2,
                relationships_per_pair: 1,
                relation_only: false,
            },
        )
        .unwrap();
        let cfg = TrainConfig {
            batch_size: 3,
            epochs: 2,
            d1: 4,
            d2: 3,
            d_out: 5,
            seed: 11,
            ..TrainConfig::default()
        };
        let out = train(&corpus, &cfg).unwrap();

        let d = dir();
        let path = d.path().join("model.sgmc");
        save_checkpoint(&out.last, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(out.last, loaded);

        // Saving the loaded checkpoint reproduces the bytes exactly.
        let again = d.path().join("again.sgmc");
        save_checkpoint(&loaded, &again).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
    }

    #[test]
    fn checkpoint_version_and_magic_are_enforced() {
        let corpus = generate_synthetic(
            3,
            4,
            &SynthSpec {
                d1: 4,
                objects_per_pair: 2,
                relationships_per_pair: 1,
                relation_only: false,
            },
        )
        .unwrap();
        let cfg = TrainConfig {
            batch_size: 2,
            epochs: 1,
            d1: 4,
            d2: 3,
            d_out: 4,
            ..TrainConfig::default()
        };
        let out = train(&corpus, &cfg).unwrap();
        let d = dir();
        let path = d.path().join("model.sgmc");
        save_checkpoint(&out.last, &path).unwrap();

        let good = fs::read(&path).unwrap();
        let mut bad_version = good.clone();
        bad_version[4..8].copy_from_slice(&9u32.to_le_bytes());
        fs::write(&path, &bad_version).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("version 9"), "{err}");

        let mut bad_magic = good;
        bad_magic[0] = b'Z';
        fs::write(&path, &bad_magic).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(SgmError::Integrity(_))));
    }

    #[test]
    fn matrix_dump_round_trips_through_f32() {
        let m = Tensor::new(vec![2, 3], vec![0.5, -1.25, 3.0, 0.125, -0.75, 2.5]);
        let d = dir();
        let path = d.path().join("scores.bin");
        save_matrix(&m, &path).unwrap();
        let back = load_matrix(&path).unwrap();
        assert_eq!(back, m, "f32-exact values must survive");
    }
}
