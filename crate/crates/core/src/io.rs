//! File formats: feature manifests with raw f64 blobs, JSON-lines
//! annotations and predictions, vocabulary files, and atomic writes.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::RankedPrediction;
use crate::lang::Vocabulary;
use crate::tensor::Tensor;
use crate::video::ClipFeatures;

/// Write bytes to a temporary sibling and rename into place, so a crash
/// never leaves a partial artifact under the final name.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    if !dir.as_os_str().is_empty() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))
}

// ── Feature files ──────────────────────────────────────────────────────

/// JSON manifest sitting next to the raw feature blob.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeatureManifest {
    pub video_id: String,
    #[serde(rename = "T_f")]
    pub t_f: usize,
    pub dim: usize,
    pub clip_duration_seconds: f64,
    /// Path of the blob, relative to the manifest.
    pub data_file: String,
}

fn f64s_to_le_bytes(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn le_bytes_to_f64s(bytes: &[u8], path: &Path) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::Input(format!(
            "blob '{}' length {} is not a multiple of 8",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Manifest path for a video inside a feature directory.
pub fn feature_manifest_path(dir: &Path, video_id: &str) -> PathBuf {
    dir.join(format!("{video_id}.json"))
}

/// Write `<video_id>.json` and `<video_id>.bin` (row-major f64, little
/// endian) into `dir`.
pub fn write_clip_features(dir: &Path, features: &ClipFeatures) -> Result<()> {
    let manifest = FeatureManifest {
        video_id: features.video_id.clone(),
        t_f: features.num_clips(),
        dim: features.dim(),
        clip_duration_seconds: features.clip_duration_seconds,
        data_file: format!("{}.bin", features.video_id),
    };
    let blob = f64s_to_le_bytes(features.features.values());
    atomic_write(&dir.join(&manifest.data_file), &blob)?;
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::json(dir.display().to_string(), e))?;
    atomic_write(&feature_manifest_path(dir, &features.video_id), json.as_bytes())?;
    Ok(())
}

pub fn read_clip_features(dir: &Path, video_id: &str) -> Result<ClipFeatures> {
    let manifest_path = feature_manifest_path(dir, video_id);
    if !manifest_path.exists() {
        return Err(Error::MissingFeatures { video_id: video_id.to_string() });
    }
    let manifest: FeatureManifest = serde_json::from_str(&read_to_string(&manifest_path)?)
        .map_err(|e| Error::json(manifest_path.display().to_string(), e))?;
    let blob_path = dir.join(&manifest.data_file);
    let bytes = fs::read(&blob_path).map_err(|e| Error::io(blob_path.display().to_string(), e))?;
    let values = le_bytes_to_f64s(&bytes, &blob_path)?;
    if values.len() != manifest.t_f * manifest.dim {
        return Err(Error::Input(format!(
            "blob '{}' holds {} values, manifest promises {}x{}",
            blob_path.display(),
            values.len(),
            manifest.t_f,
            manifest.dim
        )));
    }
    let tensor = Tensor::from_vec(vec![manifest.t_f, manifest.dim], values)?;
    ClipFeatures::new(manifest.video_id, tensor, manifest.clip_duration_seconds)
}

/// Directory of feature files with an in-memory cache.
pub struct FeatureStore {
    dir: PathBuf,
    cache: HashMap<String, ClipFeatures>,
}

impl FeatureStore {
    pub fn open(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into(), cache: HashMap::new() }
    }

    pub fn get(&mut self, video_id: &str) -> Result<&ClipFeatures> {
        if !self.cache.contains_key(video_id) {
            let features = read_clip_features(&self.dir, video_id)?;
            self.cache.insert(video_id.to_string(), features);
        }
        Ok(&self.cache[video_id])
    }
}

// ── Annotations ────────────────────────────────────────────────────────

/// One training/evaluation sample: a video, a query, and the ground-truth
/// interval.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Annotation {
    pub video_id: String,
    pub query: String,
    pub start_seconds: f64,
    pub end_seconds: f64,
}

pub fn write_annotations(path: &Path, annotations: &[Annotation]) -> Result<()> {
    let mut out = Vec::new();
    for a in annotations {
        serde_json::to_writer(&mut out, a).map_err(|e| Error::json(path.display().to_string(), e))?;
        out.push(b'\n');
    }
    atomic_write(path, &out)
}

pub fn read_annotations(path: &Path) -> Result<Vec<Annotation>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut annotations = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let a: Annotation = serde_json::from_str(&line)
            .map_err(|e| Error::json(format!("{}:{}", path.display(), idx + 1), e))?;
        if !(a.start_seconds < a.end_seconds) {
            return Err(Error::Input(format!(
                "{}:{}: ground truth must satisfy start < end",
                path.display(),
                idx + 1
            )));
        }
        annotations.push(a);
    }
    Ok(annotations)
}

// ── Vocabulary ─────────────────────────────────────────────────────────

/// UTF-8 text, one token per line; the line number is the id.
pub fn write_vocabulary(path: &Path, vocab: &Vocabulary) -> Result<()> {
    let mut out = String::new();
    for token in vocab.tokens() {
        out.push_str(token);
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

pub fn read_vocabulary(path: &Path) -> Result<Vocabulary> {
    let text = read_to_string(path)?;
    let tokens: Vec<String> = text.lines().map(|l| l.to_string()).collect();
    Vocabulary::new(tokens)
}

// ── Predictions ────────────────────────────────────────────────────────

/// Header line carrying provenance at the top of a predictions file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredictionsHeader {
    pub run_config: serde_json::Value,
}

/// JSON-lines: one header object with the run configuration, then one
/// `{query_id, ranked}` object per query.
pub fn write_predictions(
    path: &Path,
    run_config: &serde_json::Value,
    predictions: &[RankedPrediction],
) -> Result<()> {
    let mut out = Vec::new();
    let header = PredictionsHeader { run_config: run_config.clone() };
    serde_json::to_writer(&mut out, &header).map_err(|e| Error::json(path.display().to_string(), e))?;
    out.push(b'\n');
    for p in predictions {
        serde_json::to_writer(&mut out, p).map_err(|e| Error::json(path.display().to_string(), e))?;
        out.push(b'\n');
    }
    atomic_write(path, &out)
}

/// Read predictions, skipping the header line (any line without `query_id`).
pub fn read_predictions(path: &Path) -> Result<Vec<RankedPrediction>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut predictions = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line)
            .map_err(|e| Error::json(format!("{}:{}", path.display(), idx + 1), e))?;
        if value.get("query_id").is_none() {
            continue;
        }
        let p: RankedPrediction = serde_json::from_value(value)
            .map_err(|e| Error::json(format!("{}:{}", path.display(), idx + 1), e))?;
        predictions.push(p);
    }
    Ok(predictions)
}

/// Append-free CSV writer for the per-epoch training log.
pub struct TrainingLog {
    path: PathBuf,
    buffer: String,
}

impl TrainingLog {
    pub fn new(path: impl Into<PathBuf>, run_config: &serde_json::Value) -> Self {
        let mut buffer = String::new();
        buffer.push_str(&format!("# run_config: {run_config}\n"));
        buffer.push_str("epoch,loss,rank1\n");
        Self { path: path.into(), buffer }
    }

    pub fn record(&mut self, epoch: usize, loss: f64, rank1: Option<f64>) {
        let rank1 = rank1.map(|r| format!("{r}")).unwrap_or_default();
        self.buffer.push_str(&format!("{epoch},{loss},{rank1}\n"));
    }

    /// Rewrite the whole log atomically; called after each epoch so the file
    /// on disk is always well-formed.
    pub fn flush(&self) -> Result<()> {
        atomic_write(&self.path, self.buffer.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::ScoredInterval;
    use crate::lang::UNKNOWN_TOKEN;
    use crate::rng::RngState;

    #[test]
    fn feature_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = RngState::seed_from_u64(3);
        let tensor = Tensor::uniform(vec![8, 4], -2.0, 2.0, &mut rng);
        let features = ClipFeatures::new("vid-1", tensor.clone(), 0.25).unwrap();
        write_clip_features(dir.path(), &features).unwrap();
        let back = read_clip_features(dir.path(), "vid-1").unwrap();
        let orig_bits: Vec<u64> = tensor.values().iter().map(|v| v.to_bits()).collect();
        let back_bits: Vec<u64> = back.features.values().iter().map(|v| v.to_bits()).collect();
        assert_eq!(orig_bits, back_bits);
        assert_eq!(back.clip_duration_seconds, 0.25);
        assert_eq!(back.num_clips(), 8);
    }

    #[test]
    fn missing_features_name_the_video() {
        let dir = tempfile::tempdir().unwrap();
        let err = read_clip_features(dir.path(), "absent").unwrap_err();
        assert!(err.to_string().contains("absent"));
    }

    #[test]
    fn annotations_round_trip_and_validate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ann.jsonl");
        let annotations = vec![Annotation {
            video_id: "v".into(),
            query: "child runs".into(),
            start_seconds: 5.0,
            end_seconds: 10.0,
        }];
        write_annotations(&path, &annotations).unwrap();
        let back = read_annotations(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].query, "child runs");

        let bad = r#"{"video_id":"v","query":"q","start_seconds":9.0,"end_seconds":2.0}"#;
        fs::write(&path, bad).unwrap();
        assert!(read_annotations(&path).is_err());
    }

    #[test]
    fn vocabulary_line_number_is_id() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let vocab = Vocabulary::new(vec![
            UNKNOWN_TOKEN.to_string(),
            "child".to_string(),
            "runs".to_string(),
        ])
        .unwrap();
        write_vocabulary(&path, &vocab).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text, "<unk>\nchild\nruns\n");
        let back = read_vocabulary(&path).unwrap();
        assert_eq!(back.id("runs"), 2);
        assert_eq!(back.unknown_id(), 0);
    }

    #[test]
    fn predictions_header_is_skipped_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("preds.jsonl");
        let preds = vec![RankedPrediction {
            query_id: 0,
            ranked: vec![ScoredInterval { start_seconds: 0.0, end_seconds: 5.0, score: 0.9 }],
        }];
        let config = serde_json::json!({"seed": 7});
        write_predictions(&path, &config, &preds).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.lines().next().unwrap().contains("run_config"));
        let back = read_predictions(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].ranked[0].score, 0.9);
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.txt");
        atomic_write(&path, b"one").unwrap();
        atomic_write(&path, b"two").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1, "no temp files left behind");
    }
}
