//! Target assignment, the sigmoid cross-entropy loss, Adam, the training
//! loop, and bit-exact checkpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{temporal_iou, Interval, RankedPrediction};
use crate::io::{self, Annotation, FeatureStore, TrainingLog};
use crate::lang::{tokenize, EmbeddingTable, Vocabulary};
use crate::model::{ModelConfig, MomentModel, ParamSet, WatchedParams};
use crate::rng::RngState;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::video::CandidateMoment;

/// Positive candidates must overlap ground truth by strictly more than this.
pub const IOU_THRESHOLD: f64 = 0.5;

/// Target for candidates at or below the IoU threshold.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TargetMode {
    /// Sub-threshold candidates get target 0 (default).
    Zeroed,
    /// Sub-threshold candidates keep their raw IoU as target.
    RawIou,
}

impl std::str::FromStr for TargetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zeroed" => Ok(Self::Zeroed),
            "raw-iou" => Ok(Self::RawIou),
            other => Err(Error::Config(format!(
                "unknown target mode '{other}' (expected 'zeroed' or 'raw-iou')"
            ))),
        }
    }
}

/// Per-candidate training targets: the temporal IoU with ground truth where
/// it strictly exceeds 0.5, the sub-threshold rule elsewhere.
pub fn assign_targets(
    moments: &[CandidateMoment],
    ground_truth: Interval,
    mode: TargetMode,
) -> Result<Vec<f64>> {
    if moments.is_empty() {
        return Err(Error::Input("assign_targets needs at least one candidate".into()));
    }
    moments
        .iter()
        .map(|m| {
            let candidate = Interval::new(m.start_seconds, m.end_seconds)?;
            let iou = temporal_iou(candidate, ground_truth)?;
            Ok(match mode {
                TargetMode::Zeroed => {
                    if iou > IOU_THRESHOLD {
                        iou
                    } else {
                        0.0
                    }
                }
                TargetMode::RawIou => iou,
            })
        })
        .collect()
}

/// Mean sigmoid cross-entropy over all candidates in a batch: each entry of
/// `per_sample` is one sample's logits plus its targets, and the divisor is
/// the total candidate count.
pub fn batch_loss(tape: &mut Tape, per_sample: &[(Var, Vec<f64>)]) -> Result<Var> {
    if per_sample.is_empty() {
        return Err(Error::Input("batch_loss needs at least one sample".into()));
    }
    let mut candidates = 0usize;
    let mut total: Option<Var> = None;
    for (logits, targets) in per_sample {
        candidates += targets.len();
        let sum = tape.bce_with_logits_sum(*logits, targets)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, sum)?,
            None => sum,
        });
    }
    Ok(tape.scale(total.expect("non-empty batch"), 1.0 / candidates as f64))
}

/// Optimizer settings and training-loop knobs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HyperParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub target_mode: TargetMode,
    /// Compute train-set Rank@1 after each epoch (one extra forward pass per
    /// sample).
    pub log_rank1: bool,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 8,
            epochs: 10,
            seed: 0,
            target_mode: TargetMode::Zeroed,
            log_rank1: true,
        }
    }
}

/// First/second moment estimates, one pair per parameter in registration
/// order.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn init(params: &ParamSet) -> Self {
        let m = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let v = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self { step: 0, m, v }
    }
}

/// One Adam update over all parameters, in registration order. `grads`
/// aligns with that order; a missing gradient counts as zero.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &[Option<&Tensor>],
    state: &mut AdamState,
    hp: &HyperParams,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - hp.beta1.powi(t);
    let bias2 = 1.0 - hp.beta2.powi(t);
    for (idx, (name, tensor)) in params.iter_mut().enumerate() {
        if let Some(grad) = grads[idx] {
            if !grad.is_finite() {
                return Err(Error::NonFiniteGradient { param: name.to_string() });
            }
        }
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        let values = tensor.values_mut();
        for i in 0..values.len() {
            let g = grads[idx].map_or(0.0, |t| t.values()[i]);
            m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g;
            v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g * g;
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            values[i] -= hp.learning_rate * m_hat / (v_hat.sqrt() + hp.epsilon);
        }
    }
    Ok(())
}

/// Annotations, vocabulary, frozen embeddings, and the feature files backing
/// them.
pub struct DataSet {
    pub annotations: Vec<Annotation>,
    pub token_ids: Vec<Vec<usize>>,
    pub vocab: Vocabulary,
    pub table: EmbeddingTable,
    pub features: FeatureStore,
}

impl DataSet {
    pub fn load(
        features_dir: &Path,
        annotations_path: &Path,
        vocab_path: &Path,
        embedding_seed: u64,
    ) -> Result<Self> {
        let vocab = io::read_vocabulary(vocab_path)?;
        let annotations = io::read_annotations(annotations_path)?;
        if annotations.is_empty() {
            return Err(Error::Input(format!(
                "annotation file '{}' holds no samples",
                annotations_path.display()
            )));
        }
        let table = EmbeddingTable::build(&vocab, embedding_seed);
        let token_ids = annotations
            .iter()
            .map(|a| tokenize(&a.query, &vocab))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            annotations,
            token_ids,
            vocab,
            table,
            features: FeatureStore::open(features_dir),
        })
    }

    pub fn len(&self) -> usize {
        self.annotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.annotations.is_empty()
    }

    pub fn ground_truth(&self, index: usize) -> Result<Interval> {
        let a = &self.annotations[index];
        Interval::new(a.start_seconds, a.end_seconds)
    }
}

/// Loss (and optional train Rank@1) for one epoch.
#[derive(Clone, Copy, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub rank1: Option<f64>,
}

/// Owns the model, the optimizer state, and the shuffle stream.
pub struct Trainer {
    pub model: MomentModel,
    pub hp: HyperParams,
    pub adam: AdamState,
    pub shuffle_rng: RngState,
    pub epoch: usize,
    /// Caller-supplied provenance, embedded into every checkpoint.
    pub run_config: Option<serde_json::Value>,
}

impl Trainer {
    pub fn new(model: MomentModel, hp: HyperParams) -> Self {
        let adam = AdamState::init(&model.params);
        let shuffle_rng = RngState::derive(hp.seed, "shuffle");
        Self { model, hp, adam, shuffle_rng, epoch: 0, run_config: None }
    }

    /// Forward/backward/update over one batch of sample indices; returns the
    /// batch loss.
    pub fn train_batch(&mut self, data: &mut DataSet, batch: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let watched = WatchedParams::watch(&mut tape, &self.model.params);
        let mut per_sample = Vec::with_capacity(batch.len());
        for &index in batch {
            let annotation = data.annotations[index].clone();
            let ids = data.token_ids[index].clone();
            let features = data.features.get(&annotation.video_id)?;
            let pass =
                self.model.forward_features(&mut tape, &ids, &data.table, features, &watched)?;
            let gt = Interval::new(annotation.start_seconds, annotation.end_seconds)?;
            let targets = assign_targets(&pass.moments, gt, self.hp.target_mode)?;
            per_sample.push((pass.logits, targets));
        }
        let loss = batch_loss(&mut tape, &per_sample)?;
        let loss_value = tape.values(loss)[0];
        if !loss_value.is_finite() {
            return Err(Error::Contract(format!("loss turned non-finite ({loss_value})")));
        }
        let grads = tape.backward(loss)?;
        let ordered: Vec<Option<&Tensor>> = self
            .model
            .params
            .iter()
            .map(|(name, _)| watched.get(name).ok().and_then(|var| grads.wrt(var)))
            .collect();
        adam_step(&mut self.model.params, &ordered, &mut self.adam, &self.hp)?;
        Ok(loss_value)
    }

    /// One pass over the data in a freshly shuffled order.
    pub fn train_epoch(&mut self, data: &mut DataSet) -> Result<EpochStats> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        self.shuffle_rng.shuffle(&mut order);
        let mut losses = Vec::new();
        for batch in order.chunks(self.hp.batch_size.max(1)) {
            losses.push(self.train_batch(data, batch)?);
        }
        self.epoch += 1;
        let loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let rank1 = if self.hp.log_rank1 { Some(self.train_rank1(data)?) } else { None };
        Ok(EpochStats { epoch: self.epoch, loss, rank1 })
    }

    /// Fraction of samples whose top-ranked candidate matches ground truth
    /// (IoU above 0.999, i.e. the exact anchor).
    pub fn train_rank1(&self, data: &mut DataSet) -> Result<f64> {
        let mut hits = 0usize;
        for index in 0..data.len() {
            let pred = self.predict_sample(data, index)?;
            let gt = data.ground_truth(index)?;
            let top = pred.ranked[0].interval()?;
            if temporal_iou(top, gt)? > 0.999 {
                hits += 1;
            }
        }
        Ok(hits as f64 / data.len() as f64)
    }

    pub fn predict_sample(&self, data: &mut DataSet, index: usize) -> Result<RankedPrediction> {
        let ids = data.token_ids[index].clone();
        let video_id = data.annotations[index].video_id.clone();
        let features = data.features.get(&video_id)?;
        self.model.predict(index as u64, &ids, &data.table, features)
    }

    pub fn predict_dataset(&self, data: &mut DataSet) -> Result<Vec<RankedPrediction>> {
        (0..data.len()).map(|i| self.predict_sample(data, i)).collect()
    }

    /// Train for `hp.epochs`, appending to the log and rewriting the
    /// checkpoint after every epoch.
    pub fn run(
        &mut self,
        data: &mut DataSet,
        log: Option<&mut TrainingLog>,
        checkpoint_path: Option<&Path>,
    ) -> Result<Vec<EpochStats>> {
        let mut stats = Vec::with_capacity(self.hp.epochs);
        let mut log = log;
        for _ in 0..self.hp.epochs {
            let epoch_stats = self.train_epoch(data)?;
            if let Some(log) = log.as_deref_mut() {
                log.record(epoch_stats.epoch, epoch_stats.loss, epoch_stats.rank1);
                log.flush()?;
            }
            if let Some(path) = checkpoint_path {
                save_checkpoint(self, path)?;
            }
            stats.push(epoch_stats);
        }
        Ok(stats)
    }
}

// ── Checkpoints ────────────────────────────────────────────────────────

/// Manifest half of a checkpoint; the values live in a sibling blob of raw
/// little-endian f64s laid out as all parameters, then all first moments,
/// then all second moments, each in registration order.
#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    version: u32,
    epoch: usize,
    model_config: ModelConfig,
    hyperparams: HyperParams,
    rng_state: [u64; 4],
    adam_step: u64,
    params: Vec<ParamEntry>,
    blob_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    run_config: Option<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset in f64 elements within the parameter section.
    offset: usize,
}

fn blob_push(blob: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        blob.extend_from_slice(&v.to_le_bytes());
    }
}

/// Write `<path>` (manifest JSON) and `<path>.bin` atomically.
pub fn save_checkpoint(trainer: &Trainer, path: &Path) -> Result<()> {
    let mut entries = Vec::new();
    let mut offset = 0usize;
    for (name, tensor) in trainer.model.params.iter() {
        entries.push(ParamEntry { name: name.to_string(), shape: tensor.shape().to_vec(), offset });
        offset += tensor.numel();
    }
    let blob_name = format!(
        "{}.bin",
        path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    );
    let manifest = CheckpointManifest {
        version: 1,
        epoch: trainer.epoch,
        model_config: trainer.model.config.clone(),
        hyperparams: trainer.hp.clone(),
        rng_state: trainer.shuffle_rng.state(),
        adam_step: trainer.adam.step,
        params: entries,
        blob_file: blob_name.clone(),
        run_config: trainer.run_config.clone(),
    };
    let mut blob = Vec::with_capacity(offset * 24);
    for (_, tensor) in trainer.model.params.iter() {
        blob_push(&mut blob, tensor.values());
    }
    for m in &trainer.adam.m {
        blob_push(&mut blob, m);
    }
    for v in &trainer.adam.v {
        blob_push(&mut blob, v);
    }
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    io::atomic_write(&dir.join(&blob_name), &blob)?;
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::json(path.display().to_string(), e))?;
    io::atomic_write(path, json.as_bytes())
}

/// Restore a trainer; the next training step reproduces the original run
/// bit-exactly.
pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    let manifest: CheckpointManifest = serde_json::from_str(&io::read_to_string(path)?)
        .map_err(|e| Error::json(path.display().to_string(), e))?;
    if manifest.version != 1 {
        return Err(Error::Config(format!("unsupported checkpoint version {}", manifest.version)));
    }
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let blob_path = dir.join(&manifest.blob_file);
    let bytes =
        std::fs::read(&blob_path).map_err(|e| Error::io(blob_path.display().to_string(), e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Input(format!("checkpoint blob '{}' is truncated", blob_path.display())));
    }
    let values: Vec<f64> =
        bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();

    let total: usize = manifest.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if values.len() != total * 3 {
        return Err(Error::Input(format!(
            "checkpoint blob holds {} values, manifest promises {}",
            values.len(),
            total * 3
        )));
    }

    let mut params = ParamSet::default();
    let mut m = Vec::with_capacity(manifest.params.len());
    let mut v = Vec::with_capacity(manifest.params.len());
    for entry in &manifest.params {
        let numel: usize = entry.shape.iter().product();
        let slice = values[entry.offset..entry.offset + numel].to_vec();
        params.register(entry.name.clone(), Tensor::from_vec(entry.shape.clone(), slice)?.with_grad());
        m.push(values[total + entry.offset..total + entry.offset + numel].to_vec());
        v.push(values[2 * total + entry.offset..2 * total + entry.offset + numel].to_vec());
    }

    let model = MomentModel { config: manifest.model_config, params };
    Ok(Trainer {
        model,
        hp: manifest.hyperparams,
        adam: AdamState { step: manifest.adam_step, m, v },
        shuffle_rng: RngState::from_state(manifest.rng_state),
        epoch: manifest.epoch,
        run_config: manifest.run_config,
    })
}
