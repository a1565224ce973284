//! The full retrieval model: query encoding, feature alignment, candidate
//! pyramid, graph adjustment, and matching scores, assembled on one tape.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{RankedPrediction, ScoredInterval};
use crate::igan::{igan_stack_forward, score_moments, IganCell};
use crate::lang::{lstm_forward, make_dynamic_filters, EmbeddingTable, LstmParams, EMBEDDING_DIM};
use crate::rng::RngState;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::video::{
    align_features, build_pyramid, enumerate_moments, CandidateMoment, ClipFeatures,
    PyramidConfig, PyramidParams,
};

/// Architecture switches. `igan_cells = 0` scores the pyramid features
/// directly; `feature_alignment = false` feeds raw clip features into the
/// pyramid. Both off is the plain single-shot baseline.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Shared hidden width d for language and video features.
    pub d: usize,
    /// Dimension of the stored clip features; projected to d when different.
    pub input_dim: usize,
    pub pyramid: PyramidConfig,
    pub igan_cells: usize,
    pub feature_alignment: bool,
    /// Initial adjacency is this value times the identity.
    pub g0_diagonal: f64,
}

impl ModelConfig {
    pub fn new(d: usize, input_dim: usize, pyramid: PyramidConfig) -> Self {
        Self { d, input_dim, pyramid, igan_cells: 3, feature_alignment: true, g0_diagonal: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.input_dim == 0 {
            return Err(Error::Config("model dims must be positive".into()));
        }
        self.pyramid.validate()
    }

    fn stage_widths(&self) -> Vec<usize> {
        crate::video::stage_widths(&self.pyramid)
    }
}

/// Named parameter tensors in a fixed registration order. The order is the
/// canonical order for initialization draws, optimizer updates, and
/// checkpoint layout.
#[derive(Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        debug_assert!(
            !self.entries.iter().any(|(n, _)| *n == name),
            "duplicate parameter '{name}'"
        );
        self.entries.push((name, tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Tape handles for every parameter of one forward pass.
pub struct WatchedParams {
    vars: HashMap<String, Var>,
}

impl WatchedParams {
    /// Watch every parameter with its stored `requires_grad` flag (training).
    pub fn watch(tape: &mut Tape, params: &ParamSet) -> Self {
        let vars = params.iter().map(|(n, t)| (n.to_string(), tape.watch(t))).collect();
        Self { vars }
    }

    /// Watch every parameter detached (inference).
    pub fn watch_constant(tape: &mut Tape, params: &ParamSet) -> Self {
        let vars = params
            .iter()
            .map(|(n, t)| (n.to_string(), tape.constant(t.clone())))
            .collect();
        Self { vars }
    }

    /// Replace one parameter's handle; lets tests differentiate the model
    /// with respect to a chosen tensor.
    pub fn override_var(&mut self, name: &str, var: Var) {
        self.vars.insert(name.to_string(), var);
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter '{name}' is not on the tape")))
    }
}

/// Everything one forward pass produces.
pub struct ForwardPass {
    pub logits: Var,
    pub probs: Var,
    pub moments: Vec<CandidateMoment>,
    /// Clip attention weights when feature alignment is on.
    pub attention: Option<Var>,
    /// Final adjacency matrix when at least one adjustment cell runs.
    pub adjacency: Option<Var>,
}

/// Model parameters plus configuration.
pub struct MomentModel {
    pub config: ModelConfig,
    pub params: ParamSet,
}

impl MomentModel {
    /// Initialize all parameters from the seed's "params" stream, drawing in
    /// registration order. Weights are uniform in [-1/sqrt(fan_in),
    /// 1/sqrt(fan_in)]; biases are zero except the LSTM forget-gate slice,
    /// which starts at 1.0.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RngState::derive(seed, "params");
        let d = config.d;
        let mut params = ParamSet::default();

        let bound = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let w = bound(EMBEDDING_DIM);
        params.register(
            "lstm.w_input",
            Tensor::uniform(vec![EMBEDDING_DIM, 4 * d], -w, w, &mut rng).with_grad(),
        );
        let w = bound(d);
        params.register(
            "lstm.w_recurrent",
            Tensor::uniform(vec![d, 4 * d], -w, w, &mut rng).with_grad(),
        );
        let mut lstm_bias = Tensor::zeros(vec![1, 4 * d]);
        for j in d..2 * d {
            lstm_bias.values_mut()[j] = 1.0;
        }
        params.register("lstm.bias", lstm_bias.with_grad());

        // The filter bank drives both the clip-attention softmax and the
        // matching scores; a cool start keeps the softmax temperate on
        // backbone-scale features, and the score path can grow through the
        // downstream projections instead.
        let wf = bound(d) * 0.1;
        params.register("filter.weight", Tensor::uniform(vec![d, d], -wf, wf, &mut rng).with_grad());
        params.register("filter.bias", Tensor::zeros(vec![1, d]).with_grad());

        if config.input_dim != d {
            let wp = bound(config.input_dim);
            params.register(
                "input_proj.weight",
                Tensor::uniform(vec![config.input_dim, d], -wp, wp, &mut rng).with_grad(),
            );
            params.register("input_proj.bias", Tensor::zeros(vec![1, d]).with_grad());
        }

        for (idx, width) in config.stage_widths().into_iter().enumerate() {
            let stage = idx + 1;
            let wk = bound(width * d);
            params.register(
                format!("pyramid.stage{stage}.kernel"),
                Tensor::uniform(vec![width, d, d], -wk, wk, &mut rng).with_grad(),
            );
            params.register(format!("pyramid.stage{stage}.bias"), Tensor::zeros(vec![1, d]).with_grad());
        }

        let wg = bound(d);
        for cell in 1..=config.igan_cells {
            params.register(
                format!("igan.cell{cell}.w_residual"),
                Tensor::uniform(vec![d, d], -wg, wg, &mut rng).with_grad(),
            );
            params.register(
                format!("igan.cell{cell}.w_output"),
                Tensor::uniform(vec![d, d], -wg, wg, &mut rng).with_grad(),
            );
        }

        Ok(Self { config, params })
    }

    /// Forward pass from token ids and an on-tape clip feature matrix.
    pub fn forward(
        &self,
        tape: &mut Tape,
        token_ids: &[usize],
        table: &EmbeddingTable,
        clip_features: Var,
        duration_seconds: f64,
        watched: &WatchedParams,
    ) -> Result<ForwardPass> {
        let d = self.config.d;
        let lstm = LstmParams {
            w_input: watched.get("lstm.w_input")?,
            w_recurrent: watched.get("lstm.w_recurrent")?,
            bias: watched.get("lstm.bias")?,
            hidden: d,
        };
        let encoding = lstm_forward(tape, token_ids, &lstm, table)?;
        let filter = make_dynamic_filters(
            tape,
            &encoding,
            watched.get("filter.weight")?,
            watched.get("filter.bias")?,
        )?;

        let raw_dim = tape.shape(clip_features)[1];
        if raw_dim != self.config.input_dim {
            return Err(Error::Shape {
                op: "forward",
                detail: format!("clip features have dim {raw_dim}, model expects {}", self.config.input_dim),
            });
        }
        let f_v = if self.config.input_dim != d {
            let projected = tape.matmul(clip_features, watched.get("input_proj.weight")?)?;
            tape.add_bias(projected, watched.get("input_proj.bias")?)?
        } else {
            clip_features
        };

        let (pyramid_input, attention) = if self.config.feature_alignment {
            let aligned = align_features(tape, f_v, &filter)?;
            // The attention weights sum to 1 over T_f clips; rescaling by
            // T_f makes them mean-one, so uniform attention leaves the clip
            // features untouched and alignment strictly reweights them.
            let rescaled = tape.scale(aligned.features, self.config.pyramid.t_f as f64);
            (rescaled, Some(aligned.attention))
        } else {
            (f_v, None)
        };

        let stages = self.config.stage_widths().len();
        let mut kernels = Vec::with_capacity(stages);
        let mut biases = Vec::with_capacity(stages);
        for stage in 1..=stages {
            kernels.push(watched.get(&format!("pyramid.stage{stage}.kernel"))?);
            biases.push(watched.get(&format!("pyramid.stage{stage}.bias"))?);
        }
        let pyramid_params = PyramidParams { stage_kernels: kernels, stage_biases: biases };
        let moments_features = build_pyramid(tape, pyramid_input, &self.config.pyramid, &pyramid_params)?;

        let (final_nodes, adjacency) = if self.config.igan_cells > 0 {
            let cells: Vec<IganCell> = (1..=self.config.igan_cells)
                .map(|c| {
                    Ok(IganCell {
                        w_residual: watched.get(&format!("igan.cell{c}.w_residual"))?,
                        w_output: watched.get(&format!("igan.cell{c}.w_output"))?,
                    })
                })
                .collect::<Result<_>>()?;
            let state =
                igan_stack_forward(tape, moments_features.features, &cells, self.config.g0_diagonal)?;
            (state.nodes, Some(state.adjacency))
        } else {
            (moments_features.features, None)
        };

        let scores = score_moments(tape, final_nodes, &filter)?;
        let moments = enumerate_moments(&self.config.pyramid, duration_seconds);
        debug_assert_eq!(moments.len(), moments_features.count);
        Ok(ForwardPass {
            logits: scores.logits,
            probs: scores.probs,
            moments,
            attention,
            adjacency,
        })
    }

    /// Convenience wrapper that registers the clip features as constants.
    pub fn forward_features(
        &self,
        tape: &mut Tape,
        token_ids: &[usize],
        table: &EmbeddingTable,
        features: &ClipFeatures,
        watched: &WatchedParams,
    ) -> Result<ForwardPass> {
        let clip = tape.constant(features.features.clone());
        self.forward(tape, token_ids, table, clip, features.duration_seconds(), watched)
    }

    /// Inference: rank all candidate moments for one query, highest score
    /// first, ties broken by enumeration order.
    pub fn predict(
        &self,
        query_id: u64,
        token_ids: &[usize],
        table: &EmbeddingTable,
        features: &ClipFeatures,
    ) -> Result<RankedPrediction> {
        let mut tape = Tape::new();
        let watched = WatchedParams::watch_constant(&mut tape, &self.params);
        let pass = self.forward_features(&mut tape, token_ids, table, features, &watched)?;
        let probs = tape.values(pass.probs);
        let mut order: Vec<usize> = (0..pass.moments.len()).collect();
        order.sort_by(|&a, &b| {
            probs[b].partial_cmp(&probs[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
        });
        let ranked = order
            .into_iter()
            .map(|i| ScoredInterval {
                start_seconds: pass.moments[i].start_seconds,
                end_seconds: pass.moments[i].end_seconds,
                score: probs[i],
            })
            .collect();
        Ok(RankedPrediction { query_id, ranked })
    }

    /// Inference with the final adjacency matrix extracted, for graph export.
    pub fn adjacency_snapshot(
        &self,
        token_ids: &[usize],
        table: &EmbeddingTable,
        features: &ClipFeatures,
    ) -> Result<(Vec<CandidateMoment>, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let watched = WatchedParams::watch_constant(&mut tape, &self.params);
        let pass = self.forward_features(&mut tape, token_ids, table, features, &watched)?;
        let n = pass.moments.len();
        let adjacency = match pass.adjacency {
            Some(var) => {
                let flat = tape.values(var);
                (0..n).map(|i| flat[i * n..(i + 1) * n].to_vec()).collect()
            }
            None => (0..n)
                .map(|i| (0..n).map(|j| if i == j { self.config.g0_diagonal } else { 0.0 }).collect())
                .collect(),
        };
        Ok((pass.moments, adjacency))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::{tokenize, Vocabulary, UNKNOWN_TOKEN};

    fn micro_vocab() -> Vocabulary {
        Vocabulary::new(vec![
            UNKNOWN_TOKEN.to_string(),
            "red".to_string(),
            "cube".to_string(),
            "spins".to_string(),
        ])
        .unwrap()
    }

    fn micro_config(d: usize) -> ModelConfig {
        // T_f = 4 clips pooled by 2 into a 2-cell span chain: N = 3.
        let mut config = ModelConfig::new(d, d, PyramidConfig::span_chain(2, 2));
        config.igan_cells = 1;
        config
    }

    fn micro_features(d: usize, seed: u64) -> ClipFeatures {
        let mut rng = RngState::seed_from_u64(seed);
        ClipFeatures::new("micro", Tensor::uniform(vec![4, d], -1.0, 1.0, &mut rng), 1.0).unwrap()
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = MomentModel::init(micro_config(8), 7).unwrap();
        let b = MomentModel::init(micro_config(8), 7).unwrap();
        let c = MomentModel::init(micro_config(8), 8).unwrap();
        for ((na, ta), (nb, tb)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(na, nb);
            let bits_a: Vec<u64> = ta.values().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = tb.values().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        let wa = a.params.get("lstm.w_input").unwrap();
        let wc = c.params.get("lstm.w_input").unwrap();
        assert_ne!(wa.values(), wc.values());
    }

    #[test]
    fn forget_gate_bias_starts_at_one() {
        let model = MomentModel::init(micro_config(4), 1).unwrap();
        let bias = model.params.get("lstm.bias").unwrap();
        for j in 0..16 {
            let expect = if (4..8).contains(&j) { 1.0 } else { 0.0 };
            assert_eq!(bias.values()[j], expect);
        }
    }

    #[test]
    fn forward_produces_probabilities_per_candidate() {
        let d = 6;
        let model = MomentModel::init(micro_config(d), 3).unwrap();
        let vocab = micro_vocab();
        let table = EmbeddingTable::build(&vocab, 3);
        let ids = tokenize("red cube spins", &vocab).unwrap();
        let features = micro_features(d, 5);
        let mut tape = Tape::new();
        let watched = WatchedParams::watch_constant(&mut tape, &model.params);
        let pass = model.forward_features(&mut tape, &ids, &table, &features, &watched).unwrap();
        assert_eq!(pass.moments.len(), 3);
        assert_eq!(tape.shape(pass.probs), &[3, 1]);
        for p in tape.values(pass.probs) {
            assert!((0.0..1.0).contains(p) && *p > 0.0);
        }
        let att = pass.attention.expect("alignment on");
        let total: f64 = tape.values(att).iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert!(pass.adjacency.is_some());
    }

    #[test]
    fn forward_without_alignment_or_cells() {
        let d = 4;
        let mut config = micro_config(d);
        config.feature_alignment = false;
        config.igan_cells = 0;
        let model = MomentModel::init(config, 9).unwrap();
        let vocab = micro_vocab();
        let table = EmbeddingTable::build(&vocab, 9);
        let ids = tokenize("cube", &vocab).unwrap();
        let features = micro_features(d, 6);
        let mut tape = Tape::new();
        let watched = WatchedParams::watch_constant(&mut tape, &model.params);
        let pass = model.forward_features(&mut tape, &ids, &table, &features, &watched).unwrap();
        assert!(pass.attention.is_none());
        assert!(pass.adjacency.is_none());
        assert!(model.params.get("igan.cell1.w_residual").is_none());
    }

    #[test]
    fn input_projection_registered_only_when_needed() {
        let d = 4;
        let mut config = micro_config(d);
        config.input_dim = 10;
        let with_proj = MomentModel::init(config, 2).unwrap();
        assert!(with_proj.params.get("input_proj.weight").is_some());
        let without = MomentModel::init(micro_config(d), 2).unwrap();
        assert!(without.params.get("input_proj.weight").is_none());

        // Forward consumes 10-dim features and still yields 3 candidates.
        let vocab = micro_vocab();
        let table = EmbeddingTable::build(&vocab, 2);
        let ids = tokenize("red", &vocab).unwrap();
        let mut rng = RngState::seed_from_u64(8);
        let features =
            ClipFeatures::new("wide", Tensor::uniform(vec![4, 10], -1.0, 1.0, &mut rng), 1.0).unwrap();
        let mut tape = Tape::new();
        let watched = WatchedParams::watch_constant(&mut tape, &with_proj.params);
        let pass = with_proj.forward_features(&mut tape, &ids, &table, &features, &watched).unwrap();
        assert_eq!(pass.moments.len(), 3);
    }

    #[test]
    fn forward_rejects_wrong_feature_dim() {
        let d = 4;
        let model = MomentModel::init(micro_config(d), 2).unwrap();
        let vocab = micro_vocab();
        let table = EmbeddingTable::build(&vocab, 2);
        let ids = tokenize("red", &vocab).unwrap();
        let features = micro_features(d + 1, 6);
        let mut tape = Tape::new();
        let watched = WatchedParams::watch_constant(&mut tape, &model.params);
        assert!(model.forward_features(&mut tape, &ids, &table, &features, &watched).is_err());
    }

    #[test]
    fn predict_ranks_by_score_desc() {
        let d = 5;
        let model = MomentModel::init(micro_config(d), 11).unwrap();
        let vocab = micro_vocab();
        let table = EmbeddingTable::build(&vocab, 11);
        let ids = tokenize("red cube", &vocab).unwrap();
        let features = micro_features(d, 12);
        let pred = model.predict(0, &ids, &table, &features).unwrap();
        assert_eq!(pred.ranked.len(), 3);
        for w in pred.ranked.windows(2) {
            assert!(w[0].score >= w[1].score);
        }
    }

    #[test]
    fn composed_loss_passes_fd_check_on_micro_instance() {
        // Full forward + loss, differentiated with respect to a few tensors.
        // Walk seeds until the instance sits away from relu/max kinks, the
        // same policy the gradcheck suite uses.
        let d = 8;
        let vocab = micro_vocab();
        let table = EmbeddingTable::build(&vocab, 21);
        let ids = tokenize("red cube spins", &vocab).unwrap();
        let targets = vec![1.0, 0.0, 0.7];
        let (model, features) = (21..200)
            .map(|seed| (MomentModel::init(micro_config(d), seed).unwrap(), micro_features(d, seed + 1)))
            .find(|(model, features)| {
                let mut probe = Tape::new();
                let watched = WatchedParams::watch_constant(&mut probe, &model.params);
                let clip = probe.constant(features.features.clone());
                let pass = model.forward(&mut probe, &ids, &table, clip, 4.0, &watched).unwrap();
                probe.bce_with_logits_sum(pass.logits, &targets).unwrap();
                probe.min_kink_distance() > 1e-3
            })
            .expect("a kink-clear micro-instance exists");

        let check_param = |name: &str| -> f64 {
            let base = model.params.get(name).unwrap().clone();
            crate::gradcheck::finite_difference_check_multi(
                |tape, var| {
                    let mut watched = WatchedParams::watch_constant(tape, &model.params);
                    watched.override_var(name, var);
                    let clip = tape.constant(features.features.clone());
                    let pass = model.forward(tape, &ids, &table, clip, 4.0, &watched)?;
                    tape.bce_with_logits_sum(pass.logits, &targets)
                },
                &base,
                &[1e-4, 1e-3],
            )
            .unwrap()
        };

        for name in [
            "filter.weight",
            "lstm.bias",
            "pyramid.stage1.kernel",
            "igan.cell1.w_residual",
            "igan.cell1.w_output",
        ] {
            let err = check_param(name);
            assert!(err <= 1e-4, "{name}: max relative error {err}");
        }

        // And with respect to the input clip features.
        let err = crate::gradcheck::finite_difference_check_multi(
            |tape, clip| {
                let watched = WatchedParams::watch_constant(tape, &model.params);
                let pass = model.forward(tape, &ids, &table, clip, 4.0, &watched)?;
                tape.bce_with_logits_sum(pass.logits, &targets)
            },
            &features.features,
            &[1e-4, 1e-3],
        )
        .unwrap();
        assert!(err <= 1e-4, "clip features: max relative error {err}");
    }

    #[test]
    fn adjacency_snapshot_matches_candidate_count() {
        let d = 4;
        let model = MomentModel::init(micro_config(d), 31).unwrap();
        let vocab = micro_vocab();
        let table = EmbeddingTable::build(&vocab, 31);
        let ids = tokenize("spins", &vocab).unwrap();
        let features = micro_features(d, 32);
        let (moments, adjacency) = model.adjacency_snapshot(&ids, &table, &features).unwrap();
        assert_eq!(moments.len(), 3);
        assert_eq!(adjacency.len(), 3);
        assert!(adjacency.iter().all(|row| row.len() == 3));
        assert!(adjacency.iter().flatten().all(|v| v.abs() < 1.0));
    }
}
