//! Video-side encoding: query-conditioned feature alignment and the
//! multi-scale candidate-moment pyramid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lang::DynamicFilter;
use crate::tape::{Padding, Tape, Var};
use crate::tensor::Tensor;

/// Clip-level features for one video: `[T_f, dim]` values plus timing.
#[derive(Clone, Debug)]
pub struct ClipFeatures {
    pub video_id: String,
    pub features: Tensor,
    pub clip_duration_seconds: f64,
}

impl ClipFeatures {
    pub fn new(video_id: impl Into<String>, features: Tensor, clip_duration_seconds: f64) -> Result<Self> {
        features.dims2("clip_features")?;
        if clip_duration_seconds <= 0.0 {
            return Err(Error::Input("clip duration must be positive".into()));
        }
        Ok(Self { video_id: video_id.into(), features, clip_duration_seconds })
    }

    pub fn num_clips(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn duration_seconds(&self) -> f64 {
        self.clip_duration_seconds * self.num_clips() as f64
    }
}

/// How the stacked pyramid stages shrink the temporal axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PyramidStyle {
    /// Same-padded convolutions with pooling between stages; each layer
    /// halves the cell count. Cells tile the video at one scale per layer.
    StridedConv { conv_width: usize, pool_stride: usize },
    /// Width-2 valid convolutions with stride 1 and no pooling; layer k
    /// enumerates every consecutive k-segment span.
    SpanChain,
}

/// Geometry of the candidate pyramid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PyramidConfig {
    pub name: String,
    /// Number of input clips the pyramid expects.
    pub t_f: usize,
    /// Initial max-pool window and stride.
    pub initial_pool_stride: usize,
    /// Cells per layer, top layer last.
    pub layer_cells: Vec<usize>,
    pub style: PyramidStyle,
}

impl PyramidConfig {
    /// 256 clips, pool to 16 cells, then width-3 convolutions with stride-2
    /// pooling: layers {16, 8, 4, 2, 1}, 31 candidates.
    pub fn charades() -> Self {
        Self {
            name: "charades".into(),
            t_f: 256,
            initial_pool_stride: 16,
            layer_cells: vec![16, 8, 4, 2, 1],
            style: PyramidStyle::StridedConv { conv_width: 3, pool_stride: 2 },
        }
    }

    /// 240 clips, pool to 6 segments, then width-2 valid convolutions:
    /// layers {6, 5, 4, 3, 2, 1}, 21 candidates covering every consecutive
    /// segment span.
    pub fn didemo() -> Self {
        Self {
            name: "didemo".into(),
            t_f: 240,
            initial_pool_stride: 40,
            layer_cells: (1..=6).rev().collect(),
            style: PyramidStyle::SpanChain,
        }
    }

    /// Span-chain pyramid over `base` cells of `pool` clips each; used by the
    /// micro-instance tests.
    pub fn span_chain(base: usize, pool: usize) -> Self {
        Self {
            name: format!("span{base}x{pool}"),
            t_f: base * pool,
            initial_pool_stride: pool,
            layer_cells: (1..=base).rev().collect(),
            style: PyramidStyle::SpanChain,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "charades" => Ok(Self::charades()),
            "didemo" => Ok(Self::didemo()),
            other => Err(Error::Config(format!(
                "unknown preset '{other}' (expected 'charades' or 'didemo')"
            ))),
        }
    }

    pub fn base_cells(&self) -> usize {
        self.t_f / self.initial_pool_stride
    }

    pub fn num_layers(&self) -> usize {
        self.layer_cells.len()
    }

    /// Total candidate count N.
    pub fn num_candidates(&self) -> usize {
        self.layer_cells.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_f == 0 || self.initial_pool_stride == 0 || self.t_f % self.initial_pool_stride != 0 {
            return Err(Error::Config(format!(
                "T_f {} must be a positive multiple of the pooling stride {}",
                self.t_f, self.initial_pool_stride
            )));
        }
        let base = self.base_cells();
        if self.layer_cells.is_empty() || self.layer_cells[0] != base {
            return Err(Error::Config(format!(
                "layer cells {:?} must start at T_f / p = {base}",
                self.layer_cells
            )));
        }
        match self.style {
            PyramidStyle::StridedConv { conv_width, pool_stride } => {
                if conv_width == 0 || pool_stride < 2 {
                    return Err(Error::Config("strided pyramid needs conv width >= 1, pool stride >= 2".into()));
                }
                for w in self.layer_cells.windows(2) {
                    if w[1] != w[0] / pool_stride || w[1] == 0 {
                        return Err(Error::Config(format!(
                            "strided layer cells {:?} must shrink by the pool stride {pool_stride}",
                            self.layer_cells
                        )));
                    }
                }
            }
            PyramidStyle::SpanChain => {
                let expect: Vec<usize> = (1..=base).rev().collect();
                if self.layer_cells != expect {
                    return Err(Error::Config(format!(
                        "span-chain layer cells {:?} must count down from {base} to 1",
                        self.layer_cells
                    )));
                }
            }
        }
        Ok(())
    }

    /// Clip extent [start, end) of cell `j` in 1-based layer `k`.
    fn cell_extent_clips(&self, layer: usize, cell: usize) -> (usize, usize) {
        match self.style {
            PyramidStyle::StridedConv { .. } => {
                let span = self.t_f / self.layer_cells[layer - 1];
                (cell * span, (cell + 1) * span)
            }
            PyramidStyle::SpanChain => {
                let p = self.initial_pool_stride;
                (cell * p, (cell + layer) * p)
            }
        }
    }
}

/// One anchor of the pyramid with its temporal extent in seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateMoment {
    pub layer: usize,
    pub cell: usize,
    pub start_seconds: f64,
    pub end_seconds: f64,
}

/// All candidate moments in layer-major order (layer ascending, cell
/// ascending), matching the row order of the pyramid features.
pub fn enumerate_moments(config: &PyramidConfig, duration_seconds: f64) -> Vec<CandidateMoment> {
    let clip = duration_seconds / config.t_f as f64;
    let mut moments = Vec::with_capacity(config.num_candidates());
    for (layer_idx, &cells) in config.layer_cells.iter().enumerate() {
        let layer = layer_idx + 1;
        for cell in 0..cells {
            let (start, end) = config.cell_extent_clips(layer, cell);
            moments.push(CandidateMoment {
                layer,
                cell,
                start_seconds: start as f64 * clip,
                end_seconds: end as f64 * clip,
            });
        }
    }
    moments
}

/// Output of the alignment step: the response map, the clip attention, and
/// the reweighted features, all on the tape.
#[derive(Debug)]
pub struct AlignedFeatures {
    /// `[T_f, L]` response map M.
    pub response: Var,
    /// `[T_f, 1]` attention weights, summing to 1.
    pub attention: Var,
    /// `[T_f, d]` clip features rescaled by attention.
    pub features: Var,
}

/// Correlate every clip feature with every word filter, pool the response
/// over words, softmax over clips, and rescale the clip features.
pub fn align_features(tape: &mut Tape, clip_features: Var, filter: &DynamicFilter) -> Result<AlignedFeatures> {
    let d_clip = tape.shape(clip_features)[1];
    let d_filter = tape.shape(filter.gamma)[0];
    if d_clip != d_filter {
        return Err(Error::Shape {
            op: "align_features",
            detail: format!("clip feature dim {d_clip} vs filter dim {d_filter}"),
        });
    }
    let response = tape.matmul(clip_features, filter.gamma)?;
    let word_totals = tape.row_sums(response)?;
    let attention = tape.softmax(word_totals);
    let features = tape.scale_rows(clip_features, attention)?;
    Ok(AlignedFeatures { response, attention, features })
}

/// Learned weights for one pyramid: per-stage convolution kernels and
/// biases, one stage per layer. Stage 1 projects the pooled base into layer
/// 1 (width 1 for span chains); later span-chain stages are the width-2
/// convolutions that widen the span by one segment.
pub struct PyramidParams {
    pub stage_kernels: Vec<Var>,
    pub stage_biases: Vec<Var>,
}

/// Kernel width of each convolution stage for a pyramid config.
pub fn stage_widths(config: &PyramidConfig) -> Vec<usize> {
    match config.style {
        PyramidStyle::StridedConv { conv_width, .. } => vec![conv_width; config.num_layers()],
        PyramidStyle::SpanChain => {
            let mut widths = vec![2; config.num_layers()];
            widths[0] = 1;
            widths
        }
    }
}

/// Candidate-moment feature matrix `f_m: [N, d]`, rows in layer-major order.
pub struct MomentFeatures {
    pub features: Var,
    pub count: usize,
}

/// Pool the (aligned) clip features and run the convolution stages defined by
/// the config, concatenating every layer's cells into `f_m`.
pub fn build_pyramid(
    tape: &mut Tape,
    clip_features: Var,
    config: &PyramidConfig,
    params: &PyramidParams,
) -> Result<MomentFeatures> {
    config.validate()?;
    let t_in = tape.shape(clip_features)[0];
    if t_in != config.t_f {
        return Err(Error::Shape {
            op: "build_pyramid",
            detail: format!("expected {} clips for preset '{}', got {t_in}", config.t_f, config.name),
        });
    }
    let p = config.initial_pool_stride;
    let base = tape.max_pool1d(clip_features, p, p)?;

    let mut layers: Vec<Var> = Vec::with_capacity(config.num_layers());
    match config.style {
        PyramidStyle::StridedConv { conv_width: _, pool_stride } => {
            if params.stage_kernels.len() != config.num_layers() {
                return Err(Error::Config(format!(
                    "strided pyramid needs {} stages, got {}",
                    config.num_layers(),
                    params.stage_kernels.len()
                )));
            }
            let mut current = base;
            for stage in 0..config.num_layers() {
                let conv = tape.conv1d(current, params.stage_kernels[stage], 1, Padding::Same)?;
                let biased = tape.add_bias(conv, params.stage_biases[stage])?;
                let layer = tape.relu(biased);
                layers.push(layer);
                if stage + 1 < config.num_layers() {
                    current = tape.max_pool1d(layer, pool_stride, pool_stride)?;
                }
            }
        }
        PyramidStyle::SpanChain => {
            let stages = config.num_layers();
            if params.stage_kernels.len() != stages {
                return Err(Error::Config(format!(
                    "span-chain pyramid needs {stages} stages, got {}",
                    params.stage_kernels.len()
                )));
            }
            // Stage 1 is a width-1 convolution of the pooled base, so layer
            // 1 is a learned map like every other layer; each width-2 stage
            // then widens the span by one segment.
            let mut current = base;
            for stage in 0..stages {
                let conv = tape.conv1d(current, params.stage_kernels[stage], 1, Padding::Valid)?;
                let biased = tape.add_bias(conv, params.stage_biases[stage])?;
                let layer = tape.relu(biased);
                layers.push(layer);
                current = layer;
            }
        }
    }

    for (layer, var) in layers.iter().enumerate() {
        let got = tape.shape(*var)[0];
        let want = config.layer_cells[layer];
        if got != want {
            return Err(Error::Config(format!(
                "layer {} produced {got} cells, preset '{}' promises {want}",
                layer + 1,
                config.name
            )));
        }
    }
    let features = tape.concat_rows(&layers)?;
    let count = tape.shape(features)[0];
    Ok(MomentFeatures { features, count })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    fn filter_from(tape: &mut Tape, values: Vec<f64>, d: usize, words: usize) -> DynamicFilter {
        let gamma = tape.constant(Tensor::from_vec(vec![d, words], values).unwrap());
        DynamicFilter { gamma, words }
    }

    fn random_params(tape: &mut Tape, config: &PyramidConfig, d: usize, rng: &mut RngState) -> PyramidParams {
        let mut kernels = Vec::new();
        let mut biases = Vec::new();
        for width in stage_widths(config) {
            kernels.push(tape.watch(&Tensor::uniform(vec![width, d, d], -0.3, 0.3, rng)));
            biases.push(tape.watch(&Tensor::uniform(vec![1, d], -0.1, 0.1, rng)));
        }
        PyramidParams { stage_kernels: kernels, stage_biases: biases }
    }

    #[test]
    fn presets_have_published_candidate_counts() {
        assert_eq!(PyramidConfig::charades().num_candidates(), 31);
        assert_eq!(PyramidConfig::didemo().num_candidates(), 21);
        PyramidConfig::charades().validate().unwrap();
        PyramidConfig::didemo().validate().unwrap();
    }

    #[test]
    fn didemo_enumerates_five_second_segments() {
        let moments = enumerate_moments(&PyramidConfig::didemo(), 30.0);
        assert_eq!(moments.len(), 21);
        for (j, m) in moments.iter().take(6).enumerate() {
            assert_eq!(m.layer, 1);
            assert!((m.start_seconds - 5.0 * j as f64).abs() < 1e-12);
            assert!((m.end_seconds - 5.0 * (j + 1) as f64).abs() < 1e-12);
        }
        let full = moments.last().unwrap();
        assert_eq!(full.layer, 6);
        assert!((full.start_seconds - 0.0).abs() < 1e-12);
        assert!((full.end_seconds - 30.0).abs() < 1e-12);
    }

    #[test]
    fn charades_layer_one_extent() {
        let moments = enumerate_moments(&PyramidConfig::charades(), 64.0);
        assert_eq!(moments.len(), 31);
        assert!((moments[0].start_seconds - 0.0).abs() < 1e-12);
        assert!((moments[0].end_seconds - 4.0).abs() < 1e-12);
    }

    #[test]
    fn didemo_extents_match_brute_force_span_enumeration() {
        let duration = 30.0;
        let moments = enumerate_moments(&PyramidConfig::didemo(), duration);
        let seg = duration / 6.0;
        let mut expected: Vec<(u64, u64)> = Vec::new();
        for len in 1..=6usize {
            for start in 0..=(6 - len) {
                expected.push((
                    ((start as f64) * seg).to_bits(),
                    ((start + len) as f64 * seg).to_bits(),
                ));
            }
        }
        let mut got: Vec<(u64, u64)> = moments
            .iter()
            .map(|m| (m.start_seconds.to_bits(), m.end_seconds.to_bits()))
            .collect();
        expected.sort_unstable();
        got.sort_unstable();
        assert_eq!(got, expected);
    }

    #[test]
    fn extents_are_valid_and_increasing_within_layers() {
        for (config, duration) in [(PyramidConfig::charades(), 48.0), (PyramidConfig::didemo(), 30.0)] {
            let moments = enumerate_moments(&config, duration);
            assert_eq!(moments.len(), config.num_candidates());
            let mut prev: Option<&CandidateMoment> = None;
            for m in &moments {
                assert!(m.start_seconds >= -1e-12 && m.start_seconds < m.end_seconds);
                assert!(m.end_seconds <= duration + 1e-9);
                if let Some(p) = prev {
                    if p.layer == m.layer {
                        assert!(m.start_seconds > p.start_seconds);
                    }
                }
                prev = Some(m);
            }
        }
    }

    #[test]
    fn align_zero_filter_gives_uniform_attention() {
        let t_f = 4;
        let d = 3;
        let mut tape = Tape::new();
        let mut rng = RngState::seed_from_u64(1);
        let feats = Tensor::uniform(vec![t_f, d], -1.0, 1.0, &mut rng);
        let fv = tape.constant(feats.clone());
        let filter = filter_from(&mut tape, vec![0.0; d * 2], d, 2);
        let aligned = align_features(&mut tape, fv, &filter).unwrap();
        let att = tape.values(aligned.attention);
        for w in att {
            assert!((w - 0.25).abs() < 1e-12);
        }
        let out = tape.values(aligned.features);
        for (o, x) in out.iter().zip(feats.values()) {
            assert!((o - x / t_f as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn align_closed_form_two_clips() {
        // f_v = [[1,0],[0,1]], one word with filter column [1, 0].
        let mut tape = Tape::new();
        let fv = tape.constant(Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let filter = filter_from(&mut tape, vec![1.0, 0.0], 2, 1);
        let aligned = align_features(&mut tape, fv, &filter).unwrap();
        assert_eq!(tape.values(aligned.response), &[1.0, 0.0]);
        let e = std::f64::consts::E;
        let att = tape.values(aligned.attention);
        assert!((att[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((att[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn align_attention_is_permutation_equivariant() {
        let d = 2;
        let rows = [[0.3, -0.1], [1.0, 0.4], [-0.6, 0.9]];
        let perm = [2usize, 0, 1];
        let gamma = vec![0.5, -0.2];

        let run = |order: &[usize]| -> Vec<f64> {
            let mut tape = Tape::new();
            let values: Vec<f64> = order.iter().flat_map(|&i| rows[i].to_vec()).collect();
            let fv = tape.constant(Tensor::from_vec(vec![3, d], values).unwrap());
            let filter = filter_from(&mut tape, gamma.clone(), d, 1);
            let aligned = align_features(&mut tape, fv, &filter).unwrap();
            tape.values(aligned.attention).to_vec()
        };
        let id_att = run(&[0, 1, 2]);
        let perm_att = run(&perm);
        for (slot, &src) in perm.iter().enumerate() {
            assert!((perm_att[slot] - id_att[src]).abs() < 1e-12);
        }
    }

    #[test]
    fn align_dimension_mismatch_names_dims() {
        let mut tape = Tape::new();
        let fv = tape.constant(Tensor::zeros(vec![4, 3]));
        let filter = filter_from(&mut tape, vec![0.0; 2], 2, 1);
        let err = align_features(&mut tape, fv, &filter).unwrap_err();
        assert!(err.to_string().contains('3') && err.to_string().contains('2'));
    }

    #[test]
    fn attention_sums_to_one() {
        let mut rng = RngState::seed_from_u64(4);
        for _ in 0..20 {
            let t_f = 2 + rng.index(30);
            let d = 1 + rng.index(6);
            let words = 1 + rng.index(4);
            let mut tape = Tape::new();
            let fv = tape.constant(Tensor::uniform(vec![t_f, d], -2.0, 2.0, &mut rng));
            let gamma = Tensor::uniform(vec![d, words], -1.0, 1.0, &mut rng);
            let g = tape.constant(gamma);
            let filter = DynamicFilter { gamma: g, words };
            let aligned = align_features(&mut tape, fv, &filter).unwrap();
            let total: f64 = tape.values(aligned.attention).iter().sum();
            assert!((total - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn charades_pyramid_yields_31_rows() {
        let config = PyramidConfig::charades();
        let d = 4;
        let mut rng = RngState::seed_from_u64(2);
        let mut tape = Tape::new();
        let fv = tape.constant(Tensor::uniform(vec![config.t_f, d], -1.0, 1.0, &mut rng));
        let params = random_params(&mut tape, &config, d, &mut rng);
        let fm = build_pyramid(&mut tape, fv, &config, &params).unwrap();
        assert_eq!(fm.count, 31);
        assert_eq!(tape.shape(fm.features), &[31, d]);
        assert_eq!(enumerate_moments(&config, 64.0).len(), fm.count);
    }

    #[test]
    fn didemo_pyramid_yields_21_rows() {
        let config = PyramidConfig::didemo();
        let d = 3;
        let mut rng = RngState::seed_from_u64(3);
        let mut tape = Tape::new();
        let fv = tape.constant(Tensor::uniform(vec![config.t_f, d], -1.0, 1.0, &mut rng));
        let params = random_params(&mut tape, &config, d, &mut rng);
        let fm = build_pyramid(&mut tape, fv, &config, &params).unwrap();
        assert_eq!(fm.count, 21);
        assert_eq!(tape.shape(fm.features), &[21, d]);
    }

    #[test]
    fn pyramid_rejects_wrong_clip_count() {
        let config = PyramidConfig::didemo();
        let d = 2;
        let mut rng = RngState::seed_from_u64(5);
        let mut tape = Tape::new();
        let fv = tape.constant(Tensor::uniform(vec![100, d], -1.0, 1.0, &mut rng));
        let params = random_params(&mut tape, &config, d, &mut rng);
        assert!(build_pyramid(&mut tape, fv, &config, &params).is_err());
    }

    #[test]
    fn span_chain_layer_counts_match_consecutive_span_enumeration() {
        // {6,5,4,3,2,1} equals the number of consecutive spans of 1..6
        // segments over 6 segments: C(6,2) + 6 = 21.
        let config = PyramidConfig::didemo();
        let mut brute = 0;
        for len in 1..=6 {
            brute += 6 - len + 1;
        }
        assert_eq!(brute, 21);
        assert_eq!(config.num_candidates(), brute);
        for (idx, cells) in config.layer_cells.iter().enumerate() {
            assert_eq!(*cells, 6 - idx);
        }
    }
}
