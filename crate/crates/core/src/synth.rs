//! Deterministic synthetic data: videos as labeled event segments with
//! noisy prototype features, and queries whose resolution provably needs
//! semantic alignment (ordinals over repeated events) or temporal reasoning
//! (an "A after B" sentence whose events happen in the opposite order, with
//! a decoy occurrence of A placed before B).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Interval;
use crate::io::{self, Annotation};
use crate::lang::{Vocabulary, UNKNOWN_TOKEN};
use crate::rng::RngState;
use crate::tensor::Tensor;
use crate::video::ClipFeatures;

/// Minimum pairwise angle between event prototypes, degrees.
const MIN_PROTOTYPE_ANGLE_DEG: f64 = 10.0;

/// Counts and knobs for one generated dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthSpec {
    /// "didemo" (6 segments of 40 clips, 30 s) or "charades" (16 segments of
    /// 16 clips, 64 s).
    pub preset: String,
    pub plain: usize,
    pub ordinal: usize,
    pub relational: usize,
    /// Number of event classes (>= 3 once relational queries are requested).
    pub events: usize,
    /// Feature dimension of the emitted clip features.
    pub dim: usize,
    /// L2 norm of each event prototype; backbone-style features carry
    /// norms of tens, and the attention softmax divides by T_f.
    pub feature_scale: f64,
    /// Gaussian noise added per dimension, relative to the prototype scale.
    pub noise: f64,
    /// Probability that a clip carries a random other event's prototype.
    pub distractor_rate: f64,
    /// Amplitude multiplier on distractor clips; gains above 1 let them
    /// dominate max-pooling unless attention suppresses them first.
    pub distractor_gain: f64,
    /// Seeds the sample draw: segment layouts, query choices, noise.
    pub seed: u64,
    /// Seeds the event world (prototype vectors). Datasets that should share
    /// classes (a train set and its held-out set) must share this seed.
    pub class_seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            preset: "didemo".into(),
            plain: 0,
            ordinal: 0,
            relational: 0,
            events: 6,
            dim: 32,
            feature_scale: 32.0,
            noise: 0.1,
            distractor_rate: 0.15,
            distractor_gain: 2.0,
            seed: 0,
            class_seed: 0,
        }
    }
}

/// Segment grid of one preset.
#[derive(Clone, Copy, Debug)]
pub struct SynthGeometry {
    pub segments: usize,
    pub clips_per_segment: usize,
    pub duration_seconds: f64,
}

impl SynthGeometry {
    pub fn for_preset(preset: &str) -> Result<Self> {
        match preset {
            "didemo" => Ok(Self { segments: 6, clips_per_segment: 40, duration_seconds: 30.0 }),
            "charades" => Ok(Self { segments: 16, clips_per_segment: 16, duration_seconds: 64.0 }),
            other => Err(Error::Config(format!(
                "unknown preset '{other}' (expected 'charades' or 'didemo')"
            ))),
        }
    }

    pub fn segment_seconds(&self) -> f64 {
        self.duration_seconds / self.segments as f64
    }

    pub fn clip_seconds(&self) -> f64 {
        self.duration_seconds / (self.segments * self.clips_per_segment) as f64
    }

    fn span_interval(&self, start: usize, len: usize) -> Interval {
        let seg = self.segment_seconds();
        Interval::new(start as f64 * seg, (start + len) as f64 * seg).expect("non-empty span")
    }

    /// Segment-span lengths that coincide with a pyramid anchor, so every
    /// ground truth has an IoU-1.0 candidate.
    fn anchor_span_lengths(&self) -> Vec<usize> {
        match self.segments {
            6 => vec![1, 2, 3],
            _ => vec![1, 2, 4],
        }
    }
}

/// Event classes: a query token and a fixed unit-norm prototype per class.
pub struct EventVocabulary {
    pub tokens: Vec<String>,
    pub prototypes: Vec<Vec<f64>>,
}

impl EventVocabulary {
    /// Draw unit-norm prototypes until every pair is more than 10 degrees
    /// apart.
    pub fn build(events: usize, dim: usize, rng: &mut RngState) -> Result<Self> {
        if events < 2 {
            return Err(Error::Config("need at least 2 event classes".into()));
        }
        let max_cos = MIN_PROTOTYPE_ANGLE_DEG.to_radians().cos();
        for _attempt in 0..1000 {
            let mut prototypes = Vec::with_capacity(events);
            for _ in 0..events {
                let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
                v.iter_mut().for_each(|x| *x /= norm);
                prototypes.push(v);
            }
            let mut ok = true;
            'pairs: for i in 0..events {
                for j in (i + 1)..events {
                    let dot: f64 =
                        prototypes[i].iter().zip(&prototypes[j]).map(|(a, b)| a * b).sum();
                    if dot >= max_cos {
                        ok = false;
                        break 'pairs;
                    }
                }
            }
            if ok {
                let tokens = (0..events).map(|e| format!("ev{e}")).collect();
                return Ok(Self { tokens, prototypes });
            }
        }
        Err(Error::Config(format!(
            "could not place {events} prototypes {MIN_PROTOTYPE_ANGLE_DEG} degrees apart in {dim} dims"
        )))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// One synthetic video: an event label per segment.
#[derive(Clone, Debug)]
pub struct SyntheticVideo {
    pub video_id: String,
    pub segment_events: Vec<usize>,
    pub geometry: SynthGeometry,
}

/// Query semantics, kept alongside the rendered text so the oracle can
/// re-derive the answer independently of the stored annotation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum QueryTemplate {
    Plain { event: usize },
    Ordinal { event: usize, k: usize },
    /// Sentence reads "<target> after <anchor>".
    Relational { target: usize, anchor: usize },
}

#[derive(Clone, Debug)]
pub struct SyntheticQuery {
    pub template: QueryTemplate,
    pub text: String,
    pub ground_truth: Interval,
}

/// A full generated dataset, before or after writing to disk.
pub struct GeneratedDataset {
    pub spec: SynthSpec,
    pub vocab: Vocabulary,
    pub events: EventVocabulary,
    pub videos: Vec<SyntheticVideo>,
    pub queries: Vec<SyntheticQuery>,
}

impl GeneratedDataset {
    pub fn annotations(&self) -> Vec<Annotation> {
        self.videos
            .iter()
            .zip(&self.queries)
            .map(|(video, query)| Annotation {
                video_id: video.video_id.clone(),
                query: query.text.clone(),
                start_seconds: query.ground_truth.start_seconds,
                end_seconds: query.ground_truth.end_seconds,
            })
            .collect()
    }
}

/// Maximal runs of one event: (first segment, one past last).
fn event_runs(segment_events: &[usize], event: usize) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut start = None;
    for (idx, &e) in segment_events.iter().enumerate() {
        match (e == event, start) {
            (true, None) => start = Some(idx),
            (false, Some(s)) => {
                runs.push((s, idx));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push((s, segment_events.len()));
    }
    runs
}

/// Resolve a query against the event sequence by direct scan. Must agree
/// with the stored ground truth on every generated sample.
pub fn oracle_solve(video: &SyntheticVideo, template: &QueryTemplate) -> Result<Interval> {
    let geometry = &video.geometry;
    let events = &video.segment_events;
    match *template {
        QueryTemplate::Plain { event } => {
            let runs = event_runs(events, event);
            match runs.as_slice() {
                [(s, e)] => Ok(geometry.span_interval(*s, e - s)),
                _ => Err(Error::Input(format!(
                    "plain query needs exactly one run of ev{event}, found {}",
                    runs.len()
                ))),
            }
        }
        QueryTemplate::Ordinal { event, k } => {
            let runs = event_runs(events, event);
            if runs.len() < k || k == 0 {
                return Err(Error::Input(format!(
                    "ordinal query needs at least {k} occurrences of ev{event}, found {}",
                    runs.len()
                )));
            }
            let (s, e) = runs[k - 1];
            Ok(geometry.span_interval(s, e - s))
        }
        QueryTemplate::Relational { target, anchor } => {
            let anchor_runs = event_runs(events, anchor);
            let first_anchor =
                anchor_runs.first().ok_or_else(|| Error::Input(format!("no run of ev{anchor}")))?;
            let target_run = event_runs(events, target)
                .into_iter()
                .find(|(s, _)| *s >= first_anchor.1)
                .ok_or_else(|| {
                    Error::Input(format!("no run of ev{target} after ev{anchor}"))
                })?;
            Ok(geometry.span_interval(target_run.0, target_run.1 - target_run.0))
        }
    }
}

const ORDINAL_WORDS: [&str; 3] = ["first", "second", "third"];

fn render(template: &QueryTemplate, events: &EventVocabulary) -> String {
    match *template {
        QueryTemplate::Plain { event } => events.tokens[event].clone(),
        QueryTemplate::Ordinal { event, k } => {
            format!("{} the {} time", events.tokens[event], ORDINAL_WORDS[k - 1])
        }
        QueryTemplate::Relational { target, anchor } => {
            format!("{} after {}", events.tokens[target], events.tokens[anchor])
        }
    }
}

/// Fill every unset segment with an event drawn from `allowed`.
fn fill_rest(segments: &mut [Option<usize>], allowed: &[usize], rng: &mut RngState) {
    for slot in segments.iter_mut() {
        if slot.is_none() {
            *slot = Some(allowed[rng.index(allowed.len())]);
        }
    }
}

/// Distinct sorted positions with a minimum pairwise gap, by rejection.
fn distinct_positions(
    count: usize,
    segments: usize,
    min_gap: usize,
    rng: &mut RngState,
) -> Result<Vec<usize>> {
    for _ in 0..10_000 {
        let mut picks: Vec<usize> = (0..count).map(|_| rng.index(segments)).collect();
        picks.sort_unstable();
        picks.dedup();
        if picks.len() != count {
            continue;
        }
        if picks.windows(2).all(|w| w[1] - w[0] >= min_gap) {
            return Ok(picks);
        }
    }
    Err(Error::Config(format!(
        "cannot place {count} positions with gap {min_gap} in {segments} segments"
    )))
}

fn build_plain(
    geometry: &SynthGeometry,
    events: &EventVocabulary,
    rng: &mut RngState,
) -> Result<(Vec<usize>, QueryTemplate, Interval)> {
    let event = rng.index(events.len());
    let lengths = geometry.anchor_span_lengths();
    let len = lengths[rng.index(lengths.len())];
    let starts = geometry.segments / len;
    let start = len * rng.index(starts);
    let mut segments = vec![None; geometry.segments];
    for slot in segments.iter_mut().skip(start).take(len) {
        *slot = Some(event);
    }
    let others: Vec<usize> = (0..events.len()).filter(|&e| e != event).collect();
    fill_rest(&mut segments, &others, rng);
    let segments: Vec<usize> = segments.into_iter().map(Option::unwrap).collect();
    Ok((segments, QueryTemplate::Plain { event }, geometry.span_interval(start, len)))
}

fn build_ordinal(
    geometry: &SynthGeometry,
    events: &EventVocabulary,
    rng: &mut RngState,
) -> Result<(Vec<usize>, QueryTemplate, Interval)> {
    let event = rng.index(events.len());
    let k = 2 + rng.index(2); // second or third occurrence
    if 2 * k - 1 > geometry.segments {
        return Err(Error::Config(format!(
            "ordinal k={k} does not fit {} segments",
            geometry.segments
        )));
    }
    let positions = distinct_positions(k, geometry.segments, 2, rng)?;
    let mut segments = vec![None; geometry.segments];
    for &p in &positions {
        segments[p] = Some(event);
    }
    let others: Vec<usize> = (0..events.len()).filter(|&e| e != event).collect();
    fill_rest(&mut segments, &others, rng);
    let segments: Vec<usize> = segments.into_iter().map(Option::unwrap).collect();
    let target = positions[k - 1];
    Ok((segments, QueryTemplate::Ordinal { event, k }, geometry.span_interval(target, 1)))
}

fn build_relational(
    geometry: &SynthGeometry,
    events: &EventVocabulary,
    rng: &mut RngState,
) -> Result<(Vec<usize>, QueryTemplate, Interval)> {
    if events.len() < 3 {
        return Err(Error::Config("relational queries need at least 3 event classes".into()));
    }
    let target = rng.index(events.len());
    let mut anchor = rng.index(events.len());
    while anchor == target {
        anchor = rng.index(events.len());
    }
    // Decoy target first, then the anchor, then the true target: a matcher
    // that ignores order lands on the decoy.
    let positions = distinct_positions(3, geometry.segments, 1, rng)?;
    let (decoy, anchor_pos, answer) = (positions[0], positions[1], positions[2]);
    let mut segments = vec![None; geometry.segments];
    segments[decoy] = Some(target);
    segments[anchor_pos] = Some(anchor);
    segments[answer] = Some(target);
    let fillers: Vec<usize> =
        (0..events.len()).filter(|&e| e != target && e != anchor).collect();
    fill_rest(&mut segments, &fillers, rng);
    let segments: Vec<usize> = segments.into_iter().map(Option::unwrap).collect();
    Ok((
        segments,
        QueryTemplate::Relational { target, anchor },
        geometry.span_interval(answer, 1),
    ))
}

/// Clip features for one video: the segment's prototype (or, at the
/// distractor rate, another event's) plus Gaussian noise on every dimension.
/// Draws from `rng` in video order; `write_dataset` derives its stream from
/// (seed, "synth-features").
pub fn synth_features(
    video: &SyntheticVideo,
    events: &EventVocabulary,
    spec: &SynthSpec,
    rng: &mut RngState,
) -> ClipFeatures {
    let geometry = &video.geometry;
    let t_f = geometry.segments * geometry.clips_per_segment;
    let mut values = Vec::with_capacity(t_f * spec.dim);
    for &label in &video.segment_events {
        for _ in 0..geometry.clips_per_segment {
            let (effective, gain) = if rng.uniform01() < spec.distractor_rate {
                let mut other = rng.index(events.len());
                while other == label {
                    other = rng.index(events.len());
                }
                (other, spec.distractor_gain)
            } else {
                (label, 1.0)
            };
            for j in 0..spec.dim {
                let clean = events.prototypes[effective][j];
                values.push(gain * spec.feature_scale * (clean + spec.noise * rng.normal()));
            }
        }
    }
    let tensor = Tensor::from_vec(vec![t_f, spec.dim], values).expect("geometry is consistent");
    ClipFeatures::new(video.video_id.clone(), tensor, geometry.clip_seconds())
        .expect("positive clip duration")
}

/// Closed vocabulary of the generator: the unknown token, event tokens, and
/// the template glue words.
pub fn synth_vocabulary(events: &EventVocabulary) -> Result<Vocabulary> {
    let mut tokens = vec![UNKNOWN_TOKEN.to_string()];
    tokens.extend(events.tokens.iter().cloned());
    for w in ["the", "first", "second", "third", "time", "after", "before"] {
        tokens.push(w.to_string());
    }
    Vocabulary::new(tokens)
}

/// Generate the full dataset in memory. Everything is a pure function of the
/// spec, so equal specs produce bit-identical datasets.
pub fn generate(spec: &SynthSpec) -> Result<GeneratedDataset> {
    let geometry = SynthGeometry::for_preset(&spec.preset)?;
    if spec.relational > 0 && spec.events < 3 {
        return Err(Error::Config("relational queries need at least 3 event classes".into()));
    }
    let mut class_rng = RngState::derive(spec.class_seed, "synth-classes");
    let events = EventVocabulary::build(spec.events, spec.dim, &mut class_rng)?;
    let mut rng = RngState::derive(spec.seed, "synth");
    let vocab = synth_vocabulary(&events)?;

    let mut videos = Vec::new();
    let mut queries = Vec::new();
    let total = spec.plain + spec.ordinal + spec.relational;
    for index in 0..total {
        let (segments, template, ground_truth) = if index < spec.plain {
            build_plain(&geometry, &events, &mut rng)?
        } else if index < spec.plain + spec.ordinal {
            build_ordinal(&geometry, &events, &mut rng)?
        } else {
            build_relational(&geometry, &events, &mut rng)?
        };
        let video = SyntheticVideo {
            video_id: format!("synth-{index:05}"),
            segment_events: segments,
            geometry,
        };
        let text = render(&template, &events);
        check_sample(&video, &template, ground_truth)?;
        videos.push(video);
        queries.push(SyntheticQuery { template, text, ground_truth });
    }
    Ok(GeneratedDataset { spec: spec.clone(), vocab, events, videos, queries })
}

/// Structural invariants of a generated sample, plus oracle agreement.
fn check_sample(video: &SyntheticVideo, template: &QueryTemplate, gt: Interval) -> Result<()> {
    let solved = oracle_solve(video, template)?;
    if (solved.start_seconds - gt.start_seconds).abs() > 1e-9
        || (solved.end_seconds - gt.end_seconds).abs() > 1e-9
    {
        return Err(Error::Contract(format!(
            "oracle disagrees with stored ground truth on {}: [{}, {}) vs [{}, {})",
            video.video_id,
            solved.start_seconds,
            solved.end_seconds,
            gt.start_seconds,
            gt.end_seconds
        )));
    }
    match *template {
        QueryTemplate::Ordinal { event, k } => {
            let runs = event_runs(&video.segment_events, event);
            if k >= 2 && runs[0] == runs[k - 1] {
                return Err(Error::Contract("ordinal sample lost its earlier occurrence".into()));
            }
        }
        QueryTemplate::Relational { target: _, anchor } => {
            let anchor_end = event_runs(&video.segment_events, anchor)[0].1;
            let seg = video.geometry.segment_seconds();
            let answer_start = (gt.start_seconds / seg).round() as usize;
            if answer_start < anchor_end {
                return Err(Error::Contract(
                    "relational sample's answer does not follow its anchor event".into(),
                ));
            }
        }
        QueryTemplate::Plain { .. } => {}
    }
    Ok(())
}

/// Manifest written next to the generated files.
#[derive(Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: SynthSpec,
    pub vocab_file: String,
    pub annotations_file: String,
    pub features_dir: String,
    pub video_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_config: Option<serde_json::Value>,
}

/// Write features, annotations, vocabulary, and the manifest under `dir`.
/// Layout: `features/<id>.{json,bin}`, `annotations.jsonl`, `vocab.txt`,
/// `manifest.json`.
pub fn write_dataset(
    dataset: &GeneratedDataset,
    dir: &Path,
    run_config: Option<serde_json::Value>,
) -> Result<DatasetManifest> {
    let features_dir = dir.join("features");
    let mut rng = RngState::derive(dataset.spec.seed, "synth-features");
    for video in &dataset.videos {
        let features = synth_features(video, &dataset.events, &dataset.spec, &mut rng);
        io::write_clip_features(&features_dir, &features)?;
    }
    io::write_annotations(&dir.join("annotations.jsonl"), &dataset.annotations())?;
    io::write_vocabulary(&dir.join("vocab.txt"), &dataset.vocab)?;
    let manifest = DatasetManifest {
        spec: dataset.spec.clone(),
        vocab_file: "vocab.txt".into(),
        annotations_file: "annotations.jsonl".into(),
        features_dir: "features".into(),
        video_ids: dataset.videos.iter().map(|v| v.video_id.clone()).collect(),
        run_config,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::json(dir.display().to_string(), e))?;
    io::atomic_write(&dir.join("manifest.json"), json.as_bytes())?;
    Ok(manifest)
}
