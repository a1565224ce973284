//! Temporal IoU and the two retrieval protocols: Rank@k / mIoU over the
//! 21-span segment grid, and R@n,IoU@m for free-form anchors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-open interval in seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub start_seconds: f64,
    pub end_seconds: f64,
}

impl Interval {
    pub fn new(start_seconds: f64, end_seconds: f64) -> Result<Self> {
        if !(start_seconds < end_seconds) || !start_seconds.is_finite() || !end_seconds.is_finite() {
            return Err(Error::Input(format!(
                "invalid interval [{start_seconds}, {end_seconds})"
            )));
        }
        Ok(Self { start_seconds, end_seconds })
    }

    pub fn length(&self) -> f64 {
        self.end_seconds - self.start_seconds
    }
}

/// |a ∩ b| / |a ∪ b|; disjoint intervals score 0.
pub fn temporal_iou(a: Interval, b: Interval) -> Result<f64> {
    if a.start_seconds >= a.end_seconds || b.start_seconds >= b.end_seconds {
        return Err(Error::Input("temporal_iou needs start < end".into()));
    }
    let inter = (a.end_seconds.min(b.end_seconds) - a.start_seconds.max(b.start_seconds)).max(0.0);
    let union = a.length() + b.length() - inter;
    Ok(inter / union)
}

/// One scored interval of a ranked list.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScoredInterval {
    pub start_seconds: f64,
    pub end_seconds: f64,
    pub score: f64,
}

impl ScoredInterval {
    pub fn interval(&self) -> Result<Interval> {
        Interval::new(self.start_seconds, self.end_seconds)
    }
}

/// Per-query ranked moment list, scores non-increasing.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RankedPrediction {
    pub query_id: u64,
    pub ranked: Vec<ScoredInterval>,
}

impl RankedPrediction {
    fn validate(&self) -> Result<()> {
        for pair in self.ranked.windows(2) {
            if pair[0].score < pair[1].score {
                return Err(Error::Input(format!(
                    "query {}: ranked scores must be non-increasing",
                    self.query_id
                )));
            }
        }
        for s in &self.ranked {
            s.interval()?;
        }
        Ok(())
    }
}

/// One named rate in [0, 1].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Metric {
    pub name: String,
    pub rate: f64,
}

/// Aggregate metrics for one protocol over a query set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub protocol: String,
    pub query_count: usize,
    pub metrics: Vec<Metric>,
}

impl RetrievalReport {
    pub fn rate(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.name == name).map(|m| m.rate)
    }

    /// Metric grid with rates rendered as percentages, two decimals.
    pub fn format_table(&self) -> String {
        let width = self
            .metrics
            .iter()
            .map(|m| m.name.len())
            .max()
            .unwrap_or(6)
            .max(6);
        let mut out = String::new();
        out.push_str(&format!(
            "protocol: {} ({} queries)\n",
            self.protocol, self.query_count
        ));
        for m in &self.metrics {
            out.push_str(&format!("{:<width$}  {:>6.2}\n", m.name, m.rate * 100.0, width = width));
        }
        out
    }
}

/// Number of equal segments in the fixed-grid protocol.
pub const DIDEMO_SEGMENTS: usize = 6;

/// Map an interval onto the segment grid: (first segment, segment count).
/// Errors if either endpoint is off-grid by more than a part-per-million of
/// the duration.
fn canonical_span(interval: Interval, duration: f64) -> Result<(usize, usize)> {
    let seg = duration / DIDEMO_SEGMENTS as f64;
    let tol = duration * 1e-6;
    let to_grid = |x: f64| -> Result<usize> {
        let idx = (x / seg).round();
        if (x - idx * seg).abs() > tol || idx < 0.0 || idx > DIDEMO_SEGMENTS as f64 {
            Err(Error::Input(format!(
                "interval endpoint {x} is not on the {DIDEMO_SEGMENTS}-segment grid of a {duration} s video"
            )))
        } else {
            Ok(idx as usize)
        }
    };
    let first = to_grid(interval.start_seconds)?;
    let last = to_grid(interval.end_seconds)?;
    if last <= first {
        return Err(Error::Input("degenerate canonical span".into()));
    }
    Ok((first, last - first))
}

/// Rank@1, Rank@5 (exact span match within the top k) and mIoU of the top-1
/// prediction, for predictions over the canonical segment spans of videos
/// with one shared duration.
pub fn eval_didemo(
    preds: &[RankedPrediction],
    gts: &[Interval],
    duration_seconds: f64,
) -> Result<RetrievalReport> {
    if preds.is_empty() {
        return Err(Error::Input("no queries".into()));
    }
    if preds.len() != gts.len() {
        return Err(Error::Input(format!(
            "{} predictions vs {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    let mut rank1 = 0usize;
    let mut rank5 = 0usize;
    let mut iou_sum = 0.0;
    for (pred, gt) in preds.iter().zip(gts) {
        pred.validate()?;
        if pred.ranked.is_empty() {
            return Err(Error::Input(format!("query {} has an empty ranked list", pred.query_id)));
        }
        let gt_span = canonical_span(*gt, duration_seconds)?;
        let mut hit_at = None;
        for (rank, scored) in pred.ranked.iter().enumerate() {
            let span = canonical_span(scored.interval()?, duration_seconds)?;
            if span == gt_span {
                hit_at = Some(rank);
                break;
            }
        }
        if hit_at == Some(0) {
            rank1 += 1;
        }
        if matches!(hit_at, Some(r) if r < 5) {
            rank5 += 1;
        }
        iou_sum += temporal_iou(pred.ranked[0].interval()?, *gt)?;
    }
    let n = preds.len() as f64;
    Ok(RetrievalReport {
        protocol: "didemo".into(),
        query_count: preds.len(),
        metrics: vec![
            Metric { name: "Rank@1".into(), rate: rank1 as f64 / n },
            Metric { name: "Rank@5".into(), rate: rank5 as f64 / n },
            Metric { name: "mIoU".into(), rate: iou_sum / n },
        ],
    })
}

/// R@n,IoU@m: the fraction of queries with at least one of the top-n
/// predictions whose IoU with ground truth strictly exceeds m.
pub fn eval_r_at_n(
    preds: &[RankedPrediction],
    gts: &[Interval],
    n_list: &[usize],
    m_list: &[f64],
) -> Result<RetrievalReport> {
    if preds.is_empty() {
        return Err(Error::Input("no queries".into()));
    }
    if preds.len() != gts.len() {
        return Err(Error::Input(format!(
            "{} predictions vs {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    let mut metrics = Vec::new();
    for &n in n_list {
        for &m in m_list {
            let mut hits = 0usize;
            for (pred, gt) in preds.iter().zip(gts) {
                pred.validate()?;
                let mut hit = false;
                for scored in pred.ranked.iter().take(n) {
                    if temporal_iou(scored.interval()?, *gt)? > m {
                        hit = true;
                        break;
                    }
                }
                if hit {
                    hits += 1;
                }
            }
            metrics.push(Metric {
                name: format!("R@{n},IoU@{m}"),
                rate: hits as f64 / preds.len() as f64,
            });
        }
    }
    Ok(RetrievalReport { protocol: "r-at-n".into(), query_count: preds.len(), metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    fn iv(a: f64, b: f64) -> Interval {
        Interval::new(a, b).unwrap()
    }

    fn scored(a: f64, b: f64, s: f64) -> ScoredInterval {
        ScoredInterval { start_seconds: a, end_seconds: b, score: s }
    }

    #[test]
    fn iou_examples() {
        assert_eq!(temporal_iou(iv(2.0, 5.0), iv(2.0, 5.0)).unwrap(), 1.0);
        assert_eq!(temporal_iou(iv(0.0, 1.0), iv(2.0, 3.0)).unwrap(), 0.0);
        let third = temporal_iou(iv(0.0, 10.0), iv(5.0, 15.0)).unwrap();
        assert!((third - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn iou_rejects_degenerate_intervals() {
        assert!(Interval::new(3.0, 3.0).is_err());
        assert!(Interval::new(4.0, 2.0).is_err());
    }

    #[test]
    fn iou_symmetric_bounded_and_matches_grid_oracle() {
        let mut rng = RngState::seed_from_u64(1);
        for _ in 0..200 {
            let s1 = rng.uniform(0.0, 50.0);
            let l1 = rng.uniform(0.2, 20.0);
            let s2 = rng.uniform(0.0, 50.0);
            let l2 = rng.uniform(0.2, 20.0);
            let a = iv(s1, s1 + l1);
            let b = iv(s2, s2 + l2);
            let ab = temporal_iou(a, b).unwrap();
            let ba = temporal_iou(b, a).unwrap();
            assert_eq!(ab, ba);
            assert!((0.0..=1.0).contains(&ab));
            assert!((ab - grid_iou(a, b)).abs() <= 1e-3, "{ab} vs {}", grid_iou(a, b));
        }
    }

    /// Brute-force IoU on a 1 ms grid.
    pub(crate) fn grid_iou(a: Interval, b: Interval) -> f64 {
        let lo = a.start_seconds.min(b.start_seconds);
        let hi = a.end_seconds.max(b.end_seconds);
        let cells = ((hi - lo) / 0.001).ceil() as usize;
        let mut inter = 0usize;
        let mut union = 0usize;
        for c in 0..cells {
            let mid = lo + (c as f64 + 0.5) * 0.001;
            let in_a = mid >= a.start_seconds && mid < a.end_seconds;
            let in_b = mid >= b.start_seconds && mid < b.end_seconds;
            if in_a && in_b {
                inter += 1;
            }
            if in_a || in_b {
                union += 1;
            }
        }
        inter as f64 / union as f64
    }

    fn didemo_spans(duration: f64) -> Vec<Interval> {
        let seg = duration / 6.0;
        let mut spans = Vec::new();
        for len in 1..=6usize {
            for start in 0..=(6 - len) {
                spans.push(iv(start as f64 * seg, (start + len) as f64 * seg));
            }
        }
        spans
    }

    #[test]
    fn didemo_oracle_predictor_scores_one() {
        let spans = didemo_spans(30.0);
        let gts: Vec<Interval> = vec![spans[3], spans[10], spans[20]];
        let preds: Vec<RankedPrediction> = gts
            .iter()
            .enumerate()
            .map(|(q, gt)| {
                let mut ranked = vec![scored(gt.start_seconds, gt.end_seconds, 1.0)];
                ranked.extend(
                    spans
                        .iter()
                        .filter(|s| *s != gt)
                        .map(|s| scored(s.start_seconds, s.end_seconds, 0.1)),
                );
                RankedPrediction { query_id: q as u64, ranked }
            })
            .collect();
        let report = eval_didemo(&preds, &gts, 30.0).unwrap();
        assert_eq!(report.rate("Rank@1"), Some(1.0));
        assert_eq!(report.rate("Rank@5"), Some(1.0));
        assert_eq!(report.rate("mIoU"), Some(1.0));
    }

    #[test]
    fn didemo_full_span_predictor_miou() {
        let gts = vec![iv(0.0, 5.0), iv(5.0, 20.0)];
        let preds: Vec<RankedPrediction> = (0..2)
            .map(|q| RankedPrediction { query_id: q, ranked: vec![scored(0.0, 30.0, 1.0)] })
            .collect();
        let report = eval_didemo(&preds, &gts, 30.0).unwrap();
        let expect = (5.0 / 30.0 + 15.0 / 30.0) / 2.0;
        assert!((report.rate("mIoU").unwrap() - expect).abs() < 1e-12);
        assert_eq!(report.rate("Rank@1"), Some(0.0));
    }

    #[test]
    fn didemo_rejects_off_grid_interval() {
        let gts = vec![iv(0.0, 5.0)];
        let preds = vec![RankedPrediction { query_id: 0, ranked: vec![scored(1.0, 7.0, 1.0)] }];
        assert!(eval_didemo(&preds, &gts, 30.0).is_err());
    }

    #[test]
    fn didemo_empty_query_set_errors() {
        let err = eval_didemo(&[], &[], 30.0).unwrap_err();
        assert!(err.to_string().contains("no queries"));
    }

    #[test]
    fn r_at_n_oracle_and_miss() {
        let gts = vec![iv(3.0, 9.0)];
        let oracle = vec![RankedPrediction { query_id: 0, ranked: vec![scored(3.0, 9.0, 0.9)] }];
        let report = eval_r_at_n(&oracle, &gts, &[1, 5], &[0.5, 0.7]).unwrap();
        for m in &report.metrics {
            assert_eq!(m.rate, 1.0);
        }

        let miss = vec![RankedPrediction { query_id: 0, ranked: vec![scored(20.0, 25.0, 0.9)] }];
        let report = eval_r_at_n(&miss, &gts, &[1, 5], &[0.5, 0.7]).unwrap();
        for m in &report.metrics {
            assert_eq!(m.rate, 0.0);
        }
    }

    #[test]
    fn r_at_n_threshold_is_strict() {
        // top-1 IoU = 0.6: counts at m = 0.5, not at m = 0.7.
        let gts = vec![iv(0.0, 6.0)];
        let preds = vec![RankedPrediction { query_id: 0, ranked: vec![scored(0.0, 10.0, 1.0)] }];
        let report = eval_r_at_n(&preds, &gts, &[1], &[0.5, 0.7]).unwrap();
        assert_eq!(report.rate("R@1,IoU@0.5"), Some(1.0));
        assert_eq!(report.rate("R@1,IoU@0.7"), Some(0.0));
        // Exactly m misses: IoU = 0.5 vs threshold 0.5.
        let gts = vec![iv(0.0, 5.0)];
        let preds = vec![RankedPrediction { query_id: 0, ranked: vec![scored(0.0, 10.0, 1.0)] }];
        let report = eval_r_at_n(&preds, &gts, &[1], &[0.5]).unwrap();
        assert_eq!(report.rate("R@1,IoU@0.5"), Some(0.0));
    }

    #[test]
    fn r_at_n_monotone_in_n_and_m() {
        let mut rng = RngState::seed_from_u64(5);
        let spans = didemo_spans(30.0);
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        for q in 0..50 {
            gts.push(spans[rng.index(spans.len())]);
            let mut order: Vec<usize> = (0..spans.len()).collect();
            rng.shuffle(&mut order);
            let ranked: Vec<ScoredInterval> = order
                .iter()
                .enumerate()
                .map(|(rank, &s)| {
                    scored(spans[s].start_seconds, spans[s].end_seconds, 1.0 - rank as f64 * 0.01)
                })
                .collect();
            preds.push(RankedPrediction { query_id: q, ranked });
        }
        let ns = [1, 2, 5, 10];
        let ms = [0.1, 0.3, 0.5, 0.7, 0.9];
        let report = eval_r_at_n(&preds, &gts, &ns, &ms).unwrap();
        for &m in &ms {
            let rates: Vec<f64> =
                ns.iter().map(|n| report.rate(&format!("R@{n},IoU@{m}")).unwrap()).collect();
            for w in rates.windows(2) {
                assert!(w[1] >= w[0], "non-decreasing in n");
            }
        }
        for &n in &ns {
            let rates: Vec<f64> =
                ms.iter().map(|m| report.rate(&format!("R@{n},IoU@{m}")).unwrap()).collect();
            for w in rates.windows(2) {
                assert!(w[1] <= w[0], "non-increasing in m");
            }
        }
    }

    #[test]
    fn rank1_never_exceeds_rank5() {
        let mut rng = RngState::seed_from_u64(6);
        let spans = didemo_spans(30.0);
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        for q in 0..80 {
            gts.push(spans[rng.index(spans.len())]);
            let mut order: Vec<usize> = (0..spans.len()).collect();
            rng.shuffle(&mut order);
            let ranked: Vec<ScoredInterval> = order
                .iter()
                .enumerate()
                .map(|(rank, &s)| {
                    scored(spans[s].start_seconds, spans[s].end_seconds, 2.0 - rank as f64 * 0.05)
                })
                .collect();
            preds.push(RankedPrediction { query_id: q, ranked });
        }
        let report = eval_didemo(&preds, &gts, 30.0).unwrap();
        assert!(report.rate("Rank@1").unwrap() <= report.rate("Rank@5").unwrap());
    }

    #[test]
    fn report_formats_two_decimal_percentages() {
        let report = RetrievalReport {
            protocol: "didemo".into(),
            query_count: 3,
            metrics: vec![Metric { name: "Rank@1".into(), rate: 0.270168 }],
        };
        let table = report.format_table();
        assert!(table.contains("27.02"), "{table}");
    }

    #[test]
    fn report_json_round_trip_is_exact() {
        let report = RetrievalReport {
            protocol: "r-at-n".into(),
            query_count: 7,
            metrics: vec![
                Metric { name: "R@1,IoU@0.5".into(), rate: 0.2857142857142857 },
                Metric { name: "R@5,IoU@0.7".into(), rate: 1.0 / 3.0 },
            ],
        };
        let json = serde_json::to_string(&report).unwrap();
        let back: RetrievalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.query_count, report.query_count);
        for (a, b) in back.metrics.iter().zip(&report.metrics) {
            assert_eq!(a.rate.to_bits(), b.rate.to_bits());
            assert_eq!(a.name, b.name);
        }
    }

    #[test]
    fn validates_ranking_order() {
        let gts = vec![iv(0.0, 5.0)];
        let preds = vec![RankedPrediction {
            query_id: 0,
            ranked: vec![scored(0.0, 5.0, 0.1), scored(5.0, 10.0, 0.9)],
        }];
        assert!(eval_didemo(&preds, &gts, 30.0).is_err());
    }
}
