//! Detection evaluation: centre-distance hit rule, FROC, CPM, F1 and the
//! joint probability x uncertainty threshold analyses.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::aggregate::{nms_order, UncertaintyChannel};
use crate::error::{Error, Result};
use crate::geometry::{Detection, GtInstance, GtKind};

/// FP-per-scan operating points averaged by CPM.
pub const CPM_FP_RATES: [f64; 7] = [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0];

/// Ground truth keyed by scan id. Every scan that was evaluated must be
/// present, even with an empty list, since it counts towards FP per scan.
pub type GroundTruth = BTreeMap<String, Vec<GtInstance>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub fp_rates: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            fp_rates: CPM_FP_RATES.to_vec(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fp_rates.is_empty() {
            return Err(Error::Config("fp_rates must not be empty".into()));
        }
        if self.fp_rates.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
            return Err(Error::Config("fp_rates must be positive".into()));
        }
        if self.fp_rates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("fp_rates must be strictly increasing".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDetection {
    pub detection: Detection,
    pub is_tp: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Matching {
    /// Detections in evaluation order (scan id, then descending probability).
    pub labeled: Vec<LabeledDetection>,
    /// Per scan, one flag per ground-truth entry (decoys are never hit).
    pub gt_hit: BTreeMap<String, Vec<bool>>,
    pub n_scans: usize,
    pub n_objects: usize,
}

impl Matching {
    pub fn tp(&self) -> usize {
        self.labeled.iter().filter(|l| l.is_tp).count()
    }

    pub fn fp(&self) -> usize {
        self.labeled.len() - self.tp()
    }
}

/// Hit radius of a ground-truth box: half its mean extent.
pub fn hit_radius(gt: &GtInstance) -> f64 {
    let s = &gt.bbox.size;
    0.5 * s.iter().sum::<f64>() / s.len() as f64
}

fn center_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Label detections TP/FP. Within each scan detections are visited by
/// descending probability and each claims the nearest unclaimed object whose
/// hit radius contains the detection centre. Everything else is FP.
pub fn match_detections(dets: &[Detection], gts: &GroundTruth) -> Result<Matching> {
    let mut by_scan: BTreeMap<&str, Vec<&Detection>> = BTreeMap::new();
    for d in dets {
        if !gts.contains_key(&d.scan_id) {
            return Err(Error::Input(format!("detection for unknown scan {}", d.scan_id)));
        }
        by_scan.entry(d.scan_id.as_str()).or_default().push(d);
    }
    let mut out = Matching {
        n_scans: gts.len(),
        n_objects: gts
            .values()
            .map(|g| g.iter().filter(|i| i.kind == GtKind::Object).count())
            .sum(),
        ..Default::default()
    };
    for (scan, instances) in gts {
        let mut claimed = vec![false; instances.len()];
        if let Some(scan_dets) = by_scan.get_mut(scan.as_str()) {
            scan_dets.sort_by(|a, b| nms_order(a, b));
            for d in scan_dets.iter() {
                let best = instances
                    .iter()
                    .enumerate()
                    .filter(|(i, g)| g.kind == GtKind::Object && !claimed[*i])
                    .map(|(i, g)| (i, center_distance(&d.bbox.center, &g.bbox.center), hit_radius(g)))
                    .filter(|(_, dist, r)| dist <= r)
                    .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
                if let Some((i, _, _)) = best {
                    claimed[i] = true;
                }
                out.labeled.push(LabeledDetection {
                    detection: (*d).clone(),
                    is_tp: best.is_some(),
                });
            }
        }
        out.gt_hit.insert(scan.clone(), claimed);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrocPoint {
    pub fp_per_scan: f64,
    pub sensitivity: f64,
}

/// FROC curve from labeled detections: one point per distinct probability
/// threshold plus the empty-selection origin, sorted by FP per scan.
pub fn froc(labeled: &[LabeledDetection], n_scans: usize, n_gts: usize) -> Result<Vec<FrocPoint>> {
    if n_scans == 0 || n_gts == 0 {
        return Err(Error::Argument(format!(
            "froc needs n_scans >= 1 and n_gts >= 1 (got {n_scans}, {n_gts})"
        )));
    }
    let mut order: Vec<&LabeledDetection> = labeled.iter().collect();
    order.sort_by(|a, b| b.detection.prob.total_cmp(&a.detection.prob));
    let mut points = vec![FrocPoint {
        fp_per_scan: 0.0,
        sensitivity: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    for (i, l) in order.iter().enumerate() {
        if l.is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_at_threshold = order
            .get(i + 1)
            .is_none_or(|next| next.detection.prob != l.detection.prob);
        if last_at_threshold {
            points.push(FrocPoint {
                fp_per_scan: fp as f64 / n_scans as f64,
                sensitivity: tp as f64 / n_gts as f64,
            });
        }
    }
    Ok(points)
}

/// Sensitivity at `fp_rate`, linearly interpolated between bracketing points;
/// 0 before the first point and the last sensitivity past the last point.
pub fn sensitivity_at(points: &[FrocPoint], fp_rate: f64) -> f64 {
    let Some(j) = points.iter().rposition(|p| p.fp_per_scan <= fp_rate) else {
        return 0.0;
    };
    let lo = points[j];
    match points.get(j + 1) {
        None => lo.sensitivity,
        Some(hi) => {
            let t = (fp_rate - lo.fp_per_scan) / (hi.fp_per_scan - lo.fp_per_scan);
            lo.sensitivity + t * (hi.sensitivity - lo.sensitivity)
        }
    }
}

/// Mean interpolated sensitivity over `fp_rates`.
pub fn cpm(points: &[FrocPoint], fp_rates: &[f64]) -> Result<f64> {
    if points.is_empty() || fp_rates.is_empty() {
        return Err(Error::Argument("cpm needs a non-empty curve and rate list".into()));
    }
    let total: f64 = fp_rates.iter().map(|&r| sensitivity_at(points, r)).sum();
    Ok(total / fp_rates.len() as f64)
}

/// Match, build the FROC and score it in one go.
pub fn evaluate_cpm(dets: &[Detection], gts: &GroundTruth, fp_rates: &[f64]) -> Result<f64> {
    let m = match_detections(dets, gts)?;
    let points = froc(&m.labeled, m.n_scans, m.n_objects)?;
    cpm(&points, fp_rates)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrF1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl PrF1 {
    fn from_counts(tp: usize, fp: usize, n_gts: usize) -> Self {
        let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if n_gts == 0 { 0.0 } else { tp as f64 / n_gts as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self { precision, recall, f1 }
    }
}

/// Detections passing `prob >= prob_threshold` and `channel <= unc_threshold`.
pub fn select(dets: &[Detection], prob_threshold: f64, unc_threshold: f64, channel: UncertaintyChannel) -> Vec<Detection> {
    dets.iter()
        .filter(|d| d.prob >= prob_threshold && channel.of(d) <= unc_threshold)
        .cloned()
        .collect()
}

/// Precision, recall and F1 at one operating point on `v_avg`.
pub fn f1_at(dets: &[Detection], gts: &GroundTruth, prob_threshold: f64, unc_threshold: f64) -> Result<PrF1> {
    f1_at_channel(dets, gts, prob_threshold, unc_threshold, UncertaintyChannel::Avg)
}

pub fn f1_at_channel(
    dets: &[Detection],
    gts: &GroundTruth,
    prob_threshold: f64,
    unc_threshold: f64,
    channel: UncertaintyChannel,
) -> Result<PrF1> {
    if prob_threshold < 0.0 || unc_threshold < 0.0 {
        return Err(Error::Argument("thresholds must be non-negative".into()));
    }
    let m = match_detections(&select(dets, prob_threshold, unc_threshold, channel), gts)?;
    Ok(PrF1::from_counts(m.tp(), m.fp(), m.n_objects))
}

/// Inclusive linear-interpolation percentile (`q` in percent).
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Argument("percentile of an empty sample".into()));
    }
    if !(q > 0.0 && q <= 100.0) {
        return Err(Error::Argument(format!("percentile {q} outside (0, 100]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let h = (sorted.len() - 1) as f64 * q / 100.0;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Ok(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

/// Uncertainty threshold at the given percentile of `v_avg`.
pub fn select_uncertainty_threshold(dets: &[Detection], pct: f64) -> Result<f64> {
    select_channel_threshold(dets, pct, UncertaintyChannel::Avg)
}

pub fn select_channel_threshold(dets: &[Detection], pct: f64, channel: UncertaintyChannel) -> Result<f64> {
    let values: Vec<f64> = dets.iter().map(|d| channel.of(d)).collect();
    percentile(&values, pct)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSearch {
    pub percentile: f64,
    pub eta: f64,
    pub cpm: f64,
}

/// Scan `percentiles`, filter the validation detections at each one's
/// threshold and keep the percentile with the best validation CPM. Ties go
/// to the larger percentile (less filtering).
pub fn search_uncertainty_percentile(
    dets: &[Detection],
    gts: &GroundTruth,
    percentiles: &[f64],
    fp_rates: &[f64],
    channel: UncertaintyChannel,
) -> Result<ThresholdSearch> {
    if percentiles.is_empty() {
        return Err(Error::Argument("empty percentile grid".into()));
    }
    let mut best: Option<ThresholdSearch> = None;
    for &pct in percentiles {
        let eta = select_channel_threshold(dets, pct, channel)?;
        let kept = select(dets, 0.0, eta, channel);
        let score = evaluate_cpm(&kept, gts, fp_rates)?;
        let better = match best {
            None => true,
            Some(b) => score > b.cpm || (score == b.cpm && pct > b.percentile),
        };
        if better {
            best = Some(ThresholdSearch {
                percentile: pct,
                eta,
                cpm: score,
            });
        }
    }
    Ok(best.expect("non-empty grid"))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub prob_threshold: f64,
    pub unc_threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub cpm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    /// Row-major over (prob_grid, unc_grid).
    pub cells: Vec<SweepCell>,
    /// FROC curve per uncertainty threshold with no probability cut.
    pub froc_by_unc: Vec<(f64, Vec<FrocPoint>)>,
}

impl SweepResult {
    pub fn best_f1(&self) -> Option<&SweepCell> {
        self.cells.iter().fold(None, |best: Option<&SweepCell>, c| match best {
            Some(b) if b.f1 >= c.f1 => Some(b),
            _ => Some(c),
        })
    }
}

/// Full Cartesian evaluation over probability and uncertainty thresholds.
pub fn sweep(
    dets: &[Detection],
    gts: &GroundTruth,
    prob_grid: &[f64],
    unc_grid: &[f64],
    fp_rates: &[f64],
    channel: UncertaintyChannel,
) -> Result<SweepResult> {
    if prob_grid.is_empty() || unc_grid.is_empty() {
        return Err(Error::Argument("sweep grids must be non-empty".into()));
    }
    let mut cells = Vec::with_capacity(prob_grid.len() * unc_grid.len());
    for &p in prob_grid {
        for &u in unc_grid {
            if p < 0.0 || u < 0.0 {
                return Err(Error::Argument("thresholds must be non-negative".into()));
            }
            let m = match_detections(&select(dets, p, u, channel), gts)?;
            let prf = PrF1::from_counts(m.tp(), m.fp(), m.n_objects);
            let cpm = cpm(&froc(&m.labeled, m.n_scans, m.n_objects)?, fp_rates)?;
            cells.push(SweepCell {
                prob_threshold: p,
                unc_threshold: u,
                precision: prf.precision,
                recall: prf.recall,
                f1: prf.f1,
                cpm,
            });
        }
    }
    let mut froc_by_unc = Vec::with_capacity(unc_grid.len());
    for &u in unc_grid {
        let m = match_detections(&select(dets, 0.0, u, channel), gts)?;
        froc_by_unc.push((u, froc(&m.labeled, m.n_scans, m.n_objects)?));
    }
    Ok(SweepResult { cells, froc_by_unc })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistBin {
    pub lo: f64,
    pub hi: f64,
    pub tp: usize,
    pub fp: usize,
}

/// Histogram of `v_avg` over `[0, max]` split by TP/FP label.
pub fn uncertainty_histogram(labeled: &[LabeledDetection], bins: usize) -> Vec<HistBin> {
    let bins = bins.max(1);
    let max = labeled
        .iter()
        .map(|l| l.detection.v_avg)
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE);
    let width = max / bins as f64;
    let mut out: Vec<HistBin> = (0..bins)
        .map(|i| HistBin {
            lo: i as f64 * width,
            hi: if i + 1 == bins { max } else { (i + 1) as f64 * width },
            tp: 0,
            fp: 0,
        })
        .collect();
    for l in labeled {
        let i = ((l.detection.v_avg / width) as usize).min(bins - 1);
        if l.is_tp {
            out[i].tp += 1;
        } else {
            out[i].fp += 1;
        }
    }
    out
}
