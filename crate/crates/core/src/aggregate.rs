//! In-place aggregation of Monte Carlo passes into per-box uncertainty.
//!
//! Every pass of a single-scale multi-level detector emits exactly one box per
//! (level, cell), so samples of the same box are already aligned: aggregation
//! is a per-cell reduction over passes with no association step. The mean
//! deltas are decoded once per cell, then all levels go through one greedy
//! NMS.
//!
//! Reductions sort their operands before summing so the result does not
//! depend on the order passes arrive in.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{decode_deltas, iou, unravel, Detection, GridSpec, PassGrid};

/// Index of the foreground class in probability and variance vectors.
pub const FOREGROUND: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregationConfig {
    pub prob_floor: f64,
    pub nms_iou: f64,
    /// Number of passes every scan must provide; `None` accepts any T >= 1.
    pub passes_expected: Option<usize>,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self {
            prob_floor: 0.1,
            nms_iou: 0.1,
            passes_expected: None,
        }
    }
}

impl AggregationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.prob_floor) {
            return Err(Error::Config(format!("prob_floor {} outside [0, 1]", self.prob_floor)));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return Err(Error::Config(format!("nms_iou {} outside (0, 1)", self.nms_iou)));
        }
        if self.passes_expected == Some(0) {
            return Err(Error::Config("passes_expected must be >= 1".into()));
        }
        Ok(())
    }
}

fn ordered_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

/// Order-independent mean, shifted by the minimum so that a constant sample
/// returns its value bit for bit.
fn ordered_mean(values: &mut [f64]) -> f64 {
    let shift = values.iter().copied().fold(f64::INFINITY, f64::min);
    for v in values.iter_mut() {
        *v -= shift;
    }
    shift + ordered_sum(values) / values.len() as f64
}

/// Population variance of the foreground probabilities of one box across
/// passes, `sum(P^2)/T - (sum(P)/T)^2`, evaluated as mean squared deviation.
pub fn mc_variance(probs: &[f64]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::Argument("mc_variance of an empty sample".into()));
    }
    let n = probs.len() as f64;
    // shift by the minimum so constant samples give exactly zero
    let shift = probs.iter().copied().fold(f64::INFINITY, f64::min);
    let mut buf: Vec<f64> = probs.iter().map(|p| p - shift).collect();
    let mean = ordered_sum(&mut buf.clone()) / n;
    for b in buf.iter_mut() {
        let d = *b - mean;
        *b = d * d;
    }
    Ok(ordered_sum(&mut buf) / n)
}

/// The textbook one-pass form of [`mc_variance`]; kept for cross-checking.
pub fn mc_variance_one_pass(probs: &[f64]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::Argument("mc_variance of an empty sample".into()));
    }
    let n = probs.len() as f64;
    let sum_sq: f64 = probs.iter().map(|p| p * p).sum();
    let sum: f64 = probs.iter().sum();
    Ok(sum_sq / n - (sum / n).powi(2))
}

pub(crate) fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Mean over passes of the `fg_index` component of `softmax(sigma^2)`, the
/// softmax taken across classes.
pub fn pred_variance<V: AsRef<[f64]>>(pred_vars: &[V], fg_index: usize) -> Result<f64> {
    if pred_vars.is_empty() {
        return Err(Error::Argument("pred_variance of an empty sample".into()));
    }
    let mut comps = Vec::with_capacity(pred_vars.len());
    for v in pred_vars {
        let v = v.as_ref();
        if fg_index >= v.len() {
            return Err(Error::Argument(format!(
                "foreground index {fg_index} out of {} classes",
                v.len()
            )));
        }
        if v.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::Argument(format!("negative predictive variance in {v:?}")));
        }
        comps.push(softmax(v)[fg_index]);
    }
    Ok(ordered_mean(&mut comps))
}

fn check_passes(passes: &[PassGrid], grid: &GridSpec, cfg: &AggregationConfig) -> Result<()> {
    let first = passes
        .first()
        .ok_or_else(|| Error::Aggregation("no passes to aggregate".into()))?;
    if let Some(t) = cfg.passes_expected {
        if passes.len() != t {
            return Err(Error::Aggregation(format!(
                "scan {}: expected {t} passes, got {}",
                first.scan_id,
                passes.len()
            )));
        }
    }
    let mut seen = std::collections::BTreeSet::new();
    for p in passes {
        if p.scan_id != first.scan_id {
            return Err(Error::Aggregation(format!(
                "mixed scans {} and {}",
                first.scan_id, p.scan_id
            )));
        }
        if !p.conforms_to(grid) {
            return Err(Error::Aggregation(format!(
                "scan {} pass {}: level shapes do not match the grid",
                p.scan_id, p.pass_index
            )));
        }
        if !seen.insert(p.pass_index) {
            return Err(Error::Aggregation(format!(
                "scan {}: duplicate pass index {}",
                p.scan_id, p.pass_index
            )));
        }
    }
    Ok(())
}

/// Reduce the T passes of one scan cell by cell and emit every cell whose
/// mean foreground probability reaches `prob_floor`. Output is pre-NMS, in
/// (level, cell) order.
pub fn aggregate_in_place(
    passes: &[PassGrid],
    grid: &GridSpec,
    cfg: &AggregationConfig,
) -> Result<Vec<Detection>> {
    check_passes(passes, grid, cfg)?;
    let scan_id = &passes[0].scan_id;
    let n_deltas = 2 * grid.dims;
    let mut dets = Vec::new();
    let mut probs = Vec::with_capacity(passes.len());
    let mut vars: Vec<&[f64]> = Vec::with_capacity(passes.len());
    let mut buf = Vec::with_capacity(passes.len());
    for (l, _) in grid.levels.iter().enumerate() {
        let shape = grid.level_shape(l);
        let n_cells = shape.iter().product::<usize>();
        for idx in 0..n_cells {
            probs.clear();
            vars.clear();
            for p in passes {
                let out = &p.levels[l].cells[idx];
                let fg = out.prob.get(FOREGROUND).copied().ok_or_else(|| {
                    Error::Aggregation(format!("scan {scan_id}: cell output has no foreground class"))
                })?;
                probs.push(fg);
                vars.push(&out.pred_var);
            }
            buf.clone_from(&probs);
            let prob = ordered_mean(&mut buf);
            if prob < cfg.prob_floor {
                continue;
            }
            let v_mc = mc_variance(&probs)?;
            let v_pred = pred_variance(&vars, FOREGROUND)?;
            let mut mean_deltas = Vec::with_capacity(n_deltas);
            for k in 0..n_deltas {
                buf.clear();
                for p in passes {
                    let w = p.levels[l].cells[idx].deltas.get(k).copied().ok_or_else(|| {
                        Error::Aggregation(format!("scan {scan_id}: cell output has too few deltas"))
                    })?;
                    buf.push(w);
                }
                mean_deltas.push(ordered_mean(&mut buf));
            }
            let cell = unravel(&shape, idx);
            let bbox = decode_deltas(grid, l, &cell, &mean_deltas)?;
            dets.push(Detection::new(scan_id.clone(), bbox, prob, v_mc, v_pred, l, cell));
        }
    }
    Ok(dets)
}

/// Ranking used by NMS: probability descending, then lower fused
/// uncertainty, then (level, cell) ascending.
pub fn nms_order(a: &Detection, b: &Detection) -> Ordering {
    b.prob
        .total_cmp(&a.prob)
        .then(a.v_avg.total_cmp(&b.v_avg))
        .then(a.level.cmp(&b.level))
        .then_with(|| a.cell.cmp(&b.cell))
}

/// Greedy NMS across all levels. Only detections of the same scan suppress
/// each other. Output is in [`nms_order`].
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<&Detection> = dets.iter().collect();
    order.sort_by(|a, b| nms_order(a, b));
    let mut kept: Vec<&Detection> = Vec::new();
    for d in order {
        let suppressed = kept
            .iter()
            .any(|k| k.scan_id == d.scan_id && iou(&k.bbox, &d.bbox) > iou_thresh);
        if !suppressed {
            kept.push(d);
        }
    }
    kept.into_iter().cloned().collect()
}

/// Aggregate one scan's passes and run NMS.
pub fn postprocess(passes: &[PassGrid], grid: &GridSpec, cfg: &AggregationConfig) -> Result<Vec<Detection>> {
    let dets = aggregate_in_place(passes, grid, cfg)?;
    Ok(nms(&dets, cfg.nms_iou))
}

/// Which per-detection uncertainty a filter or threshold acts on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyChannel {
    Avg,
    Mc,
    Pred,
}

impl UncertaintyChannel {
    pub fn of(self, d: &Detection) -> f64 {
        match self {
            UncertaintyChannel::Avg => d.v_avg,
            UncertaintyChannel::Mc => d.v_mc,
            UncertaintyChannel::Pred => d.v_pred,
        }
    }
}

/// Keep detections with `v_avg <= eta`, preserving order.
pub fn filter_by_uncertainty(dets: &[Detection], eta: f64) -> Vec<Detection> {
    filter_by_channel(dets, eta, UncertaintyChannel::Avg)
}

pub fn filter_by_channel(dets: &[Detection], eta: f64, channel: UncertaintyChannel) -> Vec<Detection> {
    dets.iter().filter(|d| channel.of(d) <= eta).cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BBox, CellOutput, LevelOutputs};

    fn det(prob: f64, v: f64, c: [f64; 2]) -> Detection {
        Detection::new("s", BBox::new(c.to_vec(), vec![8.0, 8.0]), prob, v, v, 0, vec![0, 0])
    }

    #[test]
    fn mc_variance_examples() {
        assert_eq!(mc_variance(&[0.5, 0.5, 0.5]).unwrap(), 0.0);
        assert_eq!(mc_variance(&[0.0, 1.0]).unwrap(), 0.25);
        let v = mc_variance(&[0.2, 0.4, 0.6]).unwrap();
        assert!((v - (0.56 / 3.0 - 0.16)).abs() < 1e-15);
        assert!((v - 0.026_666_666_666_666_67).abs() < 1e-15);
        assert!(mc_variance(&[]).is_err());
        assert!(mc_variance_one_pass(&[]).is_err());
    }

    #[test]
    fn single_sample_variance_is_zero() {
        assert_eq!(mc_variance(&[0.73]).unwrap(), 0.0);
    }

    #[test]
    fn pred_variance_examples() {
        let eq = vec![vec![0.3, 0.3], vec![1.2, 1.2]];
        assert!((pred_variance(&eq, 1).unwrap() - 0.5).abs() < 1e-15);
        let v = pred_variance(&[vec![0.0, 1.0], vec![0.0, 1.0]], 1).unwrap();
        let e = std::f64::consts::E;
        assert!((v - e / (1.0 + e)).abs() < 1e-15);
        assert!((v - 0.7311).abs() < 1e-4);
        let single = pred_variance(&[vec![0.2, 0.9]], 1).unwrap();
        let many = pred_variance(&vec![vec![0.2, 0.9]; 7], 1).unwrap();
        assert!((single - many).abs() < 1e-15);
        assert!(pred_variance::<Vec<f64>>(&[], 1).is_err());
        assert!(pred_variance(&[vec![-0.1, 0.2]], 1).is_err());
    }

    fn one_cell_grid() -> GridSpec {
        GridSpec {
            dims: 2,
            image_size: vec![8, 8],
            levels: vec![crate::geometry::LevelSpec::new(8, vec![8.0, 8.0])],
            num_classes: 2,
        }
    }

    fn pass(idx: usize, fg: f64) -> PassGrid {
        PassGrid {
            scan_id: "a".into(),
            pass_index: idx,
            levels: vec![LevelOutputs {
                shape: vec![1, 1],
                cells: vec![CellOutput {
                    prob: vec![1.0 - fg, fg],
                    pred_var: vec![0.1, 0.2],
                    deltas: vec![0.0; 4],
                }],
            }],
        }
    }

    #[test]
    fn two_pass_hand_case() {
        let grid = one_cell_grid();
        let dets = aggregate_in_place(&[pass(0, 0.4), pass(1, 0.8)], &grid, &AggregationConfig::default()).unwrap();
        assert_eq!(dets.len(), 1);
        assert!((dets[0].prob - 0.6).abs() < 1e-15);
        assert!((dets[0].v_mc - 0.04).abs() < 1e-15);
        assert_eq!(dets[0].v_avg, (dets[0].v_mc + dets[0].v_pred) / 2.0);
    }

    #[test]
    fn prob_floor_one_emits_nothing() {
        let grid = one_cell_grid();
        let cfg = AggregationConfig {
            prob_floor: 1.0,
            ..Default::default()
        };
        assert!(aggregate_in_place(&[pass(0, 0.99)], &grid, &cfg).unwrap().is_empty());
    }

    #[test]
    fn aggregation_errors() {
        let grid = one_cell_grid();
        let cfg = AggregationConfig {
            passes_expected: Some(3),
            ..Default::default()
        };
        assert!(matches!(
            aggregate_in_place(&[pass(0, 0.5)], &grid, &cfg),
            Err(Error::Aggregation(_))
        ));
        let cfg = AggregationConfig::default();
        assert!(aggregate_in_place(&[pass(0, 0.5), pass(0, 0.5)], &grid, &cfg).is_err());
        let mut other = pass(1, 0.5);
        other.scan_id = "b".into();
        assert!(aggregate_in_place(&[pass(0, 0.5), other], &grid, &cfg).is_err());
        assert!(aggregate_in_place(&[], &grid, &cfg).is_err());
        assert!(aggregate_in_place(&[pass(0, 0.5)], &GridSpec::default(), &cfg).is_err());
    }

    #[test]
    fn nms_basic() {
        let a = det(0.9, 0.1, [10.0, 10.0]);
        assert_eq!(nms(&[a.clone()], 0.1), vec![a.clone()]);
        let b = det(0.8, 0.1, [10.0, 10.0]);
        for t in [0.01, 0.5, 0.99] {
            assert_eq!(nms(&[b.clone(), a.clone()], t), vec![a.clone()]);
        }
        let far = det(0.95, 0.1, [40.0, 40.0]);
        assert_eq!(nms(&[a.clone(), far.clone()], 0.1), vec![far, a]);
    }

    #[test]
    fn nms_tie_breaks_on_uncertainty() {
        let hi = det(0.9, 0.3, [10.0, 10.0]);
        let lo = det(0.9, 0.1, [11.0, 10.0]);
        assert_eq!(nms(&[hi, lo.clone()], 0.1), vec![lo]);
    }

    #[test]
    fn nms_keeps_other_scans() {
        let a = det(0.9, 0.1, [10.0, 10.0]);
        let mut b = det(0.8, 0.1, [10.0, 10.0]);
        b.scan_id = "t".into();
        assert_eq!(nms(&[a, b], 0.1).len(), 2);
    }

    #[test]
    fn filter_examples() {
        let dets = vec![det(0.9, 0.2, [1.0, 1.0]), det(0.8, 0.6, [20.0, 1.0]), det(0.7, 0.1, [40.0, 1.0])];
        assert_eq!(filter_by_uncertainty(&dets, 0.6), dets);
        assert!(filter_by_uncertainty(&dets, 0.0).is_empty());
        let kept = filter_by_uncertainty(&dets, 0.4);
        assert_eq!(kept, vec![dets[0].clone(), dets[2].clone()]);
    }
}
