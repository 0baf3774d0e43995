//! Shared vocabulary: the single-scale multi-level anchor grid, boxes, per-cell
//! network outputs and decoded detections.
//!
//! Coordinates are per-dimension pixel values with dimension 0 the fastest
//! varying one (x for 2D images). Each pyramid level carries exactly one
//! anchor: a box of the level's base size centred on the cell centre
//! `(index + 0.5) * stride`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One pyramid level: cell stride in pixels plus its single base box size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelSpec {
    pub stride: usize,
    pub base_size: Vec<f64>,
}

impl LevelSpec {
    pub fn new(stride: usize, base_size: Vec<f64>) -> Self {
        Self { stride, base_size }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dims: usize,
    pub image_size: Vec<usize>,
    pub levels: Vec<LevelSpec>,
    pub num_classes: usize,
}

impl Default for GridSpec {
    /// Desk-scale default: 64x64 images, two levels with 8x8 and 16x16 anchors.
    fn default() -> Self {
        Self {
            dims: 2,
            image_size: vec![64, 64],
            levels: vec![
                LevelSpec::new(8, vec![8.0, 8.0]),
                LevelSpec::new(16, vec![16.0, 16.0]),
            ],
            num_classes: 2,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims != 2 && self.dims != 3 {
            return Err(Error::Config(format!("dims must be 2 or 3, got {}", self.dims)));
        }
        if self.image_size.len() != self.dims {
            return Err(Error::Config(format!(
                "image_size has {} components for dims {}",
                self.image_size.len(),
                self.dims
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.levels.is_empty() {
            return Err(Error::Config("grid needs at least one level".into()));
        }
        for (l, level) in self.levels.iter().enumerate() {
            if level.stride == 0 {
                return Err(Error::Config(format!("level {l}: stride must be >= 1")));
            }
            if level.base_size.len() != self.dims {
                return Err(Error::Config(format!(
                    "level {l}: base_size has {} components for dims {}",
                    level.base_size.len(),
                    self.dims
                )));
            }
            if level.base_size.iter().any(|&b| !(b > 0.0) || !b.is_finite()) {
                return Err(Error::Config(format!("level {l}: base sizes must be positive")));
            }
            if let Some(&bad) = self.image_size.iter().find(|&&s| s % level.stride != 0 || s == 0) {
                return Err(Error::Config(format!(
                    "level {l}: image extent {bad} not divisible by stride {}",
                    level.stride
                )));
            }
            if l > 0 {
                let prev = &self.levels[l - 1].base_size;
                if level.base_size.iter().zip(prev).any(|(b, p)| b <= p) {
                    return Err(Error::Config(format!(
                        "level {l}: base sizes must strictly increase across levels"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn level_shape(&self, level: usize) -> Vec<usize> {
        let stride = self.levels[level].stride;
        self.image_size.iter().map(|s| s / stride).collect()
    }

    pub fn cell_count(&self, level: usize) -> usize {
        self.level_shape(level).iter().product()
    }

    /// Centre of `cell` in pixels: `(index + 0.5) * stride`.
    pub fn cell_center(&self, level: usize, cell: &[usize]) -> Vec<f64> {
        let stride = self.levels[level].stride as f64;
        cell.iter().map(|&i| (i as f64 + 0.5) * stride).collect()
    }

    pub fn anchor_box(&self, level: usize, cell: &[usize]) -> BBox {
        BBox::new(self.cell_center(level, cell), self.levels[level].base_size.clone())
    }

    pub fn check_cell(&self, level: usize, cell: &[usize]) -> Result<()> {
        let shape = self.level_shape(level);
        if cell.len() != shape.len() || cell.iter().zip(&shape).any(|(c, s)| c >= s) {
            return Err(Error::OutOfRange {
                level,
                cell: cell.to_vec(),
                shape,
            });
        }
        Ok(())
    }

    /// All `(level, cell)` pairs in canonical order.
    pub fn cells(&self) -> impl Iterator<Item = (usize, Vec<usize>)> + '_ {
        (0..self.levels.len()).flat_map(move |l| {
            let shape = self.level_shape(l);
            (0..shape.iter().product::<usize>()).map(move |i| (l, unravel(&shape, i)))
        })
    }
}

/// Linear index of `cell` in a dense array of `shape`, dimension 0 fastest.
pub fn ravel(shape: &[usize], cell: &[usize]) -> usize {
    let mut idx = 0;
    let mut mul = 1;
    for (c, s) in cell.iter().zip(shape) {
        idx += c * mul;
        mul *= s;
    }
    idx
}

pub fn unravel(shape: &[usize], mut idx: usize) -> Vec<usize> {
    shape
        .iter()
        .map(|s| {
            let c = idx % s;
            idx /= s;
            c
        })
        .collect()
}

/// Axis-aligned box given by centre and extent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub center: Vec<f64>,
    pub size: Vec<f64>,
}

impl BBox {
    pub fn new(center: Vec<f64>, size: Vec<f64>) -> Self {
        debug_assert_eq!(center.len(), size.len());
        Self { center, size }
    }

    pub fn dims(&self) -> usize {
        self.center.len()
    }

    pub fn volume(&self) -> f64 {
        self.size.iter().product()
    }

    pub fn is_valid(&self) -> bool {
        self.center.len() == self.size.len()
            && self.center.iter().all(|c| c.is_finite())
            && self.size.iter().all(|&s| s > 0.0 && s.is_finite())
    }

    pub fn lo(&self, d: usize) -> f64 {
        self.center[d] - 0.5 * self.size[d]
    }

    pub fn hi(&self, d: usize) -> f64 {
        self.center[d] + 0.5 * self.size[d]
    }

    /// Clip to `[0, image_size]` per dimension. In-bounds dimensions are left
    /// bit-identical.
    pub fn clipped(&self, image_size: &[usize]) -> BBox {
        let mut out = self.clone();
        for (d, &extent) in image_size.iter().enumerate() {
            let extent = extent as f64;
            let (lo, hi) = (self.lo(d), self.hi(d));
            if lo >= 0.0 && hi <= extent {
                continue;
            }
            let hi = hi.clamp(0.0, extent);
            // keep an in-bounds sliver so the size invariant holds for boxes
            // pushed fully outside
            let size = (hi - lo.clamp(0.0, extent)).max(MIN_SIZE);
            let lo = lo.clamp(0.0, extent - size);
            out.center[d] = lo + size * 0.5;
            out.size[d] = size;
        }
        out
    }
}

/// Smallest extent a clipped box keeps along any dimension.
pub const MIN_SIZE: f64 = 1e-6;

/// Intersection over union of two axis-aligned boxes of equal dimensionality.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let mut inter = 1.0;
    for d in 0..a.dims() {
        let overlap = a.hi(d).min(b.hi(d)) - a.lo(d).max(b.lo(d));
        if overlap <= 0.0 {
            return 0.0;
        }
        inter *= overlap;
    }
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Encode `gt` relative to the anchor of `cell`:
/// `[(c_gt - c_cell) / base ..., ln(s_gt / base) ...]`.
pub fn encode_deltas(grid: &GridSpec, level: usize, cell: &[usize], gt: &BBox) -> Result<Vec<f64>> {
    grid.check_cell(level, cell)?;
    let base = &grid.levels[level].base_size;
    let center = grid.cell_center(level, cell);
    let dims = grid.dims;
    let mut deltas = Vec::with_capacity(2 * dims);
    for d in 0..dims {
        deltas.push((gt.center[d] - center[d]) / base[d]);
    }
    for d in 0..dims {
        deltas.push((gt.size[d] / base[d]).ln());
    }
    Ok(deltas)
}

/// Inverse of [`encode_deltas`], clipped to image bounds.
pub fn decode_deltas(grid: &GridSpec, level: usize, cell: &[usize], deltas: &[f64]) -> Result<BBox> {
    grid.check_cell(level, cell)?;
    let dims = grid.dims;
    if deltas.len() != 2 * dims {
        return Err(Error::Argument(format!(
            "expected {} deltas, got {}",
            2 * dims,
            deltas.len()
        )));
    }
    if deltas.iter().any(|w| !w.is_finite()) {
        return Err(Error::Numeric(format!("deltas {deltas:?}")));
    }
    let base = &grid.levels[level].base_size;
    let anchor_center = grid.cell_center(level, cell);
    let center = (0..dims)
        .map(|d| anchor_center[d] + deltas[d] * base[d])
        .collect();
    let size = (0..dims).map(|d| base[d] * deltas[dims + d].exp()).collect();
    Ok(BBox::new(center, size).clipped(&grid.image_size))
}

/// The anchor with the highest IoU against `target` over all levels and
/// cells. Ties go to the first in canonical (level, cell) order.
pub fn best_anchor(grid: &GridSpec, target: &BBox) -> (usize, Vec<usize>, f64) {
    ranked_anchors(grid, target)
        .into_iter()
        .next()
        .expect("grid has at least one cell")
}

/// Every anchor with its IoU against `target`, best first (stable on ties).
pub fn ranked_anchors(grid: &GridSpec, target: &BBox) -> Vec<(usize, Vec<usize>, f64)> {
    let mut all: Vec<(usize, Vec<usize>, f64)> = grid
        .cells()
        .map(|(l, c)| {
            let v = iou(&grid.anchor_box(l, &c), target);
            (l, c, v)
        })
        .collect();
    all.sort_by(|a, b| b.2.total_cmp(&a.2));
    all
}

/// Raw output of one cell in one pass.
#[derive(Clone, Debug, PartialEq)]
pub struct CellOutput {
    pub prob: Vec<f64>,
    pub pred_var: Vec<f64>,
    pub deltas: Vec<f64>,
}

impl CellOutput {
    pub fn validate(&self, num_classes: usize, dims: usize) -> std::result::Result<(), String> {
        if self.prob.len() != num_classes || self.pred_var.len() != num_classes {
            return Err(format!("expected {num_classes} class entries"));
        }
        if self.deltas.len() != 2 * dims {
            return Err(format!("expected {} deltas", 2 * dims));
        }
        if self.prob.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err("probability outside [0, 1]".into());
        }
        let total: f64 = self.prob.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(format!("probabilities sum to {total}"));
        }
        if self.pred_var.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err("predictive variance must be finite and non-negative".into());
        }
        if self.deltas.iter().any(|w| !w.is_finite()) {
            return Err("non-finite delta".into());
        }
        Ok(())
    }
}

/// Dense per-cell outputs of one level.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelOutputs {
    pub shape: Vec<usize>,
    pub cells: Vec<CellOutput>,
}

impl LevelOutputs {
    pub fn get(&self, cell: &[usize]) -> &CellOutput {
        &self.cells[ravel(&self.shape, cell)]
    }
}

/// Everything one stochastic forward pass produced for one scan.
#[derive(Clone, Debug, PartialEq)]
pub struct PassGrid {
    pub scan_id: String,
    pub pass_index: usize,
    pub levels: Vec<LevelOutputs>,
}

impl PassGrid {
    /// Shape check against `grid`.
    pub fn conforms_to(&self, grid: &GridSpec) -> bool {
        self.levels.len() == grid.levels.len()
            && self.levels.iter().enumerate().all(|(l, lv)| {
                let shape = grid.level_shape(l);
                lv.shape == shape && lv.cells.len() == shape.iter().product::<usize>()
            })
    }
}

/// Ground-truth label kind. Decoys look like objects but are not findings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GtKind {
    Object,
    Decoy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtInstance {
    pub bbox: BBox,
    pub kind: GtKind,
}

/// A decoded, aggregated box with its uncertainty estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub scan_id: String,
    pub bbox: BBox,
    pub prob: f64,
    pub v_mc: f64,
    pub v_pred: f64,
    pub v_avg: f64,
    pub level: usize,
    pub cell: Vec<usize>,
}

impl Detection {
    pub fn new(
        scan_id: impl Into<String>,
        bbox: BBox,
        prob: f64,
        v_mc: f64,
        v_pred: f64,
        level: usize,
        cell: Vec<usize>,
    ) -> Self {
        Self {
            scan_id: scan_id.into(),
            bbox,
            prob,
            v_mc,
            v_pred,
            v_avg: (v_mc + v_pred) / 2.0,
            level,
            cell,
        }
    }
}
