//! On-disk formats: NDJSON pass dumps, detections, ground truth and scenes,
//! plus the CSV tables emitted for plotting.
//!
//! A pass dump starts with a [`DumpHeader`] line carrying every shape, then
//! holds one record per (scan, pass, level, cell) in any order. Numbers are
//! written in shortest round-trip form so write -> read is bit-exact.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{FrocPoint, GroundTruth, HistBin, SweepCell};
use crate::geometry::{
    ravel, unravel, BBox, CellOutput, Detection, GridSpec, GtInstance, GtKind, LevelOutputs, LevelSpec, PassGrid,
};
use crate::synth::{Image, Scene};

pub const DUMP_FORMAT: &str = "mcdet/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DumpHeader {
    pub format: String,
    pub dims: usize,
    pub image_size: Vec<usize>,
    pub levels: Vec<LevelSpec>,
    pub passes: usize,
    pub num_classes: usize,
}

impl DumpHeader {
    pub fn new(grid: &GridSpec, passes: usize) -> Self {
        Self {
            format: DUMP_FORMAT.to_string(),
            dims: grid.dims,
            image_size: grid.image_size.clone(),
            levels: grid.levels.clone(),
            passes,
            num_classes: grid.num_classes,
        }
    }

    pub fn grid(&self) -> GridSpec {
        GridSpec {
            dims: self.dims,
            image_size: self.image_size.clone(),
            levels: self.levels.clone(),
            num_classes: self.num_classes,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CellRecord {
    scan: String,
    pass: usize,
    level: usize,
    cell: Vec<usize>,
    p: Vec<f64>,
    s2: Vec<f64>,
    w: Vec<f64>,
}

/// Pass grids of every scan in a dump, keyed by scan id, passes ordered by index.
pub type PassSet = BTreeMap<String, Vec<PassGrid>>;

fn to_line<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string(value).map_err(|e| Error::Input(e.to_string()))
}

pub fn write_pass_dump<W: Write>(mut out: W, grid: &GridSpec, passes: usize, set: &PassSet) -> Result<()> {
    writeln!(out, "{}", to_line(&DumpHeader::new(grid, passes))?)?;
    for grids in set.values() {
        for pg in grids {
            for (l, lv) in pg.levels.iter().enumerate() {
                for (idx, c) in lv.cells.iter().enumerate() {
                    let rec = CellRecord {
                        scan: pg.scan_id.clone(),
                        pass: pg.pass_index,
                        level: l,
                        cell: unravel(&lv.shape, idx),
                        p: c.prob.clone(),
                        s2: c.pred_var.clone(),
                        w: c.deltas.clone(),
                    };
                    writeln!(out, "{}", to_line(&rec)?)?;
                }
            }
        }
    }
    Ok(())
}

fn parse_header(line: &str) -> Result<DumpHeader> {
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::parse(1, e.to_string()))?;
    match value.get("format").and_then(|f| f.as_str()) {
        Some(DUMP_FORMAT) => {}
        Some(other) => return Err(Error::parse(1, format!("unknown format tag {other:?}"))),
        None => return Err(Error::parse(1, "missing dump header")),
    }
    let header: DumpHeader = serde_json::from_value(value).map_err(|e| Error::parse(1, e.to_string()))?;
    header
        .grid()
        .validate()
        .map_err(|e| Error::parse(1, e.to_string()))?;
    if header.passes == 0 {
        return Err(Error::parse(1, "header declares zero passes"));
    }
    Ok(header)
}

/// Read a pass dump. Records may come in any order; every scan must provide
/// all declared passes and every cell exactly once.
pub fn read_pass_dump<R: BufRead>(input: R) -> Result<(DumpHeader, PassSet)> {
    let mut lines = input.lines();
    let first = match lines.next() {
        Some(l) => l?,
        None => return Err(Error::parse(1, "missing dump header")),
    };
    let header = parse_header(&first)?;
    let grid = header.grid();
    let shapes: Vec<Vec<usize>> = (0..grid.levels.len()).map(|l| grid.level_shape(l)).collect();

    // scan -> pass -> level -> cell slot
    let mut slots: BTreeMap<String, Vec<Vec<Vec<Option<CellOutput>>>>> = BTreeMap::new();
    let mut last_line = 1;
    for (i, line) in lines.enumerate() {
        let n = i + 2;
        last_line = n;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CellRecord = serde_json::from_str(&line).map_err(|e| Error::parse(n, e.to_string()))?;
        if rec.pass >= header.passes {
            return Err(Error::parse(n, format!("pass {} >= declared {}", rec.pass, header.passes)));
        }
        let shape = shapes
            .get(rec.level)
            .ok_or_else(|| Error::parse(n, format!("unknown level {}", rec.level)))?;
        if rec.cell.len() != shape.len() || rec.cell.iter().zip(shape).any(|(c, s)| c >= s) {
            return Err(Error::parse(n, format!("cell {:?} outside level shape {shape:?}", rec.cell)));
        }
        let out = CellOutput {
            prob: rec.p,
            pred_var: rec.s2,
            deltas: rec.w,
        };
        out.validate(grid.num_classes, grid.dims)
            .map_err(|m| Error::parse(n, m))?;
        let scan = slots.entry(rec.scan.clone()).or_insert_with(|| {
            (0..header.passes)
                .map(|_| shapes.iter().map(|s| vec![None; s.iter().product()]).collect())
                .collect()
        });
        let slot = &mut scan[rec.pass][rec.level][ravel(shape, &rec.cell)];
        if slot.is_some() {
            return Err(Error::parse(
                n,
                format!(
                    "duplicate record for scan {} pass {} level {} cell {:?}",
                    rec.scan, rec.pass, rec.level, rec.cell
                ),
            ));
        }
        *slot = Some(out);
    }

    let mut set = PassSet::new();
    for (scan, passes) in slots {
        let mut grids = Vec::with_capacity(passes.len());
        for (t, levels) in passes.into_iter().enumerate() {
            let mut lv_out = Vec::with_capacity(levels.len());
            for (l, cells) in levels.into_iter().enumerate() {
                let cells = cells
                    .into_iter()
                    .enumerate()
                    .map(|(idx, c)| {
                        c.ok_or_else(|| {
                            Error::parse(
                                last_line,
                                format!(
                                    "scan {scan} pass {t} level {l} cell {:?} missing",
                                    unravel(&shapes[l], idx)
                                ),
                            )
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                lv_out.push(LevelOutputs {
                    shape: shapes[l].clone(),
                    cells,
                });
            }
            grids.push(PassGrid {
                scan_id: scan.clone(),
                pass_index: t,
                levels: lv_out,
            });
        }
        set.insert(scan, grids);
    }
    Ok((header, set))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionRecord {
    scan: String,
    center: Vec<f64>,
    size: Vec<f64>,
    prob: f64,
    v_mc: f64,
    v_pred: f64,
    v_avg: f64,
    level: usize,
    cell: Vec<usize>,
}

pub fn write_detections<W: Write>(mut out: W, dets: &[Detection]) -> Result<()> {
    for d in dets {
        let rec = DetectionRecord {
            scan: d.scan_id.clone(),
            center: d.bbox.center.clone(),
            size: d.bbox.size.clone(),
            prob: d.prob,
            v_mc: d.v_mc,
            v_pred: d.v_pred,
            v_avg: d.v_avg,
            level: d.level,
            cell: d.cell.clone(),
        };
        writeln!(out, "{}", to_line(&rec)?)?;
    }
    Ok(())
}

pub fn read_detections<R: BufRead>(input: R) -> Result<Vec<Detection>> {
    let mut dets = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let n = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: DetectionRecord = serde_json::from_str(&line).map_err(|e| Error::parse(n, e.to_string()))?;
        let bbox = BBox {
            center: r.center,
            size: r.size,
        };
        if !bbox.is_valid() {
            return Err(Error::parse(n, "invalid box"));
        }
        if !(0.0..=1.0).contains(&r.prob) || !(r.v_mc >= 0.0) || !(r.v_pred >= 0.0) {
            return Err(Error::parse(n, "probability or variance out of range"));
        }
        let d = Detection::new(r.scan, bbox, r.prob, r.v_mc, r.v_pred, r.level, r.cell);
        if d.v_avg.to_bits() != r.v_avg.to_bits() {
            return Err(Error::parse(n, "v_avg is not the mean of v_mc and v_pred"));
        }
        dets.push(d);
    }
    Ok(dets)
}

/// A ground-truth line. A line with only `scan` declares a scan without
/// instances so it still counts towards FP per scan.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GtRecord {
    scan: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    center: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    size: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kind: Option<GtKind>,
}

pub fn write_ground_truth<W: Write>(mut out: W, gts: &GroundTruth) -> Result<()> {
    for (scan, list) in gts {
        if list.is_empty() {
            let rec = GtRecord {
                scan: scan.clone(),
                center: None,
                size: None,
                kind: None,
            };
            writeln!(out, "{}", to_line(&rec)?)?;
        }
        for g in list {
            let rec = GtRecord {
                scan: scan.clone(),
                center: Some(g.bbox.center.clone()),
                size: Some(g.bbox.size.clone()),
                kind: Some(g.kind),
            };
            writeln!(out, "{}", to_line(&rec)?)?;
        }
    }
    Ok(())
}

pub fn read_ground_truth<R: BufRead>(input: R) -> Result<GroundTruth> {
    let mut gts = GroundTruth::new();
    for (i, line) in input.lines().enumerate() {
        let n = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: GtRecord = serde_json::from_str(&line).map_err(|e| Error::parse(n, e.to_string()))?;
        let entry = gts.entry(r.scan).or_default();
        match (r.center, r.size, r.kind) {
            (None, None, None) => {}
            (Some(center), Some(size), Some(kind)) => {
                let bbox = BBox { center, size };
                if !bbox.is_valid() {
                    return Err(Error::parse(n, "invalid box"));
                }
                entry.push(GtInstance { bbox, kind });
            }
            _ => return Err(Error::parse(n, "center, size and kind must appear together")),
        }
    }
    Ok(gts)
}

pub fn ground_truth_of(scenes: &[Scene]) -> GroundTruth {
    scenes.iter().map(|s| (s.scan_id.clone(), s.gt.clone())).collect()
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneRecord {
    scan: String,
    width: usize,
    height: usize,
    pixels: Vec<f64>,
    gt: Vec<GtInstance>,
}

pub fn write_scenes<W: Write>(mut out: W, scenes: &[Scene]) -> Result<()> {
    for s in scenes {
        let rec = SceneRecord {
            scan: s.scan_id.clone(),
            width: s.image.width,
            height: s.image.height,
            pixels: s.image.data.clone(),
            gt: s.gt.clone(),
        };
        writeln!(out, "{}", to_line(&rec)?)?;
    }
    Ok(())
}

pub fn read_scenes<R: BufRead>(input: R) -> Result<Vec<Scene>> {
    let mut scenes = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let n = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: SceneRecord = serde_json::from_str(&line).map_err(|e| Error::parse(n, e.to_string()))?;
        if r.pixels.len() != r.width * r.height || r.pixels.iter().any(|p| !p.is_finite()) {
            return Err(Error::parse(n, "pixel array does not match width x height"));
        }
        scenes.push(Scene {
            scan_id: r.scan,
            image: Image {
                width: r.width,
                height: r.height,
                data: r.pixels,
            },
            gt: r.gt,
        });
    }
    Ok(scenes)
}

fn csv_writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().has_headers(true).from_writer(out)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Input(e.to_string())
}

pub fn write_froc_csv<W: Write>(out: W, points: &[FrocPoint]) -> Result<()> {
    let mut w = csv_writer(out);
    w.write_record(["fp_per_scan", "sensitivity"]).map_err(csv_err)?;
    for p in points {
        w.write_record([p.fp_per_scan.to_string(), p.sensitivity.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_sweep_csv<W: Write>(out: W, cells: &[SweepCell]) -> Result<()> {
    let mut w = csv_writer(out);
    w.write_record(["p_thr", "u_thr", "precision", "recall", "f1", "cpm"])
        .map_err(csv_err)?;
    for c in cells {
        w.write_record(
            [c.prob_threshold, c.unc_threshold, c.precision, c.recall, c.f1, c.cpm].map(|v| v.to_string()),
        )
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_hist_csv<W: Write>(out: W, bins: &[HistBin]) -> Result<()> {
    let mut w = csv_writer(out);
    w.write_record(["bin_lo", "bin_hi", "tp", "fp"]).map_err(csv_err)?;
    for b in bins {
        w.write_record([b.lo.to_string(), b.hi.to_string(), b.tp.to_string(), b.fp.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
