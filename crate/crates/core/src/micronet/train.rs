use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{attenuated_cls_loss_with_noise, ce_loss, smooth_l1, NoiseSampler};
use super::net::{MicroNet, RawLevel};
use crate::aggregate::softmax;
use crate::error::{Error, Result};
use crate::geometry::{encode_deltas, ranked_anchors, ravel, CellOutput, GridSpec, GtKind, LevelOutputs, PassGrid};
use crate::synth::{Image, Scene};

/// Training target of one cell.
#[derive(Clone, Debug, PartialEq)]
pub enum CellTarget {
    Negative,
    Positive { deltas: Vec<f64> },
}

/// Per-level, per-cell targets in canonical cell order.
pub type AnchorTargets = Vec<Vec<CellTarget>>;

/// Assign every object to the single anchor (over all levels) with the
/// highest IoU. When two objects want the same cell the higher IoU keeps it
/// and the other moves to its next-best cell. Decoys and unmatched cells are
/// negatives.
pub fn match_anchors(scene: &Scene, grid: &GridSpec) -> Result<AnchorTargets> {
    let mut targets: AnchorTargets = (0..grid.levels.len())
        .map(|l| vec![CellTarget::Negative; grid.cell_count(l)])
        .collect();
    let objects: Vec<_> = scene.gt.iter().filter(|g| g.kind == GtKind::Object).collect();
    let rankings: Vec<_> = objects.iter().map(|g| ranked_anchors(grid, &g.bbox)).collect();
    let mut next = vec![0usize; objects.len()];
    // (level, linear cell) -> (object, iou)
    let mut owner: std::collections::BTreeMap<(usize, usize), (usize, f64)> = Default::default();
    let mut queue: std::collections::VecDeque<usize> = (0..objects.len()).collect();
    while let Some(o) = queue.pop_front() {
        let Some((l, cell, v)) = rankings[o].get(next[o]) else {
            return Err(Error::Input(format!(
                "scan {}: more objects than anchors",
                scene.scan_id
            )));
        };
        next[o] += 1;
        let key = (*l, ravel(&grid.level_shape(*l), cell));
        match owner.get(&key) {
            None => {
                owner.insert(key, (o, *v));
            }
            Some(&(other, ov)) if *v > ov => {
                owner.insert(key, (o, *v));
                queue.push_back(other);
            }
            Some(_) => queue.push_front(o),
        }
    }
    for ((l, idx), (o, _)) in owner {
        let cell = crate::geometry::unravel(&grid.level_shape(l), idx);
        let deltas = encode_deltas(grid, l, &cell, &objects[o].bbox)?;
        targets[l][idx] = CellTarget::Positive { deltas };
    }
    Ok(targets)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Ce,
    Attenuated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss_kind: LossKind,
    pub mc_integration_samples: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Scenes per optimiser step.
    pub batch_size: usize,
    pub neg_pos_ratio: usize,
    pub smooth_l1_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss_kind: LossKind::Attenuated,
            mc_integration_samples: 10,
            learning_rate: 1e-4,
            epochs: 200,
            batch_size: 1,
            neg_pos_ratio: 3,
            smooth_l1_weight: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mc_integration_samples == 0 {
            return Err(Error::Config("mc_integration_samples must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.smooth_l1_weight >= 0.0) {
            return Err(Error::Config("smooth_l1_weight must be >= 0".into()));
        }
        Ok(())
    }
}

/// Adam with the usual (0.9, 0.999) moments.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

struct CellLoss {
    loss: f64,
    grad_z: Vec<f64>,
    grad_s: Vec<f64>,
}

fn cls_loss(kind: LossKind, z: &[f64], s: &[f64], label: usize, eps: &[Vec<f64>]) -> Result<CellLoss> {
    match kind {
        LossKind::Ce => {
            let (loss, grad_z) = ce_loss(z, label);
            Ok(CellLoss {
                loss,
                grad_z,
                grad_s: vec![0.0; s.len()],
            })
        }
        LossKind::Attenuated => {
            let a = attenuated_cls_loss_with_noise(z, s, label, eps)?;
            Ok(CellLoss {
                loss: a.loss,
                grad_z: a.grad_z,
                grad_s: a.grad_s,
            })
        }
    }
}

/// Detection loss of one forward output against its targets: the
/// classification term over positives and mined hard negatives plus weighted
/// smooth-L1 on positive deltas, normalised by the positive count. Returns the
/// loss and its gradient with respect to every raw output.
pub fn detection_loss(
    outputs: &[RawLevel],
    targets: &AnchorTargets,
    cfg: &TrainConfig,
    noise_seed: u64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut sampler = NoiseSampler::new(noise_seed);
    let mut grads: Vec<Vec<f64>> = outputs.iter().map(|o| vec![0.0; o.values.len()]).collect();
    let mut n_pos = 0usize;
    let mut total = 0.0;
    let mut negatives: Vec<(f64, usize, usize, CellLoss)> = Vec::new();

    for (l, (out, level_targets)) in outputs.iter().zip(targets).enumerate() {
        let k = out.num_classes;
        let width = out.width();
        for (idx, target) in level_targets.iter().enumerate() {
            let z = out.z(idx);
            let s = out.s(idx);
            let eps = match cfg.loss_kind {
                LossKind::Attenuated => sampler.draw(cfg.mc_integration_samples, k),
                LossKind::Ce => Vec::new(),
            };
            let label = match target {
                CellTarget::Positive { .. } => 1,
                CellTarget::Negative => 0,
            };
            let cl = cls_loss(cfg.loss_kind, z, s, label, &eps).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("level {l} cell {idx}: {m}")),
                other => other,
            })?;
            match target {
                CellTarget::Positive { deltas } => {
                    n_pos += 1;
                    total += cl.loss;
                    let g = &mut grads[l][idx * width..(idx + 1) * width];
                    g[..k].copy_from_slice(&cl.grad_z);
                    g[k..2 * k].copy_from_slice(&cl.grad_s);
                    let (reg, reg_grad) = smooth_l1(out.deltas(idx), deltas);
                    total += cfg.smooth_l1_weight * reg;
                    for (gi, rg) in g[2 * k..].iter_mut().zip(reg_grad) {
                        *gi = cfg.smooth_l1_weight * rg;
                    }
                }
                CellTarget::Negative => negatives.push((cl.loss, l, idx, cl)),
            }
        }
    }

    let n_neg = (cfg.neg_pos_ratio * n_pos.max(1)).min(negatives.len());
    negatives.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    for (loss, l, idx, cl) in negatives.into_iter().take(n_neg) {
        total += loss;
        let k = outputs[l].num_classes;
        let width = outputs[l].width();
        let g = &mut grads[l][idx * width..(idx + 1) * width];
        g[..k].copy_from_slice(&cl.grad_z);
        g[k..2 * k].copy_from_slice(&cl.grad_s);
    }

    let norm = n_pos.max(1) as f64;
    for g in grads.iter_mut().flatten() {
        *g /= norm;
    }
    Ok((total / norm, grads))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Mean per-scene loss of every epoch.
    pub epoch_loss: Vec<f64>,
}

/// Loss and parameter gradient of one scene for a given dropout/noise seed.
pub fn scene_gradient(
    net: &MicroNet,
    image: &Image,
    targets: &AnchorTargets,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(f64, Vec<f64>)> {
    let (outputs, cache) = net.forward_cached(image, true, seed)?;
    let (loss, grad_out) = detection_loss(&outputs, targets, cfg, seed ^ 0x9e37_79b9_7f4a_7c15)?;
    Ok((loss, net.backward(&cache, &grad_out)))
}

/// Adam training with dropout active. Scene order is reshuffled every epoch
/// from `cfg.seed`; everything is deterministic given the seed.
pub fn train(net: &mut MicroNet, scenes: &[Scene], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Argument("training needs at least one scene".into()));
    }
    let targets: Vec<AnchorTargets> = scenes
        .iter()
        .map(|s| match_anchors(s, net.grid()))
        .collect::<Result<_>>()?;
    let mut adam = Adam::new(net.num_params(), cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut acc = vec![0.0; net.num_params()];
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            acc.fill(0.0);
            for &i in batch {
                let step_seed: u64 = rng.gen();
                let (loss, grad) = scene_gradient(net, &scenes[i].image, &targets[i], cfg, step_seed)
                    .map_err(|e| Error::Training {
                        epoch,
                        detail: e.to_string(),
                    })?;
                if !loss.is_finite() {
                    return Err(Error::Training {
                        epoch,
                        detail: format!("non-finite loss on scan {}", scenes[i].scan_id),
                    });
                }
                epoch_total += loss;
                for (a, g) in acc.iter_mut().zip(&grad) {
                    *a += g / batch.len() as f64;
                }
            }
            adam.step(&mut net.params, &acc);
        }
        let mean = epoch_total / scenes.len() as f64;
        if !mean.is_finite() || net.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Training {
                epoch,
                detail: "parameters diverged".into(),
            });
        }
        history.push(mean);
    }
    Ok(TrainReport { epoch_loss: history })
}

/// Convert raw head outputs into a pass grid: softmax probabilities,
/// `sigma^2 = exp(s)`, deltas as-is.
pub fn to_pass_grid(raw: &[RawLevel], scan_id: &str, pass_index: usize) -> PassGrid {
    let levels = raw
        .iter()
        .map(|lv| LevelOutputs {
            shape: lv.shape.clone(),
            cells: (0..lv.cell_count())
                .map(|i| CellOutput {
                    prob: softmax(lv.z(i)),
                    pred_var: lv.s(i).iter().map(|s| s.exp()).collect(),
                    deltas: lv.deltas(i).to_vec(),
                })
                .collect(),
        })
        .collect();
    PassGrid {
        scan_id: scan_id.to_string(),
        pass_index,
        levels,
    }
}

/// `passes` forward passes with dropout active and independent masks.
pub fn mc_infer(net: &MicroNet, image: &Image, scan_id: &str, passes: usize, seed: u64) -> Result<Vec<PassGrid>> {
    if passes == 0 {
        return Err(Error::Argument("mc_infer needs at least one pass".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..passes)
        .map(|t| {
            let mask_seed: u64 = rng.gen();
            Ok(to_pass_grid(&net.forward(image, true, mask_seed)?, scan_id, t))
        })
        .collect()
}

/// Single pass of the expectation network (dropout off).
pub fn deterministic_infer(net: &MicroNet, image: &Image, scan_id: &str) -> Result<Vec<PassGrid>> {
    Ok(vec![to_pass_grid(&net.forward(image, false, 0)?, scan_id, 0)])
}
