//! Synthetic scenes with true objects and look-alike decoys, plus a
//! stochastic stand-in detector that emits Monte Carlo pass grids without
//! any training.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    best_anchor, encode_deltas, ravel, BBox, CellOutput, GridSpec, GtInstance, GtKind, LevelOutputs, PassGrid,
};

const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

/// Dense single-channel image, row-major with x fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub scan_id: String,
    pub image: Image,
    pub gt: Vec<GtInstance>,
}

/// Appearance parameters of generated scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneStyle {
    pub background: f64,
    pub pixel_noise: f64,
    pub min_size: f64,
    pub max_size: f64,
    pub object_amplitude: (f64, f64),
    pub decoy_amplitude: (f64, f64),
    /// Gaussian sigma as a fraction of box size.
    pub sigma_fraction: f64,
    /// Minimum pixel gap kept between any two instance boxes.
    pub gap: f64,
}

impl Default for SceneStyle {
    fn default() -> Self {
        Self {
            background: 0.1,
            pixel_noise: 0.03,
            min_size: 6.0,
            max_size: 20.0,
            object_amplitude: (0.55, 0.95),
            decoy_amplitude: (0.35, 0.75),
            sigma_fraction: 0.25,
            gap: 2.0,
        }
    }
}

impl SceneStyle {
    pub fn validate(&self) -> Result<()> {
        let ok = self.min_size > 0.0
            && self.max_size >= self.min_size
            && self.pixel_noise >= 0.0
            && self.sigma_fraction > 0.0
            && self.gap >= 0.0
            && self.object_amplitude.0 <= self.object_amplitude.1
            && self.decoy_amplitude.0 <= self.decoy_amplitude.1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid scene style {self:?}")))
        }
    }
}

fn boxes_too_close(a: &BBox, b: &BBox, gap: f64) -> bool {
    (0..a.dims()).all(|d| a.lo(d) - gap < b.hi(d) && b.lo(d) - gap < a.hi(d))
}

/// Scene with `n_objects` objects and `n_decoys` decoys using the default style.
pub fn generate_scene(grid: &GridSpec, n_objects: usize, n_decoys: usize, seed: u64) -> Result<Scene> {
    generate_scene_with(&SceneStyle::default(), grid, n_objects, n_decoys, seed)
}

pub fn generate_scene_with(
    style: &SceneStyle,
    grid: &GridSpec,
    n_objects: usize,
    n_decoys: usize,
    seed: u64,
) -> Result<Scene> {
    grid.validate()?;
    style.validate()?;
    if grid.dims != 2 {
        return Err(Error::Config("scenes are two-dimensional".into()));
    }
    let (width, height) = (grid.image_size[0], grid.image_size[1]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let kinds = std::iter::repeat_n(GtKind::Object, n_objects).chain(std::iter::repeat_n(GtKind::Decoy, n_decoys));
    let mut gt: Vec<GtInstance> = Vec::with_capacity(n_objects + n_decoys);
    let mut amplitudes = Vec::with_capacity(n_objects + n_decoys);
    let mut attempts = 0;
    for kind in kinds {
        loop {
            attempts += 1;
            if attempts > MAX_PLACEMENT_ATTEMPTS {
                return Err(Error::Capacity {
                    requested: n_objects + n_decoys,
                    attempts: MAX_PLACEMENT_ATTEMPTS,
                });
            }
            let size = rng.gen_range(style.min_size..=style.max_size);
            let half = size / 2.0;
            if 2.0 * half > width as f64 || 2.0 * half > height as f64 {
                continue;
            }
            let cx = rng.gen_range(half..=width as f64 - half);
            let cy = rng.gen_range(half..=height as f64 - half);
            let candidate = BBox::new(vec![cx, cy], vec![size, size]);
            if gt.iter().any(|g| boxes_too_close(&g.bbox, &candidate, style.gap)) {
                continue;
            }
            let (lo, hi) = match kind {
                GtKind::Object => style.object_amplitude,
                GtKind::Decoy => style.decoy_amplitude,
            };
            amplitudes.push(rng.gen_range(lo..=hi));
            gt.push(GtInstance { bbox: candidate, kind });
            break;
        }
    }

    let mut image = Image::filled(width, height, style.background);
    for (inst, amp) in gt.iter().zip(&amplitudes) {
        let sigma = style.sigma_fraction * inst.bbox.size[0];
        let (cx, cy) = (inst.bbox.center[0], inst.bbox.center[1]);
        let reach = (4.0 * sigma).ceil() as isize;
        let (x0, y0) = (cx.floor() as isize, cy.floor() as isize);
        for y in (y0 - reach).max(0)..=(y0 + reach).min(height as isize - 1) {
            for x in (x0 - reach).max(0)..=(x0 + reach).min(width as isize - 1) {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                image.data[y as usize * width + x as usize] += amp * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    for v in image.data.iter_mut() {
        let n: f64 = StandardNormal.sample(&mut rng);
        *v = (*v + style.pixel_noise * n).clamp(0.0, 1.0);
    }
    Ok(Scene {
        scan_id: format!("s{seed}"),
        image,
        gt,
    })
}

/// Instance counts per generated scene, each drawn uniformly from the range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub objects: (usize, usize),
    pub decoys: (usize, usize),
    pub style: SceneStyle,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            objects: (1, 3),
            decoys: (1, 3),
            style: SceneStyle::default(),
        }
    }
}

/// `n` scenes whose per-scene seeds are drawn from `seed`.
pub fn generate_dataset(grid: &GridSpec, cfg: &DatasetConfig, n: usize, seed: u64) -> Result<Vec<Scene>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let scene_seed: u64 = rng.gen();
            let n_obj = rng.gen_range(cfg.objects.0..=cfg.objects.1);
            let n_dec = rng.gen_range(cfg.decoys.0..=cfg.decoys.1);
            generate_scene_with(&cfg.style, grid, n_obj, n_dec, scene_seed)
        })
        .collect()
}

/// Parameters of the stochastic stand-in detector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulatorConfig {
    pub passes: usize,
    pub object_prob_mean: f64,
    /// Spread of an object's probability, both per instance and per pass.
    pub object_prob_std: f64,
    pub decoy_prob_mean: f64,
    pub decoy_prob_std: f64,
    /// Extra per-pass jitter on decoy probabilities.
    pub decoy_extra_noise: f64,
    /// Fraction of background cells that fire as spurious candidates.
    pub background_fp_rate: f64,
    pub background_prob_std: f64,
    /// Predictive variance emitted for the background class everywhere.
    pub base_pred_var: f64,
    pub object_pred_var: f64,
    pub decoy_pred_var: f64,
    /// Log-normal jitter on emitted predictive variances.
    pub pred_var_jitter: f64,
    pub delta_noise: f64,
    pub rng_seed: u64,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        Self {
            passes: 10,
            object_prob_mean: 0.75,
            object_prob_std: 0.08,
            decoy_prob_mean: 0.6,
            decoy_prob_std: 0.1,
            decoy_extra_noise: 0.15,
            background_fp_rate: 0.03,
            background_prob_std: 0.02,
            base_pred_var: 0.3,
            object_pred_var: 0.3,
            decoy_pred_var: 1.2,
            pred_var_jitter: 0.1,
            delta_noise: 0.05,
            rng_seed: 0,
        }
    }
}

impl SimulatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.passes == 0 {
            return Err(Error::Config("passes must be >= 1".into()));
        }
        let stds = [
            self.object_prob_std,
            self.decoy_prob_std,
            self.decoy_extra_noise,
            self.background_prob_std,
            self.pred_var_jitter,
            self.delta_noise,
        ];
        if stds.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::Config("standard deviations must be >= 0".into()));
        }
        let unit = [self.object_prob_mean, self.decoy_prob_mean, self.background_fp_rate];
        if unit.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::Config("means and rates must lie in [0, 1]".into()));
        }
        if [self.base_pred_var, self.object_pred_var, self.decoy_pred_var]
            .iter()
            .any(|v| !(*v >= 0.0))
        {
            return Err(Error::Config("predictive variances must be >= 0".into()));
        }
        Ok(())
    }
}

/// Stable FNV-1a so per-scan streams do not depend on std's hasher.
pub(crate) fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

enum CellRole {
    Instance { kind: GtKind, deltas: Vec<f64>, offset: f64 },
    Spurious { mean: f64 },
    Quiet,
}

/// Emit `cfg.passes` pass grids for `scene`. The best-matching anchor of each
/// instance fires with a kind-dependent probability; decoys additionally get
/// per-pass jitter and a larger foreground predictive variance.
pub fn simulate_mc_passes(scene: &Scene, grid: &GridSpec, cfg: &SimulatorConfig) -> Result<Vec<PassGrid>> {
    grid.validate()?;
    cfg.validate()?;
    if grid.num_classes != 2 {
        return Err(Error::Config("the simulator emits binary outputs".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed ^ fnv1a(&scene.scan_id));
    let normal = move |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };

    let mut roles: Vec<Vec<CellRole>> = (0..grid.levels.len())
        .map(|l| {
            (0..grid.cell_count(l))
                .map(|_| {
                    if rng.gen::<f64>() < cfg.background_fp_rate {
                        CellRole::Spurious {
                            mean: rng.gen_range(0.1..0.5),
                        }
                    } else {
                        CellRole::Quiet
                    }
                })
                .collect()
        })
        .collect();
    for inst in &scene.gt {
        let (l, cell, _) = best_anchor(grid, &inst.bbox);
        let deltas = encode_deltas(grid, l, &cell, &inst.bbox)?;
        let std = match inst.kind {
            GtKind::Object => cfg.object_prob_std,
            GtKind::Decoy => cfg.decoy_prob_std,
        };
        let offset = std * normal(&mut rng);
        roles[l][ravel(&grid.level_shape(l), &cell)] = CellRole::Instance {
            kind: inst.kind,
            deltas,
            offset,
        };
    }

    let n_deltas = 2 * grid.dims;
    let mut passes = Vec::with_capacity(cfg.passes);
    for t in 0..cfg.passes {
        let mut levels = Vec::with_capacity(grid.levels.len());
        for (l, level_roles) in roles.iter().enumerate() {
            let mut cells = Vec::with_capacity(level_roles.len());
            for role in level_roles {
                let jitter_var = |rng: &mut ChaCha8Rng, base: f64| base * (cfg.pred_var_jitter * normal(rng)).exp();
                let (p, fg_var, deltas) = match role {
                    CellRole::Instance { kind, deltas, offset } => {
                        let (mean, std, extra, var) = match kind {
                            GtKind::Object => (cfg.object_prob_mean, cfg.object_prob_std, 0.0, cfg.object_pred_var),
                            GtKind::Decoy => {
                                (cfg.decoy_prob_mean, cfg.decoy_prob_std, cfg.decoy_extra_noise, cfg.decoy_pred_var)
                            }
                        };
                        let p = mean + offset + std * normal(&mut rng) + extra * normal(&mut rng);
                        let w: Vec<f64> = deltas.iter().map(|w| w + cfg.delta_noise * normal(&mut rng)).collect();
                        (p, jitter_var(&mut rng, var), w)
                    }
                    CellRole::Spurious { mean } => {
                        let p = mean + 0.1 * normal(&mut rng);
                        let w = (0..n_deltas).map(|_| cfg.delta_noise * normal(&mut rng)).collect();
                        (p, jitter_var(&mut rng, cfg.decoy_pred_var), w)
                    }
                    CellRole::Quiet => {
                        let p = (cfg.background_prob_std * normal(&mut rng)).abs();
                        let w = (0..n_deltas).map(|_| cfg.delta_noise * normal(&mut rng)).collect();
                        (p, jitter_var(&mut rng, cfg.base_pred_var), w)
                    }
                };
                let p = p.clamp(0.0, 1.0);
                cells.push(CellOutput {
                    prob: vec![1.0 - p, p],
                    pred_var: vec![cfg.base_pred_var, fg_var],
                    deltas,
                });
            }
            levels.push(LevelOutputs {
                shape: grid.level_shape(l),
                cells,
            });
        }
        passes.push(PassGrid {
            scan_id: scene.scan_id.clone(),
            pass_index: t,
            levels,
        });
    }
    Ok(passes)
}
