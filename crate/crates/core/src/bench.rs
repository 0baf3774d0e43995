//! Seeded end-to-end experiments on synthetic scenes: train a micro detector
//! under one of the three model regimes, run inference on held-out scenes,
//! aggregate, and score.

use serde::{Deserialize, Serialize};

use crate::aggregate::{postprocess, AggregationConfig};
use crate::error::Result;
use crate::geometry::{Detection, GridSpec};
use crate::micronet::{deterministic_infer, mc_infer, train, ArchConfig, LossKind, MicroNet, TrainConfig, TrainReport};
use crate::synth::Scene;

/// The three detector regimes compared by the benchmark.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// No dropout anywhere, cross-entropy loss, single deterministic pass.
    M1,
    /// Dropout in training and MC inference, cross-entropy loss.
    M2,
    /// Dropout and MC inference with the attenuated classification loss.
    M3,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::M1, Variant::M2, Variant::M3];

    pub fn arch(self, base: &ArchConfig) -> ArchConfig {
        match self {
            Variant::M1 => ArchConfig {
                dropout: 0.0,
                ..base.clone()
            },
            _ => base.clone(),
        }
    }

    pub fn loss(self) -> LossKind {
        match self {
            Variant::M3 => LossKind::Attenuated,
            _ => LossKind::Ce,
        }
    }

    pub fn mc(self) -> bool {
        self != Variant::M1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub grid: GridSpec,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub passes: usize,
    pub aggregation: AggregationConfig,
}

pub struct TrainedVariant {
    pub variant: Variant,
    pub net: MicroNet,
    pub report: TrainReport,
}

pub fn train_variant(variant: Variant, scenes: &[Scene], cfg: &ExperimentConfig, seed: u64) -> Result<TrainedVariant> {
    let mut net = MicroNet::new(&cfg.grid, &variant.arch(&cfg.arch), seed)?;
    let tc = TrainConfig {
        loss_kind: variant.loss(),
        seed,
        ..cfg.train.clone()
    };
    let report = train(&mut net, scenes, &tc)?;
    Ok(TrainedVariant { variant, net, report })
}

/// Post-NMS detections of every scene.
pub fn detect(
    net: &MicroNet,
    mc: bool,
    scenes: &[Scene],
    passes: usize,
    aggregation: &AggregationConfig,
    seed: u64,
) -> Result<Vec<Detection>> {
    let mut all = Vec::new();
    for (i, s) in scenes.iter().enumerate() {
        let grids = if mc {
            mc_infer(net, &s.image, &s.scan_id, passes, seed.wrapping_add(i as u64))?
        } else {
            deterministic_infer(net, &s.image, &s.scan_id)?
        };
        all.extend(postprocess(&grids, net.grid(), aggregation)?);
    }
    Ok(all)
}

impl TrainedVariant {
    pub fn detect(&self, scenes: &[Scene], cfg: &ExperimentConfig, seed: u64) -> Result<Vec<Detection>> {
        detect(&self.net, self.variant.mc(), scenes, cfg.passes, &cfg.aggregation, seed)
    }
}
