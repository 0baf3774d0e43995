//! A trainable micro detector with MC dropout and a predictive-variance head.

mod checkpoint;
pub mod loss;
mod net;
mod train;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_FORMAT};
pub use loss::{attenuated_cls_loss, attenuated_cls_loss_with_noise, ce_loss, smooth_l1, AttenuatedLoss, NoiseSampler};
pub use net::{ArchConfig, MicroNet, RawLevel};
pub use train::{
    detection_loss, deterministic_infer, match_anchors, mc_infer, scene_gradient, to_pass_grid, train, Adam,
    AnchorTargets, CellTarget, LossKind, TrainConfig, TrainReport,
};
