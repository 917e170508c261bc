//! The trainable segmenter: per-pixel backbone, semantic projection head,
//! losses with analytic gradients, the optimizer, and inference.

pub mod backbone;
pub mod checkpoint;
pub mod inference;
pub mod loss;
pub mod optim;
pub mod projection;

pub use backbone::{forward_backbone, BackboneParams, Dense, Gradients};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use inference::{calibrated_labels, infer_gzs, score_image};
pub use loss::{backward, combined_loss, masked_cross_entropy, CeLoss, LossBreakdown, Objective};
pub use optim::{poly_lr, sgd_step, OptimizerState, SgdConfig};
pub use projection::{project_logits, project_probs, ClassGrid, ProbGrid, ScoreGrid};
