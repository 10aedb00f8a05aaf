//! Two-stage protocol orchestration: base pretraining, prototype extraction,
//! frozen-extractor incremental fine-tuning, evaluation, the five-variant
//! ablation, and the embedding scatter plot.

mod ablation;
mod eval;
mod model;
mod scatter;
mod train;

pub use ablation::{ablation_csv, run_ablation, AblationRow, AblationSummary, AblationTable, Variant};
pub use eval::{evaluate, Metrics};
pub use model::{
    load_checkpoint, save_checkpoint, Checkpoint, ForwardNodes, ModelDims, Parameters, Stage,
    TrainLogEntry, TrainablePolicy,
};
pub use scatter::{emit_scatter, pca_2d, scatter_svg_from_embeddings};
pub use train::{cross_entropy, finetune_incremental, pretrain_base, FinetuneConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Balance factors for the fine-tuning objective
/// `L = L_cls + lambda1 * L_hpc + lambda2 * L_cal`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.5,
            lambda2: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::validation("loss_weights", "lambdas must be non-negative"));
        }
        Ok(())
    }
}

/// Optimization and architecture settings shared by both stages.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub pretrain_lr: f64,
    pub finetune_lr: f64,
    pub finetune_iters: u64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_iters: u64,
    pub pretrain_milestones: Vec<(u64, f64)>,
    pub finetune_milestones: Vec<(u64, f64)>,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub projection_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            pretrain_lr: 0.01,
            finetune_lr: 0.001,
            finetune_iters: 300,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup_iters: 20,
            pretrain_milestones: vec![(660, 0.1), (990, 0.1)],
            finetune_milestones: vec![],
            hidden_dim: 32,
            feature_dim: 32,
            projection_dim: 128,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::validation("train.batch_size", "must be positive"));
        }
        if !(self.pretrain_lr > 0.0) || !(self.finetune_lr > 0.0) {
            return Err(Error::validation("train.lr", "learning rates must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::validation("train.momentum", "must be in [0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::validation("train.weight_decay", "must be non-negative"));
        }
        if self.hidden_dim == 0 || self.feature_dim == 0 || self.projection_dim == 0 {
            return Err(Error::validation("train.dims", "dimensions must be positive"));
        }
        Ok(())
    }
}
