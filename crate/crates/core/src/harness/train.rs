use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::harness::model::{Checkpoint, ModelDims, Stage, TrainLogEntry, TrainablePolicy};
use crate::harness::{LossWeights, TrainConfig};
use crate::hpc::{self, HpcConfig, ProjectedBatch};
use crate::otcal::{build_cost_matrix, calibration_loss_warm, CalibrationDuals, CostMode, SinkhornParams};
use crate::protostore::{compute_prototype, PrototypeStore};
use crate::registry::ClassRegistry;
use crate::rng::{self, stream};
use crate::synth::{ProposalFeature, World};
use crate::tensor::{ComputeTape, NodeId, OptimizerState, SgdConfig, Tensor};

/// Everything an incremental session needs besides checkpoint, store, and
/// support set.
#[derive(Clone, Debug)]
pub struct FinetuneConfig {
    pub train: TrainConfig,
    pub hpc: HpcConfig,
    pub cost_mode: CostMode,
    pub sinkhorn: SinkhornParams,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            train: TrainConfig::default(),
            hpc: HpcConfig::default(),
            cost_mode: CostMode::Semantic,
            // Softmax outputs of a half-trained classifier make hard
            // instances at the final epsilon; the cap is generous because
            // only the first step of a session pays it, later steps reuse
            // the previous step's duals.
            sinkhorn: SinkhornParams {
                eps_schedule: vec![0.1, 0.01, 0.001],
                max_iter: 60_000,
                tol: 1e-9,
            },
        }
    }
}

/// Mean softmax cross-entropy of `logits` against per-row target indices.
pub fn cross_entropy(tape: &mut ComputeTape, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
    let (n, q) = {
        let l = tape.value(logits);
        (l.rows(), l.cols())
    };
    if targets.len() != n {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            detail: format!("{n} logit rows vs {} targets", targets.len()),
        });
    }
    let mut onehot = vec![0.0; n * q];
    for (i, &t) in targets.iter().enumerate() {
        if t >= q {
            return Err(Error::validation(
                "cross_entropy",
                format!("target {t} out of range for {q} classes"),
            ));
        }
        onehot[i * q + t] = 1.0;
    }
    let mask = tape.leaf(Tensor::new(vec![n, q], onehot)?);
    let probs = tape.softmax(logits)?;
    let logp = tape.log(probs)?;
    let picked = tape.mul(logp, mask)?;
    let total = tape.sum(picked)?;
    tape.scale(total, -1.0 / n as f64)
}

fn batch_tensor(samples: &[&ProposalFeature]) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = samples.iter().map(|s| s.x.clone()).collect();
    Tensor::from_rows(&rows)
}

/// Trains extractor, neck, and classifier on the base classes with softmax
/// cross-entropy. Deterministic given the world seed.
pub fn pretrain_base(world: &World, cfg: &TrainConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    let base_ids = world.registry.base_ids();
    if base_ids.is_empty() {
        return Err(Error::validation("pretrain", "world has no base classes"));
    }
    let base_registry = ClassRegistry::new(
        world
            .registry
            .classes()
            .iter()
            .filter(|c| base_ids.contains(&c.id))
            .cloned()
            .collect(),
    )?;
    let dims = ModelDims {
        raw_dim: world.config.raw_dim,
        hidden_dim: cfg.hidden_dim,
        feature_dim: cfg.feature_dim,
        projection_dim: cfg.projection_dim,
    };
    let mut ckpt = Checkpoint::init(base_registry, dims, world.config.seed)?;

    let samples: Vec<&ProposalFeature> = world
        .train
        .samples
        .iter()
        .filter(|s| base_ids.contains(&s.y))
        .collect();
    let mut optimizer = OptimizerState::new(SgdConfig {
        lr: cfg.pretrain_lr,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        warmup_iters: cfg.warmup_iters,
        milestones: cfg.pretrain_milestones.clone(),
    })?;

    let mut shuffle_rng = rng::rng_for(world.config.seed, stream::PRETRAIN_BATCHES);
    let mut iteration: u64 = 0;
    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&ProposalFeature> = chunk.iter().map(|&i| samples[i]).collect();
            let xs = batch_tensor(&batch)?;
            let targets: Vec<usize> = batch
                .iter()
                .map(|s| ckpt.registry.index_of(s.y).expect("base label"))
                .collect();

            let mut tape = ComputeTape::new();
            let nodes = ckpt.forward(&mut tape, &xs, TrainablePolicy::Pretrain)?;
            let loss = cross_entropy(&mut tape, nodes.logits, &targets)?;
            let loss_value = tape.value(loss).scalar_value();
            if !loss_value.is_finite() {
                return Err(Error::Diverged {
                    iteration,
                    detail: format!("pretrain loss = {loss_value}"),
                });
            }
            tape.backward(loss)?;
            let grads = tape.param_gradients();
            optimizer.step(ckpt.params.as_slice_mut(), &grads, iteration)?;
            ckpt.train_log.push(TrainLogEntry {
                iteration,
                loss: loss_value,
            });
            iteration += 1;
        }
    }
    Ok(ckpt)
}

/// One incremental session: enrolls the support set's classes, fine-tunes
/// with the combined objective, and appends the new classes' prototypes to
/// the store. The extractor never changes; base training data never enters.
pub fn finetune_incremental(
    ckpt: &Checkpoint,
    store: &PrototypeStore,
    support: &[ProposalFeature],
    weights: &LossWeights,
    cfg: &FinetuneConfig,
) -> Result<(Checkpoint, PrototypeStore)> {
    cfg.train.validate()?;
    cfg.hpc.validate()?;
    weights.validate()?;
    if support.is_empty() {
        return Err(Error::validation("finetune", "support set is empty"));
    }
    store.validate_against(&ckpt.registry)?;
    for id in ckpt.registry.novel_ids() {
        if store.get(id).is_none() {
            return Err(Error::validation(
                "finetune",
                format!("enrolled class {id} has no prototype in the store"),
            ));
        }
    }

    let mut new_ids: Vec<u32> = Vec::new();
    for s in support {
        if ckpt.registry.contains(s.y) {
            return Err(Error::validation(
                "finetune",
                format!("support contains already-registered class {}", s.y),
            ));
        }
        if !new_ids.contains(&s.y) {
            new_ids.push(s.y);
        }
    }
    new_ids.sort_unstable();

    let mut new_ckpt = ckpt.clone();
    new_ckpt.stage = ckpt.stage.next();
    let session_no = match new_ckpt.stage {
        Stage::Session(s) => s,
        Stage::Base => unreachable!(),
    };
    for &id in &new_ids {
        new_ckpt.registry.enroll_novel(id, &format!("novel_{id}"))?;
    }

    // Grow the classifier: one small-norm Gaussian row and a zero bias entry
    // per new class, so base logits are not swamped at step 0.
    let mut init_rng = rng::rng_for(
        rng::derive_seed(ckpt.seed, session_no as u64),
        stream::FINETUNE_INIT,
    );
    let m = new_ckpt.dims.feature_dim;
    let old_w = new_ckpt.params.get("classifier.weight")?.clone();
    let old_b = new_ckpt.params.get("classifier.bias")?.clone();
    let mut w_data = old_w.data().to_vec();
    for _ in &new_ids {
        for _ in 0..m {
            let g: f64 = StandardNormal.sample(&mut init_rng);
            w_data.push(0.01 * g);
        }
    }
    let q_new = old_w.shape()[0] + new_ids.len();
    new_ckpt
        .params
        .set("classifier.weight", Tensor::new(vec![q_new, m], w_data)?)?;
    let mut b_data = old_b.data().to_vec();
    b_data.extend(std::iter::repeat(0.0).take(new_ids.len()));
    new_ckpt
        .params
        .set("classifier.bias", Tensor::new(vec![q_new], b_data)?)?;

    // Session-start means of the new classes, for the semantic ground cost.
    let support_xs: Vec<Vec<f64>> = support.iter().map(|s| s.x.clone()).collect();
    let start_features = new_ckpt.features_values(&support_xs)?;
    let mut novel_means: Vec<(u32, Vec<f64>)> = Vec::new();
    for &id in &new_ids {
        let rows: Vec<Vec<f64>> = support
            .iter()
            .enumerate()
            .filter(|(_, s)| s.y == id)
            .map(|(i, _)| start_features.row(i).to_vec())
            .collect();
        novel_means.push((id, compute_prototype(&rows)?));
    }
    let cost = if weights.lambda2 > 0.0 {
        Some(build_cost_matrix(
            &new_ckpt.registry,
            store,
            &novel_means,
            cfg.cost_mode,
        )?)
    } else {
        None
    };

    // Prototype means seen by the contrastive loss: base classes plus novel
    // classes enrolled in earlier sessions; this session's classes appear
    // only as instances.
    let proto_means: Vec<Vec<f64>> = store.classes.iter().map(|p| p.mean_feature.clone()).collect();

    let mut optimizer = OptimizerState::new(SgdConfig {
        lr: cfg.train.finetune_lr,
        momentum: cfg.train.momentum,
        weight_decay: cfg.train.weight_decay,
        warmup_iters: cfg.train.warmup_iters,
        milestones: cfg.train.finetune_milestones.clone(),
    })?;

    let mut batch_rng = rng::rng_for(
        rng::derive_seed(ckpt.seed, session_no as u64),
        stream::PRETRAIN_BATCHES,
    );
    let mut order: Vec<usize> = (0..support.len()).collect();
    let mut cursor = support.len(); // force a shuffle on first use
    let mut duals = CalibrationDuals::default();

    for iteration in 0..cfg.train.finetune_iters {
        let batch: Vec<&ProposalFeature> = if support.len() <= cfg.train.batch_size {
            support.iter().collect()
        } else {
            let mut picked = Vec::with_capacity(cfg.train.batch_size);
            while picked.len() < cfg.train.batch_size {
                if cursor >= order.len() {
                    order.shuffle(&mut batch_rng);
                    cursor = 0;
                }
                picked.push(&support[order[cursor]]);
                cursor += 1;
            }
            picked
        };
        let xs = batch_tensor(&batch)?;
        let targets: Vec<usize> = batch
            .iter()
            .map(|s| new_ckpt.registry.index_of(s.y).expect("enrolled label"))
            .collect();
        let labels: Vec<u32> = batch.iter().map(|s| s.y).collect();
        let ious: Vec<f64> = batch.iter().map(|s| s.u).collect();

        let mut tape = ComputeTape::new();
        let nodes = new_ckpt.forward(&mut tape, &xs, TrainablePolicy::Finetune)?;
        let mut total = cross_entropy(&mut tape, nodes.logits, &targets)?;

        if weights.lambda1 > 0.0 {
            let z = hpc::project(&mut tape, nodes.features, nodes.head_weight)?;
            let batch_proj = ProjectedBatch::new(&tape, z, ious, labels)?;
            let protos_node = if proto_means.is_empty() {
                None
            } else {
                let means_leaf = tape.leaf(Tensor::from_rows(&proto_means)?);
                Some(hpc::project(&mut tape, means_leaf, nodes.head_weight)?)
            };
            let l_hpc = hpc::hpc_loss(&mut tape, &batch_proj, protos_node, &cfg.hpc)?;
            let scaled = tape.scale(l_hpc, weights.lambda1)?;
            total = tape.add(total, scaled)?;
        }

        if let Some(cost) = &cost {
            let (l_cal, _report) = calibration_loss_warm(
                &mut tape,
                nodes.classifier_weight,
                nodes.classifier_bias,
                store,
                cost,
                &cfg.sinkhorn,
                &mut duals,
            )?;
            let scaled = tape.scale(l_cal, weights.lambda2)?;
            total = tape.add(total, scaled)?;
        }

        let loss_value = tape.value(total).scalar_value();
        if !loss_value.is_finite() {
            return Err(Error::Diverged {
                iteration,
                detail: format!("finetune loss = {loss_value}"),
            });
        }
        tape.backward(total)?;
        let grads = tape.param_gradients();
        optimizer.step(new_ckpt.params.as_slice_mut(), &grads, iteration)?;
        new_ckpt.train_log.push(TrainLogEntry {
            iteration,
            loss: loss_value,
        });
    }

    // The session's classes join the store for later sessions: means only,
    // no calibration distribution.
    let mut new_store = store.clone();
    let end_features = new_ckpt.features_values(&support_xs)?;
    for &id in &new_ids {
        let rows: Vec<Vec<f64>> = support
            .iter()
            .enumerate()
            .filter(|(_, s)| s.y == id)
            .map(|(i, _)| end_features.row(i).to_vec())
            .collect();
        new_store.push_novel(id, &format!("novel_{id}"), compute_prototype(&rows)?)?;
    }

    Ok((new_ckpt, new_store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_world, WorldConfig};

    fn tiny_world(seed: u64) -> World {
        generate_world(&WorldConfig {
            raw_dim: 6,
            num_base: 3,
            num_novel: 2,
            samples_per_class_train: 30,
            samples_per_class_test: 15,
            seed,
            ..WorldConfig::default()
        })
        .unwrap()
    }

    fn tiny_train() -> TrainConfig {
        TrainConfig {
            epochs: 4,
            hidden_dim: 12,
            feature_dim: 10,
            projection_dim: 16,
            finetune_iters: 20,
            pretrain_milestones: vec![],
            warmup_iters: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_seeded_init_bitwise() {
        let world = tiny_world(3);
        let cfg = TrainConfig {
            epochs: 0,
            ..tiny_train()
        };
        let ckpt = pretrain_base(&world, &cfg).unwrap();
        let base_registry = ckpt.registry.clone();
        let fresh = Checkpoint::init(
            base_registry,
            ckpt.dims,
            world.config.seed,
        )
        .unwrap();
        assert_eq!(ckpt.params, fresh.params);
        assert!(ckpt.train_log.is_empty());
    }

    #[test]
    fn pretrain_is_deterministic() {
        let world = tiny_world(4);
        let a = pretrain_base(&world, &tiny_train()).unwrap();
        let b = pretrain_base(&world, &tiny_train()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn finetune_freezes_extractor_and_extends_registry() {
        let world = tiny_world(5);
        let ckpt = pretrain_base(&world, &tiny_train()).unwrap();
        let base_data = crate::synth::Dataset {
            registry: world.registry.clone(),
            samples: world
                .train
                .samples
                .iter()
                .filter(|s| world.registry.base_ids().contains(&s.y))
                .cloned()
                .collect(),
        };
        let store = crate::protostore::extract_store(&ckpt, &base_data).unwrap();
        let support =
            crate::synth::sample_kshot(&world.train, &world.registry.novel_ids(), 5, 5).unwrap();
        let (new_ckpt, new_store) = finetune_incremental(
            &ckpt,
            &store,
            &support,
            &LossWeights::default(),
            &FinetuneConfig {
                train: tiny_train(),
                ..FinetuneConfig::default()
            },
        )
        .unwrap();

        for name in Checkpoint::extractor_param_names() {
            let before = ckpt.params.get(name).unwrap();
            let after = new_ckpt.params.get(name).unwrap();
            assert_eq!(before, after, "{name} changed during finetune");
            for (x, y) in before.data().iter().zip(after.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(new_ckpt.registry.novel_ids(), world.registry.novel_ids());
        assert_eq!(new_ckpt.stage, Stage::Session(1));
        assert_eq!(
            new_store.classes.len(),
            store.classes.len() + world.registry.novel_ids().len()
        );
        // Novel prototypes carry no calibration distribution.
        for id in world.registry.novel_ids() {
            assert!(!new_store.get(id).unwrap().is_base());
        }
    }

    #[test]
    fn finetune_rejects_registered_class() {
        let world = tiny_world(6);
        let ckpt = pretrain_base(&world, &tiny_train()).unwrap();
        let base_data = crate::synth::Dataset {
            registry: world.registry.clone(),
            samples: world
                .train
                .samples
                .iter()
                .filter(|s| world.registry.base_ids().contains(&s.y))
                .cloned()
                .collect(),
        };
        let store = crate::protostore::extract_store(&ckpt, &base_data).unwrap();
        let bad_support = vec![ProposalFeature {
            x: vec![0.0; 6],
            y: 0, // base class, already registered
            u: 1.0,
        }];
        assert!(finetune_incremental(
            &ckpt,
            &store,
            &bad_support,
            &LossWeights::default(),
            &FinetuneConfig {
                train: tiny_train(),
                ..FinetuneConfig::default()
            },
        )
        .is_err());
    }
}
