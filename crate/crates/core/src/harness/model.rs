use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::ClassRegistry;
use crate::rng::{self, stream};
use crate::tensor::{ComputeTape, NodeId, Tensor};
use rand_distr::{Distribution, StandardNormal};

/// Named parameter tensors in fixed declaration order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Parameters {
    items: Vec<(String, Tensor)>,
}

impl Parameters {
    pub fn new() -> Self {
        Parameters { items: Vec::new() }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        debug_assert!(self.items.iter().all(|(n, _)| n != name));
        self.items.push((name.to_string(), tensor));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.items
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::validation("params", format!("unknown parameter '{name}'")))
    }

    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        match self.items.iter_mut().find(|(n, _)| n == name) {
            Some((_, t)) => {
                *t = tensor;
                Ok(())
            }
            None => Err(Error::validation(
                "params",
                format!("unknown parameter '{name}'"),
            )),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.items.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn as_slice_mut(&mut self) -> &mut [(String, Tensor)] {
        &mut self.items
    }
}

impl Default for Parameters {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Base,
    Session(u32),
}

impl Stage {
    pub fn is_base(&self) -> bool {
        matches!(self, Stage::Base)
    }

    pub fn next(&self) -> Stage {
        match self {
            Stage::Base => Stage::Session(1),
            Stage::Session(s) => Stage::Session(s + 1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub raw_dim: usize,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub projection_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub iteration: u64,
    pub loss: f64,
}

/// Which parameter groups receive gradients when building a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainablePolicy {
    /// Base pretraining: extractor, neck, and classifier train.
    Pretrain,
    /// Incremental sessions: the extractor is frozen; the neck, classifier,
    /// and projection head train.
    Finetune,
    /// Inference only.
    Frozen,
}

impl TrainablePolicy {
    fn is_trainable(&self, name: &str) -> bool {
        match self {
            TrainablePolicy::Pretrain => {
                name.starts_with("extractor.") || name.starts_with("neck.") || name.starts_with("classifier.")
            }
            TrainablePolicy::Finetune => {
                name.starts_with("neck.") || name.starts_with("classifier.") || name.starts_with("head.")
            }
            TrainablePolicy::Frozen => false,
        }
    }
}

/// Tape node handles for one forward pass.
pub struct ForwardNodes {
    /// Frozen-extractor output (pre-neck).
    pub extractor_out: NodeId,
    /// Classifier-input features (neck output); the prototype space.
    pub features: NodeId,
    pub logits: NodeId,
    pub classifier_weight: NodeId,
    pub classifier_bias: NodeId,
    pub head_weight: NodeId,
}

/// Model snapshot: parameter tensors, enrolled classes, stage, and seeds.
/// The classifier row order always equals the registry order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub params: Parameters,
    pub registry: ClassRegistry,
    pub stage: Stage,
    pub seed: u64,
    pub dims: ModelDims,
    pub train_log: Vec<TrainLogEntry>,
}

fn gaussian_tensor(rng: &mut rng::Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel)
        .map(|_| {
            let g: f64 = StandardNormal.sample(rng);
            std * g
        })
        .collect();
    Tensor::new(shape, data).expect("gaussian init is finite")
}

impl Checkpoint {
    /// Freshly initialized base-stage checkpoint over the registry's base
    /// classes. All draws come from the seed's init stream.
    pub fn init(registry: ClassRegistry, dims: ModelDims, seed: u64) -> Result<Self> {
        let q = registry.base_ids().len();
        if q == 0 {
            return Err(Error::validation("checkpoint.init", "no base classes"));
        }
        let mut rng = rng::rng_for(seed, stream::PRETRAIN_INIT);
        let mut params = Parameters::new();
        let he1 = (2.0 / dims.raw_dim as f64).sqrt();
        let he2 = (2.0 / dims.hidden_dim as f64).sqrt();
        let lin = (1.0 / dims.feature_dim as f64).sqrt();
        params.insert(
            "extractor.w1",
            gaussian_tensor(&mut rng, vec![dims.hidden_dim, dims.raw_dim], he1),
        );
        params.insert("extractor.b1", Tensor::zeros(vec![dims.hidden_dim]));
        params.insert(
            "extractor.w2",
            gaussian_tensor(&mut rng, vec![dims.feature_dim, dims.hidden_dim], he2),
        );
        params.insert("extractor.b2", Tensor::zeros(vec![dims.feature_dim]));
        params.insert(
            "neck.weight",
            gaussian_tensor(&mut rng, vec![dims.feature_dim, dims.feature_dim], lin),
        );
        params.insert("neck.bias", Tensor::zeros(vec![dims.feature_dim]));
        params.insert(
            "classifier.weight",
            gaussian_tensor(&mut rng, vec![q, dims.feature_dim], lin),
        );
        params.insert("classifier.bias", Tensor::zeros(vec![q]));
        params.insert(
            "head.weight",
            gaussian_tensor(&mut rng, vec![dims.projection_dim, dims.feature_dim], lin),
        );
        // Registry must start as base classes only.
        let reg_base_only = registry.novel_ids().is_empty();
        if !reg_base_only {
            return Err(Error::validation(
                "checkpoint.init",
                "initial registry must contain base classes only",
            ));
        }
        Ok(Checkpoint {
            params,
            registry,
            stage: Stage::Base,
            seed,
            dims,
            train_log: Vec::new(),
        })
    }

    /// Stable identifier used in store metadata.
    pub fn id(&self) -> String {
        match self.stage {
            Stage::Base => format!("base-seed{}", self.seed),
            Stage::Session(s) => format!("session{}-seed{}", s, self.seed),
        }
    }

    fn node_for(
        &self,
        tape: &mut ComputeTape,
        name: &str,
        policy: TrainablePolicy,
    ) -> Result<NodeId> {
        let tensor = self.params.get(name)?.clone();
        Ok(if policy.is_trainable(name) {
            tape.param(name, tensor)
        } else {
            tape.leaf(tensor)
        })
    }

    /// Builds the full forward pass for a batch of raw inputs.
    pub fn forward(
        &self,
        tape: &mut ComputeTape,
        xs: &Tensor,
        policy: TrainablePolicy,
    ) -> Result<ForwardNodes> {
        if xs.rank() != 2 || xs.shape()[1] != self.dims.raw_dim {
            return Err(Error::ShapeMismatch {
                op: "forward",
                detail: format!("input {:?}, raw_dim {}", xs.shape(), self.dims.raw_dim),
            });
        }
        let x = tape.leaf(xs.clone());
        let w1 = self.node_for(tape, "extractor.w1", policy)?;
        let b1 = self.node_for(tape, "extractor.b1", policy)?;
        let w2 = self.node_for(tape, "extractor.w2", policy)?;
        let b2 = self.node_for(tape, "extractor.b2", policy)?;
        let nw = self.node_for(tape, "neck.weight", policy)?;
        let nb = self.node_for(tape, "neck.bias", policy)?;
        let cw = self.node_for(tape, "classifier.weight", policy)?;
        let cb = self.node_for(tape, "classifier.bias", policy)?;
        let hw = self.node_for(tape, "head.weight", policy)?;

        let w1t = tape.transpose(w1)?;
        let h1 = tape.matmul(x, w1t)?;
        let h1 = tape.add_bias(h1, b1)?;
        let h1 = tape.relu(h1)?;
        let w2t = tape.transpose(w2)?;
        let ext = tape.matmul(h1, w2t)?;
        let ext = tape.add_bias(ext, b2)?;
        let nwt = tape.transpose(nw)?;
        let feat = tape.matmul(ext, nwt)?;
        let feat = tape.add_bias(feat, nb)?;
        let cwt = tape.transpose(cw)?;
        let logits = tape.matmul(feat, cwt)?;
        let logits = tape.add_bias(logits, cb)?;

        Ok(ForwardNodes {
            extractor_out: ext,
            features: feat,
            logits,
            classifier_weight: cw,
            classifier_bias: cb,
            head_weight: hw,
        })
    }

    /// Classifier-input features for raw inputs, no gradients.
    pub fn features_values(&self, xs: &[Vec<f64>]) -> Result<Tensor> {
        let batch = Tensor::from_rows(xs)?;
        let mut tape = ComputeTape::new();
        let nodes = self.forward(&mut tape, &batch, TrainablePolicy::Frozen)?;
        Ok(tape.value(nodes.features).clone())
    }

    /// Classifier logits for raw inputs, no gradients.
    pub fn logits_values(&self, xs: &[Vec<f64>]) -> Result<Tensor> {
        let batch = Tensor::from_rows(xs)?;
        let mut tape = ComputeTape::new();
        let nodes = self.forward(&mut tape, &batch, TrainablePolicy::Frozen)?;
        Ok(tape.value(nodes.logits).clone())
    }

    /// Projection-head embeddings (unit rows) for raw inputs, no gradients.
    pub fn embeddings_values(&self, xs: &[Vec<f64>]) -> Result<Tensor> {
        let batch = Tensor::from_rows(xs)?;
        let mut tape = ComputeTape::new();
        let nodes = self.forward(&mut tape, &batch, TrainablePolicy::Frozen)?;
        let hwt = tape.transpose(nodes.head_weight)?;
        let proj = tape.matmul(nodes.features, hwt)?;
        let z = tape.l2_normalize(proj)?;
        Ok(tape.value(z).clone())
    }

    /// Names of the frozen extractor tensors (the freeze-contract surface).
    pub fn extractor_param_names() -> [&'static str; 4] {
        ["extractor.w1", "extractor.b1", "extractor.w2", "extractor.b2"]
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &std::path::Path) -> Result<()> {
    let text = serde_json::to_string_pretty(ckpt).map_err(|e| Error::Json {
        path: path.display().to_string(),
        source: e,
    })?;
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.display().to_string(),
        source: e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::{ClassInfo, ClassRole};

    fn tiny_registry() -> ClassRegistry {
        ClassRegistry::new(
            (0..3)
                .map(|id| ClassInfo {
                    id,
                    name: format!("base_{id}"),
                    role: ClassRole::Base,
                })
                .collect(),
        )
        .unwrap()
    }

    fn dims() -> ModelDims {
        ModelDims {
            raw_dim: 4,
            hidden_dim: 5,
            feature_dim: 6,
            projection_dim: 7,
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = Checkpoint::init(tiny_registry(), dims(), 9).unwrap();
        let b = Checkpoint::init(tiny_registry(), dims(), 9).unwrap();
        assert_eq!(a, b);
        let c = Checkpoint::init(tiny_registry(), dims(), 10).unwrap();
        assert_ne!(a.params.get("extractor.w1").unwrap(), c.params.get("extractor.w1").unwrap());
    }

    #[test]
    fn forward_shapes() {
        let ckpt = Checkpoint::init(tiny_registry(), dims(), 1).unwrap();
        let xs = vec![vec![0.1, -0.2, 0.3, 0.4], vec![1.0, 0.0, -1.0, 0.5]];
        let logits = ckpt.logits_values(&xs).unwrap();
        assert_eq!(logits.shape(), &[2, 3]);
        let z = ckpt.embeddings_values(&xs).unwrap();
        assert_eq!(z.shape(), &[2, 7]);
        for i in 0..2 {
            let norm: f64 = z.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let ckpt = Checkpoint::init(tiny_registry(), dims(), 2).unwrap();
        let dir = std::env::temp_dir().join("protodrift-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ckpt.json");
        save_checkpoint(&ckpt, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(ckpt, loaded);
    }
}
