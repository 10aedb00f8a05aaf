//! Class prototypes and their frozen pseudo-distributions.
//!
//! After base pretraining, each base class is summarized by the mean of its
//! penultimate-layer features and by the base model's softmax prediction on
//! that mean. The store is the only carrier of base-class knowledge into the
//! incremental sessions; fine-tuning never sees base samples again.
//!
//! Prototypes of novel classes enrolled in earlier sessions are appended with
//! an empty `base_distribution`: they take part in the contrastive loss and
//! the semantic ground cost, but are never calibration targets.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::Checkpoint;
use crate::registry::ClassRegistry;
use crate::synth::Dataset;
use crate::tensor::{softmax_rows, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub class_id: u32,
    pub name: String,
    pub mean_feature: Vec<f64>,
    /// Softmax of the base model's logits on the mean feature, over the base
    /// classes. Empty for prototypes of classes enrolled after pretraining.
    pub base_distribution: Vec<f64>,
}

impl Prototype {
    pub fn is_base(&self) -> bool {
        !self.base_distribution.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrototypeStore {
    pub checkpoint_id: String,
    pub seed: u64,
    pub feature_dim: usize,
    pub classes: Vec<Prototype>,
}

impl PrototypeStore {
    pub fn validate(&self) -> Result<()> {
        let mut k_base: Option<usize> = None;
        for (i, proto) in self.classes.iter().enumerate() {
            let path = |field: &str| format!("classes[{i}].{field}");
            if proto.mean_feature.len() != self.feature_dim {
                return Err(Error::validation(
                    path("mean_feature"),
                    format!(
                        "length {} does not match feature_dim {}",
                        proto.mean_feature.len(),
                        self.feature_dim
                    ),
                ));
            }
            if proto.mean_feature.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation(path("mean_feature"), "non-finite entry"));
            }
            for later in &self.classes[i + 1..] {
                if later.class_id == proto.class_id {
                    return Err(Error::validation(
                        path("class_id"),
                        format!("duplicate class id {}", proto.class_id),
                    ));
                }
            }
            if proto.is_base() {
                let dist = &proto.base_distribution;
                match k_base {
                    None => k_base = Some(dist.len()),
                    Some(k) if k != dist.len() => {
                        return Err(Error::validation(
                            path("base_distribution"),
                            format!("length {} differs from other base prototypes ({k})", dist.len()),
                        ));
                    }
                    _ => {}
                }
                if dist.iter().any(|&v| v < 0.0 || !v.is_finite()) {
                    return Err(Error::validation(
                        path("base_distribution"),
                        "entries must be finite and non-negative",
                    ));
                }
                let sum: f64 = dist.iter().sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::validation(
                        path("base_distribution"),
                        format!("sums to {sum}, expected 1"),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Base prototypes in store order (the calibration targets).
    pub fn base_prototypes(&self) -> Vec<&Prototype> {
        self.classes.iter().filter(|p| p.is_base()).collect()
    }

    pub fn get(&self, class_id: u32) -> Option<&Prototype> {
        self.classes.iter().find(|p| p.class_id == class_id)
    }

    /// Appends a prototype for a newly enrolled novel class (no calibration
    /// distribution, per the two-stage design).
    pub fn push_novel(&mut self, class_id: u32, name: &str, mean_feature: Vec<f64>) -> Result<()> {
        if self.get(class_id).is_some() {
            return Err(Error::validation(
                "store.push_novel",
                format!("class {class_id} already stored"),
            ));
        }
        if mean_feature.len() != self.feature_dim {
            return Err(Error::validation(
                "store.push_novel",
                format!(
                    "mean length {} does not match feature_dim {}",
                    mean_feature.len(),
                    self.feature_dim
                ),
            ));
        }
        self.classes.push(Prototype {
            class_id,
            name: name.to_string(),
            mean_feature,
            base_distribution: vec![],
        });
        Ok(())
    }

    /// Checks that the base classes of `registry` and the store agree.
    pub fn validate_against(&self, registry: &ClassRegistry) -> Result<()> {
        let base_ids = registry.base_ids();
        let store_base: Vec<u32> = self
            .classes
            .iter()
            .filter(|p| p.is_base())
            .map(|p| p.class_id)
            .collect();
        if base_ids != store_base {
            return Err(Error::validation(
                "store.classes",
                format!("base classes {store_base:?} do not match registry {base_ids:?}"),
            ));
        }
        Ok(())
    }

    /// All prototype means as a matrix in store order.
    pub fn mean_matrix(&self) -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = self.classes.iter().map(|p| p.mean_feature.clone()).collect();
        Tensor::from_rows(&rows)
    }
}

/// Arithmetic mean of the feature vectors, accumulated in input-index order.
pub fn compute_prototype(features: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = features.first().ok_or(Error::EmptyClass { class: u32::MAX })?;
    let dim = first.len();
    let mut acc = vec![0.0; dim];
    for (i, f) in features.iter().enumerate() {
        if f.len() != dim {
            return Err(Error::ShapeMismatch {
                op: "compute_prototype",
                detail: format!("vector {i} has length {}, expected {dim}", f.len()),
            });
        }
        for (a, v) in acc.iter_mut().zip(f) {
            *a += v;
        }
    }
    let n = features.len() as f64;
    for a in acc.iter_mut() {
        *a /= n;
    }
    Ok(acc)
}

/// Softmax of `weights . p + bias`: the base model's predicted distribution
/// on a prototype. The bias term is included.
pub fn prototype_distribution(p: &[f64], weights: &Tensor, bias: &Tensor) -> Result<Vec<f64>> {
    if weights.rank() != 2 || weights.shape()[1] != p.len() || bias.shape() != [weights.shape()[0]]
    {
        return Err(Error::ShapeMismatch {
            op: "prototype_distribution",
            detail: format!(
                "weights {:?}, bias {:?}, prototype length {}",
                weights.shape(),
                bias.shape(),
                p.len()
            ),
        });
    }
    let k = weights.shape()[0];
    let mut logits = vec![0.0; k];
    for (i, logit) in logits.iter_mut().enumerate() {
        let mut o = bias.data()[i];
        for (j, &pj) in p.iter().enumerate() {
            o += weights.at2(i, j) * pj;
        }
        *logit = o;
    }
    let t = Tensor::new(vec![1, k], logits)?;
    Ok(softmax_rows(&t).data().to_vec())
}

/// Builds the store from a completed base-stage checkpoint: one prototype per
/// base class, features taken at the classifier input.
pub fn extract_store(ckpt: &Checkpoint, base_dataset: &Dataset) -> Result<PrototypeStore> {
    if !ckpt.stage.is_base() {
        return Err(Error::validation(
            "extract_store",
            format!("expected a base-stage checkpoint, got {:?}", ckpt.stage),
        ));
    }
    let base_ids = ckpt.registry.base_ids();
    for s in &base_dataset.samples {
        if !base_ids.contains(&s.y) {
            return Err(Error::validation(
                "extract_store",
                format!("dataset contains non-base class {}", s.y),
            ));
        }
    }

    let xs: Vec<Vec<f64>> = base_dataset.samples.iter().map(|s| s.x.clone()).collect();
    let features = ckpt.features_values(&xs)?;

    let weights = ckpt.params.get("classifier.weight")?;
    let bias = ckpt.params.get("classifier.bias")?;

    let mut classes = Vec::with_capacity(base_ids.len());
    for &id in &base_ids {
        let class_features: Vec<Vec<f64>> = base_dataset
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.y == id)
            .map(|(i, _)| features.row(i).to_vec())
            .collect();
        if class_features.is_empty() {
            return Err(Error::EmptyClass { class: id });
        }
        let mean = compute_prototype(&class_features)?;
        let dist = prototype_distribution(&mean, weights, bias)?;
        classes.push(Prototype {
            class_id: id,
            name: ckpt.registry.name_of(id).unwrap_or("?").to_string(),
            mean_feature: mean,
            base_distribution: dist,
        });
    }

    let store = PrototypeStore {
        checkpoint_id: ckpt.id(),
        seed: ckpt.seed,
        feature_dim: ckpt.dims.feature_dim,
        classes,
    };
    store.validate()?;
    Ok(store)
}

pub fn save_store(store: &PrototypeStore, path: &Path) -> Result<()> {
    store.validate()?;
    let text = serde_json::to_string_pretty(store).map_err(|e| Error::Json {
        path: path.display().to_string(),
        source: e,
    })?;
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn load_store(path: &Path) -> Result<PrototypeStore> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let store: PrototypeStore = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.display().to_string(),
        source: e,
    })?;
    store.validate()?;
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn singleton_mean_is_identity() {
        assert_eq!(
            compute_prototype(&[vec![1.0, 2.0, 3.0]]).unwrap(),
            vec![1.0, 2.0, 3.0]
        );
    }

    #[test]
    fn two_point_mean() {
        assert_eq!(
            compute_prototype(&[vec![0.0, 0.0], vec![2.0, 4.0]]).unwrap(),
            vec![1.0, 2.0]
        );
    }

    #[test]
    fn empty_class_errors() {
        assert!(compute_prototype(&[]).is_err());
    }

    #[test]
    fn zero_logits_give_uniform_distribution() {
        let w = Tensor::zeros(vec![3, 4]);
        let b = Tensor::zeros(vec![3]);
        let d = prototype_distribution(&[1.0, -2.0, 0.5, 3.0], &w, &b).unwrap();
        for v in d {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        // Adding a constant to every logit leaves the output unchanged.
        let w = Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let b0 = Tensor::zeros(vec![3]);
        let b1 = Tensor::vector(vec![5.0, 5.0, 5.0]).unwrap();
        let d0 = prototype_distribution(&[1.0], &w, &b0).unwrap();
        let d1 = prototype_distribution(&[1.0], &w, &b1).unwrap();
        for (a, b) in d0.iter().zip(&d1) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn store_validation_catches_bad_distribution() {
        let store = PrototypeStore {
            checkpoint_id: "c".into(),
            seed: 0,
            feature_dim: 2,
            classes: vec![Prototype {
                class_id: 0,
                name: "base_0".into(),
                mean_feature: vec![1.0, 2.0],
                base_distribution: vec![0.5, 0.4],
            }],
        };
        let err = store.validate().unwrap_err();
        assert!(err.to_string().contains("base_distribution"));
    }

    #[test]
    fn store_roundtrip_is_exact() {
        let dir = std::env::temp_dir().join("protodrift-store-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("store.json");
        let store = PrototypeStore {
            checkpoint_id: "base-seed7".into(),
            seed: 7,
            feature_dim: 3,
            classes: vec![
                Prototype {
                    class_id: 0,
                    name: "base_0".into(),
                    mean_feature: vec![0.1 + 0.2, -1.0 / 3.0, 1e-17],
                    base_distribution: vec![0.25, 0.75],
                },
                Prototype {
                    class_id: 1,
                    name: "base_1".into(),
                    mean_feature: vec![std::f64::consts::PI, 2.0_f64.sqrt(), -0.0],
                    base_distribution: vec![0.6, 0.4],
                },
            ],
        };
        save_store(&store, &path).unwrap();
        let loaded = load_store(&path).unwrap();
        assert_eq!(store, loaded);
        for (a, b) in store.classes[1]
            .mean_feature
            .iter()
            .zip(&loaded.classes[1].mean_feature)
        {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn missing_field_names_it() {
        let dir = std::env::temp_dir().join("protodrift-store-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("missing.json");
        std::fs::write(
            &path,
            r#"{"checkpoint_id":"c","seed":0,"feature_dim":1,
               "classes":[{"class_id":0,"name":"x","mean_feature":[1.0]}]}"#,
        )
        .unwrap();
        let err = load_store(&path).unwrap_err();
        assert!(err.to_string().contains("base_distribution"), "{err}");
    }
}
