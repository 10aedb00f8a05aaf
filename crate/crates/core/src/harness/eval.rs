use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::model::Checkpoint;
use crate::registry::ClassRole;
use crate::synth::Dataset;

/// Macro-averaged accuracies: per class, then means over base / novel / all
/// scored classes of the evaluation registry.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Metrics {
    pub per_class: BTreeMap<u32, f64>,
    pub b_acc: f64,
    pub n_acc: f64,
    pub all_acc: f64,
}

/// Argmax evaluation over the current classifier. Classes present in the
/// test registry but not yet enrolled in the checkpoint score 0: a model
/// without the class head cannot be correct on it.
pub fn evaluate(ckpt: &Checkpoint, test: &Dataset) -> Result<Metrics> {
    if test.samples.is_empty() {
        return Err(Error::validation("evaluate", "empty test set"));
    }
    for s in &test.samples {
        if !test.registry.contains(s.y) {
            return Err(Error::validation(
                "evaluate",
                format!("test label {} not in the evaluation registry", s.y),
            ));
        }
    }

    let xs: Vec<Vec<f64>> = test.samples.iter().map(|s| s.x.clone()).collect();
    let logits = ckpt.logits_values(&xs)?;

    let mut hits: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for (i, sample) in test.samples.iter().enumerate() {
        if test.registry.role_of(sample.y) == Some(ClassRole::Background) {
            continue;
        }
        let row = logits.row(i);
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        let predicted = ckpt.registry.classes()[best].id;
        let entry = hits.entry(sample.y).or_insert((0, 0));
        entry.1 += 1;
        if predicted == sample.y {
            entry.0 += 1;
        }
    }

    let mut per_class = BTreeMap::new();
    for (&id, &(correct, total)) in &hits {
        per_class.insert(id, correct as f64 / total as f64);
    }
    // Not-yet-enrolled classes without test samples would simply be absent;
    // classes with samples but no head end up at 0 through the argmax above.
    let mean_over = |role: Option<ClassRole>| -> f64 {
        let accs: Vec<f64> = per_class
            .iter()
            .filter(|(id, _)| match role {
                Some(r) => test.registry.role_of(**id) == Some(r),
                None => true,
            })
            .map(|(_, &a)| a)
            .collect();
        if accs.is_empty() {
            0.0
        } else {
            accs.iter().sum::<f64>() / accs.len() as f64
        }
    };

    Ok(Metrics {
        b_acc: mean_over(Some(ClassRole::Base)),
        n_acc: mean_over(Some(ClassRole::Novel)),
        all_acc: mean_over(None),
        per_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{pretrain_base, TrainConfig};
    use crate::synth::{generate_world, WorldConfig};

    fn setup() -> (crate::synth::World, Checkpoint) {
        let world = generate_world(&WorldConfig {
            raw_dim: 6,
            num_base: 3,
            num_novel: 2,
            samples_per_class_train: 40,
            samples_per_class_test: 20,
            seed: 21,
            ..WorldConfig::default()
        })
        .unwrap();
        let ckpt = pretrain_base(
            &world,
            &TrainConfig {
                epochs: 10,
                hidden_dim: 12,
                feature_dim: 10,
                projection_dim: 8,
                pretrain_milestones: vec![],
                ..TrainConfig::default()
            },
        )
        .unwrap();
        (world, ckpt)
    }

    #[test]
    fn base_checkpoint_scores_zero_on_novel() {
        let (world, ckpt) = setup();
        let metrics = evaluate(&ckpt, &world.test).unwrap();
        assert_eq!(metrics.n_acc, 0.0);
        for id in world.registry.novel_ids() {
            assert_eq!(metrics.per_class[&id], 0.0);
        }
        assert!(metrics.b_acc > 0.5);
    }

    #[test]
    fn duplicating_samples_leaves_metrics_unchanged() {
        let (world, ckpt) = setup();
        let single = evaluate(&ckpt, &world.test).unwrap();
        let mut doubled = world.test.clone();
        doubled.samples.extend(world.test.samples.clone());
        let double = evaluate(&ckpt, &doubled).unwrap();
        assert!((single.b_acc - double.b_acc).abs() < 1e-12);
        assert!((single.n_acc - double.n_acc).abs() < 1e-12);
        assert!((single.all_acc - double.all_acc).abs() < 1e-12);
        for (id, acc) in &single.per_class {
            assert!((acc - double.per_class[id]).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_test_set_errors() {
        let (world, ckpt) = setup();
        let empty = Dataset {
            registry: world.registry.clone(),
            samples: vec![],
        };
        assert!(evaluate(&ckpt, &empty).is_err());
    }

    #[test]
    fn single_correct_sample_scores_one() {
        let (world, ckpt) = setup();
        // Find a base test sample the model already classifies correctly.
        let metrics = evaluate(&ckpt, &world.test).unwrap();
        let good_class = *metrics
            .per_class
            .iter()
            .find(|(_, &a)| a > 0.0)
            .expect("some class is non-zero")
            .0;
        let xs: Vec<Vec<f64>> = world.test.samples.iter().map(|s| s.x.clone()).collect();
        let logits = ckpt.logits_values(&xs).unwrap();
        let idx = world
            .test
            .samples
            .iter()
            .enumerate()
            .position(|(i, s)| {
                if s.y != good_class {
                    return false;
                }
                let row = logits.row(i);
                let best = (0..row.len()).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()).unwrap();
                ckpt.registry.classes()[best].id == s.y
            })
            .expect("a correctly classified sample exists");
        let one = Dataset {
            registry: world.registry.clone(),
            samples: vec![world.test.samples[idx].clone()],
        };
        let m = evaluate(&ckpt, &one).unwrap();
        assert_eq!(m.per_class[&good_class], 1.0);
    }
}
