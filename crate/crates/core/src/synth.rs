//! Seeded generator of the synthetic proposal-feature world.
//!
//! Classes are Gaussian clusters whose means sit on a sphere; every sample
//! carries a synthetic IoU score that decays with its distance from the
//! cluster center, so the contrastive gate sees realistic variation. Base and
//! novel class ids are disjoint, mirroring the two-stage protocol.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::{ClassInfo, ClassRegistry, ClassRole};
use crate::rng::{self, stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub raw_dim: usize,
    pub num_base: usize,
    pub num_novel: usize,
    pub samples_per_class_train: usize,
    pub samples_per_class_test: usize,
    pub cluster_radius: f64,
    pub cluster_sigma: f64,
    pub iou_noise: f64,
    pub seed: u64,
    /// Adds a diffuse low-IoU background class to the train split only; the
    /// harness never trains or scores it, tests use it to stress the IoU gate.
    pub include_background: bool,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            raw_dim: 16,
            num_base: 7,
            num_novel: 3,
            samples_per_class_train: 200,
            samples_per_class_test: 100,
            cluster_radius: 4.0,
            cluster_sigma: 1.0,
            iou_noise: 0.05,
            seed: 0,
            include_background: false,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_base < 2 {
            return Err(Error::validation("world.num_base", "need at least 2 base classes"));
        }
        if self.num_novel < 1 {
            return Err(Error::validation("world.num_novel", "need at least 1 novel class"));
        }
        if !(self.cluster_sigma > 0.0) {
            return Err(Error::validation("world.cluster_sigma", "must be positive"));
        }
        if !(self.cluster_radius > 0.0) {
            return Err(Error::validation("world.cluster_radius", "must be positive"));
        }
        if self.raw_dim == 0 {
            return Err(Error::validation("world.raw_dim", "must be positive"));
        }
        if !(0.0..=0.5).contains(&self.iou_noise) {
            return Err(Error::validation("world.iou_noise", "must be in [0, 0.5]"));
        }
        if self.samples_per_class_train == 0 || self.samples_per_class_test == 0 {
            return Err(Error::validation("world.samples_per_class", "must be positive"));
        }
        Ok(())
    }

    pub fn background_id(&self) -> u32 {
        (self.num_base + self.num_novel) as u32
    }
}

/// One synthetic RoI-feature instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalFeature {
    pub x: Vec<f64>,
    pub y: u32,
    pub u: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub registry: ClassRegistry,
    pub samples: Vec<ProposalFeature>,
}

impl Dataset {
    pub fn of_class(&self, id: u32) -> Vec<&ProposalFeature> {
        self.samples.iter().filter(|s| s.y == id).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub config: WorldConfig,
    pub registry: ClassRegistry,
    pub train: Dataset,
    pub test: Dataset,
}

fn sphere_point(rng: &mut rng::Rng, dim: usize, radius: f64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.iter().map(|x| x * radius / norm).collect();
        }
    }
}

/// IoU surrogate: quadratic falloff of centrality, zero at twice the cluster
/// radius, plus bounded uniform noise. Distance zero gives IoU near 1, and at
/// the default radius/sigma ratio the scores straddle the 0.7 gate.
fn synth_iou(dist: f64, cluster_radius: f64, noise: f64, rng: &mut rng::Rng) -> f64 {
    let ratio = dist / (2.0 * cluster_radius);
    let raw = (1.0 - ratio * ratio).clamp(0.0, 1.0);
    let jitter = if noise > 0.0 {
        rng.gen_range(-noise..=noise)
    } else {
        0.0
    };
    (raw + jitter).clamp(0.0, 1.0)
}

/// Generates train/test splits and the registry, fully determined by the seed.
pub fn generate_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let mut rng = rng::rng_for(cfg.seed, stream::WORLD);

    let total_classes = cfg.num_base + cfg.num_novel;
    let mut classes = Vec::with_capacity(total_classes);
    for id in 0..total_classes as u32 {
        let (name, role) = if (id as usize) < cfg.num_base {
            (format!("base_{id}"), ClassRole::Base)
        } else {
            (format!("novel_{id}"), ClassRole::Novel)
        };
        classes.push(ClassInfo { id, name, role });
    }
    if cfg.include_background {
        classes.push(ClassInfo {
            id: cfg.background_id(),
            name: "background".into(),
            role: ClassRole::Background,
        });
    }
    let registry = ClassRegistry::new(classes)?;

    let means: Vec<Vec<f64>> = (0..total_classes)
        .map(|_| sphere_point(&mut rng, cfg.raw_dim, cfg.cluster_radius))
        .collect();

    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class_idx, mean) in means.iter().enumerate() {
        let id = class_idx as u32;
        let n = cfg.samples_per_class_train + cfg.samples_per_class_test;
        for i in 0..n {
            let x: Vec<f64> = mean
                .iter()
                .map(|&m| {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    m + cfg.cluster_sigma * g
                })
                .collect();
            let dist = x
                .iter()
                .zip(mean)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let u = synth_iou(dist, cfg.cluster_radius, cfg.iou_noise, &mut rng);
            let sample = ProposalFeature { x, y: id, u };
            if i < cfg.samples_per_class_train {
                train.push(sample);
            } else {
                test.push(sample);
            }
        }
    }

    if cfg.include_background {
        let id = cfg.background_id();
        for _ in 0..cfg.samples_per_class_train {
            let x: Vec<f64> = (0..cfg.raw_dim)
                .map(|_| {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    cfg.cluster_radius * g
                })
                .collect();
            let u = rng.gen_range(0.0..0.3);
            train.push(ProposalFeature { x, y: id, u });
        }
    }

    Ok(World {
        config: cfg.clone(),
        registry: registry.clone(),
        train: Dataset {
            registry: registry.clone(),
            samples: train,
        },
        test: Dataset {
            registry,
            samples: test,
        },
    })
}

/// Draws exactly K support samples per requested class, without replacement.
pub fn sample_kshot(
    train: &Dataset,
    novel_ids: &[u32],
    k: usize,
    seed: u64,
) -> Result<Vec<ProposalFeature>> {
    if k == 0 {
        return Err(Error::validation("kshot.k", "K must be at least 1"));
    }
    let mut rng = rng::rng_for(seed, stream::KSHOT);
    let mut support = Vec::with_capacity(novel_ids.len() * k);
    for &id in novel_ids {
        let pool: Vec<usize> = train
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.y == id)
            .map(|(i, _)| i)
            .collect();
        if pool.len() < k {
            return Err(Error::validation(
                "kshot",
                format!("class {id} has {} samples, need {k}", pool.len()),
            ));
        }
        let chosen = pool.choose_multiple(&mut rng, k).cloned().collect::<Vec<_>>();
        let mut chosen = chosen;
        chosen.sort_unstable();
        for i in chosen {
            support.push(train.samples[i].clone());
        }
    }
    Ok(support)
}

pub fn save_world(world: &World, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(world).map_err(|e| Error::Json {
        path: path.display().to_string(),
        source: e,
    })?;
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn load_world(path: &Path) -> Result<World> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let world: World = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.display().to_string(),
        source: e,
    })?;
    world.config.validate()?;
    Ok(world)
}
