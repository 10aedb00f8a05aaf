use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::train::{finetune_incremental, pretrain_base, FinetuneConfig};
use crate::harness::{evaluate, LossWeights};
use crate::protostore::extract_store;
use crate::synth::{generate_world, sample_kshot, Dataset, WorldConfig};

/// The five-variant structure: no fine-tune; plain fine-tune; plus the
/// contrastive loss; plus the calibration loss; both.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    A,
    B,
    C,
    D,
    E,
}

pub const ALL_VARIANTS: [Variant; 5] = [Variant::A, Variant::B, Variant::C, Variant::D, Variant::E];

impl Variant {
    pub fn label(&self) -> &'static str {
        match self {
            Variant::A => "a",
            Variant::B => "b",
            Variant::C => "c",
            Variant::D => "d",
            Variant::E => "e",
        }
    }

    /// Loss weights for the fine-tuned variants, from the configured ones.
    pub fn weights(&self, on: &LossWeights) -> Option<LossWeights> {
        match self {
            Variant::A => None,
            Variant::B => Some(LossWeights {
                lambda1: 0.0,
                lambda2: 0.0,
            }),
            Variant::C => Some(LossWeights {
                lambda1: on.lambda1,
                lambda2: 0.0,
            }),
            Variant::D => Some(LossWeights {
                lambda1: 0.0,
                lambda2: on.lambda2,
            }),
            Variant::E => Some(*on),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub b_acc: f64,
    pub n_acc: f64,
    pub all_acc: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationSummary {
    pub variant: String,
    pub median_b: f64,
    pub median_n: f64,
    pub median_all: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub summaries: Vec<AblationSummary>,
}

pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty());
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl AblationTable {
    pub fn summary_for(&self, variant: Variant) -> Option<&AblationSummary> {
        self.summaries.iter().find(|s| s.variant == variant.label())
    }
}

/// Runs the five variants over the given seeds. Within a seed, every variant
/// shares the same world, the same pretrained checkpoint, the same store,
/// and the same support set; only the loss weights differ.
pub fn run_ablation(
    world_cfg: &WorldConfig,
    cfg: &FinetuneConfig,
    weights_on: &LossWeights,
    k_shots: usize,
    seeds: &[u64],
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::validation("ablation", "need at least one seed"));
    }
    let mut rows = Vec::new();
    for &seed in seeds {
        let world = generate_world(&WorldConfig {
            seed,
            ..world_cfg.clone()
        })?;
        let base_ids = world.registry.base_ids();
        let ckpt = pretrain_base(&world, &cfg.train)?;
        let base_data = Dataset {
            registry: world.registry.clone(),
            samples: world
                .train
                .samples
                .iter()
                .filter(|s| base_ids.contains(&s.y))
                .cloned()
                .collect(),
        };
        let store = extract_store(&ckpt, &base_data)?;
        let support = sample_kshot(&world.train, &world.registry.novel_ids(), k_shots, seed)?;

        for variant in ALL_VARIANTS {
            let metrics = match variant.weights(weights_on) {
                None => evaluate(&ckpt, &world.test)?,
                Some(w) => {
                    let (tuned, _) = finetune_incremental(&ckpt, &store, &support, &w, cfg)?;
                    evaluate(&tuned, &world.test)?
                }
            };
            rows.push(AblationRow {
                variant: variant.label().to_string(),
                seed,
                b_acc: metrics.b_acc,
                n_acc: metrics.n_acc,
                all_acc: metrics.all_acc,
            });
        }
    }

    let mut summaries = Vec::new();
    for variant in ALL_VARIANTS {
        let of = |f: fn(&AblationRow) -> f64| -> Vec<f64> {
            rows.iter()
                .filter(|r| r.variant == variant.label())
                .map(f)
                .collect()
        };
        summaries.push(AblationSummary {
            variant: variant.label().to_string(),
            median_b: median(&of(|r| r.b_acc)),
            median_n: median(&of(|r| r.n_acc)),
            median_all: median(&of(|r| r.all_acc)),
        });
    }
    Ok(AblationTable { rows, summaries })
}

/// Fixed-order CSV: per variant, one row per seed then a median row.
pub fn ablation_csv(table: &AblationTable) -> String {
    let mut out = String::from("variant,seed,bAcc,nAcc,allAcc\n");
    for variant in ALL_VARIANTS {
        for row in table.rows.iter().filter(|r| r.variant == variant.label()) {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6}\n",
                row.variant, row.seed, row.b_acc, row.n_acc, row.all_acc
            ));
        }
        if let Some(s) = table.summary_for(variant) {
            out.push_str(&format!(
                "{},median,{:.6},{:.6},{:.6}\n",
                s.variant, s.median_b, s.median_n, s.median_all
            ));
        }
    }
    out
}
