//! Entropic optimal transport and the prototypical calibration loss.
//!
//! Each base prototype contributes one transport problem: the fine-tuned
//! model's predicted distribution on the prototype (over the current Q
//! classes) is moved onto the stored base-stage distribution (over the K
//! base classes) under a ground cost. The mean transport cost is the
//! calibration loss; its gradient w.r.t. the predicted distribution is the
//! centered row dual potential, exact for the entropic objective.

pub mod oracle;
mod sinkhorn;

pub use oracle::exact_ot_cost;
pub use sinkhorn::{entropic_value, sinkhorn, sinkhorn_with_start, SinkhornParams, TransportPlan};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hpc::cosine_sim;
use crate::protostore::PrototypeStore;
use crate::registry::ClassRegistry;
use crate::tensor::{ComputeTape, NodeId, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMode {
    /// 0 on matched class ids, 1 elsewhere.
    ZeroOne,
    /// 1 - cosine of class mean features, clamped to [0, 2]; matched ids
    /// forced to exactly 0. Retains between-class structure, which is the
    /// point of using a transport distance at all.
    Semantic,
}

/// Ground cost between current classes (rows) and base classes (columns).
#[derive(Clone, Debug)]
pub struct CostMatrix {
    pub values: Tensor,
    pub mode: CostMode,
    pub row_classes: Vec<u32>,
    pub col_classes: Vec<u32>,
}

impl CostMatrix {
    pub fn validate(&self) -> Result<()> {
        let (q, k) = (self.row_classes.len(), self.col_classes.len());
        if self.values.shape() != [q, k] {
            return Err(Error::ShapeMismatch {
                op: "cost_matrix",
                detail: format!("values {:?} vs {q} rows, {k} cols", self.values.shape()),
            });
        }
        for i in 0..q {
            for j in 0..k {
                let v = self.values.at2(i, j);
                if v < 0.0 {
                    return Err(Error::validation(
                        "cost_matrix",
                        format!("negative cost {v} at ({i}, {j})"),
                    ));
                }
                if self.row_classes[i] == self.col_classes[j] && v != 0.0 {
                    return Err(Error::validation(
                        "cost_matrix",
                        format!("matched class {} has nonzero cost {v}", self.row_classes[i]),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Builds the ground cost for the current registry against the store's base
/// prototypes. `novel_means` supplies classifier-input means for classes not
/// yet in the store (the session currently being enrolled).
pub fn build_cost_matrix(
    registry: &ClassRegistry,
    store: &PrototypeStore,
    novel_means: &[(u32, Vec<f64>)],
    mode: CostMode,
) -> Result<CostMatrix> {
    let row_classes: Vec<u32> = registry.scored_ids();
    let base = store.base_prototypes();
    let col_classes: Vec<u32> = base.iter().map(|p| p.class_id).collect();
    if col_classes.is_empty() {
        return Err(Error::validation("cost_matrix", "store has no base prototypes"));
    }

    let mean_of = |id: u32| -> Result<&[f64]> {
        if let Some(p) = store.get(id) {
            return Ok(&p.mean_feature);
        }
        novel_means
            .iter()
            .find(|(nid, _)| *nid == id)
            .map(|(_, m)| m.as_slice())
            .ok_or_else(|| {
                Error::validation(
                    "cost_matrix",
                    format!("semantic mode: class {id} has no prototype mean"),
                )
            })
    };

    let (q, k) = (row_classes.len(), col_classes.len());
    let mut values = vec![0.0; q * k];
    for (i, &row_id) in row_classes.iter().enumerate() {
        for (j, &col_id) in col_classes.iter().enumerate() {
            values[i * k + j] = if row_id == col_id {
                0.0
            } else {
                match mode {
                    CostMode::ZeroOne => 1.0,
                    CostMode::Semantic => {
                        let c = cosine_sim(mean_of(row_id)?, mean_of(col_id)?)?;
                        (1.0 - c).clamp(0.0, 2.0)
                    }
                }
            };
        }
    }
    let cost = CostMatrix {
        values: Tensor::new(vec![q, k], values)?,
        mode,
        row_classes,
        col_classes,
    };
    cost.validate()?;
    Ok(cost)
}

/// Frobenius inner product of the plan and the ground cost.
pub fn wasserstein_cost(plan: &TransportPlan, cost: &CostMatrix) -> Result<f64> {
    if plan.plan.shape() != cost.values.shape() {
        return Err(Error::ShapeMismatch {
            op: "wasserstein_cost",
            detail: format!("plan {:?} vs cost {:?}", plan.plan.shape(), cost.values.shape()),
        });
    }
    Ok(plan
        .plan
        .data()
        .iter()
        .zip(cost.values.data())
        .map(|(t, c)| t * c)
        .sum())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CalibrationReport {
    /// One transport cost per base prototype, in store order.
    pub per_prototype: Vec<f64>,
    pub l_cal: f64,
}

/// Marginal-error ceiling above which an unconverged plan is refused.
const MARGINAL_HARD_LIMIT: f64 = 1e-4;

/// Dual potentials from earlier calibration solves, keyed by prototype
/// class id. Successive training steps solve near-identical problems, so
/// reusing duals collapses the iteration count.
#[derive(Clone, Debug, Default)]
pub struct CalibrationDuals {
    by_class: std::collections::BTreeMap<u32, (Vec<f64>, Vec<f64>)>,
}

/// Puts the calibration loss on the tape.
///
/// For every base prototype p_k the current classifier's softmax prediction
/// (a row of `probs` below) is transported onto the stored distribution; the
/// scalar node's value is the mean transport cost and its gradient w.r.t.
/// each predicted distribution is the centered row dual, chained through the
/// softmax by the tape.
pub fn calibration_loss(
    tape: &mut ComputeTape,
    classifier_weight: NodeId,
    classifier_bias: NodeId,
    store: &PrototypeStore,
    cost: &CostMatrix,
    params: &SinkhornParams,
) -> Result<(NodeId, CalibrationReport)> {
    calibration_loss_warm(
        tape,
        classifier_weight,
        classifier_bias,
        store,
        cost,
        params,
        &mut CalibrationDuals::default(),
    )
}

/// [`calibration_loss`] with a dual-potential cache carried across calls.
#[allow(clippy::too_many_arguments)]
pub fn calibration_loss_warm(
    tape: &mut ComputeTape,
    classifier_weight: NodeId,
    classifier_bias: NodeId,
    store: &PrototypeStore,
    cost: &CostMatrix,
    params: &SinkhornParams,
    duals: &mut CalibrationDuals,
) -> Result<(NodeId, CalibrationReport)> {
    let base = store.base_prototypes();
    if base.is_empty() {
        return Err(Error::validation("calibration_loss", "store has no base prototypes"));
    }
    let k_base = base.len();
    let q = tape.value(classifier_weight).shape()[0];
    if cost.values.shape() != [q, k_base] {
        return Err(Error::ShapeMismatch {
            op: "calibration_loss",
            detail: format!(
                "cost {:?} vs {q} classifier rows and {k_base} base prototypes",
                cost.values.shape()
            ),
        });
    }

    let proto_rows: Vec<Vec<f64>> = base.iter().map(|p| p.mean_feature.clone()).collect();
    let protos = tape.leaf(Tensor::from_rows(&proto_rows)?);
    let wt = tape.transpose(classifier_weight)?;
    let logits = tape.matmul(protos, wt)?;
    let logits = tape.add_bias(logits, classifier_bias)?;
    let probs = tape.softmax(logits)?;

    let probs_val = tape.value(probs).clone();
    let mut per_prototype = Vec::with_capacity(k_base);
    let mut grad = vec![0.0; k_base * q];
    for (k_idx, proto) in base.iter().enumerate() {
        let f = probs_val.row(k_idx);
        let warm = duals
            .by_class
            .get(&proto.class_id)
            .map(|(a, b)| (a.as_slice(), b.as_slice()));
        let plan = sinkhorn_with_start(f, &proto.base_distribution, cost, params, warm)?;
        if !plan.converged && plan.marginal_error > MARGINAL_HARD_LIMIT {
            if std::env::var("PROTODRIFT_DEBUG_OT").is_ok() {
                eprintln!("stall: f={f:?}");
                eprintln!("  d={:?}", proto.base_distribution);
                eprintln!("  C={:?}", cost.values.data());
                eprintln!("  warm={warm:?}");
            }
            return Err(Error::SinkhornNotConverged {
                marginal_error: plan.marginal_error,
                iterations: plan.iterations,
            });
        }
        per_prototype.push(wasserstein_cost(&plan, cost)?);
        let alpha = plan.centered_alpha();
        for (i, a) in alpha.iter().enumerate() {
            grad[k_idx * q + i] = a / k_base as f64;
        }
        duals
            .by_class
            .insert(proto.class_id, (plan.alpha.clone(), plan.beta.clone()));
    }
    let l_cal = per_prototype.iter().sum::<f64>() / k_base as f64;

    let grad_tensor = Tensor::new(vec![k_base, q], grad)?;
    let node = tape.linearized(l_cal, &[probs], vec![grad_tensor])?;
    Ok((
        node,
        CalibrationReport {
            per_prototype,
            l_cal,
        },
    ))
}
