//! Projection head and the prototype-augmented supervised contrastive loss.
//!
//! Batch members are projected to unit vectors; anchors whose IoU score
//! clears the gate pull same-label members together while the denominator
//! stacks every other batch member plus every projected class prototype.
//! The outer average divides by the full batch size, so gating shrinks the
//! loss instead of re-weighting survivors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ComputeTape, NodeId, Tensor};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct HpcConfig {
    /// Temperature dividing similarities inside the exponentials.
    pub tau: f64,
    /// IoU gate: anchors with u < phi contribute nothing.
    pub phi: f64,
    pub projection_dim: usize,
}

impl Default for HpcConfig {
    fn default() -> Self {
        HpcConfig {
            tau: 0.1,
            phi: 0.7,
            projection_dim: 128,
        }
    }
}

impl HpcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::validation("hpc.tau", "temperature must be positive"));
        }
        if !(0.0..=1.0).contains(&self.phi) {
            return Err(Error::validation("hpc.phi", "gate must be in [0, 1]"));
        }
        if self.projection_dim == 0 {
            return Err(Error::validation("hpc.projection_dim", "must be positive"));
        }
        Ok(())
    }
}

/// A batch of projected embeddings living on a tape, with the metadata the
/// loss needs. Rows of the embedding node must be unit-norm.
pub struct ProjectedBatch {
    pub embeddings: NodeId,
    pub iou: Vec<f64>,
    pub labels: Vec<u32>,
}

impl ProjectedBatch {
    pub fn new(
        tape: &ComputeTape,
        embeddings: NodeId,
        iou: Vec<f64>,
        labels: Vec<u32>,
    ) -> Result<Self> {
        let z = tape.value(embeddings);
        if z.rank() != 2 || z.rows() == 0 {
            return Err(Error::ShapeMismatch {
                op: "projected_batch",
                detail: format!("embeddings {:?}", z.shape()),
            });
        }
        let n = z.rows();
        if iou.len() != n || labels.len() != n {
            return Err(Error::ShapeMismatch {
                op: "projected_batch",
                detail: format!("{n} rows, {} iou, {} labels", iou.len(), labels.len()),
            });
        }
        for (i, &u) in iou.iter().enumerate() {
            if !(0.0..=1.0).contains(&u) {
                return Err(Error::validation(
                    "projected_batch.iou",
                    format!("entry {i} = {u} outside [0, 1]"),
                ));
            }
        }
        for i in 0..n {
            let norm: f64 = z.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(Error::validation(
                    "projected_batch.embeddings",
                    format!("row {i} has norm {norm}, expected 1"),
                ));
            }
        }
        Ok(ProjectedBatch {
            embeddings,
            iou,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// L2-normalized linear projection of features through the head,
/// differentiable through the tape.
pub fn project(tape: &mut ComputeTape, features: NodeId, head_weights: NodeId) -> Result<NodeId> {
    let ht = tape.transpose(head_weights)?;
    let projected = tape.matmul(features, ht)?;
    tape.l2_normalize(projected)
}

/// Plain cosine similarity; errors on zero vectors.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "cosine_sim",
            detail: format!("{} vs {}", a.len(), b.len()),
        });
    }
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < 1e-150 || nb < 1e-150 {
        return Err(Error::ZeroNorm {
            context: "cosine_sim".into(),
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(dot / (na * nb))
}

/// The contrastive loss as a tape scalar.
///
/// Rules, in order:
/// - anchors with u < phi contribute 0;
/// - anchors that are the only member of their label are skipped (the
///   1/(N_y - 1) weight is undefined there);
/// - per-anchor denominators sum over every other batch member plus every
///   prototype; the outer average divides by the full batch size N;
/// - with nothing left, the loss is exactly 0.
pub fn hpc_loss(
    tape: &mut ComputeTape,
    batch: &ProjectedBatch,
    projected_prototypes: Option<NodeId>,
    cfg: &HpcConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    let n = batch.len();
    let label_count = |label: u32| batch.labels.iter().filter(|&&l| l == label).count();

    let has_positive_pair = (0..n).any(|i| label_count(batch.labels[i]) >= 2);
    if projected_prototypes.is_none() && !has_positive_pair {
        log::warn!("hpc_loss: no prototypes and no positive pairs; returning 0");
        return Ok(tape.leaf(Tensor::scalar(0.0)));
    }

    let effective: Vec<bool> = (0..n)
        .map(|i| batch.iou[i] >= cfg.phi && label_count(batch.labels[i]) >= 2)
        .collect();
    if !effective.iter().any(|&e| e) {
        return Ok(tape.leaf(Tensor::scalar(0.0)));
    }

    let z = batch.embeddings;
    let zt = tape.transpose(z)?;
    let sims = tape.matmul(z, zt)?;
    let sims_scaled = tape.scale(sims, 1.0 / cfg.tau)?;
    let exps = tape.exp(sims_scaled)?;

    // Knock the diagonal out of the denominator.
    let mut mask = vec![1.0; n * n];
    for i in 0..n {
        mask[i * n + i] = 0.0;
    }
    let mask = tape.leaf(Tensor::new(vec![n, n], mask)?);
    let exps_offdiag = tape.mul(exps, mask)?;
    let ones_n = tape.leaf(Tensor::new(vec![n, 1], vec![1.0; n])?);
    let mut denom = tape.matmul(exps_offdiag, ones_n)?;

    if let Some(protos) = projected_prototypes {
        let pt = tape.transpose(protos)?;
        let proto_sims = tape.matmul(z, pt)?;
        let proto_scaled = tape.scale(proto_sims, 1.0 / cfg.tau)?;
        let proto_exps = tape.exp(proto_scaled)?;
        let k = tape.value(protos).rows();
        let ones_k = tape.leaf(Tensor::new(vec![k, 1], vec![1.0; k])?);
        let proto_row_sums = tape.matmul(proto_exps, ones_k)?;
        denom = tape.add(denom, proto_row_sums)?;
    }
    let log_denom = tape.log(denom)?;

    // Positive-pair weights: 1 / (N * (N_y - 1)) for gated anchors.
    let mut pos_weights = vec![0.0; n * n];
    let mut anchor_weights = vec![0.0; n];
    for i in 0..n {
        if !effective[i] {
            continue;
        }
        let n_y = label_count(batch.labels[i]);
        let w = 1.0 / (n as f64 * (n_y as f64 - 1.0));
        for j in 0..n {
            if j != i && batch.labels[j] == batch.labels[i] {
                pos_weights[i * n + j] = w;
            }
        }
        anchor_weights[i] = 1.0 / n as f64;
    }
    let pos_weights = tape.leaf(Tensor::new(vec![n, n], pos_weights)?);
    let anchor_weights = tape.leaf(Tensor::new(vec![n, 1], anchor_weights)?);

    let weighted_sims = tape.mul(sims_scaled, pos_weights)?;
    let pulled = tape.sum(weighted_sims)?;
    let weighted_logden = tape.mul(log_denom, anchor_weights)?;
    let pushed = tape.sum(weighted_logden)?;
    let neg_pulled = tape.scale(pulled, -1.0)?;
    tape.add(pushed, neg_pulled)
}

/// Mean same-label and different-label cosine similarity over all pairs.
/// Works on any embedding matrix; used for the separation diagnostics.
pub fn pairwise_cosine_stats(embeddings: &Tensor, labels: &[u32]) -> Result<(f64, f64)> {
    let n = embeddings.rows();
    if n != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "pairwise_cosine_stats",
            detail: format!("{n} rows vs {} labels", labels.len()),
        });
    }
    let mut intra = (0.0, 0usize);
    let mut inter = (0.0, 0usize);
    for i in 0..n {
        for j in (i + 1)..n {
            let c = cosine_sim(embeddings.row(i), embeddings.row(j))?;
            if labels[i] == labels[j] {
                intra.0 += c;
                intra.1 += 1;
            } else {
                inter.0 += c;
                inter.1 += 1;
            }
        }
    }
    if intra.1 == 0 || inter.1 == 0 {
        return Err(Error::validation(
            "pairwise_cosine_stats",
            "need at least one same-label and one cross-label pair",
        ));
    }
    Ok((intra.0 / intra.1 as f64, inter.0 / inter.1 as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_rows(rows: &[Vec<f64>]) -> Tensor {
        let normed: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                let n: f64 = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                r.iter().map(|v| v / n).collect()
            })
            .collect();
        Tensor::from_rows(&normed).unwrap()
    }

    #[test]
    fn cosine_basics() {
        let v = vec![0.3, -0.4, 1.0];
        assert!((cosine_sim(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        let e1 = vec![1.0, 0.0];
        let e2 = vec![0.0, 1.0];
        assert!(cosine_sim(&e1, &e2).unwrap().abs() < 1e-12);
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((cosine_sim(&v, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!(cosine_sim(&[0.0, 0.0], &e1).is_err());
    }

    #[test]
    fn project_identity_head_normalizes() {
        let mut tape = ComputeTape::new();
        let f = tape.leaf(Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap());
        let head = tape.leaf(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let z = project(&mut tape, f, head).unwrap();
        assert_eq!(tape.value(z).data(), &[0.6, 0.8]);
    }

    #[test]
    fn project_is_scale_invariant() {
        let head_rows = vec![
            vec![0.3, -1.2, 0.7],
            vec![1.1, 0.2, -0.4],
            vec![-0.5, 0.9, 2.0],
            vec![0.0, 0.4, 0.1],
        ];
        let run = |scale: f64| {
            let mut tape = ComputeTape::new();
            let f =
                tape.leaf(Tensor::from_rows(&[vec![0.2 * scale, -1.0 * scale, 0.5 * scale]]).unwrap());
            let head = tape.leaf(Tensor::from_rows(&head_rows).unwrap());
            let z = project(&mut tape, f, head).unwrap();
            tape.value(z).data().to_vec()
        };
        let a = run(1.0);
        let b = run(5.0);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn fully_gated_batch_gives_zero() {
        let mut tape = ComputeTape::new();
        let z = tape.leaf(unit_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let batch = ProjectedBatch::new(&tape, z, vec![0.5, 0.5], vec![0, 0]).unwrap();
        let protos = tape.leaf(unit_rows(&[vec![1.0, 1.0]]));
        let loss = hpc_loss(&mut tape, &batch, Some(protos), &HpcConfig::default()).unwrap();
        assert_eq!(tape.value(loss).scalar_value(), 0.0);
    }

    #[test]
    fn two_identical_anchors_one_orthogonal_prototype() {
        // z1 = z2 = e1, one prototype e2, tau = 0.1, u = 1:
        // per-anchor term log(1 + e^{-10}); the batch mean equals it too.
        let mut tape = ComputeTape::new();
        let z = tape.leaf(unit_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]));
        let batch = ProjectedBatch::new(&tape, z, vec![1.0, 1.0], vec![3, 3]).unwrap();
        let protos = tape.leaf(unit_rows(&[vec![0.0, 1.0]]));
        let loss = hpc_loss(&mut tape, &batch, Some(protos), &HpcConfig::default()).unwrap();
        let want = (-10.0f64).exp().ln_1p();
        assert!(
            (tape.value(loss).scalar_value() - want).abs() < 1e-8,
            "got {}, want {}",
            tape.value(loss).scalar_value(),
            want
        );
    }

    #[test]
    fn singleton_label_anchor_is_skipped() {
        // One anchor has no positive partner; only the paired label counts.
        let mut tape = ComputeTape::new();
        let rows = unit_rows(&[vec![1.0, 0.0], vec![1.0, 0.1], vec![0.0, 1.0]]);
        let z = tape.leaf(rows);
        let batch = ProjectedBatch::new(&tape, z, vec![1.0, 1.0, 1.0], vec![0, 0, 9]).unwrap();
        let protos = tape.leaf(unit_rows(&[vec![1.0, 1.0]]));
        let loss_with = hpc_loss(&mut tape, &batch, Some(protos), &HpcConfig::default()).unwrap();
        let v = tape.value(loss_with).scalar_value();
        assert!(v > 0.0);

        // Gating the singleton out changes nothing.
        let mut tape2 = ComputeTape::new();
        let rows2 = unit_rows(&[vec![1.0, 0.0], vec![1.0, 0.1], vec![0.0, 1.0]]);
        let z2 = tape2.leaf(rows2);
        let batch2 = ProjectedBatch::new(&tape2, z2, vec![1.0, 1.0, 0.0], vec![0, 0, 9]).unwrap();
        let protos2 = tape2.leaf(unit_rows(&[vec![1.0, 1.0]]));
        let loss2 = hpc_loss(&mut tape2, &batch2, Some(protos2), &HpcConfig::default()).unwrap();
        assert!((tape2.value(loss2).scalar_value() - v).abs() < 1e-12);
    }

    #[test]
    fn no_prototypes_no_positives_returns_zero() {
        let mut tape = ComputeTape::new();
        let z = tape.leaf(unit_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let batch = ProjectedBatch::new(&tape, z, vec![1.0, 1.0], vec![0, 1]).unwrap();
        let loss = hpc_loss(&mut tape, &batch, None, &HpcConfig::default()).unwrap();
        assert_eq!(tape.value(loss).scalar_value(), 0.0);
    }

    #[test]
    fn loss_is_nonnegative_on_random_batches() {
        use rand::Rng as _;
        let mut rng = crate::rng::rng_for(17, 900);
        for _ in 0..20 {
            let n = rng.gen_range(2..8);
            let p = 5;
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..p).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let protos_rows: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..p).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let iou: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let labels: Vec<u32> = (0..n).map(|_| rng.gen_range(0..3)).collect();
            let mut tape = ComputeTape::new();
            let z = tape.leaf(unit_rows(&rows));
            let batch = ProjectedBatch::new(&tape, z, iou, labels).unwrap();
            let protos = tape.leaf(unit_rows(&protos_rows));
            let loss = hpc_loss(&mut tape, &batch, Some(protos), &HpcConfig::default()).unwrap();
            assert!(tape.value(loss).scalar_value() >= 0.0);
        }
    }
}
