use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::otcal::CostMatrix;
use crate::tensor::Tensor;

/// Epsilon-scaled log-domain Sinkhorn settings.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SinkhornParams {
    /// Strictly decreasing positive regularization strengths; the plan and
    /// duals reported come from the last entry.
    pub eps_schedule: Vec<f64>,
    /// Iteration cap per epsilon stage.
    pub max_iter: usize,
    /// Convergence threshold on the max L1 marginal violation.
    pub tol: f64,
}

impl Default for SinkhornParams {
    fn default() -> Self {
        SinkhornParams {
            eps_schedule: vec![0.1, 0.01, 0.001],
            max_iter: 2000,
            tol: 1e-9,
        }
    }
}

impl SinkhornParams {
    pub fn validate(&self) -> Result<()> {
        if self.eps_schedule.is_empty() {
            return Err(Error::validation("sinkhorn.eps_schedule", "must be non-empty"));
        }
        let mut prev = f64::INFINITY;
        for &e in &self.eps_schedule {
            if !(e > 0.0) || e >= prev {
                return Err(Error::validation(
                    "sinkhorn.eps_schedule",
                    "must be strictly decreasing and positive",
                ));
            }
            prev = e;
        }
        if self.max_iter == 0 {
            return Err(Error::validation("sinkhorn.max_iter", "must be positive"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::validation("sinkhorn.tol", "must be positive"));
        }
        Ok(())
    }
}

/// Output of one entropic transport solve.
#[derive(Clone, Debug)]
pub struct TransportPlan {
    pub plan: Tensor,
    /// Row dual potentials at the final epsilon (gradient of the entropic
    /// value w.r.t. the row marginal, up to an additive constant).
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub epsilon: f64,
    pub iterations: usize,
    pub marginal_error: f64,
    /// Transport cost <T, C> at the end of each epsilon stage; tightening
    /// epsilon never increases it.
    pub stage_costs: Vec<f64>,
    pub converged: bool,
}

impl TransportPlan {
    /// Row duals shifted to zero mean; the additive gauge freedom drops out
    /// of any softmax-chained gradient anyway, centering just fixes it.
    pub fn centered_alpha(&self) -> Vec<f64> {
        let finite: Vec<f64> = self.alpha.iter().cloned().filter(|a| a.is_finite()).collect();
        let mean = if finite.is_empty() {
            0.0
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        };
        self.alpha
            .iter()
            .map(|&a| if a.is_finite() { a - mean } else { 0.0 })
            .collect()
    }
}

fn check_simplex(name: &str, v: &[f64]) -> Result<()> {
    for (i, &x) in v.iter().enumerate() {
        if !(x >= 0.0) {
            return Err(Error::OffSimplex {
                detail: format!("{name}[{i}] = {x} is negative"),
            });
        }
    }
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::OffSimplex {
            detail: format!("{name} sums to {sum}"),
        });
    }
    Ok(())
}

fn log_sum_exp(values: impl Iterator<Item = f64>) -> f64 {
    let vals: Vec<f64> = values.collect();
    let mx = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = vals.iter().map(|v| (v - mx).exp()).sum();
    mx + sum.ln()
}

fn plan_from_potentials(alpha: &[f64], beta: &[f64], c: &Tensor, eps: f64) -> Vec<f64> {
    let (q, k) = (alpha.len(), beta.len());
    let mut t = vec![0.0; q * k];
    for i in 0..q {
        for j in 0..k {
            let e = (alpha[i] + beta[j] - c.at2(i, j)) / eps;
            t[i * k + j] = e.exp();
        }
    }
    t
}

fn marginal_l1(t: &[f64], q: usize, k: usize, f: &[f64], d: &[f64]) -> f64 {
    let mut row_err = 0.0;
    for i in 0..q {
        let s: f64 = t[i * k..(i + 1) * k].iter().sum();
        row_err += (s - f[i]).abs();
    }
    let mut col_err = 0.0;
    for j in 0..k {
        let mut s = 0.0;
        for i in 0..q {
            s += t[i * k + j];
        }
        col_err += (s - d[j]).abs();
    }
    row_err.max(col_err)
}

/// Solves entropic OT between simplex vectors `f` (rows) and `d` (columns)
/// under the given ground cost, in the log domain with epsilon scaling.
///
/// Non-convergence is reported in the plan, not hidden; callers decide
/// whether a loose plan is usable.
pub fn sinkhorn(
    f: &[f64],
    d: &[f64],
    cost: &CostMatrix,
    params: &SinkhornParams,
) -> Result<TransportPlan> {
    sinkhorn_with_start(f, d, cost, params, None)
}

/// Like [`sinkhorn`], but optionally seeded with dual potentials from an
/// earlier, nearby solve. A warm start skips the epsilon ladder and runs the
/// final stage only; small epsilons converge slowly from scratch but fast
/// from a neighbor's duals.
pub fn sinkhorn_with_start(
    f: &[f64],
    d: &[f64],
    cost: &CostMatrix,
    params: &SinkhornParams,
    warm_start: Option<(&[f64], &[f64])>,
) -> Result<TransportPlan> {
    params.validate()?;
    let c = &cost.values;
    let (q, k) = (c.shape()[0], c.shape()[1]);
    if f.len() != q || d.len() != k {
        return Err(Error::ShapeMismatch {
            op: "sinkhorn",
            detail: format!("cost {q}x{k}, f {}, d {}", f.len(), d.len()),
        });
    }
    check_simplex("f", f)?;
    check_simplex("d", d)?;

    let log_f: Vec<f64> = f.iter().map(|&x| x.ln()).collect(); // ln 0 = -inf
    let log_d: Vec<f64> = d.iter().map(|&x| x.ln()).collect();

    let mut alpha = vec![0.0; q];
    let mut beta = vec![0.0; k];
    let schedule: Vec<f64> = match warm_start {
        Some((a0, b0)) if a0.len() == q && b0.len() == k => {
            alpha.copy_from_slice(a0);
            beta.copy_from_slice(b0);
            vec![*params.eps_schedule.last().unwrap()]
        }
        _ => params.eps_schedule.clone(),
    };
    let mut iterations = 0usize;
    let mut stage_costs = Vec::with_capacity(schedule.len());
    let mut marginal_error = f64::INFINITY;
    let mut converged = false;

    for &eps in &schedule {
        converged = false;
        for _ in 0..params.max_iter {
            iterations += 1;
            for i in 0..q {
                if log_f[i] == f64::NEG_INFINITY {
                    alpha[i] = f64::NEG_INFINITY;
                    continue;
                }
                let lse = log_sum_exp((0..k).map(|j| (beta[j] - c.at2(i, j)) / eps));
                alpha[i] = eps * (log_f[i] - lse);
            }
            for j in 0..k {
                if log_d[j] == f64::NEG_INFINITY {
                    beta[j] = f64::NEG_INFINITY;
                    continue;
                }
                let lse = log_sum_exp((0..q).map(|i| (alpha[i] - c.at2(i, j)) / eps));
                beta[j] = eps * (log_d[j] - lse);
            }
            let t = plan_from_potentials(&alpha, &beta, c, eps);
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    op: "sinkhorn".into(),
                    detail: "kernel overflowed in log domain".into(),
                });
            }
            marginal_error = marginal_l1(&t, q, k, f, d);
            if marginal_error <= params.tol {
                converged = true;
                break;
            }
        }
        let t = plan_from_potentials(&alpha, &beta, c, eps);
        let stage_cost: f64 = t
            .iter()
            .zip(c.data())
            .map(|(tv, cv)| tv * cv)
            .sum();
        stage_costs.push(stage_cost);
    }

    let eps_final = *params.eps_schedule.last().unwrap();
    let t = plan_from_potentials(&alpha, &beta, c, eps_final);
    let plan = Tensor::new(vec![q, k], t)?;

    Ok(TransportPlan {
        plan,
        alpha,
        beta,
        epsilon: eps_final,
        iterations,
        marginal_error,
        stage_costs,
        converged,
    })
}

/// Entropic objective <T, C> + eps * sum T (ln T - 1); the quantity whose
/// gradient w.r.t. the row marginal is the row dual potential.
pub fn entropic_value(plan: &TransportPlan, cost: &CostMatrix) -> f64 {
    let mut v = 0.0;
    for (t, c) in plan.plan.data().iter().zip(cost.values.data()) {
        v += t * c;
        if *t > 0.0 {
            v += plan.epsilon * t * (t.ln() - 1.0);
        }
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::otcal::{CostMatrix, CostMode};

    fn zero_one_cost(q: usize, k: usize) -> CostMatrix {
        let mut vals = vec![1.0; q * k];
        for i in 0..q.min(k) {
            vals[i * k + i] = 0.0;
        }
        CostMatrix {
            values: Tensor::new(vec![q, k], vals).unwrap(),
            mode: CostMode::ZeroOne,
            row_classes: (0..q as u32).collect(),
            col_classes: (0..k as u32).collect(),
        }
    }

    #[test]
    fn matched_marginals_zero_cost() {
        let f = [0.25, 0.5, 0.25];
        let cost = zero_one_cost(3, 3);
        let plan = sinkhorn(&f, &f, &cost, &SinkhornParams::default()).unwrap();
        let w: f64 = plan
            .plan
            .data()
            .iter()
            .zip(cost.values.data())
            .map(|(t, c)| t * c)
            .sum();
        assert!(w <= 1e-3, "w = {w}");
        assert!(plan.converged);
    }

    #[test]
    fn forced_swap_costs_one() {
        let cost = CostMatrix {
            values: Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap(),
            mode: CostMode::ZeroOne,
            row_classes: vec![0, 1],
            col_classes: vec![0, 1],
        };
        let plan = sinkhorn(&[1.0, 0.0], &[0.0, 1.0], &cost, &SinkhornParams::default()).unwrap();
        let w: f64 = plan
            .plan
            .data()
            .iter()
            .zip(cost.values.data())
            .map(|(t, c)| t * c)
            .sum();
        assert!((w - 1.0).abs() <= 1e-3, "w = {w}");
    }

    #[test]
    fn partial_swap_costs_the_moved_mass() {
        let cost = zero_one_cost(2, 2);
        let plan = sinkhorn(&[0.3, 0.7], &[0.7, 0.3], &cost, &SinkhornParams::default()).unwrap();
        let w: f64 = plan
            .plan
            .data()
            .iter()
            .zip(cost.values.data())
            .map(|(t, c)| t * c)
            .sum();
        assert!((w - 0.4).abs() <= 1e-3, "w = {w}");
    }

    #[test]
    fn off_simplex_inputs_rejected() {
        let cost = zero_one_cost(2, 2);
        assert!(sinkhorn(&[0.6, 0.6], &[0.5, 0.5], &cost, &SinkhornParams::default()).is_err());
        assert!(sinkhorn(&[-0.1, 1.1], &[0.5, 0.5], &cost, &SinkhornParams::default()).is_err());
    }

    #[test]
    fn stage_costs_do_not_increase() {
        let cost = zero_one_cost(3, 3);
        let plan = sinkhorn(
            &[0.2, 0.5, 0.3],
            &[0.4, 0.1, 0.5],
            &cost,
            &SinkhornParams::default(),
        )
        .unwrap();
        for pair in plan.stage_costs.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-8, "stage costs {:?}", plan.stage_costs);
        }
    }

    #[test]
    fn converged_marginals_are_tight() {
        let cost = zero_one_cost(4, 3);
        let f = [0.1, 0.2, 0.3, 0.4];
        let d = [0.3, 0.3, 0.4];
        let plan = sinkhorn(&f, &d, &cost, &SinkhornParams::default()).unwrap();
        assert!(plan.converged);
        assert!(plan.marginal_error <= 1e-9);
        for v in plan.plan.data() {
            assert!(*v >= 0.0);
        }
    }
}
