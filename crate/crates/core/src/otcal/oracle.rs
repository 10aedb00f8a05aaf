//! Exact small-instance transportation solver, used only to verify the
//! entropic solver. Runs the classical transportation simplex in arbitrary-
//! precision rational arithmetic with Bland's entering rule, so the optimum
//! is exact and the pivot sequence deterministic.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Signed, Zero};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAX_DIM: usize = 6;
const MAX_PIVOTS: usize = 100_000;

fn to_rational(x: f64, what: &str) -> Result<BigRational> {
    BigRational::from_float(x).ok_or_else(|| Error::NonFinite {
        op: "exact_ot_oracle".into(),
        detail: format!("{what} = {x}"),
    })
}

struct Cell {
    row: usize,
    col: usize,
    value: BigRational,
}

/// Exact optimum of the transportation LP
///   min sum C_ij T_ij  s.t.  T >= 0, row sums = f, column sums = d,
/// for problems up to 6x6. The column marginal is rescaled by the exact
/// rational factor sum(f)/sum(d) so the balance constraint holds exactly.
pub fn exact_ot_cost(f: &[f64], d: &[f64], cost: &Tensor) -> Result<f64> {
    let q = f.len();
    let k = d.len();
    if q > MAX_DIM || k > MAX_DIM {
        return Err(Error::OracleTooLarge { rows: q, cols: k });
    }
    if q == 0 || k == 0 || cost.shape() != [q, k] {
        return Err(Error::ShapeMismatch {
            op: "exact_ot_oracle",
            detail: format!("cost {:?}, f {}, d {}", cost.shape(), q, k),
        });
    }

    let supply: Vec<BigRational> = f
        .iter()
        .enumerate()
        .map(|(i, &x)| to_rational(x, &format!("f[{i}]")))
        .collect::<Result<_>>()?;
    let mut demand: Vec<BigRational> = d
        .iter()
        .enumerate()
        .map(|(j, &x)| to_rational(x, &format!("d[{j}]")))
        .collect::<Result<_>>()?;
    let costs: Vec<BigRational> = cost
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| to_rational(x, &format!("C[{i}]")))
        .collect::<Result<_>>()?;
    if supply.iter().any(|s| s.is_negative()) || demand.iter().any(|s| s.is_negative()) {
        return Err(Error::OffSimplex {
            detail: "oracle marginals must be non-negative".into(),
        });
    }

    let total_supply: BigRational = supply.iter().sum();
    let total_demand: BigRational = demand.iter().sum();
    if total_supply.is_zero() || total_demand.is_zero() {
        return Ok(0.0);
    }
    let scale = &total_supply / &total_demand;
    for dj in demand.iter_mut() {
        *dj *= &scale;
    }

    // Northwest-corner staircase: exactly q + k - 1 basic cells, connected.
    let mut s = supply.clone();
    let mut rem = demand.clone();
    let mut basis: Vec<Cell> = Vec::with_capacity(q + k - 1);
    let (mut i, mut j) = (0usize, 0usize);
    loop {
        let amount = if s[i] <= rem[j] { s[i].clone() } else { rem[j].clone() };
        s[i] -= &amount;
        rem[j] -= &amount;
        basis.push(Cell {
            row: i,
            col: j,
            value: amount,
        });
        if i == q - 1 && j == k - 1 {
            break;
        }
        if s[i].is_zero() && i < q - 1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    debug_assert_eq!(basis.len(), q + k - 1);

    for _ in 0..MAX_PIVOTS {
        // Duals from the basis tree: u_i + v_j = c_ij, u_0 = 0.
        let mut u: Vec<Option<BigRational>> = vec![None; q];
        let mut v: Vec<Option<BigRational>> = vec![None; k];
        u[0] = Some(BigRational::zero());
        let mut settled = true;
        loop {
            let mut progressed = false;
            for cell in &basis {
                let c = &costs[cell.row * k + cell.col];
                match (&u[cell.row], &v[cell.col]) {
                    (Some(ui), None) => {
                        v[cell.col] = Some(c - ui);
                        progressed = true;
                    }
                    (None, Some(vj)) => {
                        u[cell.row] = Some(c - vj);
                        progressed = true;
                    }
                    _ => {}
                }
            }
            if u.iter().all(Option::is_some) && v.iter().all(Option::is_some) {
                break;
            }
            if !progressed {
                settled = false;
                break;
            }
        }
        if !settled {
            return Err(Error::validation(
                "exact_ot_oracle",
                "basis graph disconnected (internal invariant violated)",
            ));
        }
        let u: Vec<BigRational> = u.into_iter().map(Option::unwrap).collect();
        let v: Vec<BigRational> = v.into_iter().map(Option::unwrap).collect();

        // Bland's rule: first improving cell in row-major order.
        let mut entering: Option<(usize, usize)> = None;
        'outer: for r in 0..q {
            for c in 0..k {
                if basis.iter().any(|b| b.row == r && b.col == c) {
                    continue;
                }
                let reduced = &costs[r * k + c] - &u[r] - &v[c];
                if reduced.is_negative() {
                    entering = Some((r, c));
                    break 'outer;
                }
            }
        }
        let (er, ec) = match entering {
            Some(e) => e,
            None => {
                let mut total = BigRational::zero();
                for cell in &basis {
                    total += &costs[cell.row * k + cell.col] * &cell.value;
                }
                return rational_to_f64(&total);
            }
        };

        // Unique cycle: path from row-node er to col-node ec through the
        // basis tree, then the entering edge closes it. Nodes 0..q are rows,
        // q..q+k are columns.
        let node = |is_row: bool, idx: usize| if is_row { idx } else { q + idx };
        let mut parent: Vec<Option<(usize, usize)>> = vec![None; q + k]; // (parent node, basis idx)
        let mut visited = vec![false; q + k];
        let start = node(true, er);
        let goal = node(false, ec);
        visited[start] = true;
        let mut queue = std::collections::VecDeque::from([start]);
        while let Some(n) = queue.pop_front() {
            if n == goal {
                break;
            }
            for (bi, cell) in basis.iter().enumerate() {
                let (a, b) = (node(true, cell.row), node(false, cell.col));
                let next = if a == n {
                    b
                } else if b == n {
                    a
                } else {
                    continue;
                };
                if !visited[next] {
                    visited[next] = true;
                    parent[next] = Some((n, bi));
                    queue.push_back(next);
                }
            }
        }
        if !visited[goal] {
            return Err(Error::validation(
                "exact_ot_oracle",
                "no cycle found for entering cell (internal invariant violated)",
            ));
        }
        let mut path_cells = Vec::new();
        let mut n = goal;
        while n != start {
            let (p, bi) = parent[n].unwrap();
            path_cells.push(bi);
            n = p;
        }
        path_cells.reverse();

        // Signs alternate along the cycle, entering edge positive. The path
        // starts at the entering row, so odd path positions are negative.
        let minus_positions: Vec<usize> = path_cells
            .iter()
            .enumerate()
            .filter(|(idx, _)| idx % 2 == 0)
            .map(|(_, &bi)| bi)
            .collect();

        let theta = minus_positions
            .iter()
            .map(|&bi| basis[bi].value.clone())
            .min()
            .expect("cycle has at least one negative cell");
        let leaving = *minus_positions
            .iter()
            .filter(|&&bi| basis[bi].value == theta)
            .min_by_key(|&&bi| (basis[bi].row, basis[bi].col))
            .unwrap();

        for (idx, &bi) in path_cells.iter().enumerate() {
            if idx % 2 == 0 {
                basis[bi].value -= &theta;
            } else {
                basis[bi].value += &theta;
            }
        }
        basis[leaving] = Cell {
            row: er,
            col: ec,
            value: theta,
        };
    }

    Err(Error::validation(
        "exact_ot_oracle",
        "pivot limit exceeded (internal invariant violated)",
    ))
}

fn rational_to_f64(r: &BigRational) -> Result<f64> {
    let numer = r.numer();
    let denom = r.denom();
    let approx = big_to_f64(numer) / big_to_f64(denom);
    if approx.is_finite() {
        Ok(approx)
    } else {
        Err(Error::NonFinite {
            op: "exact_ot_oracle".into(),
            detail: "result overflowed f64".into(),
        })
    }
}

fn big_to_f64(b: &BigInt) -> f64 {
    // Values here stay modest (costs and unit mass); string round-trip keeps
    // this simple and exact enough for the comparison tolerances.
    b.to_string().parse::<f64>().unwrap_or(f64::NAN)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cost(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn identity_plan_is_free() {
        let c = cost(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let w = exact_ot_cost(&[0.5, 0.5], &[0.5, 0.5], &c).unwrap();
        assert_eq!(w, 0.0);
    }

    #[test]
    fn forced_plan_costs_one() {
        let c = cost(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let w = exact_ot_cost(&[1.0, 0.0], &[0.0, 1.0], &c).unwrap();
        assert_eq!(w, 1.0);
    }

    #[test]
    fn partial_mismatch_moves_exact_mass() {
        let c = cost(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let w = exact_ot_cost(&[0.3, 0.7], &[0.7, 0.3], &c).unwrap();
        assert!((w - 0.4).abs() < 1e-12);
    }

    #[test]
    fn oversized_instance_rejected() {
        let c = Tensor::zeros(vec![7, 3]);
        let f = vec![1.0 / 7.0; 7];
        let d = vec![1.0 / 3.0; 3];
        assert!(matches!(
            exact_ot_cost(&f, &d, &c),
            Err(Error::OracleTooLarge { .. })
        ));
    }

    #[test]
    fn rectangular_instance_solves() {
        let c = cost(&[
            vec![0.0, 2.0, 1.0],
            vec![1.0, 0.0, 3.0],
            vec![2.0, 1.0, 0.0],
            vec![1.5, 0.5, 0.5],
        ]);
        let f = [0.25, 0.25, 0.25, 0.25];
        let d = [0.4, 0.3, 0.3];
        let w = exact_ot_cost(&f, &d, &c).unwrap();
        assert!(w >= 0.0);
        // Must not exceed the independent coupling f x d.
        let mut indep = 0.0;
        for i in 0..4 {
            for j in 0..3 {
                indep += f[i] * d[j] * c.at2(i, j);
            }
        }
        assert!(w <= indep + 1e-12);
    }
}
