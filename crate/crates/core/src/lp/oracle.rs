//! Brute-force LP reference: enumerate every basic point of
//! `{A·y <= b, 0 <= y <= u}` and keep the best feasible one.
//!
//! A basic point fixes each variable either at a bound or as basic; the
//! basic variables are pinned by an equal number of tight rows. Shares no
//! code with the simplex path.

use super::LinearProgram;

/// Largest instance the enumeration accepts.
pub const MAX_VARS: usize = 12;
const TOL: f64 = 1e-9;

/// Returns the optimal value and a maximizer, or `None` if infeasible.
pub fn vertex_enumeration(lp: &LinearProgram) -> Option<(f64, Vec<f64>)> {
    let n = lp.num_vars();
    assert!(n <= MAX_VARS, "vertex enumeration limited to {MAX_VARS} variables");
    let m = lp.rows.len();
    let dense: Vec<Vec<f64>> = lp
        .rows
        .iter()
        .map(|r| {
            let mut v = vec![0.0; n];
            for (j, a) in &r.entries {
                v[*j] += a;
            }
            v
        })
        .collect();

    let mut best: Option<(f64, Vec<f64>)> = None;
    for basic_mask in 0u32..(1 << n) {
        let basic: Vec<usize> = (0..n).filter(|j| basic_mask >> j & 1 == 1).collect();
        let k = basic.len();
        if k > m {
            continue;
        }
        let nonbasic: Vec<usize> = (0..n).filter(|j| basic_mask >> j & 1 == 0).collect();
        for rows in subsets(m, k) {
            for bound_mask in 0u32..(1 << nonbasic.len()) {
                let mut y = vec![0.0; n];
                for (t, &j) in nonbasic.iter().enumerate() {
                    if bound_mask >> t & 1 == 1 {
                        y[j] = lp.upper[j];
                    }
                }
                if k > 0 {
                    let mut a = vec![vec![0.0; k + 1]; k];
                    for (r, &i) in rows.iter().enumerate() {
                        for (c, &j) in basic.iter().enumerate() {
                            a[r][c] = dense[i][j];
                        }
                        let fixed: f64 = nonbasic.iter().map(|&j| dense[i][j] * y[j]).sum();
                        a[r][k] = lp.rhs[i] - fixed;
                    }
                    let Some(sol) = gauss(a) else { continue };
                    for (c, &j) in basic.iter().enumerate() {
                        y[j] = sol[c];
                    }
                }
                if !feasible(lp, &dense, &y) {
                    continue;
                }
                let value: f64 = lp.objective.iter().zip(&y).map(|(c, v)| c * v).sum();
                if best.as_ref().is_none_or(|(b, _)| value > *b) {
                    best = Some((value, y));
                }
            }
        }
    }
    best
}

fn feasible(lp: &LinearProgram, dense: &[Vec<f64>], y: &[f64]) -> bool {
    let bounds = y
        .iter()
        .zip(&lp.upper)
        .all(|(v, u)| *v >= -TOL && *v <= u + TOL);
    bounds
        && dense.iter().zip(&lp.rhs).all(|(row, b)| {
            let lhs: f64 = row.iter().zip(y).map(|(a, v)| a * v).sum();
            lhs <= b + TOL
        })
}

fn subsets(m: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, m: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..m {
            cur.push(i);
            rec(i + 1, m, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, m, k, &mut Vec::new(), &mut out);
    out
}

/// Solves a square augmented system with partial pivoting; `None` when singular.
fn gauss(mut a: Vec<Vec<f64>>) -> Option<Vec<f64>> {
    let k = a.len();
    for col in 0..k {
        let piv = (col..k).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))?;
        if a[piv][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, piv);
        for r in 0..k {
            if r != col {
                let f = a[r][col] / a[col][col];
                if f != 0.0 {
                    for c in col..=k {
                        a[r][c] -= f * a[col][c];
                    }
                }
            }
        }
    }
    Some((0..k).map(|r| a[r][k] / a[r][r]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lp::SparseRow;

    #[test]
    fn hand_instances() {
        let lp = LinearProgram {
            objective: vec![10.0],
            rows: vec![SparseRow::new(vec![(0, 10.0)])],
            rhs: vec![5.0],
            upper: vec![1.0],
        };
        let (v, y) = vertex_enumeration(&lp).unwrap();
        assert!((v - 5.0).abs() < 1e-12 && (y[0] - 0.5).abs() < 1e-12);

        // max 3x + 2y, x + y <= 1.5, x <= 1, y <= 1 -> (1, 0.5), 4.
        let lp = LinearProgram {
            objective: vec![3.0, 2.0],
            rows: vec![SparseRow::new(vec![(0, 1.0), (1, 1.0)])],
            rhs: vec![1.5],
            upper: vec![1.0, 1.0],
        };
        assert!((vertex_enumeration(&lp).unwrap().0 - 4.0).abs() < 1e-12);

        let infeasible = LinearProgram {
            objective: vec![1.0],
            rows: vec![SparseRow::new(vec![(0, -1.0)])],
            rhs: vec![-2.0],
            upper: vec![1.0],
        };
        assert!(vertex_enumeration(&infeasible).is_none());
    }
}
