//! Dense two-phase simplex for small equality-constrained programs.
//!
//! Solves `min c·x  s.t.  A x = b, x ≥ 0`. Pivoting follows Bland's rule,
//! which cannot cycle, so termination needs no perturbation tricks. Problem
//! sizes here are tiny (rows = number of elements, columns = number of phase
//! entries), so a dense tableau is the simplest correct choice.

const PIVOT_EPS: f64 = 1e-9;

#[derive(Debug, PartialEq)]
pub enum LpError {
    Infeasible,
    Unbounded,
    IterationLimit,
}

#[derive(Debug)]
pub struct LpSolution {
    pub value: f64,
    pub x: Vec<f64>,
}

/// Minimizes `c·x` subject to `A x = b`, `x ≥ 0`.
pub fn solve_min(c: &[f64], a: &[Vec<f64>], b: &[f64]) -> Result<LpSolution, LpError> {
    let m = a.len();
    let n = c.len();
    debug_assert!(a.iter().all(|row| row.len() == n));
    debug_assert_eq!(b.len(), m);

    // Tableau over n structural + m artificial columns, with b as the last
    // column. Rows are normalized so b ≥ 0, giving the artificials a
    // feasible identity basis for phase 1.
    let cols = n + m;
    let mut t = vec![vec![0.0; cols + 1]; m];
    for (i, row) in a.iter().enumerate() {
        let sign = if b[i] < 0.0 { -1.0 } else { 1.0 };
        for (j, &v) in row.iter().enumerate() {
            t[i][j] = sign * v;
        }
        t[i][n + i] = 1.0;
        t[i][cols] = sign * b[i];
    }
    let mut basis: Vec<usize> = (n..n + m).collect();

    // Phase 1: minimize the sum of artificials.
    let mut phase1_cost = vec![0.0; cols];
    for j in n..cols {
        phase1_cost[j] = 1.0;
    }
    let v1 = run_simplex(&mut t, &mut basis, &phase1_cost, cols)?;
    if v1 > 1e-7 {
        return Err(LpError::Infeasible);
    }
    // Pivot any leftover artificial out of the basis where possible.
    for i in 0..m {
        if basis[i] >= n {
            if let Some(j) = (0..n).find(|&j| t[i][j].abs() > PIVOT_EPS) {
                pivot(&mut t, &mut basis, i, j, cols);
            }
        }
    }

    // Phase 2: the real objective, artificial columns frozen out.
    let mut phase2_cost = vec![0.0; cols];
    phase2_cost[..n].copy_from_slice(c);
    for row in t.iter_mut() {
        for j in n..cols {
            row[j] = 0.0;
        }
    }
    let value = run_simplex(&mut t, &mut basis, &phase2_cost, cols)?;

    let mut x = vec![0.0; n];
    for (i, &bj) in basis.iter().enumerate() {
        if bj < n {
            x[bj] = t[i][cols];
        }
    }
    Ok(LpSolution { value, x })
}

/// Runs simplex iterations to optimality; returns the objective value.
fn run_simplex(
    t: &mut [Vec<f64>],
    basis: &mut [usize],
    cost: &[f64],
    cols: usize,
) -> Result<f64, LpError> {
    let m = t.len();
    for _ in 0..50_000 {
        // reduced costs: r_j = c_j − c_B · B^{-1} A_j
        let mut entering = None;
        for j in 0..cols {
            if basis.contains(&j) {
                continue;
            }
            let mut r = cost[j];
            for i in 0..m {
                r -= cost[basis[i]] * t[i][j];
            }
            if r < -PIVOT_EPS {
                entering = Some(j); // Bland: first (smallest) improving index
                break;
            }
        }
        let Some(j) = entering else {
            let mut value = 0.0;
            for i in 0..m {
                value += cost[basis[i]] * t[i][cols];
            }
            return Ok(value);
        };

        // ratio test; Bland tie-break on smallest basis index
        let mut leave: Option<(usize, f64)> = None;
        for i in 0..m {
            if t[i][j] > PIVOT_EPS {
                let ratio = t[i][cols] / t[i][j];
                let better = match leave {
                    None => true,
                    Some((li, lr)) => {
                        ratio < lr - PIVOT_EPS
                            || (ratio < lr + PIVOT_EPS && basis[i] < basis[li])
                    }
                };
                if better {
                    leave = Some((i, ratio));
                }
            }
        }
        let Some((i, _)) = leave else {
            return Err(LpError::Unbounded);
        };
        pivot(t, basis, i, j, cols);
    }
    Err(LpError::IterationLimit)
}

fn pivot(t: &mut [Vec<f64>], basis: &mut [usize], row: usize, col: usize, cols: usize) {
    let p = t[row][col];
    for v in t[row].iter_mut() {
        *v /= p;
    }
    for i in 0..t.len() {
        if i != row && t[i][col].abs() > 0.0 {
            let f = t[i][col];
            for j in 0..=cols {
                t[i][j] -= f * t[row][j];
            }
        }
    }
    basis[row] = col;
}
