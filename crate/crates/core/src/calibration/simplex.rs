//! Two-phase dense tableau simplex for `min cᵀx  s.t.  A x = b, x ≥ 0`.

const EPS: f64 = 1e-10;
/// After this many consecutive non-improving pivots, switch to Bland's rule.
const STALL_LIMIT: usize = 50;
const MAX_PIVOTS: usize = 100_000;

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum LpOutcome {
    Optimal { x: Vec<f64>, objective: f64 },
    Infeasible,
    Unbounded,
    /// Pivot limit hit; should not happen with the anti-cycling fallback.
    Stalled,
}

struct Tableau {
    /// `rows × (cols + 1)`; last column is the right-hand side.
    t: Vec<Vec<f64>>,
    basis: Vec<usize>,
    cols: usize,
}

impl Tableau {
    fn rhs(&self, r: usize) -> f64 {
        self.t[r][self.cols]
    }

    fn pivot(&mut self, row: usize, col: usize) {
        let p = self.t[row][col];
        for v in self.t[row].iter_mut() {
            *v /= p;
        }
        let pivot_row = self.t[row].clone();
        for (r, line) in self.t.iter_mut().enumerate() {
            if r == row {
                continue;
            }
            let k = line[col];
            if k != 0.0 {
                for (v, pv) in line.iter_mut().zip(&pivot_row) {
                    *v -= k * pv;
                }
            }
        }
        self.basis[row] = col;
    }

    /// Reduced costs of `cost` given the current basis.
    fn reduced(&self, cost: &[f64], allowed: usize) -> Vec<f64> {
        let mut d = cost[..allowed].to_vec();
        for (r, &b) in self.basis.iter().enumerate() {
            let cb = cost[b];
            if cb != 0.0 {
                for (dj, a) in d.iter_mut().zip(&self.t[r]) {
                    *dj -= cb * a;
                }
            }
        }
        d
    }

    /// Minimizes `cost` over columns `< allowed`. Returns `false` if unbounded.
    fn optimize(&mut self, cost: &[f64], allowed: usize) -> Option<bool> {
        let mut stall = 0;
        let mut last_obj = f64::INFINITY;
        for _ in 0..MAX_PIVOTS {
            let d = self.reduced(cost, allowed);
            let bland = stall >= STALL_LIMIT;
            let entering = if bland {
                (0..allowed).find(|&j| d[j] < -EPS)
            } else {
                (0..allowed)
                    .filter(|&j| d[j] < -EPS)
                    .min_by(|&a, &b| d[a].total_cmp(&d[b]))
            };
            let Some(col) = entering else {
                return Some(true);
            };
            let mut leave: Option<(usize, f64)> = None;
            for r in 0..self.t.len() {
                let a = self.t[r][col];
                if a > EPS {
                    let ratio = self.rhs(r) / a;
                    let better = match leave {
                        None => true,
                        Some((lr, best)) => {
                            ratio < best - EPS || (ratio <= best + EPS && self.basis[r] < self.basis[lr])
                        }
                    };
                    if better {
                        leave = Some((r, ratio));
                    }
                }
            }
            let Some((row, _)) = leave else {
                return Some(false);
            };
            self.pivot(row, col);
            let obj: f64 = self.basis.iter().enumerate().map(|(r, &b)| cost[b] * self.rhs(r)).sum();
            if obj < last_obj - EPS {
                stall = 0;
                last_obj = obj;
            } else {
                stall += 1;
            }
        }
        None
    }
}

pub(crate) fn minimize(c: &[f64], a: &[Vec<f64>], b: &[f64]) -> LpOutcome {
    let (rows, n) = (a.len(), c.len());
    // Phase I: one artificial per row, with rows flipped so that b ≥ 0.
    let cols = n + rows;
    let mut t = Vec::with_capacity(rows);
    for (r, (line, &rhs)) in a.iter().zip(b).enumerate() {
        let sign = if rhs < 0.0 { -1.0 } else { 1.0 };
        let mut row = vec![0.0; cols + 1];
        for (v, x) in row.iter_mut().zip(line) {
            *v = sign * x;
        }
        row[n + r] = 1.0;
        row[cols] = sign * rhs;
        t.push(row);
    }
    let mut tab = Tableau {
        t,
        basis: (n..n + rows).collect(),
        cols,
    };
    let mut phase1 = vec![0.0; cols];
    phase1[n..].fill(1.0);
    if tab.optimize(&phase1, cols).is_none() {
        return LpOutcome::Stalled;
    }
    let infeasibility: f64 = tab
        .basis
        .iter()
        .enumerate()
        .filter(|(_, &bv)| bv >= n)
        .map(|(r, _)| tab.rhs(r))
        .sum();
    let scale = b.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
    if infeasibility > 1e-9 * scale {
        return LpOutcome::Infeasible;
    }
    // Drive remaining artificials out of the basis; drop redundant rows.
    let mut r = 0;
    while r < tab.t.len() {
        if tab.basis[r] >= n {
            match (0..n).find(|&j| tab.t[r][j].abs() > EPS) {
                Some(col) => tab.pivot(r, col),
                None => {
                    tab.t.remove(r);
                    tab.basis.remove(r);
                    continue;
                }
            }
        }
        r += 1;
    }
    let mut cost = c.to_vec();
    cost.resize(cols, 0.0);
    match tab.optimize(&cost, n) {
        None => LpOutcome::Stalled,
        Some(false) => LpOutcome::Unbounded,
        Some(true) => {
            let mut x = vec![0.0; n];
            for (r, &bv) in tab.basis.iter().enumerate() {
                if bv < n {
                    x[bv] = tab.rhs(r).max(0.0);
                }
            }
            let objective = c.iter().zip(&x).map(|(ci, xi)| ci * xi).sum();
            LpOutcome::Optimal { x, objective }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn optimal(out: LpOutcome) -> (Vec<f64>, f64) {
        match out {
            LpOutcome::Optimal { x, objective } => (x, objective),
            other => panic!("expected optimum, got {other:?}"),
        }
    }

    #[test]
    fn textbook_problem() {
        // max 3x + 5y s.t. x ≤ 4, 2y ≤ 12, 3x + 2y ≤ 18 → (2, 6), 36.
        let a = vec![
            vec![1.0, 0.0, 1.0, 0.0, 0.0],
            vec![0.0, 2.0, 0.0, 1.0, 0.0],
            vec![3.0, 2.0, 0.0, 0.0, 1.0],
        ];
        let (x, obj) = optimal(minimize(&[-3.0, -5.0, 0.0, 0.0, 0.0], &a, &[4.0, 12.0, 18.0]));
        assert!((obj + 36.0).abs() < 1e-9);
        assert!((x[0] - 2.0).abs() < 1e-9 && (x[1] - 6.0).abs() < 1e-9);
    }

    #[test]
    fn detects_infeasible_and_unbounded() {
        // x + y = −1 with x, y ≥ 0.
        assert_eq!(minimize(&[1.0, 1.0], &[vec![1.0, 1.0]], &[-1.0]), LpOutcome::Infeasible);
        // min −x s.t. x − y = 0.
        assert_eq!(minimize(&[-1.0, 0.0], &[vec![1.0, -1.0]], &[0.0]), LpOutcome::Unbounded);
    }

    #[test]
    fn redundant_rows_and_negative_rhs() {
        let a = vec![vec![1.0, 1.0], vec![2.0, 2.0], vec![-1.0, 0.0]];
        let (x, obj) = optimal(minimize(&[1.0, 2.0], &a, &[3.0, 6.0, -1.0]));
        assert!((x[0] - 1.0).abs() < 1e-9 && (x[1] - 2.0).abs() < 1e-9);
        assert!((obj - 5.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_problem_terminates() {
        // Beale's cycling example in equality form.
        let a = vec![
            vec![0.25, -60.0, -0.04, 9.0, 1.0, 0.0, 0.0],
            vec![0.5, -90.0, -0.02, 3.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        ];
        let c = [-0.75, 150.0, -0.02, 6.0, 0.0, 0.0, 0.0];
        let (_, obj) = optimal(minimize(&c, &a, &[0.0, 0.0, 1.0]));
        assert!((obj + 0.05).abs() < 1e-9);
    }
}
