//! Small dense linear programs solved with a two-phase tableau simplex.
//!
//! Pivoting follows Bland's rule, so the method terminates on degenerate
//! problems. Sizes are expected to stay in the low hundreds.

/// Reduced costs above `-COST_EPS` are treated as non-negative.
const COST_EPS: f64 = 1e-11;
/// Smallest pivot element accepted in the ratio test.
const PIVOT_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LpSolution {
    pub status: LpStatus,
    /// Values of the original variables (empty unless optimal).
    pub x: Vec<f64>,
    pub objective: f64,
    /// Optimal phase-one objective: the L1 distance of the best point from
    /// satisfying every constraint. Zero for feasible problems.
    pub infeasibility: f64,
}

/// `minimize c^T x` subject to equality and `<=` rows. Variables are
/// non-negative unless marked free.
#[derive(Clone, Debug)]
pub struct LinearProgram {
    n: usize,
    c: Vec<f64>,
    eq: Vec<(Vec<f64>, f64)>,
    le: Vec<(Vec<f64>, f64)>,
    free: Vec<bool>,
    feasibility_tol: f64,
}

impl LinearProgram {
    pub fn new(n: usize) -> Self {
        LinearProgram {
            n,
            c: vec![0.0; n],
            eq: Vec::new(),
            le: Vec::new(),
            free: vec![false; n],
            feasibility_tol: 1e-9,
        }
    }

    pub fn minimize(mut self, c: Vec<f64>) -> Self {
        assert_eq!(c.len(), self.n, "objective length");
        self.c = c;
        self
    }

    pub fn eq(mut self, a: Vec<f64>, b: f64) -> Self {
        assert_eq!(a.len(), self.n, "constraint length");
        self.eq.push((a, b));
        self
    }

    pub fn le(mut self, a: Vec<f64>, b: f64) -> Self {
        assert_eq!(a.len(), self.n, "constraint length");
        self.le.push((a, b));
        self
    }

    pub fn free(mut self, i: usize) -> Self {
        self.free[i] = true;
        self
    }

    /// Phase-one objective above which the problem is declared infeasible.
    pub fn feasibility_tol(mut self, tol: f64) -> Self {
        self.feasibility_tol = tol;
        self
    }

    pub fn solve(&self) -> LpSolution {
        // Column layout: split variables, then one slack per `<=` row.
        let mut col_of = Vec::with_capacity(self.n);
        let mut ncols = 0;
        for &f in &self.free {
            col_of.push((ncols, f.then_some(ncols + 1)));
            ncols += if f { 2 } else { 1 };
        }
        let nslack = self.le.len();
        let nstruct = ncols + nslack;
        let rows: Vec<(&Vec<f64>, f64, Option<usize>)> = self
            .eq
            .iter()
            .map(|(a, b)| (a, *b, None))
            .chain(self.le.iter().enumerate().map(|(k, (a, b))| (a, *b, Some(ncols + k))))
            .collect();
        let m = rows.len();
        let width = nstruct + m + 1;
        let mut t = Tableau {
            a: vec![vec![0.0; width]; m],
            basis: (0..m).map(|r| nstruct + r).collect(),
            rhs: width - 1,
        };
        for (r, (a, b, slack)) in rows.iter().enumerate() {
            let row = &mut t.a[r];
            for (i, &v) in a.iter().enumerate() {
                let (p, q) = col_of[i];
                row[p] = v;
                if let Some(q) = q {
                    row[q] = -v;
                }
            }
            if let Some(s) = slack {
                row[*s] = 1.0;
            }
            row[width - 1] = *b;
            if *b < 0.0 {
                row.iter_mut().for_each(|x| *x = -*x);
            }
            row[nstruct + r] = 1.0;
        }

        let mut phase1 = vec![0.0; width - 1];
        phase1[nstruct..].iter_mut().for_each(|x| *x = 1.0);
        let all = vec![true; width - 1];
        // Phase one is bounded below by zero.
        let _ = t.optimize(&phase1, &all);
        let infeasibility: f64 = t
            .basis
            .iter()
            .enumerate()
            .filter(|&(_, &b)| b >= nstruct)
            .map(|(r, _)| t.a[r][t.rhs])
            .sum();
        if infeasibility > self.feasibility_tol {
            return LpSolution {
                status: LpStatus::Infeasible,
                x: Vec::new(),
                objective: f64::NAN,
                infeasibility,
            };
        }

        // Drive remaining artificials out of the basis; drop redundant rows.
        let mut r = 0;
        while r < t.a.len() {
            if t.basis[r] >= nstruct {
                match (0..nstruct).find(|&j| t.a[r][j].abs() > 1e-9) {
                    Some(j) => t.pivot(r, j),
                    None => {
                        t.a.remove(r);
                        t.basis.remove(r);
                        continue;
                    }
                }
            }
            r += 1;
        }

        let mut cost = vec![0.0; width - 1];
        for (i, &(p, q)) in col_of.iter().enumerate() {
            cost[p] = self.c[i];
            if let Some(q) = q {
                cost[q] = -self.c[i];
            }
        }
        let mut allowed = vec![true; width - 1];
        allowed[nstruct..].iter_mut().for_each(|x| *x = false);
        if !t.optimize(&cost, &allowed) {
            return LpSolution {
                status: LpStatus::Unbounded,
                x: Vec::new(),
                objective: f64::NEG_INFINITY,
                infeasibility,
            };
        }
        let mut val = vec![0.0; width - 1];
        for (r, &b) in t.basis.iter().enumerate() {
            val[b] = t.a[r][t.rhs];
        }
        let x: Vec<f64> = col_of
            .iter()
            .map(|&(p, q)| val[p] - q.map_or(0.0, |q| val[q]))
            .collect();
        let objective = x.iter().zip(&self.c).map(|(a, b)| a * b).sum();
        LpSolution {
            status: LpStatus::Optimal,
            x,
            objective,
            infeasibility,
        }
    }
}

struct Tableau {
    a: Vec<Vec<f64>>,
    basis: Vec<usize>,
    rhs: usize,
}

impl Tableau {
    fn pivot(&mut self, r: usize, c: usize) {
        let p = self.a[r][c];
        self.a[r].iter_mut().for_each(|x| *x /= p);
        let pivot_row = self.a[r].clone();
        for (k, row) in self.a.iter_mut().enumerate() {
            if k == r {
                continue;
            }
            let f = row[c];
            if f != 0.0 {
                row.iter_mut().zip(&pivot_row).for_each(|(x, y)| *x -= f * y);
                row[c] = 0.0;
            }
        }
        self.basis[r] = c;
    }

    /// Minimizes `cost` over the current basis. Returns `false` if unbounded.
    fn optimize(&mut self, cost: &[f64], allowed: &[bool]) -> bool {
        loop {
            let entering = (0..cost.len()).find(|&j| {
                if !allowed[j] || self.basis.contains(&j) {
                    return false;
                }
                let z: f64 = self
                    .basis
                    .iter()
                    .enumerate()
                    .map(|(r, &b)| cost[b] * self.a[r][j])
                    .sum();
                cost[j] - z < -COST_EPS
            });
            let Some(j) = entering else { return true };
            let mut best: Option<(usize, f64)> = None;
            for r in 0..self.a.len() {
                let v = self.a[r][j];
                if v > PIVOT_EPS {
                    let ratio = self.a[r][self.rhs] / v;
                    best = match best {
                        None => Some((r, ratio)),
                        Some((br, bv)) => {
                            if ratio < bv - 1e-15 || (ratio <= bv + 1e-15 && self.basis[r] < self.basis[br]) {
                                Some((r, ratio))
                            } else {
                                Some((br, bv))
                            }
                        }
                    };
                }
            }
            let Some((r, _)) = best else { return false };
            self.pivot(r, j);
        }
    }
}
