//! Convex-hull vertices of stochastic matrices, the zero-loss ReLU weight
//! construction, and the rank floor of linear ladders.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{forward_pass, PassOptions, WeightSet};
use crate::error::{Error, Result};
use crate::lp::{LinearProgram, LpStatus};
use crate::teacher::{Edge, TableSet};

/// Phase-one residual below which a row counts as a convex combination of
/// the others.
pub const VERTEX_TOL: f64 = 1e-9;
/// Smallest singular value accepted as full rank.
pub const RANK_TOL: f64 = 1e-9;

/// Separating hyperplane `w^T p + b` for one vertex row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub w: Vec<f64>,
    pub b: f64,
    /// Smallest `-(w^T p_j + b)` over the other rows.
    pub margin: f64,
}

impl Certificate {
    pub fn value(&self, p: &[f64]) -> f64 {
        self.w.iter().zip(p).map(|(a, b)| a * b).sum::<f64>() + self.b
    }

    /// Re-evaluates the hyperplane on `rows`: positive on `row`, at most
    /// `-tol` on every other row.
    pub fn verify(&self, rows: &DMatrix<f64>, row: usize, tol: f64) -> bool {
        (0..rows.nrows()).all(|j| {
            let p: Vec<f64> = rows.row(j).iter().copied().collect();
            let v = self.value(&p);
            if j == row {
                v > tol
            } else {
                v <= -tol
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VertReport {
    pub vertex_flags: Vec<bool>,
    pub vert_count: usize,
    pub all_vert: bool,
    /// Phase-one residual of the convex-combination test for each row.
    pub residuals: Vec<f64>,
    pub certificates: Vec<Option<Certificate>>,
}

fn row_vec(p: &DMatrix<f64>, i: usize) -> Vec<f64> {
    p.row(i).iter().copied().collect()
}

/// Residual of the best attempt to write row `i` as a convex combination of
/// the other rows (0 when it is one).
pub fn convex_combination_residual(p: &DMatrix<f64>, i: usize) -> f64 {
    let others: Vec<usize> = (0..p.nrows()).filter(|&j| j != i).collect();
    if others.is_empty() {
        return f64::INFINITY;
    }
    let mut lp = LinearProgram::new(others.len()).feasibility_tol(VERTEX_TOL);
    for c in 0..p.ncols() {
        lp = lp.eq(others.iter().map(|&j| p[(j, c)]).collect(), p[(i, c)]);
    }
    lp = lp.eq(vec![1.0; others.len()], 1.0);
    lp.solve().infeasibility
}

/// Hyperplane with value 1 on row `i` and maximal uniform gap below zero on
/// the others. `None` if no positive gap exists.
pub fn separating_hyperplane(p: &DMatrix<f64>, i: usize) -> Option<Certificate> {
    let d = p.ncols();
    let pi = row_vec(p, i);
    if p.nrows() == 1 {
        return Some(Certificate {
            w: vec![0.0; d],
            b: 1.0,
            margin: f64::INFINITY,
        });
    }
    // variables: w (d, free), b (free), t
    let n = d + 2;
    let mut obj = vec![0.0; n];
    obj[d + 1] = -1.0;
    let mut lp = LinearProgram::new(n).minimize(obj);
    for k in 0..=d {
        lp = lp.free(k);
    }
    let mut row = pi.clone();
    row.extend([1.0, 0.0]);
    lp = lp.eq(row, 1.0);
    for j in (0..p.nrows()).filter(|&j| j != i) {
        let mut row = row_vec(p, j);
        row.extend([1.0, 1.0]);
        lp = lp.le(row, 0.0);
    }
    let mut cap = vec![0.0; n];
    cap[d + 1] = 1.0;
    lp = lp.le(cap, 1.0);
    let s = lp.solve();
    if s.status != LpStatus::Optimal || s.x[d + 1] <= VERTEX_TOL {
        return None;
    }
    let mut cert = Certificate {
        w: s.x[..d].to_vec(),
        b: s.x[d],
        margin: 0.0,
    };
    cert.margin = others_margin(&cert, p, i);
    Some(cert)
}

fn others_margin(cert: &Certificate, p: &DMatrix<f64>, i: usize) -> f64 {
    (0..p.nrows())
        .filter(|&j| j != i)
        .map(|j| -cert.value(&row_vec(p, j)))
        .fold(f64::INFINITY, f64::min)
}

/// Classifies every row of `p` as a vertex of the convex hull of the rows or not.
pub fn vertex_set(p: &DMatrix<f64>) -> VertReport {
    let mut vertex_flags = Vec::with_capacity(p.nrows());
    let mut residuals = Vec::with_capacity(p.nrows());
    let mut certificates = Vec::with_capacity(p.nrows());
    for i in 0..p.nrows() {
        let r = convex_combination_residual(p, i);
        let is_vertex = r > VERTEX_TOL;
        vertex_flags.push(is_vertex);
        residuals.push(r);
        certificates.push(if is_vertex { separating_hyperplane(p, i) } else { None });
    }
    let vert_count = vertex_flags.iter().filter(|&&v| v).count();
    VertReport {
        all_vert: vert_count == p.nrows(),
        vertex_flags,
        vert_count,
        residuals,
        certificates,
    }
}

/// Rescales a certificate so it takes `d` on its row and at most `-d / 2` on
/// the others.
pub fn normalize_certificate(cert: &Certificate, p: &DMatrix<f64>, i: usize, d: f64) -> Certificate {
    if p.nrows() == 1 {
        return Certificate {
            w: vec![0.0; cert.w.len()],
            b: d,
            margin: f64::INFINITY,
        };
    }
    let top = cert.value(&row_vec(p, i));
    let worst = -others_margin(cert, p, i);
    let a = 1.5 * d / (top - worst);
    let c = d - a * top;
    let mut out = Certificate {
        w: cert.w.iter().map(|x| a * x).collect(),
        b: a * cert.b + c,
        margin: 0.0,
    };
    out.margin = others_margin(&out, p, i);
    out
}

/// Weights for which the ReLU ladder reproduces `F = I` at every non-leaf
/// region. Requires `m = n` everywhere and every table to be all-vert.
pub fn construct_identity_weights(tables: &TableSet) -> Result<WeightSet> {
    let mut ws = WeightSet::zeros(tables, true);
    for r in &tables.regions {
        if r.m != r.n {
            return Err(Error::Precondition(format!(
                "region `{}` has m = {} != n = {}",
                r.id, r.m, r.n
            )));
        }
    }
    for &a in &tables.topology.order {
        let region = &tables.regions[a];
        if region.is_leaf() {
            continue;
        }
        let d = 1.0 / region.children.len() as f64;
        for &c in &region.children {
            let e = Edge::new(a, c);
            let p = &tables.tables[&e].p;
            let rep = vertex_set(p);
            if let Some(row) = rep.vertex_flags.iter().position(|v| !v) {
                return Err(Error::NotAllVert {
                    parent: region.id.clone(),
                    child: tables.regions[c].id.clone(),
                    row,
                });
            }
            let w = ws.w.get_mut(&e).expect("edge");
            let nb = tables.regions[c].n;
            for (j, cert) in rep.certificates.iter().enumerate() {
                let cert = cert.as_ref().ok_or_else(|| Error::NotAllVert {
                    parent: region.id.clone(),
                    child: tables.regions[c].id.clone(),
                    row: j,
                })?;
                let cert = normalize_certificate(cert, p, j, d);
                for k in 0..nb {
                    w[(k, j)] = cert.w[k];
                }
                w[(nb, j)] = cert.b;
            }
        }
        snap_diagonal(tables, &mut ws, a)?;
    }
    Ok(ws)
}

/// Nudges the first child's bias so that the diagonal of `F_raw` lands on
/// exactly 1.0 in floating point.
fn snap_diagonal(tables: &TableSet, ws: &mut WeightSet, a: usize) -> Result<()> {
    let first = Edge::new(a, tables.regions[a].children[0]);
    let nb = tables.regions[first.child].n;
    for _ in 0..8 {
        let st = forward_pass(tables, ws, &PassOptions::default())?;
        let u = &st.linear[a];
        let mut done = true;
        for j in 0..u.ncols() {
            let gap = 1.0 - u[(j, j)];
            if gap != 0.0 {
                done = false;
                ws.w.get_mut(&first).expect("edge")[(nb, j)] += gap;
            }
        }
        if done {
            break;
        }
    }
    Ok(())
}

/// Checks whether `vert(PF) = vert(P)` for a full-row-rank `F`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VertInvariance {
    pub equal: bool,
    pub flags_p: Vec<bool>,
    pub flags_pf: Vec<bool>,
    pub mismatched_rows: Vec<usize>,
    pub min_singular_value: f64,
}

pub fn vert_invariance_check(p: &DMatrix<f64>, f: &DMatrix<f64>) -> Result<VertInvariance> {
    if p.ncols() != f.nrows() {
        return Err(Error::Shape(format!(
            "P is {}x{} but F has {} rows",
            p.nrows(),
            p.ncols(),
            f.nrows()
        )));
    }
    let sv = if f.nrows() <= f.ncols() {
        f.singular_values()
    } else {
        DVector::zeros(1)
    };
    let smin = if f.nrows() <= f.ncols() { sv.min() } else { 0.0 };
    if smin <= RANK_TOL {
        return Err(Error::Precondition(format!(
            "F is not full row rank (smallest singular value {smin:.3e})"
        )));
    }
    let flags_p = vertex_set(p).vertex_flags;
    let flags_pf = vertex_set(&(p * f)).vertex_flags;
    let mismatched_rows: Vec<usize> = (0..flags_p.len()).filter(|&i| flags_p[i] != flags_pf[i]).collect();
    Ok(VertInvariance {
        equal: mismatched_rows.is_empty(),
        flags_p,
        flags_pf,
        mismatched_rows,
        min_singular_value: smin,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearBound {
    /// `min` over levels of `sum min(m, n)` for regions on that level.
    pub layer_rank_bound: usize,
    /// Rank bound propagated along the tree: `min(m, n, sum over children)`.
    pub tree_rank_bound: usize,
    pub rank_bound: usize,
    /// `max(0, m_root - rank_bound)`.
    pub floor: f64,
}

/// Lower bound on `||F_root - I||_F^2` for bias-free linear ladders.
pub fn linear_lower_bound(tables: &TableSet) -> LinearBound {
    let root = tables.root();
    let max_level = tables.regions.iter().map(|r| r.level).max().unwrap_or(0);
    let layer_rank_bound = (0..=max_level)
        .map(|lv| {
            tables
                .regions
                .iter()
                .filter(|r| r.level == lv)
                .map(|r| r.m.min(r.n))
                .sum::<usize>()
        })
        .min()
        .unwrap_or(0);
    let mut rb = vec![0usize; tables.regions.len()];
    for &a in &tables.topology.order {
        let r = &tables.regions[a];
        rb[a] = if r.is_leaf() {
            r.m.min(r.n)
        } else {
            r.m.min(r.n).min(r.children.iter().map(|&c| rb[c]).sum())
        };
    }
    let tree_rank_bound = rb[root];
    let rank_bound = layer_rank_bound.min(tree_rank_bound);
    LinearBound {
        layer_rank_bound,
        tree_rank_bound,
        rank_bound,
        floor: tables.regions[root].m.saturating_sub(rank_bound) as f64,
    }
}

/// Bias-free linear weights reaching the rank floor on ladders of the form
/// root <- one hidden region <- leaves, by projecting onto the top singular
/// directions of the composed input map.
pub fn svd_truncation_weights(tables: &TableSet) -> Result<WeightSet> {
    let root = tables.root();
    let rr = &tables.regions[root];
    let [h] = rr.children[..] else {
        return Err(Error::Precondition("root must have exactly one child".into()));
    };
    let hr = &tables.regions[h];
    if hr.is_leaf() || hr.children.iter().any(|&c| !tables.regions[c].is_leaf()) {
        return Err(Error::Precondition(
            "expected root <- hidden <- leaves".into(),
        ));
    }
    if rr.m != rr.n {
        return Err(Error::Precondition("root needs m = n".into()));
    }
    let p_top = &tables.tables[&Edge::new(root, h)].p;
    let blocks: Vec<DMatrix<f64>> = hr
        .children
        .iter()
        .map(|&c| p_top * &tables.tables[&Edge::new(h, c)].p)
        .collect();
    let total: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut m = DMatrix::zeros(rr.m, total);
    let mut off = 0;
    for b in &blocks {
        m.view_mut((0, off), (b.nrows(), b.ncols())).copy_from(b);
        off += b.ncols();
    }
    let svd = m.clone().svd(true, true);
    let u = svd.u.as_ref().expect("u");
    let smax = svd.singular_values.max();
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&s| s > 1e-10 * smax.max(1.0))
        .count();
    let r = rank.min(hr.n);
    // singular values come sorted in decreasing order
    let ur = u.columns(0, r).into_owned();
    let mpinv = m.pseudo_inverse(1e-12).map_err(|e| Error::Precondition(e.to_string()))?;
    let w1 = mpinv * &ur; // total x r
    let mut ws = WeightSet::zeros(tables, false);
    let mut off = 0;
    for &c in &hr.children {
        let nb = tables.regions[c].n;
        let w = ws.w.get_mut(&Edge::new(h, c)).expect("edge");
        w.view_mut((0, 0), (nb, r)).copy_from(&w1.rows(off, nb));
        off += nb;
    }
    let w2 = ws.w.get_mut(&Edge::new(root, h)).expect("edge");
    w2.view_mut((0, 0), (r, rr.n)).copy_from(&ur.transpose());
    Ok(ws)
}
