#![allow(dead_code)]

use std::collections::BTreeMap;

use laddersim::dynamics::WeightSet;
use laddersim::scenario::bundled_teacher;
use laddersim::teacher::{build_teacher, decode_mixed, Edge, TeacherGraph, TeacherSpec};
use nalgebra::{DMatrix, DVector};

pub fn teacher(name: &str) -> TeacherGraph {
    let text = bundled_teacher(&format!("teachers/{name}.json")).expect("bundled teacher");
    build_teacher(&TeacherSpec::from_json(text).unwrap()).unwrap()
}

pub const ALL_TEACHERS: [&str; 11] = [
    "inj_pair",
    "inj_ladder",
    "inj_mixed",
    "inj_deep",
    "inj_chain",
    "inj_tee",
    "inj_chain2",
    "xor",
    "shared_leaf",
    "allvert",
    "bottleneck",
];

/// Is row `i` of `p` outside the convex hull of the other rows? Tries every
/// subset of the other rows: an affine least-squares fit that reproduces the
/// row with non-negative weights certifies it as a convex combination.
pub fn brute_force_is_vertex(p: &DMatrix<f64>, i: usize, tol: f64) -> bool {
    let others: Vec<usize> = (0..p.nrows()).filter(|&j| j != i).collect();
    let target = p.row(i).transpose();
    for mask in 1u32..(1 << others.len()) {
        let idx: Vec<usize> = (0..others.len()).filter(|b| mask >> b & 1 == 1).map(|b| others[b]).collect();
        let k = idx.len();
        // rows: coordinates plus the affine constraint sum(lambda) = 1
        let mut a = DMatrix::zeros(p.ncols() + 1, k);
        let mut rhs = DVector::zeros(p.ncols() + 1);
        for (c, &j) in idx.iter().enumerate() {
            for d in 0..p.ncols() {
                a[(d, c)] = p[(j, d)];
            }
            a[(p.ncols(), c)] = 1.0;
        }
        rhs.rows_mut(0, p.ncols()).copy_from(&target);
        rhs[p.ncols()] = 1.0;
        let Ok(pinv) = a.clone().pseudo_inverse(1e-12) else { continue };
        let lambda = pinv * &rhs;
        let resid = (&a * &lambda - &rhs).amax();
        if resid < tol && lambda.iter().all(|&l| l >= -tol) {
            return false;
        }
    }
    true
}

/// Per-region quantities of an input-space network evaluated on one-hot leaf
/// inputs, marginalized over each region's own event.
pub struct BruteForce {
    /// `E[f_a | z_a]`.
    pub f: Vec<DMatrix<f64>>,
    /// `P(z_a) E[g_a | z_a]`, with `g_a` the gradient at the linear output.
    pub gt: Vec<DMatrix<f64>>,
    /// `E[[f_c, 1]^T g_a]`.
    pub dw: BTreeMap<Edge, DMatrix<f64>>,
}

/// Enumerates every leaf tuple, runs a bias-aware ReLU network without Batch
/// Norm on the one-hot inputs and accumulates marginals. `top(z, f)` gives
/// the gradient at the root's linear output.
pub fn brute_force(g: &TeacherGraph, ws: &WeightSet, top: impl Fn(usize, &[f64]) -> Vec<f64>) -> BruteForce {
    let k = g.regions.len();
    let radices = g.leaf_radices();
    let total: usize = radices.iter().product();
    let mut f_acc: Vec<DMatrix<f64>> = g.regions.iter().map(|r| DMatrix::zeros(r.m, r.n)).collect();
    let mut gt: Vec<DMatrix<f64>> = f_acc.clone();
    let mut mass: Vec<Vec<f64>> = g.regions.iter().map(|r| vec![0.0; r.m]).collect();
    let mut dw: BTreeMap<Edge, DMatrix<f64>> = ws.w.iter().map(|(e, w)| (*e, DMatrix::zeros(w.nrows(), w.ncols()))).collect();
    let mut tuple = vec![0usize; radices.len()];
    let root = g.topology.root;

    for t in 0..total {
        let p = g.leaf_prior[t];
        if p == 0.0 {
            continue;
        }
        decode_mixed(t, &radices, &mut tuple);
        let z = g.evaluate(&tuple);
        let mut f: Vec<Vec<f64>> = vec![Vec::new(); k];
        let mut gate: Vec<Vec<f64>> = vec![Vec::new(); k];
        for &a in &g.topology.order {
            let r = &g.regions[a];
            if r.is_leaf() {
                let mut x = vec![0.0; r.n];
                x[z[a]] = 1.0;
                f[a] = x;
                gate[a] = vec![1.0; r.n];
                continue;
            }
            let mut u = vec![0.0; r.n];
            for &c in &r.children {
                let w = &ws.w[&Edge::new(a, c)];
                let mut x = f[c].clone();
                if ws.bias_augmented {
                    x.push(1.0);
                }
                for (j, uj) in u.iter_mut().enumerate() {
                    *uj += (0..x.len()).map(|i| x[i] * w[(i, j)]).sum::<f64>();
                }
            }
            gate[a] = u.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
            f[a] = u.iter().map(|&v| v.max(0.0)).collect();
        }

        let mut out: Vec<Vec<f64>> = g.regions.iter().map(|r| vec![0.0; r.n]).collect();
        let mut glin: Vec<Vec<f64>> = vec![Vec::new(); k];
        for &a in g.topology.order.iter().rev() {
            let r = &g.regions[a];
            if r.is_leaf() {
                continue;
            }
            glin[a] = if a == root {
                top(z[a], &f[a])
            } else {
                out[a].iter().zip(&gate[a]).map(|(o, d)| o * d).collect()
            };
            for &c in &r.children {
                let w = &ws.w[&Edge::new(a, c)];
                for i in 0..g.regions[c].n {
                    out[c][i] += (0..r.n).map(|j| w[(i, j)] * glin[a][j]).sum::<f64>();
                }
                let mut x = f[c].clone();
                if ws.bias_augmented {
                    x.push(1.0);
                }
                let d = dw.get_mut(&Edge::new(a, c)).unwrap();
                for i in 0..x.len() {
                    for j in 0..r.n {
                        d[(i, j)] += p * x[i] * glin[a][j];
                    }
                }
            }
        }
        for a in 0..k {
            mass[a][z[a]] += p;
            for j in 0..g.regions[a].n {
                f_acc[a][(z[a], j)] += p * f[a][j];
                if !glin[a].is_empty() {
                    gt[a][(z[a], j)] += p * glin[a][j];
                }
            }
        }
    }
    for a in 0..k {
        for e in 0..g.regions[a].m {
            if mass[a][e] > 0.0 {
                for j in 0..g.regions[a].n {
                    f_acc[a][(e, j)] /= mass[a][e];
                }
            }
        }
    }
    BruteForce { f: f_acc, gt, dw }
}

/// Ungated residual top gradient `onehot(z) - f`.
pub fn residual_top(z: usize, f: &[f64]) -> Vec<f64> {
    f.iter().enumerate().map(|(j, v)| if j == z { 1.0 } else { 0.0 } - v).collect()
}

/// Textbook batch-norm backward for a uniform batch and sum-convention `dy`.
pub fn textbook_bn_backward(x: &[f64], dy: &[f64], gamma: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / var.sqrt();
    let dxhat: Vec<f64> = dy.iter().map(|d| d * gamma).collect();
    let dvar: f64 = dxhat.iter().zip(x).map(|(d, v)| d * (v - mu)).sum::<f64>() * -0.5 * inv.powi(3);
    let dmu: f64 = dxhat.iter().map(|d| -d * inv).sum::<f64>()
        + dvar * x.iter().map(|v| -2.0 * (v - mu)).sum::<f64>() / n;
    (0..x.len())
        .map(|i| dxhat[i] * inv + dvar * 2.0 * (x[i] - mu) / n + dmu / n)
        .collect()
}
