//! Tensor-product (disentangled) structure of activations, gradients and
//! weights over binary factors.
//!
//! A region with `n` binary factors has `2^n` events; event ids are the
//! big-endian binary number of the factor values, so factor 0 is the most
//! significant bit and Kronecker products compose in factor order.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{forward_pass, weight_update, BnAffine, Gating, LayerState, PassOptions, WeightSet};
use crate::error::{Error, Result};
use crate::teacher::{dirichlet_uniform, Edge, EventTable, Region, TableSet};

/// Disentanglement threshold on the per-column infinity-norm residual.
pub const DISENTANGLE_TOL: f64 = 1e-10;
/// Separability threshold on the off-block absolute mass.
pub const SEPARABLE_TOL: f64 = 1e-12;

/// Region index of `alpha` in [`FactoredInstance::table_set`].
pub const ALPHA: usize = 1;
/// Region index of `beta` in [`FactoredInstance::table_set`].
pub const BETA: usize = 2;

/// Number of binary factors for `m` events.
pub fn factor_count(m: usize) -> Result<usize> {
    if m == 0 || !m.is_power_of_two() {
        return Err(Error::Shape(format!("{m} events is not a power of two")));
    }
    Ok(m.trailing_zeros() as usize)
}

/// Value of factor `k` (of `n`) in event `e`.
#[inline]
pub fn factor_bit(e: usize, k: usize, n: usize) -> usize {
    (e >> (n - 1 - k)) & 1
}

/// Kronecker product of `blocks` in order.
pub fn kron_all(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    blocks
        .iter()
        .fold(DMatrix::from_element(1, 1, 1.0), |acc, b| acc.kronecker(b))
}

/// Column `1 x .. x f x .. x 1` with `f` on factor `k` of `n`.
pub fn axis_column(f: [f64; 2], k: usize, n: usize) -> DVector<f64> {
    DVector::from_fn(1 << n, |e, _| f[factor_bit(e, k, n)])
}

/// Column `p_0 x .. x g x .. x p_{n-1}` with `g` on factor `k`.
pub fn weighted_axis_column(g: [f64; 2], k: usize, priors: &[[f64; 2]]) -> DVector<f64> {
    let n = priors.len();
    DVector::from_fn(1 << n, |e, _| {
        (0..n)
            .map(|i| {
                let b = factor_bit(e, i, n);
                if i == k {
                    g[b]
                } else {
                    priors[i][b]
                }
            })
            .product()
    })
}

/// Matrix whose column `j` is [`axis_column`] of `fs[j]` on factor `j`.
pub fn disentangled_activation(fs: &[[f64; 2]]) -> DMatrix<f64> {
    let n = fs.len();
    let cols: Vec<DVector<f64>> = fs.iter().enumerate().map(|(j, f)| axis_column(*f, j, n)).collect();
    DMatrix::from_columns(&cols)
}

/// Matrix whose column `j` is [`weighted_axis_column`] of `gs[j]` on factor `j`.
pub fn disentangled_gradient(gs: &[[f64; 2]], priors: &[[f64; 2]]) -> DMatrix<f64> {
    let cols: Vec<DVector<f64>> = gs
        .iter()
        .enumerate()
        .map(|(j, g)| weighted_axis_column(*g, j, priors))
        .collect();
    DMatrix::from_columns(&cols)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnFit {
    pub fit: [f64; 2],
    pub residual: f64,
}

pub fn max_residual(fits: &[ColumnFit]) -> f64 {
    fits.iter().map(|f| f.residual).fold(0.0, f64::max)
}

fn check_columns(f: &DMatrix<f64>) -> Result<usize> {
    let n = factor_count(f.nrows())?;
    if f.ncols() > n {
        return Err(Error::Shape(format!(
            "{} columns but only {n} factors; column j is tied to factor j",
            f.ncols()
        )));
    }
    Ok(n)
}

fn axis_sums(col: impl Iterator<Item = f64>, k: usize, n: usize) -> [f64; 2] {
    let mut s = [0.0; 2];
    for (e, v) in col.enumerate() {
        s[factor_bit(e, k, n)] += v;
    }
    s
}

/// Best fit `f` and residual of each column against `1 x .. x f x .. x 1`.
pub fn is_disentangled_activation(f: &DMatrix<f64>) -> Result<Vec<ColumnFit>> {
    let n = check_columns(f)?;
    let half = (1usize << n) as f64 / 2.0;
    Ok((0..f.ncols())
        .map(|j| {
            let s = axis_sums(f.column(j).iter().copied(), j, n);
            let fit = [s[0] / half, s[1] / half];
            let residual = (f.column(j) - axis_column(fit, j, n)).amax();
            ColumnFit { fit, residual }
        })
        .collect())
}

/// Best fit `g` and residual of each column against `p_0 x .. x g x .. x p_{n-1}`.
pub fn is_disentangled_gradient(g: &DMatrix<f64>, priors: &[[f64; 2]]) -> Result<Vec<ColumnFit>> {
    let n = check_columns(g)?;
    if priors.len() != n {
        return Err(Error::Shape(format!("{} factor priors for {n} factors", priors.len())));
    }
    for (k, p) in priors.iter().enumerate() {
        if let Some(b) = p.iter().position(|&x| x <= 0.0) {
            return Err(Error::ZeroPrior {
                region: format!("factor {k}"),
                event: b,
            });
        }
    }
    Ok((0..g.ncols())
        .map(|j| {
            let fit = axis_sums(g.column(j).iter().copied(), j, n);
            let residual = (g.column(j) - weighted_axis_column(fit, j, priors)).amax();
            ColumnFit { fit, residual }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Separability {
    pub off_block_mass: f64,
    pub separable: bool,
}

/// `partition[i]` lists the rows of `W` (child factors) feeding column `i`.
pub fn is_separable(w: &DMatrix<f64>, partition: &[Vec<usize>]) -> Result<Separability> {
    if partition.len() != w.ncols() {
        return Err(Error::Shape(format!(
            "partition has {} sets for {} columns",
            partition.len(),
            w.ncols()
        )));
    }
    let mut owner = vec![None; w.nrows()];
    for (i, set) in partition.iter().enumerate() {
        for &r in set {
            match owner.get_mut(r) {
                Some(slot @ None) => *slot = Some(i),
                Some(Some(_)) => return Err(Error::Shape(format!("row {r} appears in two sets"))),
                None => return Err(Error::Shape(format!("row {r} out of range"))),
            }
        }
    }
    if let Some(r) = owner.iter().position(Option::is_none) {
        return Err(Error::Shape(format!("partition does not cover row {r}")));
    }
    let mut mass = 0.0;
    for r in 0..w.nrows() {
        for c in 0..w.ncols() {
            if owner[r] != Some(c) {
                mass += w[(r, c)].abs();
            }
        }
    }
    Ok(Separability {
        off_block_mass: mass,
        separable: mass < SEPARABLE_TOL,
    })
}

/// Marginal of a distribution over `2^n` events onto the contiguous factors
/// `start .. start + len`.
pub fn marginal(p: &DVector<f64>, start: usize, len: usize) -> Result<DVector<f64>> {
    let n = factor_count(p.len())?;
    if start + len > n {
        return Err(Error::Shape("factor range out of bounds".into()));
    }
    let shift = n - start - len;
    let mut out = DVector::zeros(1 << len);
    for (e, v) in p.iter().enumerate() {
        out[(e >> shift) & ((1 << len) - 1)] += v;
    }
    Ok(out)
}

/// A parent region `alpha` over `n_alpha` binary factors and a child `beta`
/// whose factors are split into contiguous sets, one per parent factor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactoredInstance {
    /// `set_sizes[i] = |S_i|`; child factors `S_0` come first, then `S_1`, ...
    pub set_sizes: Vec<usize>,
    /// `blocks[i]` is `P(z_beta[S_i] | z_alpha[i])`, `2 x 2^|S_i|`.
    pub blocks: Vec<DMatrix<f64>>,
    pub alpha_priors: Vec<[f64; 2]>,
    /// Per child factor activation pattern; `F_beta` column `k` is built from `f_beta[k]`.
    pub f_beta: Vec<[f64; 2]>,
    /// `n_beta x n_alpha`.
    pub w: DMatrix<f64>,
    /// Per parent factor gradient pattern for `G~_alpha`.
    pub g_alpha: Vec<[f64; 2]>,
    pub bn: Option<BnAffine>,
}

fn random_row_stochastic(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows, cols);
    for r in 0..rows {
        let v = dirichlet_uniform(rng, cols);
        for c in 0..cols {
            m[(r, c)] = v[c];
        }
    }
    m
}

fn random_pattern(rng: &mut ChaCha8Rng) -> [f64; 2] {
    [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]
}

impl FactoredInstance {
    /// Seeded generic instance: Dirichlet blocks and priors, random patterns,
    /// separable weights and centered parent gradients.
    pub fn random(set_sizes: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_alpha = set_sizes.len();
        let n_beta: usize = set_sizes.iter().sum();
        let blocks = set_sizes
            .iter()
            .map(|&s| random_row_stochastic(&mut rng, 2, 1 << s))
            .collect();
        let alpha_priors = (0..n_alpha)
            .map(|_| {
                let q = rng.random_range(0.2..0.8);
                [q, 1.0 - q]
            })
            .collect();
        let f_beta = (0..n_beta).map(|_| random_pattern(&mut rng)).collect();
        let mut w = DMatrix::zeros(n_beta, n_alpha);
        let mut row = 0;
        for (i, &s) in set_sizes.iter().enumerate() {
            for r in row..row + s {
                w[(r, i)] = rng.random_range(-1.0..1.0);
            }
            row += s;
        }
        let g_alpha = (0..n_alpha)
            .map(|_| {
                let g = rng.random_range(-1.0..1.0);
                [g, -g]
            })
            .collect();
        let bn = Some(BnAffine {
            c1: (0..n_alpha).map(|_| rng.random_range(0.5..1.5)).collect(),
            c0: (0..n_alpha).map(|_| rng.random_range(-0.5..0.5)).collect(),
        });
        FactoredInstance {
            set_sizes: set_sizes.to_vec(),
            blocks,
            alpha_priors,
            f_beta,
            w,
            g_alpha,
            bn,
        }
    }

    /// The layout worked through by hand: two parent factors, three child
    /// factors split as `{0, 1}, {2}`.
    pub fn reference(seed: u64) -> Self {
        Self::random(&[2, 1], seed)
    }

    pub fn n_alpha(&self) -> usize {
        self.set_sizes.len()
    }

    pub fn n_beta(&self) -> usize {
        self.set_sizes.iter().sum()
    }

    pub fn partition(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut row = 0;
        for &s in &self.set_sizes {
            out.push((row..row + s).collect());
            row += s;
        }
        out
    }

    pub fn table(&self) -> DMatrix<f64> {
        kron_all(&self.blocks)
    }

    pub fn prior_alpha(&self) -> DVector<f64> {
        let cols: Vec<DMatrix<f64>> = self
            .alpha_priors
            .iter()
            .map(|p| DMatrix::from_row_slice(2, 1, p))
            .collect();
        kron_all(&cols).column(0).into_owned()
    }

    pub fn f_beta_matrix(&self) -> DMatrix<f64> {
        disentangled_activation(&self.f_beta)
    }

    pub fn gt_alpha(&self) -> DMatrix<f64> {
        disentangled_gradient(&self.g_alpha, &self.alpha_priors)
    }

    /// Table set `top <- alpha <- beta`, where `top` has a single event so
    /// that `alpha` is a hidden region.
    pub fn table_set(&self) -> Result<TableSet> {
        let (ma, mb) = (1usize << self.n_alpha(), 1usize << self.n_beta());
        let region = |id: &str, children: Vec<usize>, m: usize, n: usize| Region {
            id: id.into(),
            children,
            m,
            n,
            level: 0,
        };
        let regions = vec![
            region("top", vec![ALPHA], 1, 1),
            region("alpha", vec![BETA], ma, self.n_alpha()),
            region("beta", vec![], mb, self.n_beta()),
        ];
        let pa = self.prior_alpha();
        let top = EventTable::from_conditional(0, ALPHA, DMatrix::from_row_slice(1, ma, pa.as_slice()), DVector::from_element(1, 1.0));
        let table = EventTable::from_conditional(ALPHA, BETA, self.table(), pa.clone());
        let pb = table.prior_child.clone();
        let tables = [(Edge::new(0, ALPHA), top), (Edge::new(ALPHA, BETA), table)]
            .into_iter()
            .collect();
        TableSet::from_parts(regions, tables, vec![DVector::from_element(1, 1.0), pa, pb])
    }

    /// Bias-free weights with `W` on `alpha <- beta`, plus identity Batch Norm on
    /// `alpha` when `bn` is set and no affine is given.
    pub fn weights(&self, tables: &TableSet, bn: bool) -> WeightSet {
        let mut ws = WeightSet::zeros(tables, false);
        ws.w.insert(Edge::new(ALPHA, BETA), self.w.clone());
        if bn {
            let aff = self.bn.clone().unwrap_or_else(|| BnAffine::identity(self.n_alpha()));
            ws.bn.insert(ALPHA, aff);
        }
        ws
    }

    fn check_blocks(&self) -> Result<()> {
        if self.blocks.len() != self.set_sizes.len() || self.alpha_priors.len() != self.set_sizes.len() {
            return Err(Error::Precondition("one block and one prior per parent factor".into()));
        }
        for (i, (b, &s)) in self.blocks.iter().zip(&self.set_sizes).enumerate() {
            if b.shape() != (2, 1 << s) {
                return Err(Error::Precondition(format!("block {i} must be 2x{}", 1 << s)));
            }
            for r in 0..2 {
                let sum: f64 = b.row(r).sum();
                if (sum - 1.0).abs() > 1e-12 || b.row(r).iter().any(|&x| x < 0.0) {
                    return Err(Error::Precondition(format!("block {i} row {r} is not stochastic")));
                }
            }
        }
        if self.w.shape() != (self.n_beta(), self.n_alpha()) || self.f_beta.len() != self.n_beta() {
            return Err(Error::Precondition("weight or activation shape mismatch".into()));
        }
        Ok(())
    }

    fn check_separable(&self) -> Result<()> {
        let s = is_separable(&self.w, &self.partition())?;
        if !s.separable {
            return Err(Error::Precondition(format!(
                "weights are not separable (off-block mass {:.3e})",
                s.off_block_mass
            )));
        }
        Ok(())
    }

    /// Forward pass with `F_beta` as the leaf input.
    pub fn forward_state(&self, relu: bool, bn: bool) -> Result<LayerState> {
        let tables = self.table_set()?;
        let ws = self.weights(&tables, bn);
        let opts = PassOptions {
            gating: if relu { Gating::Hard } else { Gating::Linear },
            leaf_inputs: [(BETA, self.f_beta_matrix())].into_iter().collect(),
            ..Default::default()
        };
        forward_pass(&tables, &ws, &opts)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardReport {
    pub relu: bool,
    pub bn: bool,
    pub fits: Vec<ColumnFit>,
    pub max_residual: f64,
    pub disentangled: bool,
}

/// Residual of `F_alpha` without checking the hypotheses.
pub fn forward_residual(inst: &FactoredInstance, relu: bool, bn: bool) -> Result<ForwardReport> {
    let st = inst.forward_state(relu, bn)?;
    let fits = is_disentangled_activation(&st.f[ALPHA])?;
    let max_residual = max_residual(&fits);
    Ok(ForwardReport {
        relu,
        bn,
        fits,
        max_residual,
        disentangled: max_residual < DISENTANGLE_TOL,
    })
}

/// Checks the hypotheses (Kronecker table, separable weights, disentangled
/// child activations) and then the disentanglement of `F_alpha`.
pub fn check_forward_disentangled(inst: &FactoredInstance, relu: bool, bn: bool) -> Result<ForwardReport> {
    inst.check_blocks()?;
    inst.check_separable()?;
    let fb = is_disentangled_activation(&inst.f_beta_matrix())?;
    if max_residual(&fb) >= DISENTANGLE_TOL {
        return Err(Error::Precondition("child activations are not disentangled".into()));
    }
    forward_residual(inst, relu, bn)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub delta_w: Vec<Vec<f64>>,
    pub off_block_mass: f64,
    pub separable: bool,
    /// Largest deviation of each diagonal block from `(P_i F_i)^T g_i`.
    pub block_formula_error: f64,
    pub max_column_sum: f64,
}

/// `dW` from `dynamics::weight_update` without checking centering.
pub fn separable_update_unchecked(inst: &FactoredInstance, gt_alpha: &DMatrix<f64>) -> Result<UpdateReport> {
    let tables = inst.table_set()?;
    let ws = inst.weights(&tables, false);
    let mut st = inst.forward_state(false, false)?;
    st.gt = vec![
        DMatrix::zeros(1, 1),
        gt_alpha.clone(),
        DMatrix::zeros(1 << inst.n_beta(), inst.n_beta()),
    ];
    let upd = weight_update(&tables, &ws, &st, None)?;
    let dw = &upd.dw[&Edge::new(ALPHA, BETA)];
    let sep = is_separable(dw, &inst.partition())?;

    // per-block formula on the factor sub-space of each set
    let fits = is_disentangled_gradient(gt_alpha, &inst.alpha_priors)?;
    let mut err: f64 = 0.0;
    for (i, set) in inst.partition().iter().enumerate() {
        let s = set.len();
        let local: Vec<[f64; 2]> = set.iter().map(|&k| inst.f_beta[k]).collect();
        let fi = disentangled_activation_in(&local, s);
        let g = DVector::from_column_slice(&fits[i].fit);
        let block = (&inst.blocks[i] * fi).transpose() * g;
        for (t, &k) in set.iter().enumerate() {
            err = err.max((block[t] - dw[(k, i)]).abs());
        }
    }
    let max_column_sum = (0..gt_alpha.ncols())
        .map(|j| gt_alpha.column(j).sum().abs())
        .fold(0.0, f64::max);
    Ok(UpdateReport {
        delta_w: (0..dw.nrows()).map(|r| dw.row(r).iter().copied().collect()).collect(),
        off_block_mass: sep.off_block_mass,
        separable: sep.off_block_mass < DISENTANGLE_TOL,
        block_formula_error: err,
        max_column_sum,
    })
}

/// `2^s x len` matrix with column `t` the pattern `fs[t]` on local factor `t`.
fn disentangled_activation_in(fs: &[[f64; 2]], s: usize) -> DMatrix<f64> {
    let cols: Vec<DVector<f64>> = fs.iter().enumerate().map(|(t, f)| axis_column(*f, t, s)).collect();
    DMatrix::from_columns(&cols)
}

/// Checks centering of `G~_alpha` and then separability of `dW`.
pub fn check_separable_update(inst: &FactoredInstance, gt_alpha: &DMatrix<f64>) -> Result<UpdateReport> {
    inst.check_blocks()?;
    let rep = separable_update_unchecked(inst, gt_alpha)?;
    if rep.max_column_sum > SEPARABLE_TOL {
        return Err(Error::Precondition(format!(
            "parent gradient is not centered (column sum {:.3e})",
            rep.max_column_sum
        )));
    }
    Ok(rep)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackwardInstance {
    pub seed: u64,
    pub residual: f64,
    pub total_probability_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackwardStats {
    pub instances: Vec<BackwardInstance>,
    pub threshold: f64,
    pub above_threshold: usize,
    pub fraction_above: f64,
    pub max_total_probability_error: f64,
}

/// Disentanglement residual of `G~raw_beta = P^T G~_alpha W^T` against the
/// child factor marginals, plus the worst total-probability mismatch
/// `P_i^T p_alpha[i]` vs the marginal of `p_beta` on `S_i`.
pub fn backward_residual(inst: &FactoredInstance) -> Result<(f64, f64)> {
    let p = inst.table();
    let graw = p.transpose() * inst.gt_alpha() * inst.w.transpose();
    let pa = inst.prior_alpha();
    let pb = p.transpose() * &pa;
    let mut tp_err: f64 = 0.0;
    let mut start = 0;
    for (i, &s) in inst.set_sizes.iter().enumerate() {
        let lhs = inst.blocks[i].transpose() * DVector::from_column_slice(&inst.alpha_priors[i]);
        let rhs = marginal(&pb, start, s)?;
        tp_err = tp_err.max((lhs - rhs).amax());
        start += s;
    }
    let priors: Vec<[f64; 2]> = (0..inst.n_beta())
        .map(|k| {
            let m = marginal(&pb, k, 1)?;
            Ok([m[0], m[1]])
        })
        .collect::<Result<_>>()?;
    let fits = is_disentangled_gradient(&graw, &priors)?;
    Ok((max_residual(&fits), tp_err))
}

pub fn backward_residual_demo(seeds: impl IntoIterator<Item = u64>, threshold: f64) -> Result<BackwardStats> {
    let mut instances = Vec::new();
    for seed in seeds {
        let inst = FactoredInstance::reference(seed);
        let (residual, tp) = backward_residual(&inst)?;
        instances.push(BackwardInstance {
            seed,
            residual,
            total_probability_error: tp,
        });
    }
    let above_threshold = instances.iter().filter(|i| i.residual > threshold).count();
    Ok(BackwardStats {
        fraction_above: above_threshold as f64 / instances.len().max(1) as f64,
        max_total_probability_error: instances
            .iter()
            .map(|i| i.total_probability_error)
            .fold(0.0, f64::max),
        threshold,
        above_threshold,
        instances,
    })
}

/// Per-variant forward outcomes keyed by `relu=..,bn=..`.
pub fn forward_variants(inst: &FactoredInstance) -> Result<BTreeMap<String, ForwardReport>> {
    let mut out = BTreeMap::new();
    for relu in [false, true] {
        for bn in [false, true] {
            out.insert(format!("relu={relu},bn={bn}"), check_forward_disentangled(inst, relu, bn)?);
        }
    }
    Ok(out)
}
