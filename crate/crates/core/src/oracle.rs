//! Input-space ground truth: the locally connected ReLU network evaluated on
//! every enumerated input, and the conditional expectations that the
//! event-space dynamics are supposed to reproduce.
//!
//! All inputs are processed as one batch: for each region the activations are
//! an `N x n` matrix with one row per enumerated input.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::batchnorm::{bn_backward, bn_forward, BnParams, BnRecord};
use crate::dynamics::{
    backward_pass, forward_pass, relu_gate, weight_update, BnPlacement, Gating, PassOptions, TopGradient,
    WeightSet,
};
use crate::error::{Error, Result};
use crate::teacher::{decode_mixed, dirichlet_uniform, Edge, TableSet, TeacherGraph};

/// Possible input vectors of one leaf region, per leaf event, with their
/// conditional weights `P(x | z)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeafInputs {
    pub variants: Vec<Vec<(Vec<f64>, f64)>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputModel {
    /// Keyed by leaf region index.
    pub leaves: BTreeMap<usize, LeafInputs>,
}

impl InputModel {
    /// One-hot vector per leaf event (requires `n = m` at every leaf).
    pub fn delta_onehot(g: &TeacherGraph) -> Result<Self> {
        let mut leaves = BTreeMap::new();
        for &l in &g.leaves {
            let r = &g.regions[l];
            if r.n != r.m {
                return Err(Error::Shape(format!(
                    "one-hot inputs for leaf `{}` need n = m = {}",
                    r.id, r.m
                )));
            }
            let variants = (0..r.m)
                .map(|e| {
                    let mut x = vec![0.0; r.m];
                    x[e] = 1.0;
                    vec![(x, 1.0)]
                })
                .collect();
            leaves.insert(l, LeafInputs { variants });
        }
        Ok(InputModel { leaves })
    }

    /// `per_event` noisy copies of the one-hot vector for each leaf event,
    /// with Gaussian noise of scale `noise` and seeded Dirichlet weights.
    pub fn lossy(g: &TeacherGraph, per_event: usize, noise: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
        let mut leaves = BTreeMap::new();
        for &l in &g.leaves {
            let r = &g.regions[l];
            if r.n != r.m {
                return Err(Error::Shape(format!("leaf `{}` needs n = m", r.id)));
            }
            let variants = (0..r.m)
                .map(|e| {
                    let w = dirichlet_uniform(&mut rng, per_event);
                    w.into_iter()
                        .map(|wt| {
                            let x = (0..r.m)
                                .map(|k| f64::from(u8::from(k == e)) + normal.sample(&mut rng))
                                .collect();
                            (x, wt)
                        })
                        .collect()
                })
                .collect();
            leaves.insert(l, LeafInputs { variants });
        }
        Ok(InputModel { leaves })
    }

    /// True when every event has a single input vector and distinct events
    /// of a leaf have distinct vectors.
    pub fn is_delta(&self) -> bool {
        self.leaves.values().all(|li| {
            li.variants.iter().all(|v| v.len() == 1)
                && li.variants.iter().enumerate().all(|(a, va)| {
                    li.variants[a + 1..].iter().all(|vb| vb[0].0 != va[0].0)
                })
        })
    }

    pub fn validate(&self, g: &TeacherGraph) -> Result<()> {
        for &l in &g.leaves {
            let r = &g.regions[l];
            let li = self
                .leaves
                .get(&l)
                .ok_or_else(|| Error::Config(format!("no inputs for leaf `{}`", r.id)))?;
            if li.variants.len() != r.m {
                return Err(Error::Shape(format!("leaf `{}` needs inputs for {} events", r.id, r.m)));
            }
            for (e, vs) in li.variants.iter().enumerate() {
                if vs.is_empty() {
                    return Err(Error::Config(format!("event {e} of `{}` has no inputs", r.id)));
                }
                let total: f64 = vs.iter().map(|v| v.1).sum();
                if (total - 1.0).abs() > 1e-12 || vs.iter().any(|v| v.1 < 0.0) {
                    return Err(Error::NonStochasticPrior(format!(
                        "input weights of event {e} of `{}` sum to {total}",
                        r.id
                    )));
                }
                if vs.iter().any(|v| v.0.len() != r.n) {
                    return Err(Error::Shape(format!("inputs of `{}` must have length {}", r.id, r.n)));
                }
            }
        }
        Ok(())
    }

    /// `E[x | z]` per leaf, as `m x n` matrices.
    pub fn conditional_means(&self) -> BTreeMap<usize, DMatrix<f64>> {
        self.leaves
            .iter()
            .map(|(&l, li)| {
                let n = li.variants[0][0].0.len();
                let m = DMatrix::from_fn(li.variants.len(), n, |e, k| {
                    li.variants[e].iter().map(|(x, w)| w * x[k]).sum()
                });
                (l, m)
            })
            .collect()
    }
}

/// Every input with non-zero probability, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct InputSet {
    pub probs: Vec<f64>,
    /// Per input, the event of every region (indexed like `g.regions`).
    pub region_events: Vec<Vec<usize>>,
    /// Per input, the variant chosen for every region (0 for non-leaves).
    pub variants: Vec<Vec<usize>>,
    /// Per leaf region, the `N x n` matrix of input vectors.
    pub vectors: BTreeMap<usize, DMatrix<f64>>,
}

impl InputSet {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn total_probability(&self) -> f64 {
        self.probs.iter().sum()
    }

    /// Leaf `(event, variant)` pairs under `region` for input `i`.
    pub fn content_key(&self, g: &TeacherGraph, region: usize, i: usize) -> Vec<(usize, usize)> {
        g.leaves_under(region)
            .into_iter()
            .map(|l| (self.region_events[i][l], self.variants[i][l]))
            .collect()
    }

    /// Writes one row per input: probability, then every region event.
    pub fn write_csv<W: std::io::Write>(&self, out: W, g: &TeacherGraph) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["p".to_string()];
        header.extend(g.regions.iter().map(|r| format!("z_{}", r.id)));
        header.extend(g.leaves.iter().map(|&l| format!("variant_{}", g.regions[l].id)));
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut row = vec![self.probs[i].to_string()];
            row.extend(self.region_events[i].iter().map(|z| z.to_string()));
            row.extend(g.leaves.iter().map(|&l| self.variants[i][l].to_string()));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

pub fn enumerate_inputs(g: &TeacherGraph, im: &InputModel, cap: u64) -> Result<InputSet> {
    im.validate(g)?;
    let max_variants: u128 = g
        .leaves
        .iter()
        .map(|l| im.leaves[l].variants.iter().map(Vec::len).max().unwrap_or(1) as u128)
        .product();
    let required = g.leaf_tuple_count().saturating_mul(max_variants);
    if required > cap as u128 {
        return Err(Error::CapExceeded { required, cap });
    }
    let radices = g.leaf_radices();
    let mut vals = vec![0usize; radices.len()];
    let mut set = InputSet {
        probs: Vec::new(),
        region_events: Vec::new(),
        variants: Vec::new(),
        vectors: BTreeMap::new(),
    };
    let mut rows: BTreeMap<usize, Vec<f64>> = g.leaves.iter().map(|&l| (l, Vec::new())).collect();
    for (t, &p) in g.leaf_prior.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        decode_mixed(t, &radices, &mut vals);
        let z = g.evaluate(&vals);
        let vradices: Vec<usize> = g
            .leaves
            .iter()
            .zip(&vals)
            .map(|(l, &e)| im.leaves[l].variants[e].len())
            .collect();
        let count: usize = vradices.iter().product();
        let mut vv = vec![0usize; vradices.len()];
        for v in 0..count {
            decode_mixed(v, &vradices, &mut vv);
            let mut prob = p;
            let mut variants = vec![0usize; g.regions.len()];
            for (k, &l) in g.leaves.iter().enumerate() {
                let (x, w) = &im.leaves[&l].variants[vals[k]][vv[k]];
                prob *= w;
                variants[l] = vv[k];
                rows.get_mut(&l).expect("leaf").extend_from_slice(x);
            }
            set.probs.push(prob);
            set.region_events.push(z.clone());
            set.variants.push(variants);
        }
    }
    let n_inputs = set.probs.len();
    for (l, data) in rows {
        let n = g.regions[l].n;
        set.vectors.insert(l, DMatrix::from_row_slice(n_inputs, n, &data));
    }
    Ok(set)
}

/// Loss gradient at the root for each input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleTop {
    /// `onehot(z_root) - f_root`, without the root gate.
    #[default]
    Residual,
    /// `d o (onehot(z_root) - f_root)`: the negative gradient of
    /// `1/2 E_x ||onehot - f_root||^2`.
    GatedResidual,
}

impl From<OracleTop> for TopGradient {
    fn from(t: OracleTop) -> Self {
        match t {
            OracleTop::Residual => TopGradient::Residual,
            OracleTop::GatedResidual => TopGradient::GatedResidual,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleOptions {
    pub linear: bool,
    pub bn_placement: BnPlacement,
    pub top: OracleTop,
}

impl Default for OracleOptions {
    fn default() -> Self {
        OracleOptions {
            linear: false,
            bn_placement: BnPlacement::PreActivation,
            top: OracleTop::Residual,
        }
    }
}

/// Per-input activations and gradients of every region.
#[derive(Clone, Debug)]
pub struct OracleState {
    pub f: Vec<DMatrix<f64>>,
    pub fraw: Vec<DMatrix<f64>>,
    pub linear: Vec<DMatrix<f64>>,
    pub d: Vec<DMatrix<f64>>,
    /// Gradient with respect to the region output, before gating.
    pub g_out: Vec<DMatrix<f64>>,
    /// Gradient at the linear output (after gating and Batch Norm).
    pub g: Vec<DMatrix<f64>>,
    pub bn_records: BTreeMap<usize, Vec<BnRecord>>,
    pub bn_grads: BTreeMap<usize, Vec<[f64; 2]>>,
    /// `E_x[[f_child, 1]^T g_parent]` per edge.
    pub dw: BTreeMap<Edge, DMatrix<f64>>,
    /// `1/2 E_x ||onehot(z_root) - f_root||^2`.
    pub loss: f64,
}

fn with_ones(f: &DMatrix<f64>) -> DMatrix<f64> {
    let n = f.ncols();
    let mut out = f.clone().insert_column(n, 1.0);
    out.set_column(n, &DVector::from_element(f.nrows(), 1.0));
    out
}

fn bn_batch(x: &DMatrix<f64>, c1: &[f64], c0: &[f64], probs: &[f64]) -> Result<(DMatrix<f64>, Vec<BnRecord>)> {
    let mut out = DMatrix::zeros(x.nrows(), x.ncols());
    let mut recs = Vec::with_capacity(x.ncols());
    for j in 0..x.ncols() {
        let col: Vec<f64> = x.column(j).iter().copied().collect();
        let rec = bn_forward(&col, &BnParams::weighted(c1[j], c0[j], probs.to_vec()))?;
        out.set_column(j, &DVector::from_column_slice(&rec.output));
        recs.push(rec);
    }
    Ok((out, recs))
}

/// Exact forward and backward pass over the whole input set.
pub fn net_forward_backward(
    g: &TeacherGraph,
    weights: &WeightSet,
    inputs: &InputSet,
    opts: &OracleOptions,
) -> Result<OracleState> {
    let k = g.regions.len();
    let nx = inputs.len();
    let empty = DMatrix::zeros(0, 0);
    let mut st = OracleState {
        f: vec![empty.clone(); k],
        fraw: vec![empty.clone(); k],
        linear: vec![empty.clone(); k],
        d: vec![empty.clone(); k],
        g_out: vec![empty.clone(); k],
        g: vec![empty; k],
        bn_records: BTreeMap::new(),
        bn_grads: BTreeMap::new(),
        dw: BTreeMap::new(),
        loss: 0.0,
    };
    for (i, r) in g.regions.iter().enumerate() {
        for &c in &r.children {
            let w = weights.w.get(&Edge::new(i, c)).ok_or_else(|| {
                Error::Shape(format!("no weights for edge {} <- {}", r.id, g.regions[c].id))
            })?;
            let rows = g.regions[c].n + usize::from(weights.bias_augmented);
            if w.shape() != (rows, r.n) {
                return Err(Error::Shape(format!("W({} <- {}) has wrong shape", r.id, g.regions[c].id)));
            }
        }
    }
    let input = |st: &OracleState, c: usize| {
        if weights.bias_augmented {
            with_ones(&st.f[c])
        } else {
            st.f[c].clone()
        }
    };

    for &a in &g.topology.order {
        let r = &g.regions[a];
        if r.is_leaf() {
            let x = inputs.vectors[&a].clone();
            st.d[a] = DMatrix::from_element(nx, r.n, 1.0);
            st.linear[a] = x.clone();
            st.fraw[a] = x.clone();
            st.f[a] = x;
            continue;
        }
        let mut u = DMatrix::zeros(nx, r.n);
        for &c in &r.children {
            u += input(&st, c) * &weights.w[&Edge::new(a, c)];
        }
        let bn = weights.bn.get(&a);
        let fraw = match (bn, opts.bn_placement) {
            (Some(aff), BnPlacement::PreActivation) => {
                let (v, recs) = bn_batch(&u, &aff.c1, &aff.c0, &inputs.probs)?;
                st.bn_records.insert(a, recs);
                v
            }
            _ => u.clone(),
        };
        let d = if opts.linear {
            DMatrix::from_element(nx, r.n, 1.0)
        } else {
            fraw.map(relu_gate)
        };
        let gated = d.component_mul(&fraw);
        let f = match (bn, opts.bn_placement) {
            (Some(aff), BnPlacement::PostActivation) => {
                let (v, recs) = bn_batch(&gated, &aff.c1, &aff.c0, &inputs.probs)?;
                st.bn_records.insert(a, recs);
                v
            }
            _ => gated,
        };
        st.linear[a] = u;
        st.fraw[a] = fraw;
        st.d[a] = d;
        st.f[a] = f;
    }

    let root = g.root();
    let rr = &g.regions[root];
    if rr.n != rr.m {
        return Err(Error::Shape(format!("root `{}` needs n = m for a one-hot target", rr.id)));
    }
    let target = DMatrix::from_fn(nx, rr.n, |i, j| f64::from(u8::from(inputs.region_events[i][root] == j)));
    let resid = &target - &st.f[root];
    st.loss = 0.5
        * (0..nx)
            .map(|i| inputs.probs[i] * resid.row(i).norm_squared())
            .sum::<f64>();

    let mut out: Vec<DMatrix<f64>> = g.regions.iter().map(|r| DMatrix::zeros(nx, r.n)).collect();
    for &a in g.topology.order.iter().rev() {
        let r = &g.regions[a];
        let gl = if r.is_leaf() {
            out[a].clone()
        } else if a == root {
            match opts.top {
                OracleTop::Residual => resid.clone(),
                OracleTop::GatedResidual => resid.component_mul(&st.d[a]),
            }
        } else if let Some(recs) = st.bn_records.get(&a) {
            let aff = &weights.bn[&a];
            let through = |gm: &DMatrix<f64>, grads: &mut Vec<[f64; 2]>| -> Result<DMatrix<f64>> {
                let mut res = DMatrix::zeros(nx, r.n);
                for j in 0..r.n {
                    let col: Vec<f64> = gm.column(j).iter().copied().collect();
                    let bg = bn_backward(&col, &recs[j], &BnParams::new(aff.c1[j], aff.c0[j]))?;
                    res.set_column(j, &DVector::from_column_slice(&bg.g_f));
                    grads.push(bg.g_c);
                }
                Ok(res)
            };
            let mut grads = Vec::new();
            let gl = match opts.bn_placement {
                BnPlacement::PreActivation => through(&out[a].component_mul(&st.d[a]), &mut grads)?,
                BnPlacement::PostActivation => through(&out[a], &mut grads)?.component_mul(&st.d[a]),
            };
            st.bn_grads.insert(a, grads);
            gl
        } else {
            out[a].component_mul(&st.d[a])
        };
        for &c in &r.children {
            let nb = g.regions[c].n;
            let w = weights.w[&Edge::new(a, c)].rows(0, nb);
            out[c] += &gl * w.transpose();
        }
        st.g[a] = gl;
    }
    st.g_out = out;

    for (i, r) in g.regions.iter().enumerate() {
        for &c in &r.children {
            let x = input(&st, c);
            let weighted = DMatrix::from_fn(nx, r.n, |s, j| inputs.probs[s] * st.g[i][(s, j)]);
            st.dw.insert(Edge::new(i, c), x.transpose() * weighted);
        }
    }
    Ok(st)
}

/// What to condition on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Condition {
    /// The event `z_r`.
    RegionEvent(usize),
    /// The full leaf content `x_r` under region `r`.
    RegionContent(usize),
}

/// Conditional expectations of a per-input matrix, one row per condition value.
#[derive(Clone, Debug, PartialEq)]
pub struct Marginal {
    pub keys: Vec<Vec<(usize, usize)>>,
    pub probs: Vec<f64>,
    pub means: DMatrix<f64>,
    /// Row of `means` for every input.
    pub row_of: Vec<usize>,
}

/// `E[values | condition]`. For `RegionEvent`, rows follow the event index
/// and an event with zero probability is an error.
pub fn marginalize(
    g: &TeacherGraph,
    inputs: &InputSet,
    values: &DMatrix<f64>,
    cond: Condition,
) -> Result<Marginal> {
    let n = values.ncols();
    let mut index: BTreeMap<Vec<(usize, usize)>, usize> = BTreeMap::new();
    let mut keys = Vec::new();
    if let Condition::RegionEvent(r) = cond {
        for e in 0..g.regions[r].m {
            index.insert(vec![(e, 0)], e);
            keys.push(vec![(e, 0)]);
        }
    }
    let mut row_of = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let key = match cond {
            Condition::RegionEvent(r) => vec![(inputs.region_events[i][r], 0)],
            Condition::RegionContent(r) => inputs.content_key(g, r, i),
        };
        let next = index.len();
        let row = *index.entry(key.clone()).or_insert_with(|| {
            keys.push(key);
            next
        });
        row_of.push(row);
    }
    let mut probs = vec![0.0; keys.len()];
    let mut sums = DMatrix::zeros(keys.len(), n);
    for i in 0..inputs.len() {
        let r = row_of[i];
        probs[r] += inputs.probs[i];
        for j in 0..n {
            sums[(r, j)] += inputs.probs[i] * values[(i, j)];
        }
    }
    for (r, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            let region = match cond {
                Condition::RegionEvent(x) | Condition::RegionContent(x) => g.regions[x].id.clone(),
            };
            return Err(Error::ZeroPrior { region, event: r });
        }
        for j in 0..n {
            sums[(r, j)] /= p;
        }
    }
    Ok(Marginal {
        keys,
        probs,
        means: sums,
        row_of,
    })
}

/// `E[values | predicate]` over the inputs selected by `keep`.
pub fn expectation_given(inputs: &InputSet, values: &DMatrix<f64>, keep: impl Fn(usize) -> bool) -> Result<DVector<f64>> {
    let mut mass = 0.0;
    let mut acc = DVector::zeros(values.ncols());
    for i in (0..inputs.len()).filter(|&i| keep(i)) {
        mass += inputs.probs[i];
        acc += inputs.probs[i] * values.row(i).transpose();
    }
    if mass <= 0.0 {
        return Err(Error::ZeroPrior {
            region: "condition".into(),
            event: 0,
        });
    }
    Ok(acc / mass)
}

/// Largest gap between `E[g_j | x_k]` computed directly and as the average of
/// `E[g_j | x_j]` under `P(x_j | x_k)`, over every parent `j` and child `k`.
pub fn check_recursion(g: &TeacherGraph, inputs: &InputSet, state: &OracleState) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (j, r) in g.regions.iter().enumerate() {
        if r.is_leaf() {
            continue;
        }
        let inner = marginalize(g, inputs, &state.g[j], Condition::RegionContent(j))?;
        let lifted = DMatrix::from_fn(inputs.len(), r.n, |i, c| inner.means[(inner.row_of[i], c)]);
        for &k in &r.children {
            let direct = marginalize(g, inputs, &state.g[j], Condition::RegionContent(k))?;
            let tower = marginalize(g, inputs, &lifted, Condition::RegionContent(k))?;
            worst = worst.max((&direct.means - &tower.means).amax());
        }
    }
    Ok(worst)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegionDivergence {
    pub f: f64,
    pub gt: f64,
    pub gate: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub regions: BTreeMap<String, RegionDivergence>,
    pub edges: BTreeMap<String, f64>,
    pub max_f: f64,
    pub max_gt: f64,
    pub max_dw: f64,
    pub max_gate: f64,
    pub max_divergence: f64,
    /// `max |E[f' g_out | z] - E[f' | z] E[g_out | z]|` over hidden regions.
    pub decorrelation: f64,
    pub delta_mode: bool,
}

/// Largest decorrelation violation `|E[d g_out | z] - E[d | z] E[g_out | z]|`.
pub fn decorrelation_violation(g: &TeacherGraph, inputs: &InputSet, state: &OracleState) -> Result<f64> {
    let root = g.root();
    let mut worst: f64 = 0.0;
    for (a, r) in g.regions.iter().enumerate() {
        if r.is_leaf() || a == root {
            continue;
        }
        let cond = Condition::RegionEvent(a);
        let prod = state.d[a].component_mul(&state.g_out[a]);
        let e_prod = marginalize(g, inputs, &prod, cond)?;
        let e_d = marginalize(g, inputs, &state.d[a], cond)?;
        let e_g = marginalize(g, inputs, &state.g_out[a], cond)?;
        worst = worst.max((e_prod.means - e_d.means.component_mul(&e_g.means)).amax());
    }
    Ok(worst)
}

/// Runs both the event-space dynamics and the oracle on the same weights and
/// measures how far the dynamics are from the oracle marginals. Leaf
/// activations of the dynamics are the conditional means `E[x | z]`.
pub fn divergence(
    g: &TeacherGraph,
    weights: &WeightSet,
    im: &InputModel,
    opts: &OracleOptions,
    cap: u64,
) -> Result<DivergenceReport> {
    let tables = TableSet::from_teacher(g, cap)?;
    let inputs = enumerate_inputs(g, im, cap)?;
    let ost = net_forward_backward(g, weights, &inputs, opts)?;

    let popts = PassOptions {
        gating: if opts.linear { Gating::Linear } else { Gating::Hard },
        bn_placement: opts.bn_placement,
        leaf_inputs: im.conditional_means(),
    };
    let mut dst = forward_pass(&tables, weights, &popts)?;
    backward_pass(&tables, weights, &mut dst, &opts.top.into(), opts.bn_placement)?;
    let upd = weight_update(&tables, weights, &dst, None)?;

    let mut rep = DivergenceReport {
        delta_mode: im.is_delta(),
        ..Default::default()
    };
    for (a, r) in g.regions.iter().enumerate() {
        let cond = Condition::RegionEvent(a);
        let f = marginalize(g, &inputs, &ost.f[a], cond)?;
        let gm = marginalize(g, &inputs, &ost.g[a], cond)?;
        let d = marginalize(g, &inputs, &ost.d[a], cond)?;
        let prior = &tables.priors[a];
        let gt = DMatrix::from_fn(r.m, r.n, |e, j| prior[e] * gm.means[(e, j)]);
        let div = RegionDivergence {
            f: (&dst.f[a] - &f.means).amax(),
            gt: (&dst.gt[a] - gt).amax(),
            gate: (&dst.d[a] - &d.means).amax(),
        };
        rep.max_f = rep.max_f.max(div.f);
        rep.max_gt = rep.max_gt.max(div.gt);
        rep.max_gate = rep.max_gate.max(div.gate);
        rep.regions.insert(r.id.clone(), div);
    }
    for (e, dw) in &upd.dw {
        let v = (dw - &ost.dw[e]).amax();
        rep.max_dw = rep.max_dw.max(v);
        rep.edges.insert(
            format!("{}<-{}", g.regions[e.parent].id, g.regions[e.child].id),
            v,
        );
    }
    rep.max_divergence = rep.max_f.max(rep.max_gt).max(rep.max_dw);
    rep.decorrelation = decorrelation_violation(g, &inputs, &ost)?;
    Ok(rep)
}

/// [`divergence`] restricted to the regime where the two must agree:
/// delta inputs and injective summarizations.
pub fn compare_exactness(
    g: &TeacherGraph,
    weights: &WeightSet,
    im: &InputModel,
    opts: &OracleOptions,
    cap: u64,
) -> Result<DivergenceReport> {
    if !im.is_delta() {
        return Err(Error::Precondition(
            "exactness requires one distinct input vector per leaf event".into(),
        ));
    }
    if !g.is_injective() {
        return Err(Error::Precondition(
            "exactness requires every summarization to be injective".into(),
        ));
    }
    divergence(g, weights, im, opts, cap)
}

/// `max |E_x[u_j g_j]|` over Batch Norm regions, where `u` is the linear
/// output fed to Batch Norm and `g` the gradient arriving at it.
pub fn bn_orthogonality(g: &TeacherGraph, inputs: &InputSet, state: &OracleState, weights: &WeightSet) -> f64 {
    let mut worst: f64 = 0.0;
    for &a in weights.bn.keys() {
        if a >= g.regions.len() || state.g[a].nrows() != inputs.len() {
            continue;
        }
        for j in 0..g.regions[a].n {
            let s: f64 = (0..inputs.len())
                .map(|i| inputs.probs[i] * state.linear[a][(i, j)] * state.g[a][(i, j)])
                .sum();
            worst = worst.max(s.abs());
        }
    }
    worst
}
