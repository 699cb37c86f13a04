//! Event-space training dynamics.
//!
//! Activations, gradients and gates are `m x n` matrices indexed by (event,
//! neuron) for every region. One step is
//!
//! ```text
//! F_a  = D_a o sum_{b in ch(a)} P_ab F_b W_ba
//! G~_b = D_b o sum_{a in pa(b)} P_ab^T G~_a W_ba^T
//! dW_ba = (P_ab F_b)^T G~_a
//! ```
//!
//! with `F = I` at the leaves and `G~ = Lambda (I - F)` at the root.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batchnorm::{bn_backward, bn_forward, node_energies, BnParams, BnRecord, EnergyRow, EnergyTrace};
use crate::error::{Error, Result};
use crate::teacher::{Edge, TableSet};

/// Gate value for a pre-activation. Ties at zero are closed.
#[inline]
pub fn relu_gate(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Learnable Batch Norm affine parameters for one region, one entry per neuron.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnAffine {
    pub c1: Vec<f64>,
    pub c0: Vec<f64>,
}

impl BnAffine {
    pub fn identity(n: usize) -> Self {
        BnAffine {
            c1: vec![1.0; n],
            c0: vec![0.0; n],
        }
    }
}

/// Per-edge weights `W_ba` (`n_b x n_a`, or `(n_b + 1) x n_a` with a bias row)
/// plus Batch Norm parameters of the regions that carry one.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightSet {
    pub w: BTreeMap<Edge, DMatrix<f64>>,
    pub bias_augmented: bool,
    pub bn: BTreeMap<usize, BnAffine>,
}

impl WeightSet {
    fn rows_for(&self, tables: &TableSet, e: Edge) -> usize {
        tables.regions[e.child].n + usize::from(self.bias_augmented)
    }

    pub fn zeros(tables: &TableSet, bias_augmented: bool) -> Self {
        let w = tables
            .edges()
            .map(|e| {
                let rows = tables.regions[e.child].n + usize::from(bias_augmented);
                (e, DMatrix::zeros(rows, tables.regions[e.parent].n))
            })
            .collect();
        WeightSet {
            w,
            bias_augmented,
            bn: BTreeMap::new(),
        }
    }

    /// Seeded uniform initialisation in `[-s, s]`, `s = 1 / sqrt(n_child)`.
    /// Bias rows start at zero.
    pub fn init_uniform(tables: &TableSet, seed: u64, bias_augmented: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ws = Self::zeros(tables, bias_augmented);
        for (e, w) in ws.w.iter_mut() {
            let nb = tables.regions[e.child].n;
            let s = 1.0 / (nb as f64).sqrt();
            for r in 0..nb {
                for c in 0..w.ncols() {
                    w[(r, c)] = rng.random_range(-s..=s);
                }
            }
        }
        ws
    }

    /// Adds Batch Norm with `c1 = 1, c0 = 0` after the linear layer of `region`.
    pub fn enable_bn(&mut self, tables: &TableSet, region: usize) {
        let n = tables.regions[region].n;
        self.bn.entry(region).or_insert_with(|| BnAffine::identity(n));
    }

    pub fn validate(&self, tables: &TableSet) -> Result<()> {
        for e in tables.edges() {
            let w = self.w.get(&e).ok_or_else(|| {
                Error::Shape(format!(
                    "no weights for edge {} <- {}",
                    tables.regions[e.parent].id, tables.regions[e.child].id
                ))
            })?;
            let want = (self.rows_for(tables, e), tables.regions[e.parent].n);
            if w.shape() != want {
                return Err(Error::Shape(format!(
                    "W({} <- {}) is {:?}, expected {want:?}",
                    tables.regions[e.parent].id,
                    tables.regions[e.child].id,
                    w.shape()
                )));
            }
        }
        if self.w.len() != tables.tables.len() {
            return Err(Error::Shape("weights present for a non-edge".into()));
        }
        for (&r, aff) in &self.bn {
            let region = tables.regions.get(r).ok_or_else(|| Error::Shape("bn on unknown region".into()))?;
            if region.is_leaf() || r == tables.root() {
                return Err(Error::Shape(format!(
                    "batch norm is only supported on hidden regions, not `{}`",
                    region.id
                )));
            }
            if aff.c1.len() != region.n || aff.c0.len() != region.n {
                return Err(Error::Shape(format!("bn parameters of `{}` have wrong length", region.id)));
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.w.values().all(|w| w.iter().all(|x| x.is_finite()))
            && self
                .bn
                .values()
                .all(|a| a.c1.iter().chain(&a.c0).all(|x| x.is_finite()))
    }

    /// Writes one CSV per edge plus `manifest.json` describing their shapes.
    pub fn write_checkpoint(&self, dir: &Path, tables: &TableSet) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut edges = Vec::new();
        for (e, w) in &self.w {
            let file = format!(
                "W_{}_{}.csv",
                tables.regions[e.child].id, tables.regions[e.parent].id
            );
            let path = dir.join(&file);
            let mut out = csv::WriterBuilder::new()
                .has_headers(false)
                .from_path(&path)?;
            for r in 0..w.nrows() {
                out.write_record(w.row(r).iter().map(|x| x.to_string()))?;
            }
            out.flush().map_err(|err| Error::io(&path, err))?;
            edges.push(ManifestEdge {
                parent: tables.regions[e.parent].id.clone(),
                child: tables.regions[e.child].id.clone(),
                rows: w.nrows(),
                cols: w.ncols(),
                file,
            });
        }
        let manifest = Manifest {
            bias_augmented: self.bias_augmented,
            edges,
            bn: self
                .bn
                .iter()
                .map(|(r, a)| (tables.regions[*r].id.clone(), a.clone()))
                .collect(),
        };
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)
            .map_err(|e| Error::io(&path, e))
    }

    pub fn read_checkpoint(dir: &Path, tables: &TableSet) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let index = |id: &str| {
            tables
                .regions
                .iter()
                .position(|r| r.id == id)
                .ok_or_else(|| Error::Config(format!("checkpoint names unknown region `{id}`")))
        };
        let mut w = BTreeMap::new();
        for me in &manifest.edges {
            let e = Edge::new(index(&me.parent)?, index(&me.child)?);
            let mut reader = csv::ReaderBuilder::new()
                .has_headers(false)
                .from_path(dir.join(&me.file))?;
            let mut data = Vec::with_capacity(me.rows * me.cols);
            for rec in reader.records() {
                for field in rec?.iter() {
                    data.push(field.trim().parse::<f64>().map_err(|err| {
                        Error::Config(format!("bad number in {}: {err}", me.file))
                    })?);
                }
            }
            if data.len() != me.rows * me.cols {
                return Err(Error::Shape(format!("{} does not match its manifest shape", me.file)));
            }
            w.insert(e, DMatrix::from_row_slice(me.rows, me.cols, &data));
        }
        let mut bn = BTreeMap::new();
        for (id, aff) in manifest.bn {
            bn.insert(index(&id)?, aff);
        }
        let ws = WeightSet {
            w,
            bias_augmented: manifest.bias_augmented,
            bn,
        };
        ws.validate(tables)?;
        Ok(ws)
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestEdge {
    parent: String,
    child: String,
    rows: usize,
    cols: usize,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    bias_augmented: bool,
    edges: Vec<ManifestEdge>,
    bn: BTreeMap<String, BnAffine>,
}

/// How the gating matrices `D` are produced.
#[derive(Clone, Debug, PartialEq)]
pub enum Gating {
    /// `D = 1[F_raw > 0]`.
    Hard,
    /// `D = 1` everywhere (linear network).
    Linear,
    /// Externally supplied gates, one per non-leaf region.
    Supplied(BTreeMap<usize, DMatrix<f64>>),
}

/// Serializable subset of [`Gating`] used by training configs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GatingMode {
    Hard,
    Linear,
}

impl From<GatingMode> for Gating {
    fn from(m: GatingMode) -> Self {
        match m {
            GatingMode::Hard => Gating::Hard,
            GatingMode::Linear => Gating::Linear,
        }
    }
}

/// Where Batch Norm sits relative to the ReLU of its region.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnPlacement {
    /// linear -> BN -> ReLU
    #[default]
    PreActivation,
    /// linear -> ReLU -> BN
    PostActivation,
}

/// Boundary condition at the root.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopGradient {
    /// `G~ = Lambda (I - F)`, applied without the root gate.
    #[default]
    Residual,
    /// `G~ = D o Lambda (I - F)`: the exact gradient of the weighted squared loss.
    GatedResidual,
    /// `g_j(z) = a1 [j = z] - a2 [j != z]`, independent of the activations.
    Constant { a1: f64, a2: f64 },
    /// Caller-supplied `G~`.
    Explicit(Vec<Vec<f64>>),
}

/// Options shared by the forward and backward passes.
#[derive(Clone, Debug, PartialEq)]
pub struct PassOptions {
    pub gating: Gating,
    pub bn_placement: BnPlacement,
    /// Leaf activations replacing the identity boundary (must be `m x n`).
    pub leaf_inputs: BTreeMap<usize, DMatrix<f64>>,
}

impl Default for PassOptions {
    fn default() -> Self {
        PassOptions {
            gating: Gating::Hard,
            bn_placement: BnPlacement::PreActivation,
            leaf_inputs: BTreeMap::new(),
        }
    }
}

impl PassOptions {
    pub fn with_gating(gating: Gating) -> Self {
        PassOptions {
            gating,
            ..Default::default()
        }
    }
}

/// Per-region activations, gates and gradients.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerState {
    pub f: Vec<DMatrix<f64>>,
    /// Value the gate is applied to (after BN when BN precedes the ReLU).
    pub fraw: Vec<DMatrix<f64>>,
    /// Output of the linear layer, `sum_b P_ab F_b W_ba`.
    pub linear: Vec<DMatrix<f64>>,
    pub d: Vec<DMatrix<f64>>,
    /// Unnormalized gradient at the linear output; empty until backward runs.
    pub gt: Vec<DMatrix<f64>>,
    /// Batch Norm records per region and neuron.
    pub bn_records: BTreeMap<usize, Vec<BnRecord>>,
    /// Gradients of `[c1, c0]` per region and neuron; filled by backward.
    pub bn_grads: BTreeMap<usize, Vec<[f64; 2]>>,
}

impl LayerState {
    /// `G = Lambda^{-1} G~` for one region.
    pub fn normalized_gradient(&self, tables: &TableSet, region: usize) -> Option<DMatrix<f64>> {
        let gt = self.gt.get(region)?;
        let prior = &tables.priors[region];
        Some(DMatrix::from_fn(gt.nrows(), gt.ncols(), |a, j| gt[(a, j)] / prior[a]))
    }
}

fn with_ones(f: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = f.clone().insert_column(f.ncols(), 1.0);
    // insert_column leaves the new column filled with the given value
    out.set_column(f.ncols(), &DVector::from_element(f.nrows(), 1.0));
    out
}

fn input_of(state: &LayerState, child: usize, bias: bool) -> Cow<'_, DMatrix<f64>> {
    if bias {
        Cow::Owned(with_ones(&state.f[child]))
    } else {
        Cow::Borrowed(&state.f[child])
    }
}

fn bn_columns(
    x: &DMatrix<f64>,
    aff: &BnAffine,
    prior: &DVector<f64>,
) -> Result<(DMatrix<f64>, Vec<BnRecord>)> {
    let mut out = DMatrix::zeros(x.nrows(), x.ncols());
    let mut recs = Vec::with_capacity(x.ncols());
    for j in 0..x.ncols() {
        let col: Vec<f64> = x.column(j).iter().copied().collect();
        let params = BnParams::weighted(aff.c1[j], aff.c0[j], prior.iter().copied().collect());
        let rec = bn_forward(&col, &params)?;
        out.set_column(j, &DVector::from_column_slice(&rec.output));
        recs.push(rec);
    }
    Ok((out, recs))
}

pub fn forward_pass(tables: &TableSet, weights: &WeightSet, opts: &PassOptions) -> Result<LayerState> {
    weights.validate(tables)?;
    let k = tables.regions.len();
    let mut st = LayerState {
        f: vec![DMatrix::zeros(0, 0); k],
        fraw: vec![DMatrix::zeros(0, 0); k],
        linear: vec![DMatrix::zeros(0, 0); k],
        d: vec![DMatrix::zeros(0, 0); k],
        ..Default::default()
    };
    for &a in &tables.topology.order {
        let r = &tables.regions[a];
        if r.is_leaf() {
            let f = match opts.leaf_inputs.get(&a) {
                Some(x) => {
                    if x.shape() != (r.m, r.n) {
                        return Err(Error::Shape(format!(
                            "leaf input for `{}` must be {}x{}",
                            r.id, r.m, r.n
                        )));
                    }
                    x.clone()
                }
                None => {
                    if r.m != r.n {
                        return Err(Error::Shape(format!(
                            "leaf `{}` has m = {} != n = {}; identity boundary needs m = n",
                            r.id, r.m, r.n
                        )));
                    }
                    DMatrix::identity(r.m, r.n)
                }
            };
            st.d[a] = DMatrix::from_element(r.m, r.n, 1.0);
            st.linear[a] = f.clone();
            st.fraw[a] = f.clone();
            st.f[a] = f;
            continue;
        }

        let mut u = DMatrix::zeros(r.m, r.n);
        for &c in &r.children {
            let e = Edge::new(a, c);
            let x = input_of(&st, c, weights.bias_augmented);
            u += &tables.tables[&e].p * x.as_ref() * &weights.w[&e];
        }
        let bn = weights.bn.get(&a);
        let prior = &tables.priors[a];
        let fraw = match (bn, opts.bn_placement) {
            (Some(aff), BnPlacement::PreActivation) => {
                let (v, recs) = bn_columns(&u, aff, prior)?;
                st.bn_records.insert(a, recs);
                v
            }
            _ => u.clone(),
        };
        let d = match &opts.gating {
            Gating::Hard => fraw.map(relu_gate),
            Gating::Linear => DMatrix::from_element(r.m, r.n, 1.0),
            Gating::Supplied(ds) => {
                let d = ds.get(&a).ok_or_else(|| {
                    Error::MissingState(format!("no supplied gates for region `{}`", r.id))
                })?;
                if d.shape() != (r.m, r.n) {
                    return Err(Error::Shape(format!("supplied gates for `{}` have wrong shape", r.id)));
                }
                d.clone()
            }
        };
        let gated = d.component_mul(&fraw);
        let f = match (bn, opts.bn_placement) {
            (Some(aff), BnPlacement::PostActivation) => {
                let (v, recs) = bn_columns(&gated, aff, prior)?;
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
    Ok(st)
}

/// Unnormalized root gradient for the given boundary condition.
pub fn top_gradient(tables: &TableSet, state: &LayerState, top: &TopGradient) -> Result<DMatrix<f64>> {
    let w = tables.root();
    let r = &tables.regions[w];
    let prior = &tables.priors[w];
    let lam = |g: DMatrix<f64>| DMatrix::from_fn(r.m, r.n, |a, j| prior[a] * g[(a, j)]);
    let residual = || -> Result<DMatrix<f64>> {
        if r.m != r.n {
            return Err(Error::Shape(format!(
                "root `{}` has m = {} != n = {}; the residual boundary needs m = n",
                r.id, r.m, r.n
            )));
        }
        Ok(DMatrix::identity(r.m, r.n) - &state.f[w])
    };
    Ok(match top {
        TopGradient::Residual => lam(residual()?),
        TopGradient::GatedResidual => lam(residual()?).component_mul(&state.d[w]),
        TopGradient::Constant { a1, a2 } => {
            lam(DMatrix::from_fn(r.m, r.n, |a, j| if a == j { *a1 } else { -*a2 }))
        }
        TopGradient::Explicit(rows) => {
            if rows.len() != r.m || rows.iter().any(|row| row.len() != r.n) {
                return Err(Error::Shape("explicit top gradient has wrong shape".into()));
            }
            DMatrix::from_fn(r.m, r.n, |a, j| rows[a][j])
        }
    })
}

/// Backward pass; fills `state.gt` (and `state.bn_grads`).
pub fn backward_pass(
    tables: &TableSet,
    weights: &WeightSet,
    state: &mut LayerState,
    top: &TopGradient,
    placement: BnPlacement,
) -> Result<()> {
    let k = tables.regions.len();
    if state.f.len() != k || state.d.len() != k {
        return Err(Error::MissingState("backward pass requires a forward state".into()));
    }
    for (i, r) in tables.regions.iter().enumerate() {
        if state.f[i].shape() != (r.m, r.n) {
            return Err(Error::MissingState(format!("no forward activations for `{}`", r.id)));
        }
    }
    let root = tables.root();
    // Gradient with respect to each region's output F.
    let mut out: Vec<DMatrix<f64>> = tables
        .regions
        .iter()
        .map(|r| DMatrix::zeros(r.m, r.n))
        .collect();
    let mut gt = vec![DMatrix::zeros(0, 0); k];
    state.bn_grads.clear();

    for &a in tables.topology.order.iter().rev() {
        let r = &tables.regions[a];
        if r.is_leaf() {
            gt[a] = out[a].component_mul(&state.d[a]);
            continue;
        }
        let g_lin = if a == root {
            top_gradient(tables, state, top)?
        } else if let Some(recs) = state.bn_records.get(&a) {
            let aff = &weights.bn[&a];
            let prior = &tables.priors[a];
            let through = |g: &DMatrix<f64>, grads: &mut Vec<[f64; 2]>| -> Result<DMatrix<f64>> {
                let mut res = DMatrix::zeros(r.m, r.n);
                for j in 0..r.n {
                    let col: Vec<f64> = (0..r.m).map(|e| g[(e, j)] / prior[e]).collect();
                    let params = BnParams::new(aff.c1[j], aff.c0[j]);
                    let bg = bn_backward(&col, &recs[j], &params)?;
                    for e in 0..r.m {
                        res[(e, j)] = prior[e] * bg.g_f[e];
                    }
                    grads.push(bg.g_c);
                }
                Ok(res)
            };
            let mut grads = Vec::with_capacity(r.n);
            let g = match placement {
                BnPlacement::PreActivation => {
                    through(&out[a].component_mul(&state.d[a]), &mut grads)?
                }
                BnPlacement::PostActivation => through(&out[a], &mut grads)?.component_mul(&state.d[a]),
            };
            state.bn_grads.insert(a, grads);
            g
        } else {
            out[a].component_mul(&state.d[a])
        };

        for &c in &r.children {
            let e = Edge::new(a, c);
            let nb = tables.regions[c].n;
            let w = weights.w[&e].rows(0, nb);
            let contrib = tables.tables[&e].p.transpose() * &g_lin * w.transpose();
            out[c] += contrib;
        }
        gt[a] = g_lin;
    }
    state.gt = gt;
    Ok(())
}

/// Weight and Batch Norm parameter updates from one forward/backward pair.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightUpdate {
    pub dw: BTreeMap<Edge, DMatrix<f64>>,
    pub dbn: BTreeMap<usize, BnAffine>,
}

pub fn weight_update(
    tables: &TableSet,
    weights: &WeightSet,
    state: &LayerState,
    max_update_norm: Option<f64>,
) -> Result<WeightUpdate> {
    if state.gt.len() != tables.regions.len() {
        return Err(Error::MissingState("weight update requires a backward state".into()));
    }
    let mut dw = BTreeMap::new();
    for e in tables.edges() {
        let x = input_of(state, e.child, weights.bias_augmented);
        let pf = &tables.tables[&e].p * x.as_ref();
        let g = &state.gt[e.parent];
        if g.shape() != (pf.nrows(), tables.regions[e.parent].n) {
            return Err(Error::Shape(format!(
                "gradient of `{}` has wrong shape",
                tables.regions[e.parent].id
            )));
        }
        let mut d = pf.transpose() * g;
        if let Some(cap) = max_update_norm {
            let norm = d.norm();
            if norm > cap {
                d *= cap / norm;
            }
        }
        dw.insert(e, d);
    }
    let dbn = state
        .bn_grads
        .iter()
        .map(|(&r, grads)| {
            (
                r,
                BnAffine {
                    c1: grads.iter().map(|g| g[0]).collect(),
                    c0: grads.iter().map(|g| g[1]).collect(),
                },
            )
        })
        .collect();
    Ok(WeightUpdate { dw, dbn })
}

/// `||F_root - I||_F^2`.
pub fn loss(tables: &TableSet, state: &LayerState) -> Result<f64> {
    let w = tables.root();
    let r = &tables.regions[w];
    if r.m != r.n {
        return Err(Error::Shape(format!("root `{}` has m != n", r.id)));
    }
    let f = state
        .f
        .get(w)
        .filter(|f| f.shape() == (r.m, r.n))
        .ok_or_else(|| Error::MissingState("loss requires a forward state".into()))?;
    Ok((f - DMatrix::<f64>::identity(r.m, r.n)).norm_squared())
}

// --------------------------------------------------------------------------
// Training

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub max_update_norm: Option<f64>,
    pub gating: GatingMode,
    pub seed: u64,
    /// Regions whose linear output is batch-normalized.
    pub bn_regions: Vec<usize>,
    pub bn_placement: BnPlacement,
    pub top: TopGradient,
    /// Regions whose node energies are traced each step.
    pub energy_regions: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.1,
            steps: 100,
            max_update_norm: None,
            gating: GatingMode::Hard,
            seed: 0,
            bn_regions: Vec::new(),
            bn_placement: BnPlacement::PreActivation,
            top: TopGradient::Residual,
            energy_regions: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrajectoryEntry {
    pub step: usize,
    pub loss: f64,
    /// Frobenius norm of each edge's update, in [`Trajectory::edges`] order.
    pub update_norms: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub edges: Vec<Edge>,
    pub entries: Vec<TrajectoryEntry>,
    pub energy: EnergyTrace,
    pub final_weights: WeightSet,
}

impl Trajectory {
    pub fn final_loss(&self) -> f64 {
        self.entries.last().map(|e| e.loss).unwrap_or(f64::NAN)
    }

    pub fn min_loss(&self) -> f64 {
        self.entries.iter().map(|e| e.loss).fold(f64::INFINITY, f64::min)
    }

    pub fn write_csv<W: Write>(&self, out: W, tables: &TableSet) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["step".to_string(), "loss".to_string()];
        header.extend(self.edges.iter().map(|e| {
            format!(
                "dW_{}_{}",
                tables.regions[e.child].id, tables.regions[e.parent].id
            )
        }));
        w.write_record(&header)?;
        for en in &self.entries {
            let mut row = vec![en.step.to_string(), en.loss.to_string()];
            row.extend(en.update_norms.iter().map(|x| x.to_string()));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Runs `config.steps` iterations of `W <- W + lr * dW`.
pub fn train(tables: &TableSet, init: &WeightSet, config: &TrainConfig) -> Result<Trajectory> {
    train_with(tables, init, config, |_, t| Cow::Borrowed(t))
}

/// Like [`train`], but the tables used at each step come from `tables_at`.
/// Losses are always reported on `base`.
pub fn train_with<'a, F>(
    base: &'a TableSet,
    init: &WeightSet,
    config: &TrainConfig,
    mut tables_at: F,
) -> Result<Trajectory>
where
    F: FnMut(usize, &'a TableSet) -> Cow<'a, TableSet>,
{
    if !(config.lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {}", config.lr)));
    }
    let mut weights = init.clone();
    for &r in &config.bn_regions {
        weights.enable_bn(base, r);
    }
    weights.validate(base)?;
    let opts = PassOptions {
        gating: config.gating.into(),
        bn_placement: config.bn_placement,
        leaf_inputs: BTreeMap::new(),
    };
    let edges: Vec<Edge> = base.edges().collect();
    let mut entries = Vec::with_capacity(config.steps + 1);
    let mut energy = EnergyTrace::default();

    for step in 0..=config.steps {
        let tables = tables_at(step, base);
        let mut state = forward_pass(&tables, &weights, &opts)?;
        let l = if std::ptr::eq(tables.as_ref(), base) {
            loss(base, &state)?
        } else {
            loss(base, &forward_pass(base, &weights, &opts)?)?
        };
        if !l.is_finite() {
            return Err(Error::NonFinite {
                step,
                what: "loss".into(),
            });
        }
        backward_pass(&tables, &weights, &mut state, &config.top, config.bn_placement)?;
        let upd = weight_update(&tables, &weights, &state, config.max_update_norm)?;
        entries.push(TrajectoryEntry {
            step,
            loss: l,
            update_norms: edges.iter().map(|e| upd.dw[e].norm()).collect(),
        });
        if step == config.steps {
            break;
        }

        let before: Vec<(usize, Vec<f64>)> = config
            .energy_regions
            .iter()
            .map(|&r| (r, node_energies(base, &weights, r)))
            .collect();

        for (e, d) in &upd.dw {
            *weights.w.get_mut(e).expect("validated") += d * config.lr;
        }
        for (r, d) in &upd.dbn {
            let aff = weights.bn.get_mut(r).expect("bn grads only for bn regions");
            aff.c1.iter_mut().zip(&d.c1).for_each(|(c, g)| *c += config.lr * g);
            aff.c0.iter_mut().zip(&d.c0).for_each(|(c, g)| *c += config.lr * g);
        }
        if !weights.is_finite() {
            return Err(Error::NonFinite {
                step,
                what: "weights".into(),
            });
        }

        for (r, e_before) in before {
            let e_after = node_energies(base, &weights, r);
            for j in 0..base.regions[r].n {
                let mut inner = 0.0;
                let mut nsq = 0.0;
                for &c in &base.regions[r].children {
                    let e = Edge::new(r, c);
                    let d = upd.dw[&e].column(j);
                    let w_old = weights.w[&e].column(j) - config.lr * d;
                    inner += w_old.dot(&d);
                    nsq += d.norm_squared();
                }
                energy.rows.push(EnergyRow {
                    step,
                    region: r,
                    node: j,
                    energy: e_before[j],
                    inner,
                    residual: (e_after[j] - e_before[j] - 0.5 * config.lr * config.lr * nsq).abs(),
                    update_norm_sq: nsq,
                });
            }
        }
    }
    Ok(Trajectory {
        edges,
        entries,
        energy,
        final_weights: weights,
    })
}
