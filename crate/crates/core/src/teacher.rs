//! Discrete summarization ladders and the exact event tables they induce.
//!
//! A teacher is a DAG of regions. Leaves carry discrete event variables whose
//! joint law is the leaf prior; every other region computes its event
//! deterministically from the events of its immediate children. All tables
//! are obtained by pushing the leaf prior through those functions, so every
//! probability here is exact up to floating point summation.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default bound on the number of enumerated configurations.
pub const DEFAULT_CAP: u64 = 1_000_000;

/// Environment variable overriding [`DEFAULT_CAP`].
pub const CAP_ENV: &str = "LADDERSIM_CAP";

/// Tolerance used for every probability identity in this module.
pub const PROB_TOL: f64 = 1e-12;

/// Enumeration cap, honouring `LADDERSIM_CAP` when it parses.
pub fn enumeration_cap() -> u64 {
    std::env::var(CAP_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(DEFAULT_CAP)
}

/// A receptive field of the ladder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub id: String,
    /// Indices of child regions; empty for leaves.
    pub children: Vec<usize>,
    /// Number of events the region's variable takes.
    pub m: usize,
    /// Number of student neurons assigned to the region.
    pub n: usize,
    /// Depth from the leaves (leaves are level 0).
    pub level: usize,
}

impl Region {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

/// A parent/child link of the region graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub parent: usize,
    pub child: usize,
}

impl Edge {
    pub fn new(parent: usize, child: usize) -> Self {
        Edge { parent, child }
    }
}

/// Derived structure shared by teachers and table sets.
#[derive(Clone, Debug)]
pub struct Topology {
    pub parents: Vec<Vec<usize>>,
    /// Children before parents.
    pub order: Vec<usize>,
    pub root: usize,
}

impl Topology {
    /// Validates the graph and fills in `level` for each region.
    pub fn build(regions: &mut [Region]) -> Result<Topology> {
        let k = regions.len();
        if k == 0 {
            return Err(Error::InvalidTeacher("no regions".into()));
        }
        let mut parents = vec![Vec::new(); k];
        for (i, r) in regions.iter().enumerate() {
            if r.m == 0 || r.n == 0 {
                return Err(Error::InvalidTeacher(format!(
                    "region `{}` needs m >= 1 and n >= 1",
                    r.id
                )));
            }
            for &c in &r.children {
                if c >= k {
                    return Err(Error::InvalidTeacher(format!(
                        "region `{}` references unknown child {c}",
                        r.id
                    )));
                }
                if parents[c].contains(&i) {
                    return Err(Error::InvalidTeacher(format!(
                        "region `{}` lists child `{}` twice",
                        r.id, regions[c].id
                    )));
                }
                parents[c].push(i);
            }
        }

        // Depth-first post-order; marks: 0 unvisited, 1 on stack, 2 done.
        let mut mark = vec![0u8; k];
        let mut order = Vec::with_capacity(k);
        fn visit(
            i: usize,
            regions: &[Region],
            mark: &mut [u8],
            order: &mut Vec<usize>,
        ) -> Result<()> {
            match mark[i] {
                2 => return Ok(()),
                1 => return Err(Error::Cyclic(regions[i].id.clone())),
                _ => {}
            }
            mark[i] = 1;
            for &c in &regions[i].children {
                visit(c, regions, mark, order)?;
            }
            mark[i] = 2;
            order.push(i);
            Ok(())
        }
        for i in 0..k {
            visit(i, regions, &mut mark, &mut order)?;
        }

        let roots: Vec<usize> = (0..k).filter(|&i| parents[i].is_empty()).collect();
        if roots.len() != 1 {
            let ids: Vec<&str> = roots.iter().map(|&i| regions[i].id.as_str()).collect();
            return Err(Error::InvalidTeacher(format!(
                "expected exactly one root region, found {ids:?}"
            )));
        }

        for &i in &order {
            let level = regions[i]
                .children
                .iter()
                .map(|&c| regions[c].level + 1)
                .max()
                .unwrap_or(0);
            regions[i].level = level;
        }

        Ok(Topology {
            parents,
            order,
            root: roots[0],
        })
    }
}

/// Deterministic map from child event tuples to a parent event.
///
/// The table is indexed by the mixed-radix number of the child events with the
/// first child most significant.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummarizationFn {
    pub region: usize,
    pub table: Vec<usize>,
}

impl SummarizationFn {
    /// True when distinct child tuples always give distinct parent events.
    pub fn is_injective(&self) -> bool {
        let mut seen = std::collections::BTreeSet::new();
        self.table.iter().all(|v| seen.insert(*v))
    }
}

/// Big-endian mixed-radix decoding.
pub fn decode_mixed(mut index: usize, radices: &[usize], out: &mut [usize]) {
    for (slot, &r) in out.iter_mut().zip(radices).rev() {
        *slot = index % r;
        index /= r;
    }
}

/// Big-endian mixed-radix encoding.
pub fn encode_mixed(values: &[usize], radices: &[usize]) -> usize {
    values
        .iter()
        .zip(radices)
        .fold(0, |acc, (&v, &r)| acc * r + v)
}

fn checked_product(xs: impl IntoIterator<Item = usize>) -> u128 {
    xs.into_iter()
        .fold(1u128, |acc, x| acc.saturating_mul(x as u128))
}

/// Validated summarization ladder.
#[derive(Clone, Debug)]
pub struct TeacherGraph {
    pub regions: Vec<Region>,
    /// One function per region; `None` for leaves.
    pub fns: Vec<Option<SummarizationFn>>,
    /// Leaf region indices in the order used to index `leaf_prior`.
    pub leaves: Vec<usize>,
    /// Joint probability over leaf event tuples (big-endian in `leaves` order).
    pub leaf_prior: Vec<f64>,
    pub topology: Topology,
    pub allow_overlap: bool,
}

// --------------------------------------------------------------------------
// Spec file

/// A summarization table as written in a teacher file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FnSpec {
    Table(Vec<usize>),
    /// `"bijective"`, `"xor"` or `"random:<seed>"`.
    Named(String),
}

/// Leaf prior as written in a teacher file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PriorSpec {
    Explicit(Vec<f64>),
    /// `"uniform"` or `"random:<seed>"`.
    Named(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub id: String,
    #[serde(default)]
    pub children: Vec<String>,
    pub m: usize,
    pub n: usize,
}

/// On-disk description of a teacher.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherSpec {
    pub regions: Vec<RegionSpec>,
    #[serde(default)]
    pub fns: BTreeMap<String, FnSpec>,
    pub leaf_prior: PriorSpec,
    #[serde(default)]
    pub allow_overlap: bool,
}

impl TeacherSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

fn parse_seed(s: &str, what: &str) -> Result<u64> {
    s.strip_prefix("random:")
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| Error::InvalidTeacher(format!("unrecognised {what} `{s}`")))
}

/// Seeded Dirichlet(1, ..., 1) sample.
pub fn dirichlet_uniform(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..len)
        .map(|_| rng.sample::<f64, _>(rand_distr::Exp1))
        .collect();
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

fn random_surjection(seed: u64, total: usize, m: usize) -> Result<Vec<usize>> {
    if total < m {
        return Err(Error::InvalidTeacher(format!(
            "cannot build a surjection from {total} child tuples onto {m} events"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..total).collect();
    idx.shuffle(&mut rng);
    let mut table = vec![0; total];
    for (k, &i) in idx.iter().enumerate() {
        table[i] = if k < m { k } else { rng.random_range(0..m) };
    }
    Ok(table)
}

/// Builds and validates a teacher from its description.
///
/// Named tables: `bijective` maps the child tuple index to itself (requires
/// `m` to equal the number of child tuples), `xor` takes the sum of the child
/// events modulo `m`, and `random:<seed>` draws a seeded surjection.
pub fn build_teacher(spec: &TeacherSpec) -> Result<TeacherGraph> {
    let mut index = BTreeMap::new();
    for (i, r) in spec.regions.iter().enumerate() {
        if index.insert(r.id.clone(), i).is_some() {
            return Err(Error::InvalidTeacher(format!("duplicate region id `{}`", r.id)));
        }
    }
    let mut regions = Vec::with_capacity(spec.regions.len());
    for r in &spec.regions {
        let children = r
            .children
            .iter()
            .map(|c| {
                index.get(c).copied().ok_or_else(|| {
                    Error::InvalidTeacher(format!("region `{}` has unknown child `{c}`", r.id))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        regions.push(Region {
            id: r.id.clone(),
            children,
            m: r.m,
            n: r.n,
            level: 0,
        });
    }
    Topology::build(&mut regions)?;
    for key in spec.fns.keys() {
        match index.get(key) {
            Some(&i) if !regions[i].is_leaf() => {}
            Some(_) => {
                return Err(Error::InvalidTeacher(format!(
                    "leaf region `{key}` cannot have a summarization function"
                )))
            }
            None => {
                return Err(Error::InvalidTeacher(format!(
                    "function given for unknown region `{key}`"
                )))
            }
        }
    }

    let mut fns = Vec::with_capacity(regions.len());
    for (i, r) in regions.iter().enumerate() {
        if r.is_leaf() {
            fns.push(None);
            continue;
        }
        let radices: Vec<usize> = r.children.iter().map(|&c| regions[c].m).collect();
        let total = checked_product(radices.iter().copied());
        if total > usize::MAX as u128 / 2 {
            return Err(Error::InvalidTeacher(format!("region `{}` has too many child tuples", r.id)));
        }
        let total = total as usize;
        let table = match spec.fns.get(&r.id) {
            None => {
                return Err(Error::InvalidTeacher(format!(
                    "region `{}` has no summarization function",
                    r.id
                )))
            }
            Some(FnSpec::Table(t)) => t.clone(),
            Some(FnSpec::Named(name)) => match name.as_str() {
                "bijective" => {
                    if total != r.m {
                        return Err(Error::InvalidTeacher(format!(
                            "bijective region `{}` needs m = {total}, got {}",
                            r.id, r.m
                        )));
                    }
                    (0..total).collect()
                }
                "xor" => {
                    let mut vals = vec![0; radices.len()];
                    (0..total)
                        .map(|t| {
                            decode_mixed(t, &radices, &mut vals);
                            vals.iter().sum::<usize>() % r.m
                        })
                        .collect()
                }
                other => random_surjection(parse_seed(other, "function")?, total, r.m)?,
            },
        };
        fns.push(Some(SummarizationFn { region: i, table }));
    }

    let leaves: Vec<usize> = (0..regions.len()).filter(|&i| regions[i].is_leaf()).collect();
    let n_tuples = checked_product(leaves.iter().map(|&l| regions[l].m));
    let leaf_prior = match &spec.leaf_prior {
        PriorSpec::Explicit(v) => v.clone(),
        PriorSpec::Named(s) if s == "uniform" => {
            let n = n_tuples as usize;
            vec![1.0 / n as f64; n]
        }
        PriorSpec::Named(s) => {
            let mut rng = ChaCha8Rng::seed_from_u64(parse_seed(s, "leaf prior")?);
            dirichlet_uniform(&mut rng, n_tuples as usize)
        }
    };

    TeacherGraph::new(regions, fns, leaf_prior, spec.allow_overlap)
}

impl TeacherGraph {
    /// Assembles a teacher from already-indexed parts and checks every invariant.
    pub fn new(
        mut regions: Vec<Region>,
        fns: Vec<Option<SummarizationFn>>,
        leaf_prior: Vec<f64>,
        allow_overlap: bool,
    ) -> Result<Self> {
        let topology = Topology::build(&mut regions)?;
        if fns.len() != regions.len() {
            return Err(Error::InvalidTeacher("one function slot per region required".into()));
        }
        for (i, r) in regions.iter().enumerate() {
            let ps = &topology.parents[i];
            if ps.len() > 1 && (!allow_overlap || !r.is_leaf()) {
                return Err(Error::InvalidTeacher(format!(
                    "region `{}` has {} parents; receptive fields must form a tree{}",
                    r.id,
                    ps.len(),
                    if allow_overlap { " above the leaves" } else { "" }
                )));
            }
            match (&fns[i], r.is_leaf()) {
                (None, true) => {}
                (Some(_), true) => {
                    return Err(Error::InvalidTeacher(format!("leaf `{}` has a function", r.id)))
                }
                (None, false) => {
                    return Err(Error::InvalidTeacher(format!("region `{}` has no function", r.id)))
                }
                (Some(f), false) => {
                    let total: usize = r.children.iter().map(|&c| regions[c].m).product();
                    if f.table.len() != total {
                        return Err(Error::InvalidTeacher(format!(
                            "table of `{}` has {} entries, expected {total}",
                            r.id,
                            f.table.len()
                        )));
                    }
                    let mut hit = vec![false; r.m];
                    for &v in &f.table {
                        if v >= r.m {
                            return Err(Error::InvalidTeacher(format!(
                                "table of `{}` maps to event {v} >= m = {}",
                                r.id, r.m
                            )));
                        }
                        hit[v] = true;
                    }
                    if let Some(event) = hit.iter().position(|h| !h) {
                        return Err(Error::NonSurjective {
                            region: r.id.clone(),
                            event,
                        });
                    }
                }
            }
        }

        let leaves: Vec<usize> = (0..regions.len()).filter(|&i| regions[i].is_leaf()).collect();
        let n_tuples = checked_product(leaves.iter().map(|&l| regions[l].m));
        if leaf_prior.len() as u128 != n_tuples {
            return Err(Error::NonStochasticPrior(format!(
                "expected {n_tuples} entries, got {}",
                leaf_prior.len()
            )));
        }
        if let Some(bad) = leaf_prior.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
            return Err(Error::NonStochasticPrior(format!("entry {bad} is not a probability")));
        }
        let total: f64 = leaf_prior.iter().sum();
        if (total - 1.0).abs() > PROB_TOL {
            return Err(Error::NonStochasticPrior(format!("entries sum to {total}")));
        }

        Ok(TeacherGraph {
            regions,
            fns,
            leaves,
            leaf_prior,
            topology,
            allow_overlap,
        })
    }

    pub fn root(&self) -> usize {
        self.topology.root
    }

    pub fn region_index(&self, id: &str) -> Option<usize> {
        self.regions.iter().position(|r| r.id == id)
    }

    pub fn leaf_radices(&self) -> Vec<usize> {
        self.leaves.iter().map(|&l| self.regions[l].m).collect()
    }

    /// Number of leaf event tuples.
    pub fn leaf_tuple_count(&self) -> u128 {
        checked_product(self.leaf_radices())
    }

    /// Pushes one leaf tuple through the ladder, returning every region's event.
    pub fn evaluate(&self, leaf_values: &[usize]) -> Vec<usize> {
        let mut z = vec![0usize; self.regions.len()];
        for (&l, &v) in self.leaves.iter().zip(leaf_values) {
            z[l] = v;
        }
        for &i in &self.topology.order {
            if let Some(f) = &self.fns[i] {
                let r = &self.regions[i];
                let idx = r
                    .children
                    .iter()
                    .fold(0, |acc, &c| acc * self.regions[c].m + z[c]);
                z[i] = f.table[idx];
            }
        }
        z
    }

    /// True when every summarization function is injective.
    pub fn is_injective(&self) -> bool {
        self.fns.iter().flatten().all(SummarizationFn::is_injective)
    }

    /// Leaf regions under `region` (in `leaves` order).
    pub fn leaves_under(&self, region: usize) -> Vec<usize> {
        let mut inside = vec![false; self.regions.len()];
        let mut stack = vec![region];
        while let Some(i) = stack.pop() {
            if !inside[i] {
                inside[i] = true;
                stack.extend(self.regions[i].children.iter().copied());
            }
        }
        self.leaves.iter().copied().filter(|&l| inside[l]).collect()
    }
}

// --------------------------------------------------------------------------
// Enumeration

/// Exact marginals and parent/child joints of every region variable.
#[derive(Clone, Debug)]
pub struct EventJoint {
    pub marginals: Vec<DVector<f64>>,
    /// `P(z_parent = a, z_child = b)` as an `m_parent x m_child` matrix.
    pub pair_joints: BTreeMap<Edge, DMatrix<f64>>,
}

/// Enumerates every leaf tuple and accumulates all marginals and pair joints.
pub fn enumerate_events(g: &TeacherGraph, cap: u64) -> Result<EventJoint> {
    let required = g.leaf_tuple_count();
    if required > cap as u128 {
        return Err(Error::CapExceeded { required, cap });
    }
    let mut marginals: Vec<DVector<f64>> =
        g.regions.iter().map(|r| DVector::zeros(r.m)).collect();
    let mut pair_joints = BTreeMap::new();
    for (i, r) in g.regions.iter().enumerate() {
        for &c in &r.children {
            pair_joints.insert(Edge::new(i, c), DMatrix::zeros(r.m, g.regions[c].m));
        }
    }
    let radices = g.leaf_radices();
    let mut vals = vec![0usize; radices.len()];
    for (t, &p) in g.leaf_prior.iter().enumerate() {
        decode_mixed(t, &radices, &mut vals);
        let z = g.evaluate(&vals);
        for (i, m) in marginals.iter_mut().enumerate() {
            m[z[i]] += p;
        }
        for (e, joint) in pair_joints.iter_mut() {
            joint[(z[e.parent], z[e.child])] += p;
        }
    }
    Ok(EventJoint {
        marginals,
        pair_joints,
    })
}

/// Conditional tables between a region and one of its children.
#[derive(Clone, Debug, PartialEq)]
pub struct EventTable {
    pub parent: usize,
    pub child: usize,
    /// `P(z_child = b | z_parent = a)`, rows indexed by the parent event.
    pub p: DMatrix<f64>,
    /// `P(z_parent = a | z_child = b)`, same `m_parent x m_child` layout.
    pub pb: DMatrix<f64>,
    pub prior_parent: DVector<f64>,
    pub prior_child: DVector<f64>,
}

impl EventTable {
    /// Completes a table from `P(z_child | z_parent)` and the parent prior.
    /// Child events with zero mass get a zero column in `pb`.
    pub fn from_conditional(parent: usize, child: usize, p: DMatrix<f64>, prior_parent: DVector<f64>) -> Self {
        let prior_child = p.transpose() * &prior_parent;
        let pb = DMatrix::from_fn(p.nrows(), p.ncols(), |a, b| {
            if prior_child[b] > 0.0 {
                p[(a, b)] * prior_parent[a] / prior_child[b]
            } else {
                0.0
            }
        });
        EventTable {
            parent,
            child,
            p,
            pb,
            prior_parent,
            prior_child,
        }
    }

    /// Largest entrywise violation of `Lambda_child Pb^T = P^T Lambda_parent`.
    pub fn lambda_violation(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for a in 0..self.p.nrows() {
            for b in 0..self.p.ncols() {
                let lhs = self.prior_child[b] * self.pb[(a, b)];
                let rhs = self.p[(a, b)] * self.prior_parent[a];
                worst = worst.max((lhs - rhs).abs());
            }
        }
        worst
    }

    /// Writes `P` as CSV, one row per parent event.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["parent_event".to_string()];
        header.extend((0..self.p.ncols()).map(|b| format!("p_child_{b}")));
        w.write_record(&header)?;
        for a in 0..self.p.nrows() {
            let mut row = vec![a.to_string()];
            row.extend(self.p.row(a).iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

impl EventJoint {
    /// Conditional table for `child` under `parent`.
    pub fn conditional_table(&self, g: &TeacherGraph, parent: usize, child: usize) -> Result<EventTable> {
        let joint = self.pair_joints.get(&Edge::new(parent, child)).ok_or_else(|| {
            Error::InvalidTeacher(format!(
                "`{}` is not a child of `{}`",
                g.regions[child].id, g.regions[parent].id
            ))
        })?;
        let pa = &self.marginals[parent];
        let pc = &self.marginals[child];
        for (region, prior) in [(parent, pa), (child, pc)] {
            if let Some(event) = prior.iter().position(|&p| p <= 0.0) {
                return Err(Error::ZeroPrior {
                    region: g.regions[region].id.clone(),
                    event,
                });
            }
        }
        let mut p = joint.clone();
        let mut pb = joint.clone();
        for a in 0..joint.nrows() {
            for b in 0..joint.ncols() {
                p[(a, b)] /= pa[a];
                pb[(a, b)] /= pc[b];
            }
        }
        Ok(EventTable {
            parent,
            child,
            p,
            pb,
            prior_parent: pa.clone(),
            prior_child: pc.clone(),
        })
    }
}

impl TeacherGraph {
    /// Convenience wrapper enumerating with the configured cap.
    pub fn conditional_table(&self, parent: usize, child: usize) -> Result<EventTable> {
        enumerate_events(self, enumeration_cap())?.conditional_table(self, parent, child)
    }
}

// --------------------------------------------------------------------------
// Table sets

/// Everything the event-space dynamics consume: region shapes, one conditional
/// table per edge and the prior of every region.
#[derive(Clone, Debug)]
pub struct TableSet {
    pub regions: Vec<Region>,
    pub topology: Topology,
    pub tables: BTreeMap<Edge, EventTable>,
    pub priors: Vec<DVector<f64>>,
}

impl TableSet {
    pub fn from_teacher(g: &TeacherGraph, cap: u64) -> Result<Self> {
        let joint = enumerate_events(g, cap)?;
        let mut tables = BTreeMap::new();
        for e in joint.pair_joints.keys() {
            tables.insert(*e, joint.conditional_table(g, e.parent, e.child)?);
        }
        for (i, m) in joint.marginals.iter().enumerate() {
            if let Some(event) = m.iter().position(|&p| p <= 0.0) {
                return Err(Error::ZeroPrior {
                    region: g.regions[i].id.clone(),
                    event,
                });
            }
        }
        Ok(TableSet {
            regions: g.regions.clone(),
            topology: g.topology.clone(),
            tables,
            priors: joint.marginals,
        })
    }

    /// Builds a table set from hand-made parts, checking shapes only.
    /// Use [`validate_consistency`] to audit the probabilities themselves.
    pub fn from_parts(
        mut regions: Vec<Region>,
        tables: BTreeMap<Edge, EventTable>,
        priors: Vec<DVector<f64>>,
    ) -> Result<Self> {
        let topology = Topology::build(&mut regions)?;
        if priors.len() != regions.len() {
            return Err(Error::Shape("one prior per region required".into()));
        }
        for (i, r) in regions.iter().enumerate() {
            if priors[i].len() != r.m {
                return Err(Error::Shape(format!("prior of `{}` has wrong length", r.id)));
            }
            for &c in &r.children {
                let t = tables.get(&Edge::new(i, c)).ok_or_else(|| {
                    Error::Shape(format!("missing table ({} <- {})", r.id, regions[c].id))
                })?;
                if t.p.shape() != (r.m, regions[c].m) || t.pb.shape() != t.p.shape() {
                    return Err(Error::Shape(format!(
                        "table ({} <- {}) must be {}x{}",
                        r.id, regions[c].id, r.m, regions[c].m
                    )));
                }
            }
        }
        if tables.len() != regions.iter().map(|r| r.children.len()).sum::<usize>() {
            return Err(Error::Shape("table for a non-edge".into()));
        }
        Ok(TableSet {
            regions,
            topology,
            tables,
            priors,
        })
    }

    pub fn root(&self) -> usize {
        self.topology.root
    }

    pub fn table(&self, parent: usize, child: usize) -> &EventTable {
        &self.tables[&Edge::new(parent, child)]
    }

    pub fn edges(&self) -> impl Iterator<Item = Edge> + '_ {
        self.tables.keys().copied()
    }
}

/// Worst-case violations across a table set.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ConsistencyReport {
    pub max_row_violation: f64,
    pub max_range_violation: f64,
    pub max_lambda_violation: f64,
    pub max_marginal_disagreement: f64,
    /// Human-readable description of each violation above tolerance.
    pub flagged: Vec<String>,
}

impl ConsistencyReport {
    pub fn is_clean(&self) -> bool {
        self.flagged.is_empty()
    }
}

/// Audits row-stochasticity, the prior identity and cross-table marginals.
pub fn validate_consistency(set: &TableSet) -> ConsistencyReport {
    let mut rep = ConsistencyReport::default();
    let name = |e: &Edge| {
        format!(
            "({} <- {})",
            set.regions[e.parent].id, set.regions[e.child].id
        )
    };
    for (e, t) in &set.tables {
        for a in 0..t.p.nrows() {
            let dev = (t.p.row(a).sum() - 1.0).abs();
            rep.max_row_violation = rep.max_row_violation.max(dev);
            if dev > PROB_TOL {
                rep.flagged
                    .push(format!("row {a} of {} sums to {}", name(e), t.p.row(a).sum()));
            }
        }
        let range = t
            .p
            .iter()
            .map(|&x| if x < 0.0 { -x } else if x > 1.0 { x - 1.0 } else { 0.0 })
            .fold(0.0, f64::max);
        rep.max_range_violation = rep.max_range_violation.max(range);
        if range > PROB_TOL {
            rep.flagged.push(format!("{} has entries outside [0, 1]", name(e)));
        }
        let lam = t.lambda_violation();
        rep.max_lambda_violation = rep.max_lambda_violation.max(lam);
        if lam > PROB_TOL {
            rep.flagged
                .push(format!("{} violates the prior identity by {lam:e}", name(e)));
        }
        // Marginal of the child implied through this parent.
        let implied = t.p.transpose() * &set.priors[e.parent];
        let dis = (&implied - &set.priors[e.child]).amax();
        rep.max_marginal_disagreement = rep.max_marginal_disagreement.max(dis);
        if dis > PROB_TOL {
            rep.flagged.push(format!(
                "marginal of `{}` implied by {} disagrees by {dis:e}",
                set.regions[e.child].id,
                name(e)
            ));
        }
    }
    rep
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairing(fn_spec: FnSpec, prior: PriorSpec) -> TeacherSpec {
        TeacherSpec {
            regions: vec![
                RegionSpec { id: "a".into(), children: vec![], m: 2, n: 2 },
                RegionSpec { id: "b".into(), children: vec![], m: 2, n: 2 },
                RegionSpec { id: "w".into(), children: vec!["a".into(), "b".into()], m: 4, n: 4 },
            ],
            fns: [("w".to_string(), fn_spec)].into_iter().collect(),
            leaf_prior: prior,
            allow_overlap: false,
        }
    }

    fn xor() -> TeacherGraph {
        let mut spec = pairing(FnSpec::Named("xor".into()), PriorSpec::Named("uniform".into()));
        spec.regions[2].m = 2;
        spec.regions[2].n = 2;
        build_teacher(&spec).unwrap()
    }

    #[test]
    fn bijective_pairing_is_uniform_at_root() {
        let g = build_teacher(&pairing(
            FnSpec::Named("bijective".into()),
            PriorSpec::Named("uniform".into()),
        ))
        .unwrap();
        let j = enumerate_events(&g, DEFAULT_CAP).unwrap();
        for p in j.marginals[g.root()].iter() {
            assert!((p - 0.25).abs() < 1e-15);
        }
        let t = j.conditional_table(&g, 2, 0).unwrap();
        for a in 0..4 {
            let row = t.p.row(a);
            assert_eq!(row.iter().filter(|&&x| x == 1.0).count(), 1);
            assert_eq!(row.iter().filter(|&&x| x == 0.0).count(), 1);
        }
    }

    #[test]
    fn constant_summarization_is_rejected() {
        let err = build_teacher(&pairing(
            FnSpec::Table(vec![0, 0, 0, 0]),
            PriorSpec::Named("uniform".into()),
        ))
        .unwrap_err();
        assert!(matches!(err, Error::NonSurjective { event: 1, .. }), "{err}");
    }

    #[test]
    fn xor_tables_are_uninformative() {
        let g = xor();
        let j = enumerate_events(&g, DEFAULT_CAP).unwrap();
        assert_eq!(j.marginals[2].as_slice(), &[0.5, 0.5]);
        let joint = &j.pair_joints[&Edge::new(2, 0)];
        assert!(joint.iter().all(|&x| x == 0.25));
        let t = j.conditional_table(&g, 2, 0).unwrap();
        assert!(t.p.iter().all(|&x| x == 0.5));
    }

    #[test]
    fn identity_root_reproduces_leaf_prior() {
        let spec = TeacherSpec {
            regions: vec![
                RegionSpec { id: "x".into(), children: vec![], m: 3, n: 3 },
                RegionSpec { id: "w".into(), children: vec!["x".into()], m: 3, n: 3 },
            ],
            fns: [("w".to_string(), FnSpec::Named("bijective".into()))].into_iter().collect(),
            leaf_prior: PriorSpec::Explicit(vec![0.2, 0.3, 0.5]),
            allow_overlap: false,
        };
        let g = build_teacher(&spec).unwrap();
        let j = enumerate_events(&g, DEFAULT_CAP).unwrap();
        let joint = &j.pair_joints[&Edge::new(1, 0)];
        assert_eq!(joint, &DMatrix::from_diagonal(&DVector::from_vec(vec![0.2, 0.3, 0.5])));
    }

    #[test]
    fn prior_and_graph_errors() {
        let bad = build_teacher(&pairing(
            FnSpec::Named("bijective".into()),
            PriorSpec::Explicit(vec![0.3, 0.3, 0.3, 0.3]),
        ));
        assert!(matches!(bad, Err(Error::NonStochasticPrior(_))));

        let mut cyc = pairing(FnSpec::Named("bijective".into()), PriorSpec::Named("uniform".into()));
        cyc.regions[0].children = vec!["w".into()];
        cyc.fns.insert("a".into(), FnSpec::Named("bijective".into()));
        assert!(matches!(build_teacher(&cyc), Err(Error::Cyclic(_))));
    }

    #[test]
    fn cap_is_enforced() {
        let g = xor();
        assert!(matches!(
            enumerate_events(&g, 3),
            Err(Error::CapExceeded { required: 4, cap: 3 })
        ));
    }

    #[test]
    fn zero_prior_event_is_named() {
        // Event 3 of the root is reachable by the table but has no mass.
        let g = build_teacher(&pairing(
            FnSpec::Named("bijective".into()),
            PriorSpec::Explicit(vec![0.5, 0.25, 0.25, 0.0]),
        ))
        .unwrap();
        let err = g.conditional_table(2, 0).unwrap_err();
        assert!(matches!(err, Error::ZeroPrior { ref region, event: 3 } if region == "w"));
    }

    #[test]
    fn injected_row_defect_is_flagged() {
        let g = xor();
        let mut set = TableSet::from_teacher(&g, DEFAULT_CAP).unwrap();
        assert!(validate_consistency(&set).is_clean());
        let t = set.tables.get_mut(&Edge::new(2, 1)).unwrap();
        t.p[(0, 0)] = 0.4;
        let rep = validate_consistency(&set);
        assert!((rep.max_row_violation - 0.1).abs() < 1e-12);
        assert!(rep.flagged.iter().any(|f| f.contains("row 0")));
    }

    #[test]
    fn shared_leaf_marginals_agree() {
        let spec = TeacherSpec {
            regions: vec![
                RegionSpec { id: "l0".into(), children: vec![], m: 2, n: 2 },
                RegionSpec { id: "l1".into(), children: vec![], m: 2, n: 2 },
                RegionSpec { id: "l2".into(), children: vec![], m: 2, n: 2 },
                RegionSpec { id: "a".into(), children: vec!["l0".into(), "l1".into()], m: 3, n: 2 },
                RegionSpec { id: "b".into(), children: vec!["l1".into(), "l2".into()], m: 2, n: 2 },
                RegionSpec { id: "w".into(), children: vec!["a".into(), "b".into()], m: 4, n: 4 },
            ],
            fns: [
                ("a".to_string(), FnSpec::Named("random:1".into())),
                ("b".to_string(), FnSpec::Named("xor".into())),
                ("w".to_string(), FnSpec::Named("random:2".into())),
            ]
            .into_iter()
            .collect(),
            leaf_prior: PriorSpec::Named("random:42".into()),
            allow_overlap: true,
        };
        let g = build_teacher(&spec).unwrap();
        let set = TableSet::from_teacher(&g, DEFAULT_CAP).unwrap();
        let via_a = set.table(3, 1).p.transpose() * &set.priors[3];
        let via_b = set.table(4, 1).p.transpose() * &set.priors[4];
        assert!((via_a - via_b).amax() < 1e-12);
        assert!(validate_consistency(&set).is_clean());

        let mut tree_only = spec.clone();
        tree_only.allow_overlap = false;
        assert!(matches!(build_teacher(&tree_only), Err(Error::InvalidTeacher(_))));
    }

    #[test]
    fn csv_rows_are_parent_events() {
        let g = xor();
        let t = g.conditional_table(2, 0).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "parent_event,p_child_0,p_child_1\n0,0.5,0.5\n1,0.5,0.5\n");
    }
}
