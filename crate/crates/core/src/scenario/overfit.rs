use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    backward_pass, forward_pass, train, weight_update, PassOptions, TopGradient, TrainConfig, WeightSet,
};
use crate::error::{Error, Result};
use crate::teacher::{build_teacher, Edge, FnSpec, PriorSpec, RegionSpec, TableSet, TeacherGraph, TeacherSpec, DEFAULT_CAP};

use super::{csv_string, Comparison, Recorder, Scenario, ScenarioConfig, ScenarioOutput};

const MARGINAL_TOL: f64 = 1e-12;
const FLAT_TOL: f64 = 1e-6;
const MIN_RATIO: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OverfitParams {
    /// Strength of the spurious correlation between `z_gamma` and the label.
    pub epsilon: f64,
    /// Gap between the two activations of the spurious branch.
    pub separation: f64,
    /// Gap between the two activations of the true branch.
    pub flat_gap: f64,
    /// When set, also re-estimates the joint from this many samples of an
    /// uncorrelated distribution and reports the resulting gradients.
    pub sample_size: Option<usize>,
}

impl Default for OverfitParams {
    fn default() -> Self {
        OverfitParams {
            epsilon: 0.1,
            separation: 0.8,
            flat_gap: 1e-7,
            sample_size: None,
        }
    }
}

impl OverfitParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::Config(format!("epsilon must lie in (0, 0.5), got {}", self.epsilon)));
        }
        if !(self.separation > 0.0 && self.separation <= 1.0) {
            return Err(Error::Config(format!("separation must lie in (0, 1], got {}", self.separation)));
        }
        if !(self.flat_gap >= 0.0) {
            return Err(Error::Config(format!("flat_gap must be non-negative, got {}", self.flat_gap)));
        }
        Ok(())
    }
}

fn two_branch_teacher(joint: [f64; 4]) -> Result<TeacherGraph> {
    let region = |id: &str, children: &[&str], m, n| RegionSpec {
        id: id.into(),
        children: children.iter().map(|c| c.to_string()).collect(),
        m,
        n,
    };
    let spec = TeacherSpec {
        regions: vec![
            region("la", &[], 2, 2),
            region("lg", &[], 2, 2),
            region("a", &["la"], 2, 1),
            region("g", &["lg"], 2, 1),
            region("w", &["a", "g"], 2, 2),
        ],
        fns: [
            ("a".to_string(), FnSpec::Named("bijective".into())),
            ("g".to_string(), FnSpec::Named("bijective".into())),
            ("w".to_string(), FnSpec::Table(vec![0, 0, 1, 1])),
        ]
        .into_iter()
        .collect(),
        leaf_prior: PriorSpec::Explicit(joint.to_vec()),
        allow_overlap: false,
    };
    build_teacher(&spec)
}

/// Label `z_w = z_a`, with `z_g` unrelated to the label except for a
/// spurious correlation `P(z_w = 1 | z_g = 1) = 0.5 + epsilon`.
pub fn overfit_teacher(epsilon: f64) -> Result<TeacherGraph> {
    if !(epsilon > 0.0 && epsilon < 0.5) {
        return Err(Error::Config(format!("epsilon must lie in (0, 0.5), got {epsilon}")));
    }
    let h = epsilon / 2.0;
    two_branch_teacher([0.25 + h, 0.25 - h, 0.25 - h, 0.25 + h])
}

struct Outcome {
    /// Marginal top gradient of label node 1 at each event of `a` and `g`.
    g_a: [f64; 2],
    g_g: [f64; 2],
    f_a: [f64; 2],
    f_g: [f64; 2],
    dw_true: f64,
    dw_spurious: f64,
}

fn top() -> TopGradient {
    TopGradient::Constant { a1: 1.0, a2: 1.0 }
}

fn weights(tables: &TableSet, params: &OverfitParams, seed: u64) -> WeightSet {
    let mut ws = WeightSet::init_uniform(tables, seed, true);
    let idx = |id: &str| tables.regions.iter().position(|r| r.id == id).expect("region");
    let (la, lg, a, g) = (idx("la"), idx("lg"), idx("a"), idx("g"));
    let s = params.separation;
    ws.w.insert(
        Edge::new(a, la),
        DMatrix::from_column_slice(3, 1, &[1.0, 1.0 + params.flat_gap, 0.0]),
    );
    ws.w.insert(
        Edge::new(g, lg),
        DMatrix::from_column_slice(3, 1, &[0.5 - s / 2.0, 0.5 + s / 2.0, 0.0]),
    );
    ws
}

fn evaluate(tables: &TableSet, ws: &WeightSet) -> Result<Outcome> {
    let mut st = forward_pass(tables, ws, &PassOptions::default())?;
    backward_pass(tables, ws, &mut st, &top(), Default::default())?;
    let upd = weight_update(tables, ws, &st, None)?;
    let idx = |id: &str| tables.regions.iter().position(|r| r.id == id).expect("region");
    let (a, g, w) = (idx("a"), idx("g"), idx("w"));
    let marginal = |child: usize| -> [f64; 2] {
        let p = &tables.tables[&Edge::new(w, child)].p;
        let v = p.transpose() * st.gt[w].column(1);
        [v[0] / tables.priors[child][0], v[1] / tables.priors[child][1]]
    };
    Ok(Outcome {
        g_a: marginal(a),
        g_g: marginal(g),
        f_a: [st.f[a][(0, 0)], st.f[a][(1, 0)]],
        f_g: [st.f[g][(0, 0)], st.f[g][(1, 0)]],
        dw_true: upd.dw[&Edge::new(w, a)].norm(),
        dw_spurious: upd.dw[&Edge::new(w, g)].norm(),
    })
}

/// Empirical joint of `(z_a, z_g)` from `n` draws of independent fair bits.
fn sampled_joint(n: usize, rng: &mut ChaCha8Rng) -> [f64; 4] {
    let mut counts = [0usize; 4];
    for _ in 0..n {
        counts[rng.random_range(0..4)] += 1;
    }
    counts.map(|c| c as f64 / n as f64)
}

pub(super) fn run(config: &ScenarioConfig) -> Result<ScenarioOutput> {
    let params = &config.overfit;
    params.validate()?;
    let seed = config.train.seed;
    let eps = params.epsilon;
    let mut rec = Recorder::new(Scenario::Overfit, seed, &config.tolerances);

    let g = overfit_teacher(eps)?;
    let tables = TableSet::from_teacher(&g, DEFAULT_CAP)?;
    let ws = weights(&tables, params, seed);
    let o = evaluate(&tables, &ws)?;

    let err_a = (o.g_a[0] + 1.0).abs().max((o.g_a[1] - 1.0).abs());
    let err_g = (o.g_g[0] + 2.0 * eps).abs().max((o.g_g[1] - 2.0 * eps).abs());
    rec.check("marginal.true_branch_error", err_a, Comparison::Lt, MARGINAL_TOL);
    rec.check("marginal.spurious_branch_error", err_g, Comparison::Lt, MARGINAL_TOL);
    rec.check("activation.true_branch_spread", (o.f_a[1] - o.f_a[0]).abs(), Comparison::Lt, FLAT_TOL);
    rec.metric("activation.spurious_branch", o.f_g);
    rec.metric("update.true_norm", o.dw_true);
    rec.metric("update.spurious_norm", o.dw_spurious);
    rec.check("update.spurious_norm_positive", o.dw_spurious, Comparison::Gt, 0.0);
    let ratio = if o.dw_true > 0.0 { o.dw_spurious / o.dw_true } else { f64::INFINITY };
    rec.check("update.spurious_to_true_ratio", ratio, Comparison::Gt, MIN_RATIO);

    if let Some(n) = params.sample_size {
        if n == 0 {
            return Err(Error::Config("sample_size must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let joint = sampled_joint(n, &mut rng);
        match two_branch_teacher(joint).and_then(|t| TableSet::from_teacher(&t, DEFAULT_CAP)) {
            Ok(t) => {
                let s = evaluate(&t, &weights(&t, params, seed))?;
                let eps_hat = joint[3] / (joint[1] + joint[3]) - 0.5;
                rec.metric("sampled.epsilon", eps_hat);
                rec.metric("sampled.spurious_gradient", s.g_g);
                rec.metric("sampled.update_ratio", s.dw_spurious / s.dw_true.max(f64::MIN_POSITIVE));
            }
            Err(e) => rec.metric("sampled.skipped", e.to_string()),
        }
    }

    let cfg = TrainConfig {
        top: top(),
        ..config.train.clone()
    };
    let traj = train(&tables, &ws, &cfg)?;
    rec.metric("train.final_loss", traj.final_loss());
    let trajectory = csv_string(|b| traj.write_csv(b, &tables))?;
    Ok(ScenarioOutput {
        report: rec.finish(),
        trajectory,
        files: Default::default(),
    })
}
