use std::borrow::Cow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dynamics::{forward_pass, loss, train, train_with, PassOptions, WeightSet};
use crate::error::{Error, Result};
use crate::teacher::{enumeration_cap, validate_consistency, EventTable, TableSet};

use super::{csv_string, Comparison, Recorder, Scenario, ScenarioConfig, ScenarioOutput};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdParams {
    /// Scale of the multiplicative log-normal noise on table entries.
    pub sigma: f64,
    /// Fresh perturbations used to measure loss sensitivity.
    pub probes: usize,
}

impl Default for SgdParams {
    fn default() -> Self {
        SgdParams { sigma: 0.1, probes: 20 }
    }
}

/// Multiplies every entry of every `P` by `exp(sigma * N(0, 1))` and
/// renormalizes the rows. Region priors are kept; each table's child prior
/// and posterior are recomputed from its parent prior.
pub fn perturb_tables(tables: &TableSet, sigma: f64, rng: &mut impl Rng) -> TableSet {
    let mut out = tables.clone();
    for t in out.tables.values_mut() {
        let mut p = t.p.map(|x| {
            let z: f64 = rng.sample(StandardNormal);
            x * (sigma * z).exp()
        });
        for mut row in p.row_iter_mut() {
            let s = row.sum();
            if s > 0.0 {
                row /= s;
            }
        }
        *t = EventTable::from_conditional(t.parent, t.child, p, t.prior_parent.clone());
    }
    out
}

fn sensitivity(tables: &TableSet, ws: &WeightSet, params: &SgdParams, seed: u64, opts: &PassOptions) -> Result<f64> {
    let base = loss(tables, &forward_pass(tables, ws, opts)?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..params.probes {
        let t = perturb_tables(tables, params.sigma, &mut rng);
        total += (loss(&t, &forward_pass(&t, ws, opts)?)? - base).abs();
    }
    Ok(total / params.probes as f64)
}

pub(super) fn run(config: &ScenarioConfig) -> Result<ScenarioOutput> {
    let params = &config.sgd;
    if !(params.sigma >= 0.0) || params.probes == 0 {
        return Err(Error::Config("sgd needs sigma >= 0 and at least one probe".into()));
    }
    let seed = config.train.seed;
    let mut rec = Recorder::new(Scenario::Sgd, seed, &config.tolerances);
    let teachers = config.teachers_or_err(Scenario::Sgd)?;
    let (label, g) = &teachers[0];
    let tables = TableSet::from_teacher(g, enumeration_cap())?;
    let init = WeightSet::init_uniform(&tables, seed, config.bias);
    let opts = PassOptions::with_gating(config.train.gating.into());

    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut row_violation: f64 = 0.0;
    let perturbed = train_with(&tables, &init, &config.train, |_, base| {
        let t = perturb_tables(base, params.sigma, &mut rng);
        row_violation = row_violation.max(validate_consistency(&t).max_row_violation);
        Cow::Owned(t)
    })?;
    let control = train(&tables, &init, &config.train)?;
    rec.check("perturbation.max_row_violation", row_violation, Comparison::Lt, 1e-12);

    let probe_seed = seed.wrapping_add(2);
    let s_perturbed = sensitivity(&tables, &perturbed.final_weights, params, probe_seed, &opts)?;
    let s_control = sensitivity(&tables, &control.final_weights, params, probe_seed, &opts)?;
    rec.metric("teacher", label);
    rec.metric("perturbed.final_loss", perturbed.final_loss());
    rec.metric("control.final_loss", control.final_loss());
    rec.metric("perturbed.sensitivity", s_perturbed);
    rec.metric("control.sensitivity", s_control);

    let trajectory = csv_string(|b| perturbed.write_csv(b, &tables))?;
    let files = [(
        "control_trajectory.csv".to_string(),
        csv_string(|b| control.write_csv(b, &tables))?,
    )]
    .into_iter()
    .collect();
    Ok(ScenarioOutput {
        report: rec.finish(),
        trajectory,
        files,
    })
}
