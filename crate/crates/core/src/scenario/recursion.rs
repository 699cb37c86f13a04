use crate::dynamics::{train, WeightSet};
use crate::error::Result;
use crate::oracle::{check_recursion, enumerate_inputs, net_forward_backward, InputModel, OracleOptions};
use crate::teacher::{enumeration_cap, TableSet};

use super::{csv_string, csv_table, Comparison, Recorder, Scenario, ScenarioConfig, ScenarioOutput};

pub const RECURSION_TOL: f64 = 1e-12;

pub(super) fn run(config: &ScenarioConfig) -> Result<ScenarioOutput> {
    let seed = config.train.seed;
    let cap = enumeration_cap();
    let mut rec = Recorder::new(Scenario::Recursion, seed, &config.tolerances);
    let mut rows = Vec::new();
    let mut trajectory = String::new();

    for (i, (label, g)) in config.teachers_or_err(Scenario::Recursion)?.into_iter().enumerate() {
        let tables = TableSet::from_teacher(&g, cap)?;
        let ws = WeightSet::init_uniform(&tables, seed.wrapping_add(i as u64), config.bias);
        if i == 0 {
            let traj = train(&tables, &ws, &config.train)?;
            trajectory = csv_string(|buf| traj.write_csv(buf, &tables))?;
        }
        let models = [
            ("delta", InputModel::delta_onehot(&g)?),
            (
                "lossy",
                InputModel::lossy(&g, config.lossy.per_event, config.lossy.noise, seed)?,
            ),
        ];
        for (mode, im) in &models {
            let inputs = enumerate_inputs(&g, im, cap)?;
            let st = net_forward_backward(&g, &ws, &inputs, &OracleOptions::default())?;
            let v = check_recursion(&g, &inputs, &st)?;
            rec.check(format!("recursion.{label}.{mode}"), v, Comparison::Lt, RECURSION_TOL);
            rows.push(vec![label.clone(), mode.to_string(), inputs.len().to_string(), v.to_string()]);
        }
    }
    let files = [(
        "recursion.csv".to_string(),
        csv_table(&["teacher", "inputs", "n_inputs", "violation"], &rows)?,
    )]
    .into_iter()
    .collect();
    Ok(ScenarioOutput {
        report: rec.finish(),
        trajectory,
        files,
    })
}
