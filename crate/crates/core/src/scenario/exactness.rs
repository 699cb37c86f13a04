use crate::dynamics::{train, BnPlacement, WeightSet};
use crate::error::Result;
use crate::oracle::{compare_exactness, divergence, DivergenceReport, InputModel, OracleOptions};
use crate::teacher::{enumeration_cap, TableSet, TeacherGraph};

use super::{csv_string, csv_table, Comparison, Recorder, Scenario, ScenarioConfig, ScenarioOutput};

pub const EXACTNESS_TOL: f64 = 1e-10;

fn hidden_regions(g: &TeacherGraph) -> Vec<usize> {
    let root = g.root();
    (0..g.regions.len())
        .filter(|&r| r != root && !g.regions[r].is_leaf())
        .collect()
}

pub(super) fn run(config: &ScenarioConfig) -> Result<ScenarioOutput> {
    let seed = config.train.seed;
    let cap = enumeration_cap();
    let mut rec = Recorder::new(Scenario::Exactness, seed, &config.tolerances);
    let mut rows = Vec::new();
    let mut trajectory = String::new();
    let mut worst: f64 = 0.0;

    for (i, (label, g)) in config.teachers_or_err(Scenario::Exactness)?.into_iter().enumerate() {
        let tables = TableSet::from_teacher(&g, cap)?;
        let im = InputModel::delta_onehot(&g)?;
        let init = WeightSet::init_uniform(&tables, seed.wrapping_add(i as u64), config.bias);
        let traj = train(&tables, &init, &config.train)?;
        if i == 0 {
            trajectory = csv_string(|buf| traj.write_csv(buf, &tables))?;
        }

        let mut variants: Vec<(&str, WeightSet, OracleOptions)> = vec![
            ("relu", init.clone(), OracleOptions::default()),
            (
                "linear",
                init.clone(),
                OracleOptions {
                    linear: true,
                    ..Default::default()
                },
            ),
            ("trained", traj.final_weights.clone(), OracleOptions::default()),
        ];
        let hidden = hidden_regions(&g);
        if !hidden.is_empty() {
            let mut with_bn = init.clone();
            for &r in &hidden {
                with_bn.enable_bn(&tables, r);
            }
            variants.push(("relu_bn", with_bn.clone(), OracleOptions::default()));
            variants.push((
                "relu_bn_post",
                with_bn,
                OracleOptions {
                    bn_placement: BnPlacement::PostActivation,
                    ..Default::default()
                },
            ));
        }

        for (name, ws, opts) in &variants {
            let rep = match compare_exactness(&g, ws, &im, opts, cap) {
                Ok(r) => r,
                // a dead unit makes post-activation Batch Norm undefined
                Err(crate::Error::ZeroVariance) => {
                    rec.metric(format!("exactness.{label}.{name}.skipped"), "zero variance");
                    continue;
                }
                Err(e) => return Err(e),
            };
            worst = worst.max(rep.max_divergence);
            rec.check(
                format!("exactness.{label}.{name}.max_divergence"),
                rep.max_divergence,
                Comparison::Lt,
                EXACTNESS_TOL,
            );
            push_rows(&mut rows, &label, name, &rep);
        }

        let lossy = InputModel::lossy(&g, config.lossy.per_event, config.lossy.noise, seed)?;
        let rep = divergence(&g, &init, &lossy, &OracleOptions::default(), cap)?;
        rec.metric(format!("lossy.{label}.max_divergence"), rep.max_divergence);
        rec.metric(format!("lossy.{label}.decorrelation"), rep.decorrelation);
        push_rows(&mut rows, &label, "lossy", &rep);
    }
    rec.metric("max_divergence", worst);

    let files = [(
        "exactness.csv".to_string(),
        csv_table(&["teacher", "variant", "region", "f", "gt", "gate"], &rows)?,
    )]
    .into_iter()
    .collect();
    Ok(ScenarioOutput {
        report: rec.finish(),
        trajectory,
        files,
    })
}

fn push_rows(rows: &mut Vec<Vec<String>>, teacher: &str, variant: &str, rep: &DivergenceReport) {
    for (region, d) in &rep.regions {
        rows.push(vec![
            teacher.to_string(),
            variant.to_string(),
            region.clone(),
            d.f.to_string(),
            d.gt.to_string(),
            d.gate.to_string(),
        ]);
    }
}
