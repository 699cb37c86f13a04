use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dynamics::{forward_pass, loss, train, Gating, GatingMode, PassOptions, TrainConfig, WeightSet};
use crate::error::{Error, Result};
use crate::hull::{
    construct_identity_weights, linear_lower_bound, normalize_certificate, svd_truncation_weights,
    vert_invariance_check, vertex_set,
};
use crate::teacher::{dirichlet_uniform, enumeration_cap, TableSet};

use super::{csv_string, csv_table, Comparison, Recorder, Scenario, ScenarioConfig, ScenarioOutput};

/// Random row-stochastic matrix; when `mixed`, the last row is a convex
/// combination of the first two and so is not a vertex.
fn random_table(rng: &mut ChaCha8Rng, rows: usize, cols: usize, mixed: bool) -> DMatrix<f64> {
    let mut p = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        let r = dirichlet_uniform(rng, cols);
        p.row_mut(i).iter_mut().zip(r).for_each(|(x, v)| *x = v);
    }
    if mixed && rows >= 3 {
        let t: f64 = rng.random_range(0.2..0.8);
        let row = p.row(0) * t + p.row(1) * (1.0 - t);
        p.row_mut(rows - 1).copy_from(&row);
    }
    p
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

pub(super) fn run(config: &ScenarioConfig) -> Result<ScenarioOutput> {
    let seed = config.train.seed;
    let cap = enumeration_cap();
    let mut rec = Recorder::new(Scenario::Expressibility, seed, &config.tolerances);
    let mut vert_rows = Vec::new();
    let mut trajectory = String::new();
    let mut relu_trajectory = String::new();

    let teachers = config.teachers_or_err(Scenario::Expressibility)?;
    for (i, (label, g)) in teachers.iter().enumerate() {
        let tables = TableSet::from_teacher(g, cap)?;
        let mut non_vertex = 0usize;
        let mut cert_failures = 0usize;
        for e in tables.edges() {
            let p = &tables.tables[&e].p;
            let rep = vertex_set(p);
            non_vertex += p.nrows() - rep.vert_count;
            for row in 0..p.nrows() {
                let cert_ok = match &rep.certificates[row] {
                    Some(c) => {
                        let d = 1.0 / p.nrows() as f64;
                        let n = normalize_certificate(c, p, row, d);
                        c.verify(p, row, 0.0) && (n.value(&row_vec(p, row)) - d).abs() < 1e-9 && n.margin >= d / 2.0 - 1e-9
                    }
                    None => !rep.vertex_flags[row],
                };
                if rep.vertex_flags[row] && !cert_ok {
                    cert_failures += 1;
                }
                vert_rows.push(vec![
                    label.clone(),
                    tables.regions[e.parent].id.clone(),
                    tables.regions[e.child].id.clone(),
                    row.to_string(),
                    rep.vertex_flags[row].to_string(),
                    rep.residuals[row].to_string(),
                ]);
            }
        }
        rec.metric(format!("vert.{label}.non_vertex_rows"), non_vertex);
        rec.check(format!("vert.{label}.certificate_failures"), cert_failures as f64, Comparison::Le, 0.0);

        let all_vert = non_vertex == 0 && tables.regions.iter().all(|r| r.m == r.n);
        if all_vert {
            let ws = construct_identity_weights(&tables)?;
            let st = forward_pass(&tables, &ws, &PassOptions::default())?;
            let l = loss(&tables, &st)?;
            let mut violations = 0usize;
            for (a, r) in tables.regions.iter().enumerate() {
                if r.is_leaf() {
                    continue;
                }
                let (f, raw) = (&st.f[a], &st.fraw[a]);
                violations += (0..r.m)
                    .flat_map(|e| (0..r.n).map(move |j| (e, j)))
                    .filter(|&(e, j)| {
                        let sign_ok = if e == j { raw[(e, j)] > 0.0 } else { raw[(e, j)] < 0.0 };
                        !sign_ok || f[(e, j)] != if e == j { 1.0 } else { 0.0 }
                    })
                    .count();
            }
            rec.check(format!("construction.{label}.loss"), l, Comparison::Le, 0.0);
            rec.check(
                format!("construction.{label}.pattern_violations"),
                violations as f64,
                Comparison::Le,
                0.0,
            );
        } else {
            let bound = linear_lower_bound(&tables);
            rec.metric(format!("bound.{label}"), &bound);
            match svd_truncation_weights(&tables) {
                Ok(ws) => {
                    let st = forward_pass(&tables, &ws, &PassOptions::with_gating(Gating::Linear))?;
                    let svd_loss = loss(&tables, &st)?;
                    rec.metric(format!("bound.{label}.svd_loss"), svd_loss);
                    rec.check(
                        format!("bound.{label}.svd_gap"),
                        (svd_loss - bound.floor).abs(),
                        Comparison::Lt,
                        1e-4,
                    );
                }
                Err(Error::Precondition(msg)) => {
                    rec.metric(format!("bound.{label}.svd_skipped"), msg);
                }
                Err(e) => return Err(e),
            }
            let lin_cfg = TrainConfig {
                gating: GatingMode::Linear,
                ..config.train.clone()
            };
            let init = WeightSet::init_uniform(&tables, seed.wrapping_add(i as u64), false);
            let lin = train(&tables, &init, &lin_cfg)?;
            rec.check(
                format!("bound.{label}.linear_min_loss"),
                lin.min_loss(),
                Comparison::Ge,
                bound.floor - 1e-6,
            );
            let relu_init = WeightSet::init_uniform(&tables, seed.wrapping_add(i as u64), config.bias);
            match train(&tables, &relu_init, &config.train) {
                Ok(relu) => {
                    rec.metric(format!("bound.{label}.relu_min_loss"), relu.min_loss());
                    if relu_trajectory.is_empty() {
                        relu_trajectory = csv_string(|b| relu.write_csv(b, &tables))?;
                    }
                }
                Err(Error::NonFinite { step, .. }) => {
                    rec.metric(format!("bound.{label}.relu_diverged_at"), step);
                }
                Err(e) => return Err(e),
            }
            if trajectory.is_empty() {
                trajectory = csv_string(|b| lin.write_csv(b, &tables))?;
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inv_rows = Vec::new();
    let mut mismatches = 0usize;
    let mut refused = 0usize;
    let mut not_all_vert = 0usize;
    let n = config.instances.max(1);
    for k in 0..n {
        let mixed = k % 2 == 1;
        let cols = rng.random_range(2..7);
        // generic rows are affinely independent, hence all vertices, when rows <= cols
        let rows = if mixed { rng.random_range(3..8) } else { rng.random_range(2..=cols) };
        let p = random_table(&mut rng, rows, cols, mixed);
        let extra = rng.random_range(0..=(8 - cols).min(2));
        let f = gaussian(&mut rng, cols, cols + extra);
        let inv = vert_invariance_check(&p, &f)?;
        mismatches += inv.mismatched_rows.len();
        if !mixed && !inv.flags_p.iter().all(|&v| v) {
            not_all_vert += 1;
        }
        inv_rows.push(vec![
            k.to_string(),
            rows.to_string(),
            cols.to_string(),
            mixed.to_string(),
            inv.flags_p.iter().filter(|&&x| x).count().to_string(),
            inv.flags_pf.iter().filter(|&&x| x).count().to_string(),
            inv.min_singular_value.to_string(),
        ]);

        let mut deficient = f.clone();
        let r0 = deficient.row(0).into_owned();
        deficient.row_mut(cols - 1).copy_from(&r0);
        if matches!(vert_invariance_check(&p, &deficient), Err(Error::Precondition(_))) {
            refused += 1;
        }
    }
    rec.check("invariance.all_vert_tables_not_all_vert", not_all_vert as f64, Comparison::Le, 0.0);
    rec.check("invariance.mismatched_rows", mismatches as f64, Comparison::Le, 0.0);
    rec.check("invariance.rank_deficient_refused", refused as f64, Comparison::Ge, n as f64);

    let mut files = std::collections::BTreeMap::new();
    files.insert(
        "vert.csv".to_string(),
        csv_table(&["teacher", "parent", "child", "row", "vertex", "residual"], &vert_rows)?,
    );
    files.insert(
        "vert_invariance.csv".to_string(),
        csv_table(
            &["instance", "rows", "cols", "mixed", "vert_p", "vert_pf", "min_singular_value"],
            &inv_rows,
        )?,
    );
    files.insert("relu_trajectory.csv".to_string(), relu_trajectory);
    Ok(ScenarioOutput {
        report: rec.finish(),
        trajectory,
        files,
    })
}

fn row_vec(p: &DMatrix<f64>, i: usize) -> Vec<f64> {
    p.row(i).iter().copied().collect()
}
