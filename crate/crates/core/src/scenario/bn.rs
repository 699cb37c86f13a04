use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::batchnorm::{
    bn_backward, bn_forward, complement_projection, elementwise_backward, jacobian, weighted_dot, BnParams,
};
use crate::dynamics::{BnPlacement, TrainConfig, WeightSet};
use crate::error::{Error, Result};
use crate::oracle::{bn_orthogonality, enumerate_inputs, net_forward_backward, InputModel, OracleOptions};
use crate::teacher::{dirichlet_uniform, enumeration_cap, Edge, TableSet};

use super::{csv_string, Comparison, Recorder, Scenario, ScenarioConfig, ScenarioOutput};

const FD_STEP: f64 = 1e-5;

#[derive(Default)]
struct ProjectionStats {
    orthogonality: f64,
    jacobian_kernel: f64,
    finite_difference: f64,
    elementwise: f64,
    idempotence: f64,
}

fn weighted_output_loss(f: &[f64], g: &[f64], params: &BnParams) -> Result<f64> {
    let rec = bn_forward(f, params)?;
    Ok(weighted_dot(g, &rec.output, &rec.weights))
}

fn projection_checks(rng: &mut ChaCha8Rng, trials: usize) -> Result<ProjectionStats> {
    let mut st = ProjectionStats::default();
    for _ in 0..trials {
        let n = rng.random_range(3..9);
        let f: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let g: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c1 = rng.random_range(0.5..2.0);
        let c0 = rng.random_range(-1.0..1.0);
        let w = dirichlet_uniform(rng, n);
        let params = BnParams::weighted(c1, c0, w.clone());
        let rec = bn_forward(&f, &params)?;
        let grad = bn_backward(&g, &rec, &params)?;

        let ones = vec![1.0; n];
        st.orthogonality = st
            .orthogonality
            .max(weighted_dot(&grad.g_f, &rec.standardized, &w).abs())
            .max(weighted_dot(&grad.g_f, &ones, &w).abs())
            .max(weighted_dot(&grad.g_f, &f, &w).abs());

        let j = jacobian(&rec, c1);
        let jf = (&j * DVector::from_column_slice(&f)).amax();
        let j1 = (&j * DVector::from_element(n, 1.0)).amax();
        st.jacobian_kernel = st.jacobian_kernel.max(jf).max(j1);

        for k in 0..n {
            let mut fp = f.clone();
            let mut fm = f.clone();
            fp[k] += FD_STEP;
            fm[k] -= FD_STEP;
            let fd = (weighted_output_loss(&fp, &g, &params)? - weighted_output_loss(&fm, &g, &params)?)
                / (2.0 * FD_STEP);
            st.finite_difference = st.finite_difference.max((fd - w[k] * grad.g_f[k]).abs());
        }
        for (i, analytic) in grad.g_c.iter().enumerate() {
            let mut pp = params.clone();
            let mut pm = params.clone();
            if i == 0 {
                pp.c1 += FD_STEP;
                pm.c1 -= FD_STEP;
            } else {
                pp.c0 += FD_STEP;
                pm.c0 -= FD_STEP;
            }
            let fd = (weighted_output_loss(&f, &g, &pp)? - weighted_output_loss(&f, &g, &pm)?) / (2.0 * FD_STEP);
            st.finite_difference = st.finite_difference.max((fd - analytic).abs());
        }

        // Uniform batch: the projection form against the textbook elementwise one.
        let uni = BnParams::new(c1, c0);
        let urec = bn_forward(&f, &uni)?;
        let ugrad = bn_backward(&g, &urec, &uni)?;
        let dy: Vec<f64> = g.iter().map(|x| x / n as f64).collect();
        let (dx, dc) = elementwise_backward(&f, &dy, c1)?;
        for k in 0..n {
            st.elementwise = st.elementwise.max((ugrad.g_f[k] / n as f64 - dx[k]).abs());
        }
        st.elementwise = st
            .elementwise
            .max((ugrad.g_c[0] - dc[0]).abs())
            .max((ugrad.g_c[1] - dc[1]).abs());

        let p1 = complement_projection(&g, &[&rec.standardized, &ones], &w);
        let p2 = complement_projection(&p1, &[&rec.standardized, &ones], &w);
        let direct: Vec<f64> = grad.g_f.iter().map(|x| x * rec.sigma / c1).collect();
        for k in 0..n {
            st.idempotence = st
                .idempotence
                .max((p1[k] - p2[k]).abs())
                .max((p1[k] - direct[k]).abs());
        }
    }
    Ok(st)
}

fn hidden_regions(tables: &TableSet) -> Vec<usize> {
    let root = tables.root();
    (0..tables.regions.len())
        .filter(|&r| r != root && !tables.regions[r].is_leaf())
        .collect()
}

/// Sets the bias row of every weight feeding `region` to `value`, keeping
/// post-activation units alive at initialization.
fn lift_bias(ws: &mut WeightSet, tables: &TableSet, region: usize, value: f64) {
    if !ws.bias_augmented {
        return;
    }
    for &c in &tables.regions[region].children {
        let w = ws.w.get_mut(&Edge::new(region, c)).expect("edge exists");
        let last = w.nrows() - 1;
        w.row_mut(last).fill(value);
    }
}

pub(super) fn run(config: &ScenarioConfig) -> Result<ScenarioOutput> {
    let seed = config.train.seed;
    let cap = enumeration_cap();
    let mut rec = Recorder::new(Scenario::Bn, seed, &config.tolerances);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let st = projection_checks(&mut rng, config.instances.max(1))?;
    rec.check("projection.orthogonality", st.orthogonality, Comparison::Lt, 1e-11);
    rec.check("projection.jacobian_kernel", st.jacobian_kernel, Comparison::Lt, 1e-12);
    rec.check("projection.finite_difference", st.finite_difference, Comparison::Lt, 1e-6);
    rec.check("projection.elementwise_match", st.elementwise, Comparison::Lt, 1e-12);
    rec.check("projection.idempotence", st.idempotence, Comparison::Lt, 1e-12);

    let mut trajectory = String::new();
    let mut energy_csv = String::new();
    for (i, (label, g)) in config.teachers_or_err(Scenario::Bn)?.into_iter().enumerate() {
        let tables = TableSet::from_teacher(&g, cap)?;
        let hidden = hidden_regions(&tables);
        if hidden.is_empty() {
            return Err(Error::Config(format!("teacher `{label}` has no hidden region for Batch Norm")));
        }
        let init = WeightSet::init_uniform(&tables, seed.wrapping_add(i as u64), config.bias);

        for placement in [BnPlacement::PreActivation, BnPlacement::PostActivation] {
            let tag = match placement {
                BnPlacement::PreActivation => "pre",
                BnPlacement::PostActivation => "post",
            };
            let mut start = init.clone();
            if placement == BnPlacement::PostActivation {
                for &r in &hidden {
                    lift_bias(&mut start, &tables, r, 1.0);
                }
            }
            let cfg = TrainConfig {
                bn_regions: hidden.clone(),
                bn_placement: placement,
                energy_regions: hidden.clone(),
                ..config.train.clone()
            };
            let traj = crate::dynamics::train(&tables, &start, &cfg)?;
            rec.check(
                format!("energy.{label}.{tag}.max_inner"),
                traj.energy.max_abs_inner(),
                Comparison::Lt,
                1e-10,
            );
            rec.check(
                format!("energy.{label}.{tag}.max_residual"),
                traj.energy.max_residual(),
                Comparison::Lt,
                1e-12,
            );
            rec.metric(format!("energy.{label}.{tag}.final_loss"), traj.final_loss());
            if i == 0 && placement == BnPlacement::PreActivation {
                trajectory = csv_string(|b| traj.write_csv(b, &tables))?;
                energy_csv = csv_string(|b| traj.energy.write_csv(b, &tables))?;
            }
        }

        let mut ws = init.clone();
        for &r in &hidden {
            ws.enable_bn(&tables, r);
        }
        let inputs = enumerate_inputs(&g, &InputModel::delta_onehot(&g)?, cap)?;
        let ost = net_forward_backward(&g, &ws, &inputs, &OracleOptions::default())?;
        rec.check(
            format!("oracle.{label}.bn_orthogonality"),
            bn_orthogonality(&g, &inputs, &ost, &ws),
            Comparison::Lt,
            1e-10,
        );

        let control = TrainConfig {
            energy_regions: hidden.clone(),
            ..config.train.clone()
        };
        let traj = crate::dynamics::train(&tables, &init, &control)?;
        rec.check(
            format!("energy.{label}.no_bn.max_inner"),
            traj.energy.max_abs_inner(),
            Comparison::Gt,
            1e-6,
        );
    }

    let files = [("energy.csv".to_string(), energy_csv)].into_iter().collect();
    Ok(ScenarioOutput {
        report: rec.finish(),
        trajectory,
        files,
    })
}
