use nalgebra::DMatrix;

use crate::disentangle::{
    backward_residual, backward_residual_demo, check_separable_update, forward_residual, forward_variants,
    separable_update_unchecked, FactoredInstance,
};
use crate::error::Result;

use super::{csv_table, Comparison, Recorder, Scenario, ScenarioConfig, ScenarioOutput};

const SET_SIZES: [&[usize]; 4] = [&[2, 1], &[1, 2], &[1, 1, 1], &[2, 2]];
const BACKWARD_THRESHOLD: f64 = 1e-6;

pub(super) fn run(config: &ScenarioConfig) -> Result<ScenarioOutput> {
    let seed = config.train.seed;
    let mut rec = Recorder::new(Scenario::Disentangle, seed, &config.tolerances);
    let mut rows = Vec::new();

    let mut forward: f64 = 0.0;
    let mut reference: f64 = 0.0;
    let mut non_separable = f64::INFINITY;
    let mut off_block: f64 = 0.0;
    let mut block_formula: f64 = 0.0;
    let mut uncentered = f64::INFINITY;
    for k in 0..config.instances.max(1) {
        let s = seed.wrapping_mul(1000).wrapping_add(k as u64);
        let sizes = SET_SIZES[k % SET_SIZES.len()];
        let inst = FactoredInstance::random(sizes, s);
        let mut worst: f64 = 0.0;
        for rep in forward_variants(&inst)?.values() {
            worst = worst.max(rep.max_residual);
        }
        forward = forward.max(worst);
        for rep in forward_variants(&FactoredInstance::reference(s))?.values() {
            reference = reference.max(rep.max_residual);
        }

        let mut tangled = inst.clone();
        tangled.w[(0, 1)] += 0.5;
        let nr = forward_residual(&tangled, false, false)?.max_residual;
        non_separable = non_separable.min(nr);

        let gt = inst.gt_alpha();
        let upd = check_separable_update(&inst, &gt)?;
        off_block = off_block.max(upd.off_block_mass);
        block_formula = block_formula.max(upd.block_formula_error);

        let shifted = gt.map(|x| x + 0.1 * x.abs() + 0.05);
        let un = separable_update_unchecked(&inst, &shifted)?;
        uncentered = uncentered.min(un.off_block_mass);

        let (bres, _) = backward_residual(&inst)?;
        rows.push(vec![
            s.to_string(),
            format!("{sizes:?}"),
            worst.to_string(),
            nr.to_string(),
            upd.off_block_mass.to_string(),
            un.off_block_mass.to_string(),
            bres.to_string(),
        ]);
    }
    rec.check("forward.reference_max_residual", reference, Comparison::Lt, 1e-10);
    rec.check("forward.max_residual", forward, Comparison::Lt, 1e-10);
    rec.check("forward.non_separable_min_residual", non_separable, Comparison::Gt, 1e-6);
    rec.check("update.off_block_mass", off_block, Comparison::Lt, 1e-10);
    rec.check("update.block_formula_error", block_formula, Comparison::Lt, 1e-12);
    rec.check("update.uncentered_min_off_block", uncentered, Comparison::Gt, 1e-6);

    let n = config.ensemble.max(1);
    let stats = backward_residual_demo((0..n as u64).map(|k| seed.wrapping_mul(1000).wrapping_add(k)), BACKWARD_THRESHOLD)?;
    let need = (0.95 * n as f64).ceil();
    rec.check("backward.above_threshold", stats.above_threshold as f64, Comparison::Ge, need);
    rec.check(
        "backward.total_probability_error",
        stats.max_total_probability_error,
        Comparison::Lt,
        1e-12,
    );
    rec.metric("backward.fraction_above", stats.fraction_above);
    rec.metric(
        "backward.min_residual",
        stats.instances.iter().map(|i| i.residual).fold(f64::INFINITY, f64::min),
    );

    let mut flat = FactoredInstance::reference(seed);
    for b in &mut flat.blocks {
        let row = b.row(0).into_owned();
        *b = DMatrix::from_fn(b.nrows(), b.ncols(), |_, c| row[c]);
    }
    let (flat_res, _) = backward_residual(&flat)?;
    rec.check("backward.uniform_block_residual", flat_res, Comparison::Lt, 1e-12);

    let trajectory = csv_table(
        &[
            "seed",
            "set_sizes",
            "forward_residual",
            "non_separable_residual",
            "off_block_mass",
            "uncentered_off_block",
            "backward_residual",
        ],
        &rows,
    )?;
    let backward_rows: Vec<Vec<String>> = stats
        .instances
        .iter()
        .map(|i| vec![i.seed.to_string(), i.residual.to_string(), i.total_probability_error.to_string()])
        .collect();
    let files = [(
        "backward.csv".to_string(),
        csv_table(&["seed", "residual", "total_probability_error"], &backward_rows)?,
    )]
    .into_iter()
    .collect();
    Ok(ScenarioOutput {
        report: rec.finish(),
        trajectory,
        files,
    })
}
