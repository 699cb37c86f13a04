//! With Batch Norm on a region, each node's update is orthogonal to its
//! weights, so its energy grows by exactly `lr^2/2 ||dw||^2` per step.

use laddersim::batchnorm::energy_trace;
use laddersim::dynamics::{BnPlacement, TrainConfig, WeightSet};
use laddersim::scenario::bundled_teacher;
use laddersim::teacher::{build_teacher, TableSet, TeacherSpec, DEFAULT_CAP};

fn main() -> laddersim::Result<()> {
    let spec = TeacherSpec::from_json(bundled_teacher("teachers/inj_ladder.json").unwrap())?;
    let tables = TableSet::from_teacher(&build_teacher(&spec)?, DEFAULT_CAP)?;
    let root = tables.root();
    let hidden: Vec<usize> = (0..tables.regions.len())
        .filter(|&r| r != root && !tables.regions[r].is_leaf())
        .collect();
    let init = WeightSet::init_uniform(&tables, 2, true);

    for (bn, placement) in [(true, BnPlacement::PreActivation), (true, BnPlacement::PostActivation), (false, BnPlacement::PreActivation)] {
        let config = TrainConfig {
            lr: 0.05,
            steps: 100,
            bn_regions: if bn { hidden.clone() } else { Vec::new() },
            bn_placement: placement,
            ..Default::default()
        };
        let (trace, traj) = energy_trace(&tables, &init, &config, &hidden)?;
        println!(
            "bn {bn:<5} {placement:?}: final loss {:.4}, max |<w, dw>| {:.2e}, max energy residual {:.2e}",
            traj.final_loss(),
            trace.max_abs_inner(),
            trace.max_residual()
        );
    }
    Ok(())
}
