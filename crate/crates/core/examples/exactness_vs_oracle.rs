//! Compares the event-space dynamics with a brute-force input-space network.
//! Delta inputs on an injective teacher agree to rounding; lossy inputs do not.

use laddersim::dynamics::WeightSet;
use laddersim::oracle::{compare_exactness, divergence, InputModel, OracleOptions};
use laddersim::scenario::bundled_teacher;
use laddersim::teacher::{build_teacher, TableSet, TeacherSpec, DEFAULT_CAP};

fn main() -> laddersim::Result<()> {
    let spec = TeacherSpec::from_json(bundled_teacher("teachers/inj_ladder.json").unwrap())?;
    let g = build_teacher(&spec)?;
    let tables = TableSet::from_teacher(&g, DEFAULT_CAP)?;
    let weights = WeightSet::init_uniform(&tables, 3, true);
    let opts = OracleOptions::default();

    let exact = compare_exactness(&g, &weights, &InputModel::delta_onehot(&g)?, &opts, DEFAULT_CAP)?;
    println!("delta inputs: max divergence {:.2e}", exact.max_divergence);
    for (id, d) in &exact.regions {
        println!("  {id:<3} f {:.1e}  gt {:.1e}  gate {:.1e}", d.f, d.gt, d.gate);
    }

    let lossy = InputModel::lossy(&g, 3, 0.4, 7)?;
    let rep = divergence(&g, &weights, &lossy, &opts, DEFAULT_CAP)?;
    println!(
        "lossy inputs: max divergence {:.2e}, decorrelation violation {:.2e}",
        rep.max_divergence, rep.decorrelation
    );
    Ok(())
}
