//! When every table row is a vertex of its row set, hard-gated ReLU weights
//! reproduce the identity exactly. Otherwise a linear ladder is stuck above a
//! rank floor that ReLU training can go below.

use laddersim::dynamics::{forward_pass, loss, train, GatingMode, PassOptions, TrainConfig, WeightSet};
use laddersim::hull::{construct_identity_weights, linear_lower_bound, vertex_set};
use laddersim::scenario::bundled_teacher;
use laddersim::teacher::{build_teacher, TableSet, TeacherSpec, DEFAULT_CAP};

fn tables(name: &str) -> laddersim::Result<TableSet> {
    let spec = TeacherSpec::from_json(bundled_teacher(&format!("teachers/{name}.json")).unwrap())?;
    TableSet::from_teacher(&build_teacher(&spec)?, DEFAULT_CAP)
}

fn main() -> laddersim::Result<()> {
    let all_vert = tables("allvert")?;
    for e in all_vert.edges() {
        let rep = vertex_set(&all_vert.tables[&e].p);
        println!("allvert edge {e:?}: {}/{} rows are vertices", rep.vert_count, rep.vertex_flags.len());
    }
    let ws = construct_identity_weights(&all_vert)?;
    let st = forward_pass(&all_vert, &ws, &PassOptions::default())?;
    println!("constructed weights reach loss {:e}", loss(&all_vert, &st)?);

    let bottleneck = tables("bottleneck")?;
    let bound = linear_lower_bound(&bottleneck);
    println!("bottleneck rank bound {} gives linear floor {}", bound.rank_bound, bound.floor);
    let linear = TrainConfig {
        lr: 0.05,
        steps: 2000,
        gating: GatingMode::Linear,
        ..Default::default()
    };
    let lin = train(&bottleneck, &WeightSet::init_uniform(&bottleneck, 0, false), &linear)?;
    let relu = TrainConfig {
        gating: GatingMode::Hard,
        ..linear
    };
    let nonlin = train(&bottleneck, &WeightSet::init_uniform(&bottleneck, 0, true), &relu)?;
    println!("linear min loss {:.6}, relu min loss {:.3e}", lin.min_loss(), nonlin.min_loss());
    Ok(())
}
