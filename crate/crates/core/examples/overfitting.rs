//! A teacher whose root depends on a single branch: the spurious branch still
//! receives a large update when its activations separate events that the
//! true branch leaves flat.

use laddersim::scenario::{overfit_teacher, run_scenario, Scenario, ScenarioConfig};
use laddersim::teacher::{TableSet, DEFAULT_CAP};
use nalgebra::DMatrix;

fn rows(m: &DMatrix<f64>) -> String {
    m.row_iter()
        .map(|r| r.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" "))
        .collect::<Vec<_>>()
        .join(" | ")
}

fn main() -> laddersim::Result<()> {
    let g = overfit_teacher(0.1)?;
    let tables = TableSet::from_teacher(&g, DEFAULT_CAP)?;
    for e in tables.edges() {
        println!(
            "P({} | {}) = {}",
            tables.regions[e.child].id,
            tables.regions[e.parent].id,
            rows(&tables.tables[&e].p)
        );
    }
    let out = run_scenario(Scenario::Overfit, &ScenarioConfig::bundled(Scenario::Overfit), 0)?;
    print!("{}", out.report.summary());
    Ok(())
}
