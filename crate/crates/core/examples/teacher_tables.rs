//! Builds a bundled teacher, enumerates its event tables and audits them.
//!
//! `cargo run --example teacher_tables -- [teacher]` (default `inj_ladder`).

use laddersim::scenario::bundled_teacher;
use nalgebra::DMatrix;
use laddersim::teacher::{build_teacher, enumeration_cap, validate_consistency, TableSet, TeacherSpec};

fn rows(m: &DMatrix<f64>) -> String {
    m.row_iter()
        .map(|r| r.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" "))
        .collect::<Vec<_>>()
        .join(" | ")
}

fn main() -> laddersim::Result<()> {
    let name = std::env::args().nth(1).unwrap_or_else(|| "inj_ladder".into());
    let text = bundled_teacher(&format!("teachers/{name}.json"))
        .ok_or_else(|| laddersim::Error::Config(format!("no bundled teacher `{name}`")))?;
    let g = build_teacher(&TeacherSpec::from_json(text)?)?;
    println!("teacher {name}: {} leaf tuples, injective = {}", g.leaf_tuple_count(), g.is_injective());

    let tables = TableSet::from_teacher(&g, enumeration_cap())?;
    for (a, r) in tables.regions.iter().enumerate() {
        println!(
            "  region {:<3} level {} m={} n={} prior {}",
            r.id,
            r.level,
            r.m,
            r.n,
            rows(&DMatrix::from_row_slice(1, r.m, tables.priors[a].as_slice()))
        );
    }
    for e in tables.edges() {
        let t = &tables.tables[&e];
        println!(
            "  P({} | {}) = {}   prior identity violation {:.1e}",
            tables.regions[e.child].id,
            tables.regions[e.parent].id,
            rows(&t.p),
            t.lambda_violation()
        );
    }
    let audit = validate_consistency(&tables);
    println!(
        "consistency: rows {:.1e}, lambda {:.1e}, marginals {:.1e}, clean = {}",
        audit.max_row_violation,
        audit.max_lambda_violation,
        audit.max_marginal_disagreement,
        audit.is_clean()
    );
    Ok(())
}
