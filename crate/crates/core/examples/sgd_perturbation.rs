//! Emulates minibatch noise by jittering the event tables at every step while
//! keeping them row-stochastic. Injective teachers have 0/1 tables that the
//! multiplicative noise cannot move, so this uses a surjective one.

use std::borrow::Cow;

use laddersim::dynamics::{train, train_with, TrainConfig, WeightSet};
use laddersim::scenario::{bundled_teacher, perturb_tables};
use laddersim::teacher::{build_teacher, validate_consistency, TableSet, TeacherSpec, DEFAULT_CAP};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> laddersim::Result<()> {
    let spec = TeacherSpec::from_json(bundled_teacher("teachers/allvert.json").unwrap())?;
    let tables = TableSet::from_teacher(&build_teacher(&spec)?, DEFAULT_CAP)?;
    let init = WeightSet::init_uniform(&tables, 0, true);
    let config = TrainConfig {
        lr: 0.05,
        steps: 300,
        ..Default::default()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let sample = perturb_tables(&tables, 0.2, &mut rng);
    println!("perturbed row violation {:.1e}", validate_consistency(&sample).max_row_violation);

    let control = train(&tables, &init, &config)?;
    let noisy = train_with(&tables, &init, &config, |_, t| Cow::Owned(perturb_tables(t, 0.2, &mut rng)))?;
    for (a, b) in control.entries.iter().zip(&noisy.entries).step_by(50) {
        println!("step {:>3}  exact {:.6}  perturbed {:.6}", a.step, a.loss, b.loss);
    }
    Ok(())
}
