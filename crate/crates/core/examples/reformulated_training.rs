//! Trains a student ladder directly in event space and round-trips the
//! final weights through a checkpoint.

use laddersim::dynamics::{train, TopGradient, TrainConfig, WeightSet};
use laddersim::scenario::bundled_teacher;
use laddersim::teacher::{build_teacher, TableSet, TeacherSpec, DEFAULT_CAP};

fn main() -> laddersim::Result<()> {
    let spec = TeacherSpec::from_json(bundled_teacher("teachers/inj_mixed.json").unwrap())?;
    let tables = TableSet::from_teacher(&build_teacher(&spec)?, DEFAULT_CAP)?;
    let init = WeightSet::init_uniform(&tables, 1, true);

    for top in [TopGradient::Residual, TopGradient::GatedResidual] {
        let config = TrainConfig {
            lr: 0.05,
            steps: 400,
            top: top.clone(),
            ..Default::default()
        };
        let traj = train(&tables, &init, &config)?;
        println!("top gradient {top:?}");
        for en in traj.entries.iter().step_by(50) {
            println!("  step {:>3}  loss {:.6}", en.step, en.loss);
        }
        println!("  final loss {:.6}, min loss {:.6}", traj.final_loss(), traj.min_loss());

        let dir = std::env::temp_dir().join("laddersim_checkpoint");
        traj.final_weights.write_checkpoint(&dir, &tables)?;
        let back = WeightSet::read_checkpoint(&dir, &tables)?;
        println!("  checkpoint round trip exact: {}", back == traj.final_weights);
    }
    Ok(())
}
