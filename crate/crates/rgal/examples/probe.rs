// Scratch harness for calibrating the toy transfer run.

use rgal::data::{make_toy_dataset, pretrain_teacher};
use rgal::training::{
    run_epoch, teacher_grid, EvalContext, GridSpec, RunSettings, RunState, TrainConfig,
};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr_gen: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let lr_student: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(50);
    let seed: u64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0);

    let train = make_toy_dataset(100, 1000).unwrap();
    let heldout = make_toy_dataset(100, 2000).unwrap();
    let teacher = pretrain_teacher(&train, 200, 7).unwrap();
    println!("teacher train acc {:.4}", teacher.train_accuracy);

    let settings = RunSettings {
        train: TrainConfig {
            epochs,
            lr_gen,
            lr_student,
            seed,
            ..TrainConfig::default()
        },
        ..RunSettings::default()
    };
    let _eval = EvalContext {
        dataset: Some(heldout.clone()),
        grid: Some(GridSpec::toy(100)),
    };
    let mut state = RunState::new(teacher.model, &settings).unwrap();
    let grid = teacher_grid(&mut state.teacher, GridSpec::toy(100)).unwrap();
    let t0 = std::time::Instant::now();
    for _ in 0..epochs {
        match run_epoch(&mut state, &settings, Some(&heldout), Some(&grid)) {
            Ok(()) => {}
            Err(e) => {
                println!("DIVERGED at epoch {}: {e}", state.epoch);
                return;
            }
        }
        let m = state.metric_history.last().unwrap();
        if state.epoch % 5 == 0 || state.epoch == epochs {
            let last_syn = state
                .loss_history
                .iter()
                .rev()
                .find(|(_, r)| matches!(r.phase, rgal::losses::LossPhase::Synthesis))
                .map(|(_, r)| r.total)
                .unwrap_or(f64::NAN);
            println!(
                "epoch {:3}  acc {:.4}  agree {:.4}  ldiv {:.3} lintra {:.3} linter {:.3}  Lg {:.3}",
                m.epoch, m.accuracy, m.agreement, m.global_diversity,
                m.intra_class_diversity, m.inter_class_confusion, last_syn
            );
        }
    }
    println!("elapsed {:.1?}", t0.elapsed());
}
