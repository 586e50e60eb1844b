// Per-step synthesis diagnostics.

use rgal::data::{make_toy_dataset, pretrain_teacher};
use rgal::models::ForwardMode;
use rgal::training::{synthesis_phase, RunSettings, RunState, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr_gen: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.01);
    let beta: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let momentum: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.9);

    let train = make_toy_dataset(100, 1000).unwrap();
    let teacher = pretrain_teacher(&train, 200, 7).unwrap();

    let settings = RunSettings {
        train: TrainConfig {
            epochs: 50,
            gen_steps: 30,
            lr_gen,
            momentum,
            seed: 0,
            ..TrainConfig::default()
        },
        loss: rgal::losses::LossWeights {
            beta,
            ..Default::default()
        },
        ..RunSettings::default()
    };
    let mut state = RunState::new(teacher.model, &settings).unwrap();
    match synthesis_phase(&mut state, &settings) {
        Ok(best) => {
            if let Some(b) = best {
                println!("best loss {:.4}", b.loss);
            }
        }
        Err(e) => println!("DIVERGED: {e}"),
    }
    for (step, r) in &state.loss_history {
        println!(
            "step {step:3} adv {:8.4} ntri {:9.3} oh {:7.4} bn {:12.4} total {:12.4}",
            r.adv, r.ntri, r.oh, r.bn, r.total
        );
    }
    // Magnitude of the last synthesized batch.
    let z = rgal::Tensor::zeros(vec![4, settings.train.latent_dim]);
    let out = state
        .generator
        .forward_infer(&z, ForwardMode::Frozen)
        .unwrap();
    let maxabs = out.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    println!("gen(0) max |x| = {maxabs:.3}");
}
