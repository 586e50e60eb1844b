// Gradient check of the synthesis composite, term by term.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rgal::data::{make_toy_dataset, pretrain_teacher};
use rgal::gradcheck::check_grad;
use rgal::losses::{adversarial_kl, bn_stat_loss, one_hot_loss};
use rgal::models::{ForwardMode, GeneratorModel};
use rgal::tape::Tape;
use rgal::Tensor;

fn main() {
    let train = make_toy_dataset(50, 1000).unwrap();
    let mut teacher = pretrain_teacher(&train, 50, 7).unwrap().model;
    let mut student = rgal::models::ClassifierModel::toy_mlp(3, 99);
    let mut gen = GeneratorModel::toy_mlp(8, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(3);

    for (name, term) in [("bn", 0usize), ("adv", 1), ("oh", 2), ("x_direct_bn", 3)] {
        let zdata: Vec<f64> = (0..6 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let z = tape.input(Tensor::new(vec![6, 8], zdata).unwrap());
        let out = if term == 3 {
            // Skip the generator: feed x directly.
            let xdata: Vec<f64> = (0..6 * 2).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let x = tape.input(Tensor::new(vec![6, 2], xdata).unwrap());
            let t_out = teacher.forward(&mut tape, x, ForwardMode::Frozen).unwrap();
            bn_stat_loss(&mut tape, &t_out.bn).unwrap()
        } else {
            let (x, _) = gen.forward(&mut tape, z, ForwardMode::Frozen).unwrap();
            let t_out = teacher.forward(&mut tape, x, ForwardMode::Frozen).unwrap();
            let s_out = student.forward(&mut tape, x, ForwardMode::Frozen).unwrap();
            match term {
                0 => bn_stat_loss(&mut tape, &t_out.bn).unwrap(),
                1 => adversarial_kl(&mut tape, t_out.probs, s_out.probs).unwrap(),
                _ => one_hot_loss(&mut tape, t_out.probs).unwrap(),
            }
        };
        let margin = tape.kink_margin();
        let report = check_grad(&mut tape, out, 1e-4).unwrap();
        println!("{name}: margin {margin:.2e} -> {report}");
    }
}
