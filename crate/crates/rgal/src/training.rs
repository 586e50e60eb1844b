//! The alternating synthesis/student loop, SGD with momentum, cosine
//! learning-rate annealing, and resumable run state.
//!
//! Each epoch re-initializes the generator, draws one latent batch, takes
//! `gen_steps` gradient steps on the synthesis objective (teacher and
//! student frozen), pools the lowest-loss batch, then takes `student_steps`
//! steps on the student objective over paired batches drawn from the pool
//! (generator and teacher untouched). All randomness comes from named
//! ChaCha streams held in the run state, so a `(config, seed)` pair fully
//! determines every artifact byte.

use crate::data::DataPool;
use crate::error::{Error, Result};
use crate::losses::{
    adversarial_kl, bn_stat_loss, embedding_match, generator_total, one_hot_loss, student_total,
    triplet_negative, triplet_positive, LossPhase, LossReport, LossWeights,
};
use crate::metrics::{
    decision_agreement, global_diversity, grid_points, inter_class_confusion,
    intra_class_diversity, top1_accuracy, MetricsReport,
};
use crate::models::{
    Binding, ClassifierModel, ForwardMode, GeneratorModel, ModelParams, ProjectionHead,
};
use crate::sampling::{draw_triplets, SamplingConfig, SamplingStrategy, TripletSet};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;
use crate::data::LabeledDataset;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::io::Read;

/// Which student representation feeds the triplet losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingRepr {
    /// Post-pool global embedding (default).
    Global,
    /// Pre-softmax logits.
    Logits,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Outer epochs.
    pub epochs: usize,
    /// Generator steps per epoch.
    pub gen_steps: usize,
    /// Student steps per epoch.
    pub student_steps: usize,
    /// Synthesized/drawn batch size (even; half anchors, half positives).
    pub batch_size: usize,
    pub lr_gen: f64,
    pub lr_student: f64,
    /// Cosine annealing floor for both learning rates.
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Generator latent dimension.
    pub latent_dim: usize,
    pub pool_capacity: usize,
    /// Redraw the latent batch at every generator step instead of once per
    /// epoch.
    pub resample_z_per_step: bool,
    pub embedding_repr: EmbeddingRepr,
    pub synthesis_sampling: SamplingStrategy,
    pub student_sampling: SamplingStrategy,
    /// Side length of the teacher/student agreement grid.
    pub grid_resolution: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            gen_steps: 30,
            student_steps: 10,
            batch_size: 64,
            lr_gen: 0.1,
            lr_student: 0.1,
            lr_min: 1e-4,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            latent_dim: 16,
            pool_capacity: 4096,
            resample_z_per_step: false,
            embedding_repr: EmbeddingRepr::Global,
            synthesis_sampling: SamplingStrategy::FocalWeighted,
            student_sampling: SamplingStrategy::DistanceWeighted,
            grid_resolution: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(Error::Config(format!(
                "batch_size must be even and >= 2, got {}",
                self.batch_size
            )));
        }
        for (name, v) in [
            ("lr_gen", self.lr_gen),
            ("lr_student", self.lr_student),
            ("lr_min", self.lr_min),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be >= 1".into()));
        }
        if self.pool_capacity == 0 {
            return Err(Error::Config("pool_capacity must be >= 1".into()));
        }
        if self.grid_resolution < 2 {
            return Err(Error::Config("grid_resolution must be >= 2".into()));
        }
        Ok(())
    }
}

/// Everything that pins a transfer run besides the teacher itself.
#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSettings {
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub sampling: SamplingConfig,
}

impl RunSettings {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.loss.validate()?;
        self.sampling.validate()
    }

    /// FNV-1a over the canonical serialized form.
    pub fn content_hash(&self) -> u64 {
        let text = toml::to_string(self).expect("settings serialize");
        let mut h: u64 = 0xcbf29ce484222325;
        for b in text.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}

/// Cosine annealing from `lr_max` at step 0 to `lr_min` at step `total`;
/// steps past `total` stay at the floor.
pub fn cosine_lr(step: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr_max;
    }
    if step >= total {
        return lr_min;
    }
    let frac = step as f64 / total as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// One SGD update with momentum and weight decay:
/// `v <- momentum*v + grad + weight_decay*param; param <- param - lr*v`.
pub fn sgd_step(
    param: &mut Tensor,
    grad: &Tensor,
    velocity: &mut Tensor,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if !param.same_shape(grad) || !param.same_shape(velocity) {
        return Err(Error::ShapeMismatch {
            op: "sgd_step",
            lhs: param.shape().to_vec(),
            rhs: grad.shape().to_vec(),
        });
    }
    for i in 0..param.len() {
        let p = param.data()[i];
        let v = momentum * velocity.data()[i] + grad.data()[i] + weight_decay * p;
        velocity.data_mut()[i] = v;
        param.data_mut()[i] = p - lr * v;
    }
    Ok(())
}

/// SGD with per-parameter velocity buffers keyed by name.
#[derive(Debug, Clone)]
pub struct SgdOptimizer {
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<(String, Tensor)>,
}

impl SgdOptimizer {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        SgdOptimizer {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Drops all velocity state (used when the generator re-initializes).
    pub fn reset(&mut self) {
        self.velocity.clear();
    }

    pub fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &[(String, Tensor)],
        lr: f64,
    ) -> Result<()> {
        for (name, grad) in grads {
            let param = params.get_mut(name).ok_or_else(|| {
                Error::invalid_arg("SgdOptimizer::step", format!("unknown parameter {name}"))
            })?;
            if self.velocity.iter().all(|(n, _)| n != name) {
                self.velocity
                    .push((name.clone(), Tensor::zeros(param.shape().to_vec())));
            }
            let velocity = self
                .velocity
                .iter_mut()
                .find(|(n, _)| n == name)
                .map(|(_, v)| v)
                .expect("velocity just ensured");
            sgd_step(param, grad, velocity, lr, self.momentum, self.weight_decay)?;
        }
        Ok(())
    }

    fn to_named_tensors(&self, out: &mut ModelParams, prefix: &str) {
        for (name, v) in &self.velocity {
            out.insert(format!("{prefix}.{name}"), v.clone());
        }
    }

    fn restore_named_tensors(&mut self, params: &ModelParams, prefix: &str) {
        self.velocity.clear();
        let pre = format!("{prefix}.");
        for (name, t) in params.iter() {
            if let Some(stripped) = name.strip_prefix(&pre) {
                self.velocity.push((stripped.to_string(), t.clone()));
            }
        }
    }
}

/// Gradients for every bound parameter that received one.
pub fn collect_grads(tape: &Tape, binding: &Binding) -> Vec<(String, Tensor)> {
    binding
        .0
        .iter()
        .filter_map(|(name, v)| tape.grad(*v).map(|g| (name.clone(), g.clone())))
        .collect()
}

struct RngStreams {
    init: ChaCha8Rng,
    z: ChaCha8Rng,
    synth: ChaCha8Rng,
    student: ChaCha8Rng,
    pool: ChaCha8Rng,
}

impl RngStreams {
    fn new(seed: u64) -> Self {
        let make = |stream: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            rng
        };
        RngStreams {
            init: make(1),
            z: make(2),
            synth: make(3),
            student: make(4),
            pool: make(5),
        }
    }

    fn positions(&self) -> [u128; 5] {
        [
            self.init.get_word_pos(),
            self.z.get_word_pos(),
            self.synth.get_word_pos(),
            self.student.get_word_pos(),
            self.pool.get_word_pos(),
        ]
    }

    fn restore(&mut self, pos: [u128; 5]) {
        self.init.set_word_pos(pos[0]);
        self.z.set_word_pos(pos[1]);
        self.synth.set_word_pos(pos[2]);
        self.student.set_word_pos(pos[3]);
        self.pool.set_word_pos(pos[4]);
    }
}

/// Held-out evaluation inputs; never part of the transfer itself.
#[derive(Default)]
pub struct EvalContext {
    pub dataset: Option<LabeledDataset>,
    pub grid: Option<GridSpec>,
}

#[derive(Debug, Clone, Copy)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub resolution: usize,
}

impl GridSpec {
    pub fn toy(resolution: usize) -> Self {
        GridSpec {
            lo: -3.0,
            hi: 3.0,
            resolution,
        }
    }
}

/// The lowest-loss synthesized batch of an epoch.
pub struct BestBatch {
    pub samples: Tensor,
    pub labels: Vec<usize>,
    pub loss: f64,
}

/// All state of a transfer run; serializable and resumable.
pub struct RunState {
    pub epoch: usize,
    pub global_step: usize,
    pub teacher: ClassifierModel,
    pub student: ClassifierModel,
    pub generator: GeneratorModel,
    pub head: ProjectionHead,
    pub pool: DataPool,
    pub opt_student: SgdOptimizer,
    pub opt_head: SgdOptimizer,
    pub opt_gen: SgdOptimizer,
    streams: RngStreams,
    pub loss_history: Vec<(usize, LossReport)>,
    pub metric_history: Vec<MetricsReport>,
    pub config_hash: u64,
}

impl RunState {
    /// Fresh run: newly initialized student, identity-or-random projection
    /// head, empty pool. The teacher is taken as-is and never updated.
    pub fn new(teacher: ClassifierModel, settings: &RunSettings) -> Result<Self> {
        settings.validate()?;
        let t = &settings.train;
        if teacher.input_shape != vec![2] {
            return Err(Error::Config(
                "the transfer loop drives the 2-d point task; teacher must take [2] inputs".into(),
            ));
        }
        let student = ClassifierModel::toy_mlp(
            teacher.num_classes,
            t.seed ^ 0x9e37_79b9_7f4a_7c15,
        );
        let head = if student.embedding_dim == teacher.embedding_dim {
            ProjectionHead::identity(teacher.embedding_dim)
        } else {
            ProjectionHead::new(
                student.embedding_dim,
                teacher.embedding_dim,
                t.seed ^ 0x0bad_5eed,
            )
        };
        let mut streams = RngStreams::new(t.seed);
        let generator = GeneratorModel::toy_mlp(t.latent_dim, streams.init.gen::<u64>());
        let feature_shape = teacher.input_shape.clone();
        Ok(RunState {
            epoch: 0,
            global_step: 0,
            teacher,
            student,
            generator,
            head,
            pool: DataPool::new(t.pool_capacity, feature_shape),
            opt_student: SgdOptimizer::new(t.momentum, t.weight_decay),
            opt_head: SgdOptimizer::new(t.momentum, t.weight_decay),
            opt_gen: SgdOptimizer::new(t.momentum, t.weight_decay),
            streams,
            loss_history: Vec::new(),
            metric_history: Vec::new(),
            config_hash: settings.content_hash(),
        })
    }

    fn draw_latent(&mut self, batch: usize, latent: usize) -> Tensor {
        let data: Vec<f64> = (0..batch * latent)
            .map(|_| self.streams.z.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor::new(vec![batch, latent], data).expect("latent shape")
    }
}

fn pick_repr(out_embedding: VarId, out_logits: VarId, repr: EmbeddingRepr) -> VarId {
    match repr {
        EmbeddingRepr::Global => out_embedding,
        EmbeddingRepr::Logits => out_logits,
    }
}

fn gathered_triplet_loss(
    tape: &mut Tape,
    embeddings: VarId,
    set: &TripletSet,
    tau: f64,
    spread: bool,
) -> Result<Option<VarId>> {
    if set.is_empty() {
        return Ok(None);
    }
    let a = tape.gather_rows(embeddings, &set.anchors())?;
    let p = tape.gather_rows(embeddings, &set.positives())?;
    let n = tape.gather_rows(embeddings, &set.negatives())?;
    let loss = if spread {
        triplet_negative(tape, a, p, n, tau)?
    } else {
        triplet_positive(tape, a, p, n, tau)?
    };
    Ok(Some(loss))
}

fn argmax_labels(probs: &Tensor) -> Vec<usize> {
    (0..probs.shape()[0]).map(|i| probs.argmax_row(i)).collect()
}

/// One synthesis phase: re-initialize the generator, draw a latent batch,
/// and descend the synthesis objective for `gen_steps` steps with the
/// teacher and student frozen. The lowest-loss batch joins the pool and is
/// returned for diagnostics.
pub fn synthesis_phase(state: &mut RunState, settings: &RunSettings) -> Result<Option<BestBatch>> {
    let t = settings.train.clone();
    let gen_seed = state.streams.init.gen::<u64>();
    state.generator = GeneratorModel::toy_mlp(t.latent_dim, gen_seed);
    state.opt_gen.reset();
    if t.gen_steps == 0 {
        return Ok(None);
    }

    let mut z = state.draw_latent(t.batch_size, t.latent_dim);
    let mut best: Option<BestBatch> = None;
    let lr = cosine_lr(state.epoch, t.epochs, t.lr_gen, t.lr_min);

    for step in 0..t.gen_steps {
        if t.resample_z_per_step && step > 0 {
            z = state.draw_latent(t.batch_size, t.latent_dim);
        }
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let (x, gen_binding) = state
            .generator
            .forward(&mut tape, zv, ForwardMode::Train)?;
        let teacher_out = state.teacher.forward(&mut tape, x, ForwardMode::Frozen)?;
        let student_out = state.student.forward(&mut tape, x, ForwardMode::Frozen)?;

        let teacher_probs = tape.value(teacher_out.probs).clone();
        let labels = argmax_labels(&teacher_probs);

        let adv = adversarial_kl(&mut tape, teacher_out.probs, student_out.probs)?;
        let oh = one_hot_loss(&mut tape, teacher_out.probs)?;
        let bn = bn_stat_loss(&mut tape, &teacher_out.bn)?;
        let ntri = if settings.loss.beta > 0.0 {
            let set = draw_triplets(
                &labels,
                &teacher_probs,
                &settings.sampling,
                t.synthesis_sampling,
                &mut state.streams.synth,
            )?;
            let emb = pick_repr(student_out.embedding, student_out.logits, t.embedding_repr);
            gathered_triplet_loss(&mut tape, emb, &set, settings.loss.tau, true)?
        } else {
            None
        };

        let (total, report) =
            generator_total(&mut tape, Some(adv), ntri, Some(oh), Some(bn), &settings.loss)?;
        if !report.total.is_finite() {
            return Err(Error::Diverged {
                epoch: state.epoch,
                step,
                detail: format!("synthesis loss {report:?}"),
            });
        }
        tape.backward(total)?;
        let grads = collect_grads(&tape, &gen_binding);
        state
            .opt_gen
            .step(&mut state.generator.params, &grads, lr)?;

        if best.as_ref().map_or(true, |b| report.total < b.loss) {
            best = Some(BestBatch {
                samples: tape.value(x).clone(),
                labels: labels.clone(),
                loss: report.total,
            });
        }
        state.loss_history.push((state.global_step, report));
        state.global_step += 1;
    }

    if let Some(b) = &best {
        state
            .pool
            .update(&b.samples, &b.labels, &vec![b.loss; b.labels.len()])?;
    }
    Ok(best)
}

/// One student phase: paired batches from the pool, teacher labels
/// recomputed on the fly, student and projection head updated. The
/// generator is untouched.
pub fn student_phase(state: &mut RunState, settings: &RunSettings) -> Result<()> {
    let t = settings.train.clone();
    let lr = cosine_lr(state.epoch, t.epochs, t.lr_student, t.lr_min);

    for step in 0..t.student_steps {
        let (batch, _) = state
            .pool
            .sample_batch(t.batch_size, &mut state.streams.pool)?;
        let (_, teacher_probs, teacher_emb) =
            state.teacher.forward_infer(&batch, ForwardMode::Eval)?;
        let labels = argmax_labels(&teacher_probs);

        let mut tape = Tape::new();
        let xv = tape.constant(batch);
        let student_out = state.student.forward(&mut tape, xv, ForwardMode::Train)?;
        let p_teacher = tape.constant(teacher_probs.clone());
        let adv = adversarial_kl(&mut tape, p_teacher, student_out.probs)?;

        let tri = if settings.loss.w_tri > 0.0 {
            let set = draw_triplets(
                &labels,
                &teacher_probs,
                &settings.sampling,
                t.student_sampling,
                &mut state.streams.student,
            )?;
            let emb = pick_repr(student_out.embedding, student_out.logits, t.embedding_repr);
            gathered_triplet_loss(&mut tape, emb, &set, settings.loss.tau, false)?
        } else {
            None
        };

        let (emb_term, head_binding) = if settings.loss.w_emb > 0.0 {
            let e_t = tape.constant(teacher_emb.clone());
            let (l, b) = embedding_match(&mut tape, e_t, student_out.embedding, &state.head)?;
            (Some(l), Some(b))
        } else {
            (None, None)
        };

        let (total, report) = student_total(&mut tape, Some(adv), tri, emb_term, &settings.loss)?;
        if !report.total.is_finite() {
            return Err(Error::Diverged {
                epoch: state.epoch,
                step,
                detail: format!("student loss {report:?}"),
            });
        }
        tape.backward(total)?;
        let sgrads = collect_grads(&tape, &student_out.binding);
        state
            .opt_student
            .step(&mut state.student.params, &sgrads, lr)?;
        if let Some(hb) = head_binding {
            let hgrads = collect_grads(&tape, &hb);
            state.opt_head.step(&mut state.head.params, &hgrads, lr)?;
        }
        state.loss_history.push((state.global_step, report));
        state.global_step += 1;
    }
    Ok(())
}

fn epoch_metrics(
    state: &mut RunState,
    best: Option<&BestBatch>,
    eval_ds: Option<&LabeledDataset>,
    grid: Option<&(Tensor, Vec<usize>)>,
) -> Result<MetricsReport> {
    let accuracy = match eval_ds {
        Some(ds) => top1_accuracy(&mut state.student, ds.samples(), ds.labels())?,
        None => f64::NAN,
    };
    let agreement = match grid {
        Some((points, teacher_labels)) => {
            let student_labels = state.student.predict(points)?;
            decision_agreement(&student_labels, teacher_labels)?
        }
        None => f64::NAN,
    };
    let (l_div, l_intra, l_inter) = match best {
        Some(b) if b.labels.len() >= 2 => {
            let (_, _, emb) = state.teacher.forward_infer(&b.samples, ForwardMode::Eval)?;
            let div = global_diversity(&emb)?;
            let intra = intra_class_diversity(&emb, &b.labels)?;
            let inter = inter_class_confusion(&emb, &b.labels).unwrap_or(f64::NAN);
            (div, intra, inter)
        }
        _ => (f64::NAN, f64::NAN, f64::NAN),
    };
    Ok(MetricsReport {
        epoch: state.epoch,
        accuracy,
        agreement,
        global_diversity: l_div,
        intra_class_diversity: l_intra,
        inter_class_confusion: l_inter,
    })
}

/// Runs one full epoch (synthesis, student, metrics).
pub fn run_epoch(
    state: &mut RunState,
    settings: &RunSettings,
    eval_ds: Option<&LabeledDataset>,
    grid: Option<&(Tensor, Vec<usize>)>,
) -> Result<()> {
    let best = synthesis_phase(state, settings)?;
    student_phase(state, settings)?;
    let report = epoch_metrics(state, best.as_ref(), eval_ds, grid)?;
    state.metric_history.push(report);
    state.epoch += 1;
    Ok(())
}

/// Precomputed agreement grid: points plus frozen teacher decisions.
pub fn teacher_grid(
    teacher: &mut ClassifierModel,
    spec: GridSpec,
) -> Result<(Tensor, Vec<usize>)> {
    let points = grid_points(spec.lo, spec.hi, spec.resolution);
    let labels = teacher.predict(&points)?;
    Ok((points, labels))
}

/// Runs the remaining epochs of a (possibly resumed) state.
pub fn run_to_end(
    state: &mut RunState,
    settings: &RunSettings,
    eval: &EvalContext,
) -> Result<()> {
    let grid = match eval.grid {
        Some(spec) if state.teacher.input_shape == vec![2] => {
            Some(teacher_grid(&mut state.teacher, spec)?)
        }
        _ => None,
    };
    while state.epoch < settings.train.epochs {
        run_epoch(state, settings, eval.dataset.as_ref(), grid.as_ref())?;
    }
    Ok(())
}

/// Convenience wrapper: fresh state, run to completion. The training set is
/// never an input; only the frozen teacher and held-out evaluation data.
pub fn run_rgal(
    teacher: ClassifierModel,
    settings: &RunSettings,
    eval: &EvalContext,
) -> Result<RunState> {
    let mut state = RunState::new(teacher, settings)?;
    run_to_end(&mut state, settings, eval)?;
    Ok(state)
}

const CHECKPOINT_HEADER: &str = "rgal-checkpoint v1";

impl RunState {
    /// Serializes the full run state: a short text header (epoch, seeds,
    /// config hash, stream positions) followed by the model binary
    /// container holding every tensor.
    pub fn save_checkpoint(&self, path: &std::path::Path, seed: u64) -> Result<()> {
        let mut header = String::new();
        header.push_str(CHECKPOINT_HEADER);
        header.push('\n');
        header.push_str(&format!("epoch={}\n", self.epoch));
        header.push_str(&format!("global_step={}\n", self.global_step));
        header.push_str(&format!("seed={seed}\n"));
        header.push_str(&format!("config_hash={:016x}\n", self.config_hash));
        let pos = self.streams.positions();
        header.push_str(&format!(
            "rng={},{},{},{},{}\n",
            pos[0], pos[1], pos[2], pos[3], pos[4]
        ));
        header.push('\n');

        let mut all = ModelParams::new();
        for (prefix, params) in [
            ("teacher", &self.teacher.params),
            ("student", &self.student.params),
            ("gen", &self.generator.params),
            ("head", &self.head.params),
        ] {
            for (name, t) in params.iter() {
                all.insert(format!("{prefix}.{name}"), t.clone());
            }
        }
        self.pool.to_named_tensors(&mut all, "pool");
        self.opt_student.to_named_tensors(&mut all, "vstudent");
        self.opt_head.to_named_tensors(&mut all, "vhead");
        self.opt_gen.to_named_tensors(&mut all, "vgen");

        let mut losses = Vec::with_capacity(self.loss_history.len() * 9);
        for (step, r) in &self.loss_history {
            losses.extend_from_slice(&[
                *step as f64,
                match r.phase {
                    LossPhase::Synthesis => 0.0,
                    LossPhase::Student => 1.0,
                },
                r.adv,
                r.ntri,
                r.tri,
                r.oh,
                r.bn,
                r.emb,
                r.total,
            ]);
        }
        all.insert(
            "hist.losses",
            Tensor::new(vec![self.loss_history.len(), 9], losses).expect("loss history"),
        );
        let mut metrics = Vec::with_capacity(self.metric_history.len() * 6);
        for m in &self.metric_history {
            metrics.extend_from_slice(&[
                m.epoch as f64,
                m.accuracy,
                m.agreement,
                m.global_diversity,
                m.intra_class_diversity,
                m.inter_class_confusion,
            ]);
        }
        all.insert(
            "hist.metrics",
            Tensor::new(vec![self.metric_history.len(), 6], metrics).expect("metric history"),
        );

        let mut bytes = header.into_bytes();
        all.write_bytes(&mut bytes);
        crate::runner::write_atomic(path, &bytes)
    }

    /// Restores a checkpoint into a freshly constructed state for the same
    /// settings. Refuses checkpoints written under a different config hash.
    pub fn restore_checkpoint(&mut self, path: &std::path::Path) -> Result<()> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let origin = path.display().to_string();
        let bad = |reason: String| Error::Format {
            path: origin.clone(),
            reason,
        };

        // Header ends at the first blank line.
        let mut offset = 0;
        let mut lines = Vec::new();
        loop {
            let end = bytes[offset..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("missing header terminator".into()))?;
            let line = std::str::from_utf8(&bytes[offset..offset + end])
                .map_err(|_| bad("header not utf-8".into()))?
                .to_string();
            offset += end + 1;
            if line.is_empty() {
                break;
            }
            lines.push(line);
        }
        if lines.first().map(String::as_str) != Some(CHECKPOINT_HEADER) {
            return Err(bad("not a run checkpoint".into()));
        }
        let field = |key: &str| -> Result<String> {
            lines
                .iter()
                .find_map(|l| l.strip_prefix(&format!("{key}=")))
                .map(str::to_string)
                .ok_or_else(|| bad(format!("missing header field {key}")))
        };
        let epoch: usize = field("epoch")?.parse().map_err(|_| bad("bad epoch".into()))?;
        let global_step: usize = field("global_step")?
            .parse()
            .map_err(|_| bad("bad global_step".into()))?;
        let hash = u64::from_str_radix(&field("config_hash")?, 16)
            .map_err(|_| bad("bad config_hash".into()))?;
        if hash != self.config_hash {
            return Err(bad(format!(
                "checkpoint was written under config hash {hash:016x}, current is {:016x}",
                self.config_hash
            )));
        }
        let rng_field = field("rng")?;
        let mut pos = [0u128; 5];
        for (slot, part) in pos.iter_mut().zip(rng_field.split(',')) {
            *slot = part.parse().map_err(|_| bad("bad rng position".into()))?;
        }

        let all = ModelParams::read_bytes(&bytes[offset..], &origin)?;
        let subset = |prefix: &str| -> ModelParams {
            let mut out = ModelParams::new();
            let pre = format!("{prefix}.");
            for (name, t) in all.iter() {
                if let Some(stripped) = name.strip_prefix(&pre) {
                    // Pool and optimizer namespaces are handled separately.
                    out.insert(stripped.to_string(), t.clone());
                }
            }
            out
        };
        self.teacher
            .params
            .load_values_from(&subset("teacher"), &origin)?;
        self.student
            .params
            .load_values_from(&subset("student"), &origin)?;
        self.generator
            .params
            .load_values_from(&subset("gen"), &origin)?;
        self.head.params.load_values_from(&subset("head"), &origin)?;
        self.pool = DataPool::from_named_tensors(&all, "pool", &origin)?;
        self.opt_student.restore_named_tensors(&all, "vstudent");
        self.opt_head.restore_named_tensors(&all, "vhead");
        self.opt_gen.restore_named_tensors(&all, "vgen");

        let lh = all
            .get("hist.losses")
            .ok_or_else(|| bad("missing loss history".into()))?;
        self.loss_history.clear();
        for i in 0..lh.shape()[0] {
            let row = &lh.data()[i * 9..(i + 1) * 9];
            self.loss_history.push((
                row[0] as usize,
                LossReport {
                    phase: if row[1] == 0.0 {
                        LossPhase::Synthesis
                    } else {
                        LossPhase::Student
                    },
                    adv: row[2],
                    ntri: row[3],
                    tri: row[4],
                    oh: row[5],
                    bn: row[6],
                    emb: row[7],
                    total: row[8],
                },
            ));
        }
        let mh = all
            .get("hist.metrics")
            .ok_or_else(|| bad("missing metric history".into()))?;
        self.metric_history.clear();
        for i in 0..mh.shape()[0] {
            let row = &mh.data()[i * 6..(i + 1) * 6];
            self.metric_history.push(MetricsReport {
                epoch: row[0] as usize,
                accuracy: row[1],
                agreement: row[2],
                global_diversity: row[3],
                intra_class_diversity: row[4],
                inter_class_confusion: row[5],
            });
        }

        self.epoch = epoch;
        self.global_step = global_step;
        self.streams.restore(pos);
        Ok(())
    }
}
