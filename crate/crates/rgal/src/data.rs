//! Toy datasets, teacher pretraining, and the pool of synthesized samples.

use crate::error::{Error, Result};
use crate::losses::cross_entropy;
use crate::models::{ClassifierModel, ForwardMode, ModelParams};
use crate::sampling::paired_batch_indices;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::training::{collect_grads, cosine_lr, SgdOptimizer};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::cell::Cell;

/// Anything a training procedure can draw labeled batches from. The audit
/// wrapper counts `gather` calls to certify that a transfer run never reads
/// real samples.
pub trait SampleSource {
    fn size(&self) -> usize;
    fn class_count(&self) -> usize;
    fn label_slice(&self) -> &[usize];
    fn gather(&self, idx: &[usize]) -> (Tensor, Vec<usize>);
}

#[derive(Debug, Clone)]
pub struct LabeledDataset {
    samples: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(samples: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if samples.rank() < 2 || samples.shape()[0] != labels.len() {
            return Err(Error::InvalidShape {
                op: "LabeledDataset",
                shape: samples.shape().to_vec(),
                reason: format!("expected a leading extent of {} samples", labels.len()),
            });
        }
        let mut counts = vec![0usize; num_classes];
        for &l in &labels {
            if l >= num_classes {
                return Err(Error::invalid_arg(
                    "LabeledDataset",
                    format!("label {l} out of range for {num_classes} classes"),
                ));
            }
            counts[l] += 1;
        }
        if let Some(class) = counts.iter().position(|&c| c < 2) {
            return Err(Error::invalid_arg(
                "LabeledDataset",
                format!("class {class} has fewer than 2 samples"),
            ));
        }
        Ok(LabeledDataset {
            samples,
            labels,
            num_classes,
        })
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn feature_len(&self) -> usize {
        self.samples.len() / self.samples.shape()[0]
    }

    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let f = self.feature_len();
        let mut data = Vec::with_capacity(idx.len() * f);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(&self.samples.data()[i * f..(i + 1) * f]);
            labels.push(self.labels[i]);
        }
        let mut shape = self.samples.shape().to_vec();
        shape[0] = idx.len();
        (Tensor::new(shape, data).expect("batch shape"), labels)
    }

    /// One row per sample: feature columns, then the integer label.
    pub fn to_csv(&self) -> String {
        let f = self.feature_len();
        let mut out = String::new();
        for i in 0..self.len() {
            let row = &self.samples.data()[i * f..(i + 1) * f];
            for v in row {
                out.push_str(&format!("{v},"));
            }
            out.push_str(&format!("{}\n", self.labels[i]));
        }
        out
    }

    pub fn from_csv(text: &str, origin: &str) -> Result<Self> {
        let bad = |line: usize, reason: String| Error::Format {
            path: origin.to_string(),
            reason: format!("line {}: {reason}", line + 1),
        };
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut labels = Vec::new();
        let mut width = None;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() < 2 {
                return Err(bad(i, "expected features and a label".into()));
            }
            let w = fields.len() - 1;
            if *width.get_or_insert(w) != w {
                return Err(bad(i, "ragged row".into()));
            }
            let mut row = Vec::with_capacity(w);
            for f in &fields[..w] {
                row.push(
                    f.trim()
                        .parse::<f64>()
                        .map_err(|e| bad(i, format!("bad feature {f:?}: {e}")))?,
                );
            }
            labels.push(
                fields[w]
                    .trim()
                    .parse::<usize>()
                    .map_err(|e| bad(i, format!("bad label {:?}: {e}", fields[w])))?,
            );
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::Format {
                path: origin.to_string(),
                reason: "empty dataset".into(),
            });
        }
        let num_classes = labels.iter().max().unwrap() + 1;
        LabeledDataset::new(Tensor::from_rows(&rows)?, labels, num_classes)
    }
}

impl SampleSource for LabeledDataset {
    fn size(&self) -> usize {
        self.len()
    }

    fn class_count(&self) -> usize {
        self.num_classes
    }

    fn label_slice(&self) -> &[usize] {
        &self.labels
    }

    fn gather(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        self.batch(idx)
    }
}

/// Counts every sample read going through it. Wrap the real training set in
/// this and assert the counter is unchanged across a transfer run.
pub struct AuditedDataset {
    inner: LabeledDataset,
    reads: Cell<u64>,
}

impl AuditedDataset {
    pub fn new(inner: LabeledDataset) -> Self {
        AuditedDataset {
            inner,
            reads: Cell::new(0),
        }
    }

    pub fn reads(&self) -> u64 {
        self.reads.get()
    }
}

impl SampleSource for AuditedDataset {
    fn size(&self) -> usize {
        self.inner.len()
    }

    fn class_count(&self) -> usize {
        self.inner.num_classes()
    }

    fn label_slice(&self) -> &[usize] {
        self.inner.labels()
    }

    fn gather(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        self.reads.set(self.reads.get() + idx.len() as u64);
        self.inner.batch(idx)
    }
}

/// Three Gaussian blobs on a radius-2 circle (90, 210, 330 degrees) with
/// sigma 0.5, class-balanced and deterministic per seed.
pub fn make_toy_dataset(n_per_class: usize, seed: u64) -> Result<LabeledDataset> {
    if n_per_class < 2 {
        return Err(Error::invalid_arg(
            "make_toy_dataset",
            format!("need at least 2 samples per class, got {n_per_class}"),
        ));
    }
    const RADIUS: f64 = 2.0;
    const SIGMA: f64 = 0.5;
    let angles = [90.0f64, 210.0, 330.0].map(|a| a.to_radians());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(3 * n_per_class);
    let mut labels = Vec::with_capacity(3 * n_per_class);
    for (class, angle) in angles.iter().enumerate() {
        let (cx, cy) = (RADIUS * angle.cos(), RADIUS * angle.sin());
        for _ in 0..n_per_class {
            let dx: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal) * SIGMA;
            let dy: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal) * SIGMA;
            rows.push(vec![cx + dx, cy + dy]);
            labels.push(class);
        }
    }
    LabeledDataset::new(Tensor::from_rows(&rows)?, labels, 3)
}

pub struct PretrainOutcome {
    pub model: ClassifierModel,
    pub train_accuracy: f64,
}

/// Supervised pretraining of the toy teacher: cross-entropy, SGD with
/// momentum 0.9, weight decay 5e-4, lr 0.1 cosine-annealed to 1e-4.
pub fn pretrain_teacher(
    dataset: &dyn SampleSource,
    epochs: usize,
    seed: u64,
) -> Result<PretrainOutcome> {
    const LR_MAX: f64 = 0.1;
    const LR_MIN: f64 = 1e-4;
    const MOMENTUM: f64 = 0.9;
    const WEIGHT_DECAY: f64 = 5e-4;
    const BATCH: usize = 64;

    let mut model = ClassifierModel::toy_mlp(dataset.class_count(), seed);
    let mut opt = SgdOptimizer::new(MOMENTUM, WEIGHT_DECAY);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed);
    shuffle_rng.set_stream(0xda7a);

    for epoch in 0..epochs {
        let lr = cosine_lr(epoch, epochs, LR_MAX, LR_MIN);
        let mut order: Vec<usize> = (0..dataset.size()).collect();
        order.shuffle(&mut shuffle_rng);
        for (step, chunk) in order.chunks(BATCH).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let (x, labels) = dataset.gather(chunk);
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let out = model.forward(&mut tape, xv, ForwardMode::Train)?;
            let loss = cross_entropy(&mut tape, out.probs, &labels)?;
            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    detail: format!("pretraining cross-entropy became {value}"),
                });
            }
            tape.backward(loss)?;
            let grads = collect_grads(&tape, &out.binding);
            opt.step(&mut model.params, &grads, lr)?;
        }
    }

    let (all, labels) = dataset.gather(&(0..dataset.size()).collect::<Vec<_>>());
    let preds = model.predict(&all)?;
    let correct = preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
    let train_accuracy = correct as f64 / labels.len().max(1) as f64;
    Ok(PretrainOutcome {
        model,
        train_accuracy,
    })
}

/// One stored synthesized sample.
#[derive(Debug, Clone)]
pub struct PoolEntry {
    pub sample: Vec<f64>,
    pub label: usize,
    pub loss: f64,
    seq: u64,
}

/// Bounded store of synthesized samples, keeping the entries with the
/// lowest synthesis loss; ties favor earlier insertion.
#[derive(Debug, Clone)]
pub struct DataPool {
    capacity: usize,
    feature_shape: Vec<usize>,
    entries: Vec<PoolEntry>,
    next_seq: u64,
}

impl DataPool {
    pub fn new(capacity: usize, feature_shape: Vec<usize>) -> Self {
        DataPool {
            capacity,
            feature_shape,
            entries: Vec::new(),
            next_seq: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn losses(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.loss).collect()
    }

    /// Merges a batch into the pool, keeping the capacity-many lowest-loss
    /// entries. `losses` is aligned with the batch rows.
    pub fn update(&mut self, samples: &Tensor, labels: &[usize], losses: &[f64]) -> Result<()> {
        let rows = samples.shape()[0];
        if labels.len() != rows || losses.len() != rows {
            return Err(Error::invalid_arg(
                "pool_update",
                format!(
                    "batch of {rows} rows with {} labels and {} losses",
                    labels.len(),
                    losses.len()
                ),
            ));
        }
        let expected: Vec<usize> = std::iter::once(rows)
            .chain(self.feature_shape.iter().copied())
            .collect();
        if samples.shape() != expected.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "pool_update",
                lhs: samples.shape().to_vec(),
                rhs: expected,
            });
        }
        let f: usize = self.feature_shape.iter().product();
        for i in 0..rows {
            self.entries.push(PoolEntry {
                sample: samples.data()[i * f..(i + 1) * f].to_vec(),
                label: labels[i],
                loss: losses[i],
                seq: self.next_seq,
            });
            self.next_seq += 1;
        }
        self.entries
            .sort_by(|a, b| a.loss.total_cmp(&b.loss).then(a.seq.cmp(&b.seq)));
        self.entries.truncate(self.capacity);
        Ok(())
    }

    /// Paired batch over the stored entries, using stored teacher labels.
    pub fn sample_batch<R: Rng>(
        &self,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<(Tensor, Vec<usize>)> {
        if self.entries.is_empty() {
            return Err(Error::EmptyPool);
        }
        let labels: Vec<usize> = self.entries.iter().map(|e| e.label).collect();
        let idx = paired_batch_indices(&labels, batch_size, rng)?;
        let f: usize = self.feature_shape.iter().product();
        let mut data = Vec::with_capacity(idx.len() * f);
        let mut out_labels = Vec::with_capacity(idx.len());
        for &i in &idx {
            data.extend_from_slice(&self.entries[i].sample);
            out_labels.push(self.entries[i].label);
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(&self.feature_shape);
        Ok((Tensor::new(shape, data)?, out_labels))
    }

    /// Flattens the pool into named tensors for checkpointing.
    pub fn to_named_tensors(&self, params: &mut ModelParams, prefix: &str) {
        let f: usize = self.feature_shape.iter().product();
        let n = self.entries.len();
        let mut samples = Vec::with_capacity(n * f);
        let mut labels = Vec::with_capacity(n);
        let mut losses = Vec::with_capacity(n);
        let mut seqs = Vec::with_capacity(n);
        for e in &self.entries {
            samples.extend_from_slice(&e.sample);
            labels.push(e.label as f64);
            losses.push(e.loss);
            seqs.push(e.seq as f64);
        }
        params.insert(
            format!("{prefix}.samples"),
            Tensor::new(vec![n, f.max(1)], samples).expect("pool samples"),
        );
        params.insert(format!("{prefix}.labels"), Tensor::from_vec(labels));
        params.insert(format!("{prefix}.losses"), Tensor::from_vec(losses));
        params.insert(format!("{prefix}.seqs"), Tensor::from_vec(seqs));
        params.insert(
            format!("{prefix}.meta"),
            Tensor::from_vec(vec![self.capacity as f64, self.next_seq as f64]),
        );
        params.insert(
            format!("{prefix}.feature_shape"),
            Tensor::from_vec(self.feature_shape.iter().map(|&v| v as f64).collect()),
        );
    }

    pub fn from_named_tensors(params: &ModelParams, prefix: &str, origin: &str) -> Result<Self> {
        let get = |suffix: &str| -> Result<&Tensor> {
            params.get(&format!("{prefix}.{suffix}")).ok_or_else(|| Error::Format {
                path: origin.to_string(),
                reason: format!("missing pool tensor {prefix}.{suffix}"),
            })
        };
        let meta = get("meta")?;
        let feature_shape: Vec<usize> = get("feature_shape")?
            .data()
            .iter()
            .map(|&v| v as usize)
            .collect();
        let samples = get("samples")?;
        let labels = get("labels")?;
        let losses = get("losses")?;
        let seqs = get("seqs")?;
        let n = labels.len();
        let f: usize = feature_shape.iter().product();
        let mut pool = DataPool {
            capacity: meta.data()[0] as usize,
            feature_shape,
            entries: Vec::with_capacity(n),
            next_seq: meta.data()[1] as u64,
        };
        for i in 0..n {
            pool.entries.push(PoolEntry {
                sample: samples.data()[i * f..(i + 1) * f].to_vec(),
                label: labels.data()[i] as usize,
                loss: losses.data()[i],
                seq: seqs.data()[i] as u64,
            });
        }
        Ok(pool)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_dataset_is_balanced_and_deterministic() {
        let a = make_toy_dataset(100, 7).unwrap();
        let b = make_toy_dataset(100, 7).unwrap();
        assert_eq!(a.len(), 300);
        for class in 0..3 {
            assert_eq!(a.labels().iter().filter(|&&l| l == class).count(), 100);
        }
        assert!(a.samples().bit_eq(b.samples()));
        assert_ne!(
            make_toy_dataset(100, 8).unwrap().samples().data()[0],
            a.samples().data()[0]
        );
        // Coordinates stay in a handful of sigmas around the radius-2 circle.
        assert!(a.samples().data().iter().all(|v| v.abs() < 5.0));
    }

    #[test]
    fn toy_blobs_are_linearly_separable() {
        // Nearest-centroid is a linear probe; well-separated blobs should
        // classify almost perfectly.
        let train = make_toy_dataset(100, 1).unwrap();
        let test = make_toy_dataset(100, 2).unwrap();
        let mut means = vec![[0.0f64; 2]; 3];
        let mut counts = vec![0.0f64; 3];
        for i in 0..train.len() {
            let row = train.samples().row(i);
            let l = train.labels()[i];
            means[l][0] += row[0];
            means[l][1] += row[1];
            counts[l] += 1.0;
        }
        for (m, c) in means.iter_mut().zip(&counts) {
            m[0] /= c;
            m[1] /= c;
        }
        let mut correct = 0;
        for i in 0..test.len() {
            let row = test.samples().row(i);
            let pred = (0..3)
                .min_by(|&a, &b| {
                    let da = (row[0] - means[a][0]).powi(2) + (row[1] - means[a][1]).powi(2);
                    let db = (row[0] - means[b][0]).powi(2) + (row[1] - means[b][1]).powi(2);
                    da.total_cmp(&db)
                })
                .unwrap();
            if pred == test.labels()[i] {
                correct += 1;
            }
        }
        assert!(correct as f64 / test.len() as f64 >= 0.95);
    }

    #[test]
    fn pretrain_reaches_high_heldout_accuracy() {
        let train = make_toy_dataset(100, 11).unwrap();
        let heldout = make_toy_dataset(100, 12).unwrap();
        let outcome = pretrain_teacher(&train, 200, 3).unwrap();
        let preds = {
            let mut model = outcome.model;
            model.predict(heldout.samples()).unwrap()
        };
        let correct = preds
            .iter()
            .zip(heldout.labels())
            .filter(|(p, l)| p == l)
            .count();
        let acc = correct as f64 / heldout.len() as f64;
        assert!(acc >= 0.98, "held-out accuracy {acc}");
        assert!(outcome.train_accuracy >= 0.98);
    }

    #[test]
    fn pretrain_zero_epochs_returns_initialization() {
        let train = make_toy_dataset(10, 3).unwrap();
        let outcome = pretrain_teacher(&train, 0, 9).unwrap();
        let fresh = ClassifierModel::toy_mlp(3, 9);
        assert!(outcome.model.params.bit_eq(&fresh.params));
    }

    #[test]
    fn pretrain_is_deterministic_per_seed() {
        let train = make_toy_dataset(30, 5).unwrap();
        let a = pretrain_teacher(&train, 5, 21).unwrap();
        let b = pretrain_teacher(&train, 5, 21).unwrap();
        assert!(a.model.params.bit_eq(&b.model.params));
    }

    #[test]
    fn audited_dataset_counts_reads() {
        let ds = AuditedDataset::new(make_toy_dataset(5, 1).unwrap());
        assert_eq!(ds.reads(), 0);
        ds.gather(&[0, 1, 2]);
        assert_eq!(ds.reads(), 3);
    }

    fn batch_of(values: &[f64]) -> Tensor {
        Tensor::new(vec![values.len(), 1], values.to_vec()).unwrap()
    }

    #[test]
    fn pool_basic_retention() {
        let mut pool = DataPool::new(256, vec![1]);
        let samples = Tensor::zeros(vec![64, 1]);
        pool.update(&samples, &vec![0; 64], &vec![1.0; 64]).unwrap();
        assert_eq!(pool.len(), 64);
    }

    #[test]
    fn pool_keeps_lowest_losses() {
        let mut pool = DataPool::new(2, vec![1]);
        pool.update(&batch_of(&[10.0, 30.0]), &[0, 1], &[1.0, 3.0])
            .unwrap();
        pool.update(&batch_of(&[20.0]), &[2], &[2.0]).unwrap();
        assert_eq!(pool.losses(), vec![1.0, 2.0]);
        assert_eq!(pool.entries()[1].sample, vec![20.0]);
    }

    #[test]
    fn pool_unchanged_when_new_losses_are_worse() {
        let mut pool = DataPool::new(2, vec![1]);
        pool.update(&batch_of(&[1.0, 2.0]), &[0, 1], &[0.1, 0.2])
            .unwrap();
        let before: Vec<f64> = pool.losses();
        pool.update(&batch_of(&[3.0, 4.0]), &[0, 1], &[5.0, 6.0])
            .unwrap();
        assert_eq!(pool.losses(), before);
    }

    #[test]
    fn pool_ties_favor_earlier_insertion() {
        let mut pool = DataPool::new(1, vec![1]);
        pool.update(&batch_of(&[111.0]), &[0], &[1.0]).unwrap();
        pool.update(&batch_of(&[222.0]), &[1], &[1.0]).unwrap();
        assert_eq!(pool.entries()[0].sample, vec![111.0]);
    }

    #[test]
    fn pool_sampling_is_bounded_and_seeded() {
        let mut pool = DataPool::new(64, vec![1]);
        let values: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let labels: Vec<usize> = (0..16).map(|v| v % 3).collect();
        pool.update(&batch_of(&values), &labels, &vec![0.5; 16])
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10_000 {
            let (batch, ls) = pool.sample_batch(8, &mut rng).unwrap();
            assert_eq!(batch.shape(), &[8, 1]);
            assert!(batch.data().iter().all(|v| (0.0..16.0).contains(v)));
            for i in 0..4 {
                assert_eq!(ls[i], ls[i + 4]);
            }
        }
        let a = pool
            .sample_batch(8, &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        let b = pool
            .sample_batch(8, &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        assert!(a.0.bit_eq(&b.0));
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn empty_pool_refuses_to_sample() {
        let pool = DataPool::new(4, vec![2]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            pool.sample_batch(4, &mut rng),
            Err(Error::EmptyPool)
        ));
    }

    #[test]
    fn pool_round_trips_through_named_tensors() {
        let mut pool = DataPool::new(8, vec![2]);
        let samples = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        pool.update(&samples, &[0, 1], &[0.3, 0.1]).unwrap();
        let mut params = ModelParams::new();
        pool.to_named_tensors(&mut params, "pool");
        let back = DataPool::from_named_tensors(&params, "pool", "mem").unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.losses(), pool.losses());
        assert_eq!(back.entries()[0].sample, pool.entries()[0].sample);
        assert_eq!(back.capacity(), 8);
    }

    #[test]
    fn dataset_csv_round_trip() {
        let ds = make_toy_dataset(5, 99).unwrap();
        let text = ds.to_csv();
        let back = LabeledDataset::from_csv(&text, "mem").unwrap();
        assert_eq!(back.len(), ds.len());
        assert_eq!(back.labels(), ds.labels());
        for (a, b) in back.samples().data().iter().zip(ds.samples().data()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn pool_respects_capacity_under_random_updates() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut pool = DataPool::new(10, vec![1]);
        // Oracle: keep every (loss, seq, value) triple, sort, truncate.
        let mut oracle: Vec<(f64, u64, f64)> = Vec::new();
        let mut seq = 0u64;
        for _ in 0..50 {
            let n = rng.gen_range(1..6);
            let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let losses: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
            pool.update(&batch_of(&values), &labels, &losses).unwrap();
            for (v, l) in values.iter().zip(&losses) {
                oracle.push((*l, seq, *v));
                seq += 1;
            }
            oracle.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            oracle.truncate(10);
            assert!(pool.len() <= 10);
            let got: Vec<f64> = pool.entries().iter().map(|e| e.sample[0]).collect();
            let want: Vec<f64> = oracle.iter().map(|(_, _, v)| *v).collect();
            assert_eq!(got, want);
        }
    }
}
