//! Diversity and confusion diagnostics, accuracy, and embedding export.
//!
//! Pair statistics use unordered distinct pairs and the l1 distance. The
//! confusion metric reports `1 - mean cross-class distance` as-is; it can go
//! negative when different-class samples sit far apart.

use crate::error::{Error, Result};
use crate::models::{ClassifierModel, ForwardMode};
use crate::tensor::Tensor;

/// Per-epoch diagnostics row.
#[derive(Debug, Clone, Copy)]
pub struct MetricsReport {
    pub epoch: usize,
    pub accuracy: f64,
    pub agreement: f64,
    pub global_diversity: f64,
    pub intra_class_diversity: f64,
    pub inter_class_confusion: f64,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "epoch,accuracy,agreement,l_div,l_intra,l_inter";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch,
            self.accuracy,
            self.agreement,
            self.global_diversity,
            self.intra_class_diversity,
            self.inter_class_confusion
        )
    }
}

fn expect_matrix(samples: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    if samples.rank() != 2 {
        return Err(Error::InvalidShape {
            op,
            shape: samples.shape().to_vec(),
            reason: "expected rank 2 [samples, dim]".into(),
        });
    }
    Ok((samples.shape()[0], samples.shape()[1]))
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Mean l1 distance over all unordered distinct pairs.
pub fn global_diversity(samples: &Tensor) -> Result<f64> {
    let (n, _) = expect_matrix(samples, "global_diversity")?;
    if n < 2 {
        return Err(Error::invalid_arg(
            "global_diversity",
            "need at least 2 samples",
        ));
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            sum += l1(samples.row(i), samples.row(j));
        }
    }
    Ok(sum / (n * (n - 1) / 2) as f64)
}

/// Mean l1 distance over same-label pairs only. Batches without any
/// same-label pair report 0 with a warning.
pub fn intra_class_diversity(samples: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, _) = expect_matrix(samples, "intra_class_diversity")?;
    if labels.len() != n {
        return Err(Error::invalid_arg(
            "intra_class_diversity",
            format!("{} labels for {n} samples", labels.len()),
        ));
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            if labels[i] == labels[j] {
                sum += l1(samples.row(i), samples.row(j));
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        log::warn!("intra_class_diversity: no same-label pair; reporting 0");
        return Ok(0.0);
    }
    Ok(sum / pairs as f64)
}

/// Mean l1 distance over different-label pairs.
pub fn mean_cross_class_distance(samples: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, _) = expect_matrix(samples, "mean_cross_class_distance")?;
    if labels.len() != n {
        return Err(Error::invalid_arg(
            "mean_cross_class_distance",
            format!("{} labels for {n} samples", labels.len()),
        ));
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            if labels[i] != labels[j] {
                sum += l1(samples.row(i), samples.row(j));
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        return Err(Error::invalid_arg(
            "mean_cross_class_distance",
            "no cross-label pair in batch",
        ));
    }
    Ok(sum / pairs as f64)
}

/// One minus the mean cross-class distance; larger means harder,
/// boundary-adjacent samples. Unbounded below by construction.
pub fn inter_class_confusion(samples: &Tensor, labels: &[usize]) -> Result<f64> {
    Ok(1.0 - mean_cross_class_distance(samples, labels)?)
}

/// Fraction of argmax-correct predictions under evaluation-mode inference.
pub fn top1_accuracy(
    model: &mut ClassifierModel,
    samples: &Tensor,
    labels: &[usize],
) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::invalid_arg("top1_accuracy", "empty dataset"));
    }
    let preds = model.predict(samples)?;
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Fraction of positions where two label sequences agree.
pub fn decision_agreement(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::invalid_arg(
            "decision_agreement",
            format!("label sequences of length {} vs {}", a.len(), b.len()),
        ));
    }
    let same = a.iter().zip(b).filter(|(x, y)| x == y).count();
    Ok(same as f64 / a.len() as f64)
}

/// Row-major `resolution x resolution` grid over `[lo, hi]^2`.
pub fn grid_points(lo: f64, hi: f64, resolution: usize) -> Tensor {
    let mut data = Vec::with_capacity(resolution * resolution * 2);
    for yi in 0..resolution {
        for xi in 0..resolution {
            let fx = xi as f64 / (resolution - 1).max(1) as f64;
            let fy = yi as f64 / (resolution - 1).max(1) as f64;
            data.push(lo + fx * (hi - lo));
            data.push(lo + fy * (hi - lo));
        }
    }
    Tensor::new(vec![resolution * resolution, 2], data).expect("grid shape")
}

/// Writes per-sample global embeddings and labels as CSV: a header naming
/// the layer and dimensions, then one row per sample at 17 significant
/// digits so values parse back exactly.
pub fn export_embeddings(
    model: &mut ClassifierModel,
    samples: &Tensor,
    labels: &[usize],
    path: &std::path::Path,
) -> Result<()> {
    let (_, _, emb) = model.forward_infer(samples, ForwardMode::Eval)?;
    let (n, d) = (emb.shape()[0], emb.shape()[1]);
    if labels.len() != n {
        return Err(Error::invalid_arg(
            "export_embeddings",
            format!("{} labels for {n} samples", labels.len()),
        ));
    }
    let mut out = String::new();
    for j in 0..d {
        out.push_str(&format!("global_{j},"));
    }
    out.push_str("label\n");
    for i in 0..n {
        for v in emb.row(i) {
            out.push_str(&format!("{v:.16e},"));
        }
        out.push_str(&format!("{}\n", labels[i]));
    }
    crate::runner::write_atomic(path, out.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_samples_have_zero_diversity() {
        let t = Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert_eq!(global_diversity(&t).unwrap(), 0.0);
        assert_eq!(intra_class_diversity(&t, &[0, 0, 0]).unwrap(), 0.0);
    }

    #[test]
    fn single_pair_mean_is_the_distance() {
        let t = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(global_diversity(&t).unwrap(), 2.0);
    }

    #[test]
    fn diversity_requires_two_samples() {
        let t = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert!(global_diversity(&t).is_err());
    }

    #[test]
    fn diversity_is_permutation_invariant() {
        let t = Tensor::from_rows(&[vec![0.0, 1.0], vec![2.0, -1.0], vec![0.5, 0.5]]).unwrap();
        let p = Tensor::from_rows(&[vec![0.5, 0.5], vec![0.0, 1.0], vec![2.0, -1.0]]).unwrap();
        assert!((global_diversity(&t).unwrap() - global_diversity(&p).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn intra_masks_cross_class_pairs() {
        // Two same-label samples at l1 distance 3; a third sample of another
        // class far away is ignored.
        let t = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 2.0], vec![50.0, 50.0]]).unwrap();
        assert_eq!(intra_class_diversity(&t, &[1, 1, 2]).unwrap(), 3.0);
    }

    #[test]
    fn intra_equals_global_when_one_class() {
        let t = Tensor::from_rows(&[vec![0.0, 1.0], vec![2.0, -1.0], vec![0.5, 0.5]]).unwrap();
        let g = global_diversity(&t).unwrap();
        let i = intra_class_diversity(&t, &[0, 0, 0]).unwrap();
        assert!((g - i).abs() < 1e-15);
    }

    #[test]
    fn confusion_closed_forms() {
        let same = Tensor::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(inter_class_confusion(&same, &[0, 1]).unwrap(), 1.0);

        let half = Tensor::from_rows(&[vec![0.0, 0.0], vec![0.5, 0.0]]).unwrap();
        assert_eq!(inter_class_confusion(&half, &[0, 1]).unwrap(), 0.5);
    }

    #[test]
    fn confusion_decreases_with_distance() {
        let near = Tensor::from_rows(&[vec![0.0, 0.0], vec![0.2, 0.0]]).unwrap();
        let far = Tensor::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
        let cn = inter_class_confusion(&near, &[0, 1]).unwrap();
        let cf = inter_class_confusion(&far, &[0, 1]).unwrap();
        assert!(cf < cn);
    }

    #[test]
    fn confusion_requires_cross_pair() {
        let t = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert!(inter_class_confusion(&t, &[0, 0]).is_err());
    }

    #[test]
    fn metrics_match_naive_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for &n in &[2usize, 7, 31, 64] {
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect())
                .collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
            let t = Tensor::from_rows(&rows).unwrap();

            let d = |a: &[f64], b: &[f64]| -> f64 {
                a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
            };
            let (mut gs, mut gc) = (0.0, 0usize);
            let (mut is_, mut ic) = (0.0, 0usize);
            let (mut xs, mut xc) = (0.0, 0usize);
            for i in 0..n {
                for j in 0..n {
                    if i >= j {
                        continue;
                    }
                    let dist = d(&rows[i], &rows[j]);
                    gs += dist;
                    gc += 1;
                    if labels[i] == labels[j] {
                        is_ += dist;
                        ic += 1;
                    } else {
                        xs += dist;
                        xc += 1;
                    }
                }
            }
            assert!((global_diversity(&t).unwrap() - gs / gc as f64).abs() < 1e-10);
            if ic > 0 {
                assert!(
                    (intra_class_diversity(&t, &labels).unwrap() - is_ / ic as f64).abs() < 1e-10
                );
            }
            if xc > 0 {
                assert!(
                    (inter_class_confusion(&t, &labels).unwrap() - (1.0 - xs / xc as f64)).abs()
                        < 1e-10
                );
            }
        }
    }

    #[test]
    fn agreement_and_accuracy_basics() {
        assert_eq!(decision_agreement(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(decision_agreement(&[1, 2, 3], &[1, 0, 0]).unwrap(), 1.0 / 3.0);
        assert!(decision_agreement(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn grid_covers_bounds() {
        let g = grid_points(-3.0, 3.0, 10);
        assert_eq!(g.shape(), &[100, 2]);
        assert_eq!(g.row(0), &[-3.0, -3.0]);
        assert_eq!(g.row(99), &[3.0, 3.0]);
    }

    #[test]
    fn export_embeddings_round_trips() {
        use crate::data::make_toy_dataset;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.csv");
        let ds = make_toy_dataset(4, 3).unwrap();
        let mut model = ClassifierModel::toy_mlp(3, 1);
        export_embeddings(&mut model, ds.samples(), ds.labels(), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        let header = lines.next().unwrap();
        assert!(header.starts_with("global_0,"));
        assert_eq!(header.split(',').count(), 33); // 32 dims + label

        let (_, _, emb) = model
            .forward_infer(ds.samples(), ForwardMode::Eval)
            .unwrap();
        for (i, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            assert_eq!(fields.len(), 33);
            for (j, f) in fields[..32].iter().enumerate() {
                let parsed: f64 = f.parse().unwrap();
                assert!((parsed - emb.row(i)[j]).abs() <= 1e-12);
            }
            assert_eq!(fields[32].parse::<usize>().unwrap(), ds.labels()[i]);
        }

        // Re-export is byte-identical.
        let path2 = dir.path().join("emb2.csv");
        export_embeddings(&mut model, ds.samples(), ds.labels(), &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }
}
