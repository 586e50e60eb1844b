//! Loss terms for sample synthesis and student training.
//!
//! The synthesis objective rewards teacher/student disagreement, spreads
//! same-class samples apart and pulls different-class samples together,
//! while keeping teacher confidence high and feature statistics close to
//! the teacher's batch-norm state. The student objective is the mirror
//! image: match the teacher's outputs, cluster same-class embeddings, and
//! align embeddings through a trained projection.
//!
//! All terms reduce by arithmetic mean over the batch, so weights are
//! batch-size invariant. Probabilities are floored at `PROB_FLOOR` before
//! any logarithm.

use crate::error::{Error, Result};
use crate::models::{Binding, BnHook, ProjectionHead};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

/// Flooring applied to probabilities before logarithms, keeping KL and
/// cross-entropy finite for saturated softmax outputs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Scalar hyperparameters of the two objectives.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Triplet margin.
    pub tau: f64,
    /// Weight of the spreading triplet term in the synthesis objective.
    pub beta: f64,
    pub w_adv: f64,
    /// Weight of the clustering triplet term in the student objective.
    pub w_tri: f64,
    pub w_oh: f64,
    pub w_bn: f64,
    pub w_emb: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            tau: 1.0,
            beta: 1.0,
            w_adv: 1.0,
            w_tri: 1.0,
            w_oh: 1.0,
            w_bn: 1.0,
            w_emb: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("tau", self.tau),
            ("beta", self.beta),
            ("w_adv", self.w_adv),
            ("w_tri", self.w_tri),
            ("w_oh", self.w_oh),
            ("w_bn", self.w_bn),
            ("w_emb", self.w_emb),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "loss weight {name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossPhase {
    Synthesis,
    Student,
}

impl LossPhase {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossPhase::Synthesis => "synthesis",
            LossPhase::Student => "student",
        }
    }
}

/// Per-term scalar values of one optimization step.
#[derive(Debug, Clone, Copy)]
pub struct LossReport {
    pub phase: LossPhase,
    pub adv: f64,
    pub ntri: f64,
    pub tri: f64,
    pub oh: f64,
    pub bn: f64,
    pub emb: f64,
    pub total: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,phase,l_adv,l_ntri,l_tri,l_oh,l_bn,l_emb,total";

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            step,
            self.phase.as_str(),
            self.adv,
            self.ntri,
            self.tri,
            self.oh,
            self.bn,
            self.emb,
            self.total
        )
    }
}

fn expect_probabilities(tape: &Tape, v: VarId, context: &str) -> Result<()> {
    let t = tape.value(v);
    if t.rank() != 2 {
        return Err(Error::InvalidShape {
            op: "probability batch",
            shape: t.shape().to_vec(),
            reason: format!("{context}: expected rank 2 [batch, classes]"),
        });
    }
    if let Some(bad) = t.data().iter().find(|p| **p < 0.0) {
        return Err(Error::invalid_arg(
            context.to_string(),
            format!("negative probability {bad}"),
        ));
    }
    Ok(())
}

/// KL divergence of the student's output from the teacher's, averaged over
/// the batch. Gradients flow through both arguments; pass a constant leaf
/// for a side that is fixed.
pub fn adversarial_kl(tape: &mut Tape, p_teacher: VarId, p_student: VarId) -> Result<VarId> {
    expect_probabilities(tape, p_teacher, "adversarial_kl teacher")?;
    expect_probabilities(tape, p_student, "adversarial_kl student")?;
    let (ts, ss) = (
        tape.value(p_teacher).shape().to_vec(),
        tape.value(p_student).shape().to_vec(),
    );
    if ts != ss {
        return Err(Error::ShapeMismatch {
            op: "adversarial_kl",
            lhs: ts,
            rhs: ss,
        });
    }
    let batch = ts[0] as f64;
    let pf = tape.clamp_min(p_teacher, PROB_FLOOR);
    let qf = tape.clamp_min(p_student, PROB_FLOOR);
    let lp = tape.log(pf);
    let lq = tape.log(qf);
    let diff = tape.sub(lp, lq)?;
    let terms = tape.mul(pf, diff)?;
    let sum = tape.sum_all(terms);
    Ok(tape.mul_scalar(sum, 1.0 / batch))
}

fn squared_row_distance(tape: &mut Tape, a: VarId, b: VarId) -> Result<VarId> {
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    tape.row_sum(sq)
}

fn triplet_common(
    tape: &mut Tape,
    e_a: VarId,
    e_p: VarId,
    e_n: VarId,
    tau: f64,
    op: &'static str,
) -> Result<(VarId, VarId)> {
    let sa = tape.value(e_a).shape().to_vec();
    for other in [e_p, e_n] {
        let so = tape.value(other).shape().to_vec();
        if sa != so {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa,
                rhs: so,
            });
        }
    }
    if sa.len() != 2 {
        return Err(Error::InvalidShape {
            op,
            shape: sa,
            reason: "expected rank 2 [triplets, dim]".into(),
        });
    }
    if !tau.is_finite() || tau < 0.0 {
        return Err(Error::invalid_arg(op, format!("margin must be >= 0, got {tau}")));
    }
    let d_ap = squared_row_distance(tape, e_a, e_p)?;
    let d_an = squared_row_distance(tape, e_a, e_n)?;
    Ok((d_ap, d_an))
}

/// Spreading triplet loss: `[|a - n|^2 - |a - p|^2 + tau]_+` averaged over
/// triplets. Minimizing it pushes same-class samples apart and pulls
/// different-class samples together.
pub fn triplet_negative(
    tape: &mut Tape,
    e_a: VarId,
    e_p: VarId,
    e_n: VarId,
    tau: f64,
) -> Result<VarId> {
    let (d_ap, d_an) = triplet_common(tape, e_a, e_p, e_n, tau, "triplet_negative")?;
    let gap = tape.sub(d_an, d_ap)?;
    let shifted = tape.add_scalar(gap, tau);
    let hinged = tape.relu(shifted);
    Ok(tape.mean_all(hinged))
}

/// Classic clustering triplet loss: `[|a - p|^2 - |a - n|^2 + tau]_+`
/// averaged over triplets.
pub fn triplet_positive(
    tape: &mut Tape,
    e_a: VarId,
    e_p: VarId,
    e_n: VarId,
    tau: f64,
) -> Result<VarId> {
    let (d_ap, d_an) = triplet_common(tape, e_a, e_p, e_n, tau, "triplet_positive")?;
    let gap = tape.sub(d_ap, d_an)?;
    let shifted = tape.add_scalar(gap, tau);
    let hinged = tape.relu(shifted);
    Ok(tape.mean_all(hinged))
}

/// Cross-entropy of each probability row against the one-hot vector at its
/// own argmax, averaged over the batch. Low values mean confident outputs.
pub fn one_hot_loss(tape: &mut Tape, p_teacher: VarId) -> Result<VarId> {
    expect_probabilities(tape, p_teacher, "one_hot_loss")?;
    let t = tape.value(p_teacher).clone();
    let (b, k) = (t.shape()[0], t.shape()[1]);
    let mut mask = vec![0.0; b * k];
    for i in 0..b {
        mask[i * k + t.argmax_row(i)] = 1.0;
    }
    let mask = tape.constant(Tensor::new(vec![b, k], mask).expect("mask shape"));
    let pf = tape.clamp_min(p_teacher, PROB_FLOOR);
    let lp = tape.log(pf);
    let picked = tape.mul(lp, mask)?;
    let sum = tape.sum_all(picked);
    Ok(tape.mul_scalar(sum, -1.0 / b as f64))
}

/// Supervised cross-entropy against integer labels, averaged over the batch.
/// Used for teacher pretraining only; the transfer loop never sees labels
/// other than the teacher's own argmax.
pub fn cross_entropy(tape: &mut Tape, probs: VarId, labels: &[usize]) -> Result<VarId> {
    expect_probabilities(tape, probs, "cross_entropy")?;
    let t = tape.value(probs);
    let (b, k) = (t.shape()[0], t.shape()[1]);
    if labels.len() != b {
        return Err(Error::invalid_arg(
            "cross_entropy",
            format!("{} labels for a batch of {b}", labels.len()),
        ));
    }
    let mut mask = vec![0.0; b * k];
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::invalid_arg(
                "cross_entropy",
                format!("label {y} out of range for {k} classes"),
            ));
        }
        mask[i * k + y] = 1.0;
    }
    let mask = tape.constant(Tensor::new(vec![b, k], mask).expect("mask shape"));
    let pf = tape.clamp_min(probs, PROB_FLOOR);
    let lp = tape.log(pf);
    let picked = tape.mul(lp, mask)?;
    let sum = tape.sum_all(picked);
    Ok(tape.mul_scalar(sum, -1.0 / b as f64))
}

/// Squared distance between per-batch feature statistics and the stored
/// running statistics, summed over batch-norm layers and channels.
pub fn bn_stat_loss(tape: &mut Tape, hooks: &[BnHook]) -> Result<VarId> {
    let mut acc: Option<VarId> = None;
    for hook in hooks {
        let ch = tape.value(hook.mean).len();
        if hook.running_mean.len() != ch || hook.running_var.len() != ch {
            return Err(Error::invalid_arg(
                "bn_stat_loss",
                format!(
                    "layer {}: running stats have {}/{} channels, batch stats have {ch}",
                    hook.layer,
                    hook.running_mean.len(),
                    hook.running_var.len()
                ),
            ));
        }
        let rm = tape.constant(hook.running_mean.clone());
        let rv = tape.constant(hook.running_var.clone());
        let dm = tape.sub(hook.mean, rm)?;
        let dm2 = tape.mul(dm, dm)?;
        let sm = tape.sum_all(dm2);
        let dv = tape.sub(hook.var, rv)?;
        let dv2 = tape.mul(dv, dv)?;
        let sv = tape.sum_all(dv2);
        let layer_sum = tape.add(sm, sv)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, layer_sum)?,
            None => layer_sum,
        });
    }
    Ok(acc.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0))))
}

/// Mean squared distance between teacher embeddings and projected student
/// embeddings. Returns the projection head's parameter binding alongside the
/// loss so the head trains jointly with the student.
pub fn embedding_match(
    tape: &mut Tape,
    e_teacher: VarId,
    e_student: VarId,
    head: &ProjectionHead,
) -> Result<(VarId, Binding)> {
    let ts = tape.value(e_teacher).shape().to_vec();
    if ts.len() != 2 || ts[1] != head.out_dim {
        return Err(Error::ShapeMismatch {
            op: "embedding_match",
            lhs: ts,
            rhs: vec![0, head.out_dim],
        });
    }
    let (projected, binding) = head.forward(tape, e_student)?;
    let d2 = squared_row_distance(tape, e_teacher, projected)?;
    Ok((tape.mean_all(d2), binding))
}

fn weighted(tape: &mut Tape, term: Option<VarId>, weight: f64) -> Option<VarId> {
    term.map(|t| tape.mul_scalar(t, weight))
}

fn sum_terms(tape: &mut Tape, terms: &[Option<VarId>]) -> Result<VarId> {
    let mut acc: Option<VarId> = None;
    for t in terms.iter().flatten() {
        acc = Some(match acc {
            Some(a) => tape.add(a, *t)?,
            None => *t,
        });
    }
    Ok(acc.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0))))
}

fn term_value(tape: &Tape, term: Option<VarId>) -> f64 {
    term.map_or(0.0, |t| tape.value(t).item().expect("scalar term"))
}

/// Synthesis objective: `-w_adv * adv + beta * ntri + w_oh * oh + w_bn * bn`.
/// Absent terms contribute zero. Returns the scalar total and the report.
pub fn generator_total(
    tape: &mut Tape,
    adv: Option<VarId>,
    ntri: Option<VarId>,
    oh: Option<VarId>,
    bn: Option<VarId>,
    weights: &LossWeights,
) -> Result<(VarId, LossReport)> {
    weights.validate()?;
    let report = LossReport {
        phase: LossPhase::Synthesis,
        adv: term_value(tape, adv),
        ntri: term_value(tape, ntri),
        tri: 0.0,
        oh: term_value(tape, oh),
        bn: term_value(tape, bn),
        emb: 0.0,
        total: 0.0,
    };
    let wadv = weighted(tape, adv, -weights.w_adv);
    let wntri = weighted(tape, ntri, weights.beta);
    let woh = weighted(tape, oh, weights.w_oh);
    let wbn = weighted(tape, bn, weights.w_bn);
    let total = sum_terms(tape, &[wadv, wntri, woh, wbn])?;
    let report = LossReport {
        total: tape.value(total).item()?,
        ..report
    };
    Ok((total, report))
}

/// Student objective: `w_adv * adv + w_tri * tri + w_emb * emb`.
pub fn student_total(
    tape: &mut Tape,
    adv: Option<VarId>,
    tri: Option<VarId>,
    emb: Option<VarId>,
    weights: &LossWeights,
) -> Result<(VarId, LossReport)> {
    weights.validate()?;
    let report = LossReport {
        phase: LossPhase::Student,
        adv: term_value(tape, adv),
        ntri: 0.0,
        tri: term_value(tape, tri),
        oh: 0.0,
        bn: 0.0,
        emb: term_value(tape, emb),
        total: 0.0,
    };
    let wadv = weighted(tape, adv, weights.w_adv);
    let wtri = weighted(tape, tri, weights.w_tri);
    let wemb = weighted(tape, emb, weights.w_emb);
    let total = sum_terms(tape, &[wadv, wtri, wemb])?;
    let report = LossReport {
        total: tape.value(total).item()?,
        ..report
    };
    Ok((total, report))
}
