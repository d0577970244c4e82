//! Feature-mean prototypes, the comparison arm for anchor regularization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{MseOutput, Tape, Var};
use crate::sar::gather_targets;
use crate::tensor::Tensor2D;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeState {
    /// `C × D`; rows of absent classes are zero.
    pub prototypes: Tensor2D,
    pub counts: Vec<usize>,
    pub bank_momentum: f64,
    pub present: Vec<bool>,
}

impl PrototypeState {
    /// Empty memory bank.
    pub fn empty(classes: usize, dim: usize, bank_momentum: f64) -> Self {
        Self {
            prototypes: Tensor2D::zeros(classes, dim),
            counts: vec![0; classes],
            bank_momentum,
            present: vec![false; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn targets(&self, labels: &[usize]) -> Result<(Tensor2D, Vec<bool>)> {
        gather_targets(&self.prototypes, &self.present, labels)
    }
}

/// Per-class mean of the feature rows.
pub fn compute_prototypes(
    features: &Tensor2D,
    labels: &[usize],
    classes: usize,
) -> Result<PrototypeState> {
    if labels.len() != features.rows() {
        return Err(Error::input(format!(
            "{} labels for {} feature rows",
            labels.len(),
            features.rows()
        )));
    }
    let dim = features.cols();
    let mut sums = Tensor2D::zeros(classes, dim);
    let mut counts = vec![0usize; classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::input(format!(
                "label {l} out of range for {classes} classes"
            )));
        }
        counts[l] += 1;
        for (s, &f) in sums.row_mut(l).iter_mut().zip(features.row(i)) {
            *s += f;
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 {
            sums.row_mut(c).iter_mut().for_each(|s| *s /= n as f64);
        }
    }
    Ok(PrototypeState {
        prototypes: sums,
        present: counts.iter().map(|&n| n > 0).collect(),
        counts,
        bank_momentum: 0.0,
    })
}

/// Momentum memory bank: `P ← m·P + (1−m)·P_batch` for classes in the batch;
/// classes seen for the first time adopt the batch prototype.
pub fn bank_update(bank: &PrototypeState, batch: &PrototypeState) -> Result<PrototypeState> {
    if bank.prototypes.shape() != batch.prototypes.shape() {
        return Err(Error::Dimension {
            op: "bank_update",
            lhs: bank.prototypes.shape(),
            rhs: batch.prototypes.shape(),
        });
    }
    let m = bank.bank_momentum;
    let mut next = bank.clone();
    for c in 0..bank.classes() {
        if !batch.present[c] {
            continue;
        }
        let src = batch.prototypes.row(c);
        let dst = next.prototypes.row_mut(c);
        if bank.present[c] {
            for (p, &b) in dst.iter_mut().zip(src) {
                *p = m * *p + (1.0 - m) * b;
            }
        } else {
            dst.copy_from_slice(src);
        }
        next.present[c] = true;
        next.counts[c] += batch.counts[c];
    }
    Ok(next)
}

/// MSE between each feature row and its class prototype, over present
/// classes. Prototypes are constants.
pub fn intra_p2p_loss(
    tape: &mut Tape,
    features: Var,
    labels: &[usize],
    state: &PrototypeState,
) -> Result<MseOutput> {
    let (targets, mask) = state.targets(labels)?;
    let t = tape.constant(targets);
    tape.mse(features, t, Some(&mask))
}
