//! The auxiliary anchor stream.
//!
//! Fixed anchors are projected by a small [`EmbeddingHead`] and scored by the
//! shared classifier. The auxiliary cross-entropy concentrates on anchors the
//! classifier is unsure about: anchors above `tau` get weight 0 and the rest
//! are weighted by their normalized log-confidence. Embedded anchors that the
//! classifier accepts with probability above `delta` are folded into
//! [`SemanticAnchorState`] by EMA, and those semantic anchors become
//! stop-gradient targets for the features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::AnchorSet;
use crate::error::{Error, Result};
use crate::grad::{softmax_rows, MseOutput, Tape, Var};
use crate::nn::{BoundMlp, Linear, Mlp};
use crate::tensor::Tensor2D;

/// Lower/upper clamp applied to confidences before taking logs.
pub const CONF_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SarConfig {
    /// Weight of the auxiliary cross-entropy.
    pub lambda1: f64,
    /// Weight of the feature-to-anchor pull.
    pub lambda2: f64,
    /// Reweighting threshold: anchors with confidence above it are ignored.
    pub tau: f64,
    /// Gate for using and updating a semantic anchor.
    pub delta: f64,
    /// EMA decay.
    pub alpha: f64,
}

impl Default for SarConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.1,
            tau: 0.9,
            delta: 0.8,
            alpha: 0.999,
        }
    }
}

impl SarConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::input("lambda1 and lambda2 must be non-negative"));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::input(format!(
                "tau must lie in (0, 1], got {}",
                self.tau
            )));
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(Error::input(format!(
                "delta must lie in (0, 1], got {}",
                self.delta
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::input(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// `h_ψ`: two affine+ReLU layers and an affine output, `D → D`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingHead {
    pub mlp: Mlp,
}

impl EmbeddingHead {
    /// He-uniform weights (`±sqrt(6/fan_in)`), so the embedded anchors keep
    /// roughly the scale of the raw anchors through the ReLU layers.
    pub fn init(dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            mlp: Mlp::init_with_gain(&[dim, hidden, hidden, dim], 6f64.sqrt(), rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.mlp.in_dim()
    }

    /// `h_ψ(A)` without recording gradients.
    pub fn embed(&self, anchors: &AnchorSet) -> Result<Tensor2D> {
        self.check(anchors)?;
        self.mlp.forward(anchors.matrix())
    }

    fn check(&self, anchors: &AnchorSet) -> Result<()> {
        if anchors.dim() != self.dim() {
            return Err(Error::Dimension {
                op: "embed_anchors",
                lhs: anchors.matrix().shape(),
                rhs: (self.dim(), self.mlp.out_dim()),
            });
        }
        Ok(())
    }
}

/// Taped `h_ψ(A)`. The anchors enter as a constant, so only `ψ` receives
/// gradient.
pub fn embed_anchors(
    tape: &mut Tape,
    head: &EmbeddingHead,
    bound: &BoundMlp,
    anchors: &AnchorSet,
) -> Result<Var> {
    head.check(anchors)?;
    let a = tape.constant(anchors.matrix().clone());
    bound.forward(tape, a)
}

/// Diagonal of `softmax(g_θ(embedded))`: the probability that anchor `c` is
/// assigned to class `c`.
pub fn anchor_confidences(classifier: &Linear, embedded: &Tensor2D) -> Result<Vec<f64>> {
    let c = embedded.rows();
    if classifier.out_dim() != c {
        return Err(Error::Dimension {
            op: "anchor_confidences",
            lhs: embedded.shape(),
            rhs: classifier.weight.shape(),
        });
    }
    let logits = classifier.forward(embedded)?;
    Ok(confidences_from_probs(&softmax_rows(&logits)))
}

pub(crate) fn confidences_from_probs(probs: &Tensor2D) -> Vec<f64> {
    (0..probs.rows()).map(|c| probs.get(c, c)).collect()
}

pub fn clamp_confidence(p: f64) -> f64 {
    p.clamp(CONF_EPS, 1.0 - CONF_EPS)
}

/// Classifier-aware weights for the auxiliary loss.
///
/// `w[c] = 0` when `conf[c] > tau`; otherwise
/// `w[c] = log conf[c] / Σ_{i: conf[i] ≤ tau} log conf[i]`.
/// Returns all zeros when every anchor is above `tau`.
pub fn compute_reweights(conf: &[f64], tau: f64) -> Vec<f64> {
    let logs: Vec<Option<f64>> = conf
        .iter()
        .map(|&p| (p <= tau).then(|| clamp_confidence(p).ln()))
        .collect();
    let denom: f64 = logs.iter().flatten().sum();
    logs.iter()
        .map(|l| match l {
            Some(v) if denom != 0.0 => v / denom,
            _ => 0.0,
        })
        .collect()
}

/// `−Σ_c w_c · log conf_c`, evaluated on clamped confidences.
pub fn aux_ce_loss(conf: &[f64], w: &[f64]) -> Result<f64> {
    if conf.len() != w.len() {
        return Err(Error::input(format!(
            "{} confidences but {} weights",
            conf.len(),
            w.len()
        )));
    }
    Ok(conf
        .iter()
        .zip(w)
        .filter(|(_, &wc)| wc != 0.0)
        .map(|(&p, &wc)| -wc * clamp_confidence(p).ln())
        .sum())
}

/// Taped auxiliary loss on the logits `g_θ(h_ψ(A))`; `w` is a constant.
pub fn aux_ce_on_tape(tape: &mut Tape, anchor_logits: Var, w: &[f64]) -> Result<Var> {
    let labels: Vec<usize> = (0..w.len()).collect();
    Ok(tape.weighted_ce(anchor_logits, &labels, w)?.loss)
}

/// `L_ce + λ₁·L_aux + λ₂·L_p2a`.
pub fn sar_total_loss(ce: f64, aux: f64, p2a: f64, cfg: &SarConfig) -> f64 {
    ce + cfg.lambda1 * aux + cfg.lambda2 * p2a
}

/// EMA semantic anchors with per-class gating.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticAnchorState {
    pub anchors_hat: Tensor2D,
    pub alpha: f64,
    pub active: Vec<bool>,
    pub initialized: Vec<bool>,
    pub step: u64,
}

impl SemanticAnchorState {
    pub fn new(classes: usize, dim: usize, alpha: f64) -> Self {
        Self {
            anchors_hat: Tensor2D::zeros(classes, dim),
            alpha,
            active: vec![false; classes],
            initialized: vec![false; classes],
            step: 0,
        }
    }

    pub fn classes(&self) -> usize {
        self.anchors_hat.rows()
    }

    /// Folds `embedded` into the semantic anchors for every class whose
    /// confidence is strictly above `delta`. The first accepted snapshot of a
    /// class initializes it; gated classes are left untouched and marked
    /// inactive.
    pub fn ema_update(&mut self, embedded: &Tensor2D, conf: &[f64], delta: f64) -> Result<()> {
        if embedded.shape() != self.anchors_hat.shape() || conf.len() != self.classes() {
            return Err(Error::Dimension {
                op: "ema_update",
                lhs: self.anchors_hat.shape(),
                rhs: embedded.shape(),
            });
        }
        let alpha = self.alpha;
        for (c, &p) in conf.iter().enumerate() {
            if p > delta {
                let src = embedded.row(c);
                let dst = self.anchors_hat.row_mut(c);
                if self.initialized[c] {
                    for (a, &h) in dst.iter_mut().zip(src) {
                        *a = alpha * *a + (1.0 - alpha) * h;
                    }
                } else {
                    dst.copy_from_slice(src);
                    self.initialized[c] = true;
                }
                self.active[c] = true;
            } else {
                self.active[c] = false;
            }
        }
        self.step += 1;
        Ok(())
    }

    /// Per-sample targets `Y·Â` and the mask of samples whose class is active.
    pub fn targets(&self, labels: &[usize]) -> Result<(Tensor2D, Vec<bool>)> {
        gather_targets(&self.anchors_hat, &self.active, labels)
    }
}

pub(crate) fn gather_targets(
    table: &Tensor2D,
    usable: &[bool],
    labels: &[usize],
) -> Result<(Tensor2D, Vec<bool>)> {
    let classes = table.rows();
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::input(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let mut targets = Tensor2D::zeros(labels.len(), table.cols());
    let mut mask = Vec::with_capacity(labels.len());
    for (i, &l) in labels.iter().enumerate() {
        mask.push(usable[l]);
        if usable[l] {
            targets.row_mut(i).copy_from_slice(table.row(l));
        }
    }
    Ok((targets, mask))
}

/// `D_mse(F, Y·Â)` over samples whose class is active. The semantic anchors
/// enter as a constant, so only the features receive gradient.
pub fn p2a_loss(
    tape: &mut Tape,
    features: Var,
    labels: &[usize],
    state: &SemanticAnchorState,
) -> Result<MseOutput> {
    let (targets, mask) = state.targets(labels)?;
    let t = tape.constant(targets);
    tape.mse(features, t, Some(&mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::{generate_anchors, AnchorSource};
    use crate::grad::finite_diff_check;
    use crate::rng;
    use proptest::prelude::*;

    #[test]
    #[allow(clippy::approx_constant)] // hand-computed expectation, not log10(2)
    fn reweights_worked_example() {
        let w = compute_reweights(&[0.95, 0.5, 0.2], 0.9);
        let d = 0.5f64.ln() + 0.2f64.ln();
        assert_eq!(w[0], 0.0);
        assert!((w[1] - 0.5f64.ln() / d).abs() < 1e-15);
        assert!((w[1] - 0.3010).abs() < 1e-4);
        assert!((w[2] - 0.6990).abs() < 1e-4);
    }

    #[test]
    fn reweights_degenerate_cases() {
        assert_eq!(compute_reweights(&[0.95, 0.99, 0.91], 0.9), vec![0.0; 3]);
        assert_eq!(
            compute_reweights(&[0.95, 0.3, 0.99], 0.9),
            vec![0.0, 1.0, 0.0]
        );
        // exactly tau stays in the unfiltered set
        assert_eq!(compute_reweights(&[0.9, 0.95], 0.9), vec![1.0, 0.0]);
    }

    #[test]
    fn aux_loss_values() {
        assert!((aux_ce_loss(&[0.5], &[1.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(aux_ce_loss(&[0.3, 0.7], &[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(aux_ce_loss(&[1.0, 1.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert!(aux_ce_loss(&[0.5], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn total_loss_combination() {
        let cfg = SarConfig::default();
        assert_eq!(
            (cfg.lambda1, cfg.lambda2, cfg.tau, cfg.delta, cfg.alpha),
            (1.0, 0.1, 0.9, 0.8, 0.999)
        );
        assert!((sar_total_loss(1.0, 0.5, 2.0, &cfg) - 1.7).abs() < 1e-15);
        let zero = SarConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            ..cfg
        };
        assert_eq!(sar_total_loss(1.25, 9.0, 9.0, &zero), 1.25);
    }

    #[test]
    fn confidences_reference_values() {
        let embedded = Tensor2D::identity(2);
        let cls = Linear {
            weight: Tensor2D::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0]]),
            bias: Tensor2D::zeros(1, 2),
        };
        let conf = anchor_confidences(&cls, &embedded).unwrap();
        let e = 1f64.exp();
        assert!((conf[0] - e * e / (e * e + 1.0)).abs() < 1e-15);
        assert!((conf[1] - e / (1.0 + e)).abs() < 1e-15);
        assert!((conf[0] - 0.8808).abs() < 1e-4 && (conf[1] - 0.7311).abs() < 1e-4);

        let zero = Linear::zeros(2, 3);
        let conf = anchor_confidences(&zero, &Tensor2D::filled(3, 2, 1.0)).unwrap();
        assert!(conf.iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));

        let sat = Linear {
            weight: Tensor2D::identity(3),
            bias: Tensor2D::zeros(1, 3),
        };
        let mut big = Tensor2D::identity(3);
        big.data_mut().iter_mut().for_each(|v| *v *= 1000.0);
        let conf = anchor_confidences(&sat, &big).unwrap();
        assert!(conf.iter().all(|&p| (p - 1.0).abs() < 1e-12));
    }

    #[test]
    fn embedding_shapes_and_gradients() {
        let anchors = generate_anchors(AnchorSource::Nd, 3, 4, 1).unwrap();
        let head = EmbeddingHead::init(4, 5, &mut rng::stream(3, 0));
        let out = head.embed(&anchors).unwrap();
        assert_eq!(out.shape(), (3, 4));

        let loss = |p: &[Tensor2D]| -> Result<(f64, Vec<Tensor2D>)> {
            let mut h = head.clone();
            for (dst, src) in h.mlp.tensors_mut().into_iter().zip(p) {
                *dst = src.clone();
            }
            let mut tape = Tape::new();
            let bound = h.mlp.bind(&mut tape);
            let e = embed_anchors(&mut tape, &h, &bound, &anchors)?;
            let s = tape.sum(e)?;
            let v = tape.value(s).item();
            let g = tape.backward(s)?;
            Ok((v, bound.grads(&g)))
        };
        let params: Vec<Tensor2D> = head.mlp.tensors().into_iter().cloned().collect();
        let (_, analytic) = loss(&params).unwrap();
        let err = finite_diff_check(|p| Ok(loss(p)?.0), &params, &analytic, 1e-4).unwrap();
        assert!(err <= 1e-4, "{err}");

        let wrong = generate_anchors(AnchorSource::Nd, 3, 5, 1).unwrap();
        assert!(matches!(head.embed(&wrong), Err(Error::Dimension { .. })));
    }

    #[test]
    fn ema_gating_and_recurrence() {
        let mut st = SemanticAnchorState::new(2, 2, 1.0);
        let h0 = Tensor2D::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        st.ema_update(&h0, &[0.9, 0.9], 0.8).unwrap();
        assert_eq!(st.anchors_hat, h0);
        // alpha = 1 keeps initialized rows fixed
        st.ema_update(&Tensor2D::zeros(2, 2), &[0.9, 0.9], 0.8)
            .unwrap();
        assert_eq!(st.anchors_hat, h0);
        // conf == delta is gated
        st.ema_update(&Tensor2D::zeros(2, 2), &[0.8, 0.95], 0.8)
            .unwrap();
        assert_eq!(st.active, vec![false, true]);

        let alpha: f64 = 0.9;
        let mut st = SemanticAnchorState::new(1, 1, alpha);
        st.ema_update(&Tensor2D::scalar(2.0), &[1.0], 0.5).unwrap();
        let h = 5.0;
        for _ in 0..10 {
            st.ema_update(&Tensor2D::scalar(h), &[1.0], 0.5).unwrap();
        }
        let closed = alpha.powi(10) * 2.0 + (1.0 - alpha.powi(10)) * h;
        assert!((st.anchors_hat.item() - closed).abs() < 1e-12);
        assert_eq!(st.step, 11);
    }

    #[test]
    fn p2a_values_and_gradient_isolation() {
        let mut st = SemanticAnchorState::new(2, 2, 0.99);
        let h = Tensor2D::from_rows(&[vec![0.0, 1.0], vec![5.0, 5.0]]);
        st.ema_update(&h, &[0.9, 0.1], 0.8).unwrap();

        let mut tape = Tape::new();
        let f = tape.param(Tensor2D::from_rows(&[vec![1.0, 3.0]]));
        let out = p2a_loss(&mut tape, f, &[0], &st).unwrap();
        assert_eq!(tape.value(out.loss).item(), 2.5);

        // class 1 inactive -> nothing to pull
        let mut tape = Tape::new();
        let f = tape.param(Tensor2D::from_rows(&[vec![1.0, 3.0]]));
        let out = p2a_loss(&mut tape, f, &[1], &st).unwrap();
        assert!(out.empty);
        let g = tape.backward(out.loss).unwrap();
        assert_eq!(g.get(f), Tensor2D::zeros(1, 2));

        // features equal to their anchors
        let mut tape = Tape::new();
        let f = tape.param(Tensor2D::from_rows(&[vec![0.0, 1.0]]));
        let out = p2a_loss(&mut tape, f, &[0], &st).unwrap();
        assert_eq!(tape.value(out.loss).item(), 0.0);
    }

    proptest! {
        #[test]
        fn reweight_properties(conf in prop::collection::vec(0.001f64..0.999, 2..12), tau in 0.05f64..0.99) {
            let w = compute_reweights(&conf, tau);
            let kept: Vec<usize> = (0..conf.len()).filter(|&i| conf[i] <= tau).collect();
            for i in 0..conf.len() {
                if conf[i] > tau {
                    prop_assert_eq!(w[i], 0.0);
                } else {
                    prop_assert!(w[i] > 0.0);
                }
            }
            if !kept.is_empty() {
                let s: f64 = kept.iter().map(|&i| w[i]).sum();
                prop_assert!((s - 1.0).abs() <= 1e-9);
            }
            for &i in &kept {
                for &j in &kept {
                    if conf[i] < conf[j] {
                        prop_assert!(w[i] > w[j]);
                    }
                }
            }
        }
    }
}
