//! Two-stream training loop.
//!
//! Every step runs, in order: the main-task update of the feature extractor
//! and classifier, the auxiliary anchor update of the embedding head and
//! classifier (`sar` only), and the EMA refresh of the semantic anchors
//! (`sar` only). The auxiliary forward pass therefore sees the classifier
//! after the main-task update.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::anchors::AnchorSet;
use crate::data::LongTailDataset;
use crate::error::{Error, Result};
use crate::grad::{poly_lr, softmax_rows, OptimizerState, SgdConfig, Tape};
use crate::model::{argmax, load_into, ClassifierModel};
use crate::proto::{bank_update, compute_prototypes, PrototypeState};
use crate::rng;
use crate::sar::{
    aux_ce_loss, aux_ce_on_tape, compute_reweights, confidences_from_probs, embed_anchors,
    EmbeddingHead, SarConfig, SemanticAnchorState,
};
use crate::tensor::Tensor2D;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Cross-entropy only.
    Ce,
    /// Features pulled straight to the raw anchors.
    Cr,
    /// Semantic anchor regularization.
    Sar,
    /// Features pulled to momentum-banked feature-mean prototypes.
    Proto,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Ce, Mode::Cr, Mode::Sar, Mode::Proto];
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Ce => "ce",
            Mode::Cr => "cr",
            Mode::Sar => "sar",
            Mode::Proto => "proto",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ce" => Ok(Mode::Ce),
            "cr" => Ok(Mode::Cr),
            "sar" => Ok(Mode::Sar),
            "proto" => Ok(Mode::Proto),
            other => Err(Error::Input(format!(
                "unknown mode {other:?} (expected ce, cr, sar or proto)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub sar: SarConfig,
    /// Weight of the prototype pull in `proto` mode.
    pub proto_lambda: f64,
    pub proto_bank_momentum: f64,
    /// Required by `cr` and `sar`.
    pub anchors: Option<AnchorSet>,
    pub optimizer: SgdConfig,
    pub poly_power: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Evaluate on the test set every this many epochs; 0 disables.
    pub eval_every: usize,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    /// Hidden width of the embedding head; defaults to `feature_dim`.
    pub head_hidden: Option<usize>,
    /// Record embedded and semantic anchors in every `sar` step record.
    pub log_anchors: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Ce,
            sar: SarConfig::default(),
            proto_lambda: 0.1,
            proto_bank_momentum: 0.9,
            anchors: None,
            optimizer: SgdConfig::default(),
            poly_power: 0.9,
            epochs: 60,
            batch_size: 64,
            seed: 1,
            eval_every: 0,
            hidden: vec![64, 64],
            feature_dim: 16,
            head_hidden: None,
            log_anchors: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, classes: usize) -> Result<()> {
        self.sar.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Input(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if self.proto_lambda < 0.0 || !(0.0..=1.0).contains(&self.proto_bank_momentum) {
            return Err(Error::Input(
                "proto_lambda must be >= 0 and proto_bank_momentum in [0, 1]".into(),
            ));
        }
        if matches!(self.mode, Mode::Cr | Mode::Sar) {
            let a = self
                .anchors
                .as_ref()
                .ok_or_else(|| Error::Input(format!("mode {} requires anchors", self.mode)))?;
            if a.dim() != self.feature_dim || a.classes() != classes {
                return Err(Error::Dimension {
                    op: "anchors vs model",
                    lhs: (a.classes(), a.dim()),
                    rhs: (classes, self.feature_dim),
                });
            }
        }
        Ok(())
    }
}

/// Auxiliary-stream part of a step record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxRecord {
    /// Anchor confidences used for the reweighting.
    pub conf: Vec<f64>,
    pub weights: Vec<f64>,
    pub aux_loss: f64,
    /// Whether the embedding head and classifier received an auxiliary update.
    pub aux_applied: bool,
    /// Confidences that gated the EMA update.
    pub ema_conf: Vec<f64>,
    pub active: Vec<bool>,
    /// SHA-256 prefix of the embedding-head parameters after this step.
    pub head_digest: String,
    /// Embedded anchors fed to the EMA update.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub embedded: Option<Vec<Vec<f64>>>,
    /// Semantic anchors after the EMA update.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub anchors_hat: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub ce: f64,
    /// Unweighted regularizer value (anchor, semantic-anchor or prototype pull).
    pub reg: f64,
    /// True when no sample in the batch had a usable target.
    pub reg_empty: bool,
    /// Loss optimized by the main-task update.
    pub main_loss: f64,
    /// `ce + λ₁·aux + λ₂·reg` in `sar` mode, otherwise equal to `main_loss`.
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub aux: Option<AuxRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub step: u64,
    pub test_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
#[allow(clippy::large_enum_variant)]
pub enum LogLine<'a> {
    Step(std::borrow::Cow<'a, StepRecord>),
    Eval(std::borrow::Cow<'a, EvalRecord>),
}

impl TrainLog {
    /// One JSON object per line, steps and evaluations in time order.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut evals = self.evals.iter().peekable();
        for r in &self.records {
            out.push_str(&step_line(r));
            out.push('\n');
            while let Some(e) = evals.next_if(|e| e.step == r.step + 1) {
                out.push_str(&eval_line(e));
                out.push('\n');
            }
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut log = TrainLog::default();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: LogLine<'static> =
                serde_json::from_str(line).map_err(|e| Error::Parse {
                    line: n + 1,
                    msg: e.to_string(),
                })?;
            match parsed {
                LogLine::Step(s) => log.records.push(s.into_owned()),
                LogLine::Eval(e) => log.evals.push(e.into_owned()),
            }
        }
        Ok(log)
    }
}

pub fn step_line(r: &StepRecord) -> String {
    serde_json::to_string(&LogLine::Step(std::borrow::Cow::Borrowed(r))).expect("serializable")
}

pub fn eval_line(e: &EvalRecord) -> String {
    serde_json::to_string(&LogLine::Eval(std::borrow::Cow::Borrowed(e))).expect("serializable")
}

/// Predictions and pre-classifier features on a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub predictions: Vec<usize>,
    pub features: Tensor2D,
}

pub fn evaluate(model: &ClassifierModel, ds: &LongTailDataset) -> Result<Evaluation> {
    if ds.x.cols() != model.input_dim() {
        return Err(Error::Dimension {
            op: "evaluate",
            lhs: ds.x.shape(),
            rhs: (model.input_dim(), model.feature_dim()),
        });
    }
    let features = model.embed(&ds.x)?;
    let logits = model.classifier.forward(&features)?;
    let predictions = (0..logits.rows()).map(|r| argmax(logits.row(r))).collect();
    Ok(Evaluation {
        predictions,
        features,
    })
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return f64::NAN;
    }
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// Stop-gradient quantities of one step, captured at the current parameters.
#[derive(Clone, Debug)]
pub struct FrozenStep {
    /// Per-sample pull targets and mask.
    pub reg_targets: Option<(Tensor2D, Vec<bool>)>,
    pub reg_weight: f64,
    /// Auxiliary weights and `λ₁`.
    pub aux: Option<(Vec<f64>, f64)>,
}

/// Value of `L_ce + λ·reg + λ₁·L_aux` on one tape, with gradients aligned to
/// `model.tensors()` followed by `head.mlp.tensors()`.
pub fn step_objective(
    model: &ClassifierModel,
    head: Option<&EmbeddingHead>,
    anchors: Option<&AnchorSet>,
    x: &Tensor2D,
    labels: &[usize],
    frozen: &FrozenStep,
) -> Result<(f64, Vec<Tensor2D>)> {
    let mut tape = Tape::new();
    let bm = model.bind(&mut tape);
    let bh = head.map(|h| h.mlp.bind(&mut tape));
    let xv = tape.constant(x.clone());
    let (f, z) = bm.forward(&mut tape, xv)?;
    let mut total = tape.softmax_ce(z, labels)?.loss;
    if let Some((t, mask)) = &frozen.reg_targets {
        let tv = tape.constant(t.clone());
        let reg = tape.mse(f, tv, Some(mask))?.loss;
        let reg = tape.scale(reg, frozen.reg_weight)?;
        total = tape.add(total, reg)?;
    }
    if let Some((w, lambda1)) = &frozen.aux {
        let (h, bh, a) = match (head, &bh, anchors) {
            (Some(h), Some(bh), Some(a)) => (h, bh, a),
            _ => {
                return Err(Error::Input(
                    "auxiliary term needs a head and anchors".into(),
                ))
            }
        };
        let e = embed_anchors(&mut tape, h, bh, a)?;
        let logits = bm.classifier.forward(&mut tape, e)?;
        let aux = aux_ce_on_tape(&mut tape, logits, w)?;
        let aux = tape.scale(aux, *lambda1)?;
        total = tape.add(total, aux)?;
    }
    let value = tape.value(total).item();
    let g = tape.backward(total)?;
    let mut grads = bm.grads(&g);
    if let Some(bh) = &bh {
        grads.extend(bh.grads(&g));
    }
    Ok((value, grads))
}

/// Hex SHA-256 prefix over the bit patterns of a list of tensors.
pub fn tensor_digest<'a>(tensors: impl IntoIterator<Item = &'a Tensor2D>) -> String {
    let mut h = Sha256::new();
    for t in tensors {
        for v in t.data() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    h.finalize()[..8]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Pull targets with mask, their weight, and the updated prototype bank.
type RegTargets = (Option<(Tensor2D, Vec<bool>)>, f64, Option<PrototypeState>);

/// Step-by-step trainer. Use [`train`] for a complete run.
pub struct Trainer {
    cfg: TrainConfig,
    x: Tensor2D,
    y: Vec<usize>,
    classes: usize,
    model: ClassifierModel,
    head: Option<EmbeddingHead>,
    semantic: Option<SemanticAnchorState>,
    bank: Option<PrototypeState>,
    main_opt: OptimizerState,
    head_opt: Option<OptimizerState>,
    aux_cls_opt: Option<OptimizerState>,
    orders: Vec<Vec<usize>>,
    steps_per_epoch: usize,
    step: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, train: &LongTailDataset) -> Result<Self> {
        let classes = train.classes();
        cfg.validate(classes)?;
        if train.is_empty() {
            return Err(Error::Input("training set is empty".into()));
        }
        let model = ClassifierModel::init(
            train.x.cols(),
            &cfg.hidden,
            cfg.feature_dim,
            classes,
            cfg.seed,
        )?;
        let main_opt = OptimizerState::new(cfg.optimizer, &model.shapes());
        let (mut head, mut semantic, mut head_opt, mut aux_cls_opt, mut bank) =
            (None, None, None, None, None);
        match cfg.mode {
            Mode::Sar => {
                let anchors = cfg.anchors.as_ref().expect("validated");
                // The auxiliary stream is seeded by the anchors, not the run,
                // so it is shared across training seeds.
                let mut r = rng::stream(anchors.seed(), rng::HEAD_INIT);
                let h = EmbeddingHead::init(
                    cfg.feature_dim,
                    cfg.head_hidden.unwrap_or(cfg.feature_dim),
                    &mut r,
                );
                head_opt = Some(OptimizerState::new(cfg.optimizer, &h.mlp.shapes()));
                // Weight decay on the classifier is applied once, by the main step.
                let cls_cfg = SgdConfig {
                    weight_decay: 0.0,
                    ..cfg.optimizer
                };
                aux_cls_opt = Some(OptimizerState::new(
                    cls_cfg,
                    &[
                        model.classifier.weight.shape(),
                        model.classifier.bias.shape(),
                    ],
                ));
                head = Some(h);
                semantic = Some(SemanticAnchorState::new(
                    classes,
                    cfg.feature_dim,
                    cfg.sar.alpha,
                ));
            }
            Mode::Proto => {
                bank = Some(PrototypeState::empty(
                    classes,
                    cfg.feature_dim,
                    cfg.proto_bank_momentum,
                ));
            }
            Mode::Ce | Mode::Cr => {}
        }

        let n = train.len();
        let mut shuffle = rng::stream(cfg.seed, rng::SHUFFLE);
        let orders = (0..cfg.epochs)
            .map(|_| {
                let mut idx: Vec<usize> = (0..n).collect();
                idx.shuffle(&mut shuffle);
                idx
            })
            .collect();
        Ok(Self {
            steps_per_epoch: n.div_ceil(cfg.batch_size),
            cfg,
            x: train.x.clone(),
            y: train.y.clone(),
            classes,
            model,
            head,
            semantic,
            bank,
            main_opt,
            head_opt,
            aux_cls_opt,
            orders,
            step: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &ClassifierModel {
        &self.model
    }

    pub fn head(&self) -> Option<&EmbeddingHead> {
        self.head.as_ref()
    }

    pub fn semantic(&self) -> Option<&SemanticAnchorState> {
        self.semantic.as_ref()
    }

    pub fn bank(&self) -> Option<&PrototypeState> {
        self.bank.as_ref()
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn total_steps(&self) -> u64 {
        (self.cfg.epochs * self.steps_per_epoch) as u64
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    pub fn epoch(&self) -> usize {
        self.step as usize / self.steps_per_epoch
    }

    /// Training-set indices of the next batch.
    pub fn peek_batch(&self) -> Option<&[usize]> {
        if self.is_done() {
            return None;
        }
        let within = self.step as usize % self.steps_per_epoch;
        let order = &self.orders[self.epoch()];
        let lo = within * self.cfg.batch_size;
        let hi = (lo + self.cfg.batch_size).min(order.len());
        Some(&order[lo..hi])
    }

    /// Stop-gradient targets for the main-task regularizer at the current
    /// state. In `proto` mode this also returns the bank after folding in the
    /// batch.
    fn reg_targets(&self, features: &Tensor2D, labels: &[usize]) -> Result<RegTargets> {
        Ok(match self.cfg.mode {
            Mode::Ce => (None, 0.0, None),
            Mode::Cr => {
                let a = self.cfg.anchors.as_ref().expect("validated").matrix();
                let t = a.select_rows(labels);
                (
                    Some((t, vec![true; labels.len()])),
                    self.cfg.sar.lambda2,
                    None,
                )
            }
            Mode::Sar => {
                let st = self.semantic.as_ref().expect("sar state");
                (Some(st.targets(labels)?), self.cfg.sar.lambda2, None)
            }
            Mode::Proto => {
                let batch = compute_prototypes(features, labels, self.classes)?;
                let bank = bank_update(self.bank.as_ref().expect("bank"), &batch)?;
                let targets = bank.targets(labels)?;
                (Some(targets), self.cfg.proto_lambda, Some(bank))
            }
        })
    }

    /// Captures the stop-gradient pieces of a combined step objective at the
    /// current parameters for the given batch (used for gradient checking).
    pub fn frozen_step(&self, x: &Tensor2D, labels: &[usize]) -> Result<FrozenStep> {
        let features = self.model.embed(x)?;
        let (reg_targets, reg_weight, _) = self.reg_targets(&features, labels)?;
        let aux = match (&self.head, &self.cfg.anchors) {
            (Some(h), Some(a)) if self.cfg.mode == Mode::Sar => {
                let e = h.embed(a)?;
                let probs = softmax_rows(&self.model.classifier.forward(&e)?);
                let w = compute_reweights(&confidences_from_probs(&probs), self.cfg.sar.tau);
                Some((w, self.cfg.sar.lambda1))
            }
            _ => None,
        };
        Ok(FrozenStep {
            reg_targets,
            reg_weight,
            aux,
        })
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        let batch: Vec<usize> = self
            .peek_batch()
            .ok_or_else(|| Error::State("training already finished".into()))?
            .to_vec();
        let step = self.step;
        let epoch = self.epoch();
        let lr = poly_lr(
            step,
            self.total_steps(),
            self.cfg.optimizer.base_lr,
            self.cfg.poly_power,
        )?;
        let xb = self.x.select_rows(&batch);
        let yb: Vec<usize> = batch.iter().map(|&i| self.y[i]).collect();

        // Main task.
        let mut tape = Tape::new();
        let bm = self.model.bind(&mut tape);
        let xv = tape.constant(xb);
        let (f, z) = bm.forward(&mut tape, xv)?;
        let ce = tape.softmax_ce(z, &yb)?.loss;
        let (targets, reg_weight, new_bank) = self.reg_targets(tape.value(f), &yb)?;
        let mut main = ce;
        let (mut reg_value, mut reg_empty) = (0.0, true);
        if let Some((t, mask)) = targets {
            let tv = tape.constant(t);
            let out = tape.mse(f, tv, Some(&mask))?;
            reg_value = tape.value(out.loss).item();
            reg_empty = out.empty;
            if reg_weight != 0.0 {
                let scaled = tape.scale(out.loss, reg_weight)?;
                main = tape.add(ce, scaled)?;
            }
        }
        let ce_value = tape.value(ce).item();
        let main_value = tape.value(main).item();
        if !main_value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at step {step}: ce={ce_value} reg={reg_value} total={main_value}"
            )));
        }
        let g = tape.backward(main)?;
        let grads = bm.grads(&g);
        let names = self.model.names();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        self.main_opt
            .step(&mut self.model.tensors_mut(), &grads, &names, lr)
            .map_err(|e| Error::Numeric(format!("step {step}: {e}")))?;
        if let Some(b) = new_bank {
            self.bank = Some(b);
        }

        let mut total = main_value;
        let aux = if self.cfg.mode == Mode::Sar {
            let rec = self.aux_step(step, lr)?;
            total = ce_value + self.cfg.sar.lambda1 * rec.aux_loss + reg_weight * reg_value;
            Some(rec)
        } else {
            None
        };

        self.step += 1;
        Ok(StepRecord {
            step,
            epoch,
            lr,
            ce: ce_value,
            reg: reg_value,
            reg_empty,
            main_loss: main_value,
            total,
            aux,
        })
    }

    fn aux_step(&mut self, step: u64, lr: f64) -> Result<AuxRecord> {
        let sar = self.cfg.sar;
        let anchors = self.cfg.anchors.as_ref().expect("validated");
        let head = self.head.as_mut().expect("sar head");

        let mut tape = Tape::new();
        let bh = head.mlp.bind(&mut tape);
        let bc = self.model.classifier.bind(&mut tape);
        let e = embed_anchors(&mut tape, head, &bh, anchors)?;
        let logits = bc.forward(&mut tape, e)?;
        let conf = confidences_from_probs(&softmax_rows(tape.value(logits)));
        let weights = compute_reweights(&conf, sar.tau);
        let aux_loss = aux_ce_loss(&conf, &weights)?;
        let aux_applied = sar.lambda1 > 0.0 && weights.iter().any(|&w| w > 0.0);

        let (embedded, ema_conf) = if aux_applied {
            let loss = aux_ce_on_tape(&mut tape, logits, &weights)?;
            let loss = tape.scale(loss, sar.lambda1)?;
            let g = tape.backward(loss)?;
            let head_grads = bh.grads(&g);
            let cls_grads = bc.grads(&g);
            let names = head.mlp.names("head");
            let names: Vec<&str> = names.iter().map(String::as_str).collect();
            self.head_opt
                .as_mut()
                .expect("head optimizer")
                .step(&mut head.mlp.tensors_mut(), &head_grads, &names, lr)
                .map_err(|e| Error::Numeric(format!("step {step}: {e}")))?;
            let cls = &mut self.model.classifier;
            self.aux_cls_opt
                .as_mut()
                .expect("aux classifier optimizer")
                .step(
                    &mut [&mut cls.weight, &mut cls.bias],
                    &cls_grads,
                    &["classifier.w", "classifier.b"],
                    lr,
                )
                .map_err(|e| Error::Numeric(format!("step {step}: {e}")))?;
            let e = head.embed(anchors)?;
            let probs = softmax_rows(&self.model.classifier.forward(&e)?);
            let c = confidences_from_probs(&probs);
            (e, c)
        } else {
            (tape.value(e).clone(), conf.clone())
        };

        let state = self.semantic.as_mut().expect("sar state");
        state.ema_update(&embedded, &ema_conf, sar.delta)?;
        let head_digest = tensor_digest(head.mlp.tensors());
        let (embedded, anchors_hat) = if self.cfg.log_anchors {
            (Some(embedded.to_rows()), Some(state.anchors_hat.to_rows()))
        } else {
            (None, None)
        };
        Ok(AuxRecord {
            conf,
            weights,
            aux_loss,
            aux_applied,
            ema_conf,
            active: state.active.clone(),
            head_digest,
            embedded,
            anchors_hat,
        })
    }

    /// Replaces model and head parameters (for gradient checking).
    pub fn load_params(&mut self, model: &[Tensor2D], head: &[Tensor2D]) -> Result<()> {
        self.model.load(model)?;
        if let Some(h) = &mut self.head {
            load_into(h.mlp.tensors_mut(), head)?;
        }
        Ok(())
    }

    pub fn into_output(self, log: TrainLog, test: &LongTailDataset) -> Result<TrainOutput> {
        let eval = evaluate(&self.model, test)?;
        Ok(TrainOutput {
            model: self.model,
            head: self.head,
            semantic: self.semantic,
            bank: self.bank,
            log,
            eval,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub model: ClassifierModel,
    pub head: Option<EmbeddingHead>,
    pub semantic: Option<SemanticAnchorState>,
    pub bank: Option<PrototypeState>,
    pub log: TrainLog,
    /// Final-step predictions and features on the test set.
    pub eval: Evaluation,
}

pub fn train(
    cfg: TrainConfig,
    train: &LongTailDataset,
    test: &LongTailDataset,
) -> Result<TrainOutput> {
    train_observed(cfg, train, test, |_| Ok(()))
}

/// Runs a full training, handing each log line to `on_line` as soon as it
/// exists so callers can persist partial logs.
pub fn train_observed(
    cfg: TrainConfig,
    train: &LongTailDataset,
    test: &LongTailDataset,
    mut on_line: impl FnMut(&str) -> Result<()>,
) -> Result<TrainOutput> {
    if test.x.cols() != train.x.cols() || test.classes() != train.classes() {
        return Err(Error::Dimension {
            op: "train/test",
            lhs: (train.classes(), train.x.cols()),
            rhs: (test.classes(), test.x.cols()),
        });
    }
    let eval_every = cfg.eval_every;
    let mut trainer = Trainer::new(cfg, train)?;
    let mut log = TrainLog::default();
    while !trainer.is_done() {
        let rec = trainer.step()?;
        on_line(&step_line(&rec))?;
        let finished_epoch =
            (trainer.steps_done() as usize).is_multiple_of(trainer.steps_per_epoch);
        log.records.push(rec);
        if eval_every > 0 && finished_epoch {
            let epoch = trainer.epoch();
            if epoch % eval_every == 0 {
                let ev = evaluate(trainer.model(), test)?;
                let e = EvalRecord {
                    epoch,
                    step: trainer.steps_done(),
                    test_acc: accuracy(&ev.predictions, &test.y),
                };
                on_line(&eval_line(&e))?;
                log.evals.push(e);
            }
        }
    }
    trainer.into_output(log, test)
}
