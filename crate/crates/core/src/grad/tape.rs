//! Reverse-mode differentiation over dense matrices.
//!
//! Operations are appended to a [`Tape`] in execution order, so the node
//! list is already topologically sorted. [`Tape::backward`] walks it once in
//! reverse and then clears the tape; a fresh forward pass is needed before the
//! next backward call.

use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Affine {
        x: usize,
        w: usize,
        b: usize,
    },
    Relu {
        x: usize,
    },
    WeightedCe {
        logits: usize,
        labels: Vec<usize>,
        weights: Vec<f64>,
        probs: Tensor2D,
    },
    Mse {
        a: usize,
        b: usize,
        mask: Option<Vec<bool>>,
        denom: f64,
    },
    Add {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        k: f64,
    },
    Sum {
        x: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor2D,
    requires_grad: bool,
    op: Op,
}

/// Output of a softmax cross-entropy node.
#[derive(Debug)]
pub struct CeOutput {
    pub loss: Var,
    /// Row-stochastic class probabilities.
    pub probs: Tensor2D,
}

/// Output of an MSE node.
#[derive(Debug)]
pub struct MseOutput {
    pub loss: Var,
    /// True when the mask excluded every row; the loss is then exactly 0.
    pub empty: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    spent: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor2D>>,
    shapes: Vec<(usize, usize)>,
    visits: usize,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`. Nodes that do not require
    /// gradients, or that the loss does not depend on, yield zeros.
    pub fn get(&self, v: Var) -> Tensor2D {
        match self.grads.get(v.0) {
            Some(Some(g)) => g.clone(),
            Some(None) => {
                let (r, c) = self.shapes[v.0];
                Tensor2D::zeros(r, c)
            }
            None => panic!("variable {} is not from this tape", v.0),
        }
    }

    /// Number of nodes the reverse sweep processed.
    pub fn visits(&self) -> usize {
        self.visits
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor2D, requires_grad: bool, op: Op) -> Var {
        self.spent = false;
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes
            .get(v.0)
            .ok_or_else(|| Error::State(format!("variable {} is not on the tape", v.0)))
    }

    pub fn value(&self, v: Var) -> &Tensor2D {
        &self.nodes[v.0].value
    }

    /// Trainable input.
    pub fn param(&mut self, value: Tensor2D) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor2D) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// `x·W + b`, with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xn, wn, bn) = (self.node(x)?, self.node(w)?, self.node(b)?);
        let y = xn.value.affine(&wn.value, &bn.value)?;
        let rg = xn.requires_grad || wn.requires_grad || bn.requires_grad;
        Ok(self.push(
            y,
            rg,
            Op::Affine {
                x: x.0,
                w: w.0,
                b: b.0,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xn = self.node(x)?;
        let y = xn.value.relu();
        let rg = xn.requires_grad;
        Ok(self.push(y, rg, Op::Relu { x: x.0 }))
    }

    /// Mean cross-entropy of `softmax(logits)` against `labels`.
    pub fn softmax_ce(&mut self, logits: Var, labels: &[usize]) -> Result<CeOutput> {
        let n = labels.len();
        if n == 0 {
            return Err(Error::input("softmax_ce needs at least one row"));
        }
        self.weighted_ce(logits, labels, &vec![1.0 / n as f64; n])
    }

    /// `Σ_i weights[i] · (−log softmax(logits_i)[labels[i]])`.
    pub fn weighted_ce(
        &mut self,
        logits: Var,
        labels: &[usize],
        weights: &[f64],
    ) -> Result<CeOutput> {
        let ln = self.node(logits)?;
        let (n, c) = ln.value.shape();
        if labels.len() != n || weights.len() != n {
            return Err(Error::Dimension {
                op: "weighted_ce",
                lhs: (n, c),
                rhs: (labels.len(), weights.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::input(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let probs = softmax_rows(&ln.value);
        let mut loss = 0.0;
        for (i, (&y, &w)) in labels.iter().zip(weights).enumerate() {
            if w != 0.0 {
                loss += w * (log_sum_exp(ln.value.row(i)) - ln.value.get(i, y));
            }
        }
        let rg = ln.requires_grad;
        let out = probs.clone();
        let loss = self.push(
            Tensor2D::scalar(loss),
            rg,
            Op::WeightedCe {
                logits: logits.0,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
        );
        Ok(CeOutput { loss, probs: out })
    }

    /// Mean squared difference over unmasked rows and all columns.
    pub fn mse(&mut self, a: Var, b: Var, mask: Option<&[bool]>) -> Result<MseOutput> {
        let (an, bn) = (self.node(a)?, self.node(b)?);
        if an.value.shape() != bn.value.shape() {
            return Err(Error::Dimension {
                op: "mse",
                lhs: an.value.shape(),
                rhs: bn.value.shape(),
            });
        }
        let (rows, cols) = an.value.shape();
        if let Some(m) = mask {
            if m.len() != rows {
                return Err(Error::Dimension {
                    op: "mse mask",
                    lhs: (rows, cols),
                    rhs: (m.len(), 1),
                });
            }
        }
        let kept = mask.map_or(rows, |m| m.iter().filter(|&&k| k).count());
        let denom = (kept * cols) as f64;
        let mut total = 0.0;
        if kept > 0 {
            for r in 0..rows {
                if mask.is_some_and(|m| !m[r]) {
                    continue;
                }
                for (x, y) in an.value.row(r).iter().zip(bn.value.row(r)) {
                    let d = x - y;
                    total += d * d;
                }
            }
            total /= denom;
        }
        let rg = an.requires_grad || bn.requires_grad;
        let loss = self.push(
            Tensor2D::scalar(total),
            rg,
            Op::Mse {
                a: a.0,
                b: b.0,
                mask: mask.map(<[bool]>::to_vec),
                denom,
            },
        );
        Ok(MseOutput {
            loss,
            empty: kept == 0,
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (an, bn) = (self.node(a)?, self.node(b)?);
        if an.value.shape() != bn.value.shape() {
            return Err(Error::Dimension {
                op: "add",
                lhs: an.value.shape(),
                rhs: bn.value.shape(),
            });
        }
        let mut y = an.value.clone();
        y.add_assign(&bn.value);
        let rg = an.requires_grad || bn.requires_grad;
        Ok(self.push(y, rg, Op::Add { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let xn = self.node(x)?;
        let mut y = xn.value.clone();
        y.data_mut().iter_mut().for_each(|v| *v *= k);
        let rg = xn.requires_grad;
        Ok(self.push(y, rg, Op::Scale { x: x.0, k }))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xn = self.node(x)?;
        let s = xn.value.data().iter().sum();
        let rg = xn.requires_grad;
        Ok(self.push(Tensor2D::scalar(s), rg, Op::Sum { x: x.0 }))
    }

    /// Propagates `∂loss/∂node` to every node and clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.spent {
            return Err(Error::State(
                "backward already ran; record a new forward pass first".into(),
            ));
        }
        let ln = self.node(loss)?;
        if ln.value.shape() != (1, 1) {
            return Err(Error::State(format!(
                "backward needs a scalar loss, got {:?}",
                ln.value.shape()
            )));
        }
        if !ln.value.item().is_finite() {
            return Err(Error::numeric(format!(
                "loss is not finite: {}",
                ln.value.item()
            )));
        }

        let mut grads: Vec<Option<Tensor2D>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor2D::scalar(1.0));
        let mut visits = 0;

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                grads[i] = Some(g);
                continue;
            }
            visits += 1;
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        self.nodes.clear();
        self.spent = true;
        Ok(Gradients {
            grads,
            shapes,
            visits,
        })
    }

    fn propagate(&self, i: usize, g: &Tensor2D, grads: &mut [Option<Tensor2D>]) {
        let nodes = &self.nodes;
        let mut accumulate = |j: usize, delta: Tensor2D| {
            if !nodes[j].requires_grad {
                return;
            }
            match &mut grads[j] {
                Some(acc) => acc.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let xv = &nodes[*x].value;
                let wv = &nodes[*w].value;
                if nodes[*x].requires_grad {
                    accumulate(*x, g.matmul(&wv.transpose()).expect("affine shapes"));
                }
                if nodes[*w].requires_grad {
                    accumulate(*w, xv.transpose().matmul(g).expect("affine shapes"));
                }
                if nodes[*b].requires_grad {
                    let mut db = Tensor2D::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (acc, v) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                    accumulate(*b, db);
                }
            }
            Op::Relu { x } => {
                let xv = &nodes[*x].value;
                let mut dx = g.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                    if v <= 0.0 {
                        *d = 0.0;
                    }
                }
                accumulate(*x, dx);
            }
            Op::WeightedCe {
                logits,
                labels,
                weights,
                probs,
            } => {
                let up = g.item();
                let mut dz = Tensor2D::zeros(probs.rows(), probs.cols());
                for (r, (&y, &w)) in labels.iter().zip(weights).enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let scale = w * up;
                    for (d, &p) in dz.row_mut(r).iter_mut().zip(probs.row(r)) {
                        *d = scale * p;
                    }
                    let cell = dz.get(r, y);
                    dz.set(r, y, cell - scale);
                }
                accumulate(*logits, dz);
            }
            Op::Mse { a, b, mask, denom } => {
                let av = &nodes[*a].value;
                let bv = &nodes[*b].value;
                let mut da = Tensor2D::zeros(av.rows(), av.cols());
                if *denom > 0.0 {
                    let k = 2.0 * g.item() / denom;
                    for r in 0..av.rows() {
                        if mask.as_ref().is_some_and(|m| !m[r]) {
                            continue;
                        }
                        for ((d, x), y) in da.row_mut(r).iter_mut().zip(av.row(r)).zip(bv.row(r)) {
                            *d = k * (x - y);
                        }
                    }
                }
                if nodes[*b].requires_grad {
                    let mut db = da.clone();
                    db.data_mut().iter_mut().for_each(|v| *v = -*v);
                    accumulate(*b, db);
                }
                accumulate(*a, da);
            }
            Op::Add { a, b } => {
                accumulate(*a, g.clone());
                accumulate(*b, g.clone());
            }
            Op::Scale { x, k } => {
                let mut dx = g.clone();
                dx.data_mut().iter_mut().for_each(|v| *v *= k);
                accumulate(*x, dx);
            }
            Op::Sum { x } => {
                let (r, c) = nodes[*x].value.shape();
                accumulate(*x, Tensor2D::filled(r, c, g.item()));
            }
        }
    }
}

/// Overflow-safe `log Σ exp(row)`.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &Tensor2D) -> Tensor2D {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    out
}
