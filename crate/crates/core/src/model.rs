use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{Gradients, Tape, Var};
use crate::nn::{BoundLinear, BoundMlp, Linear, Mlp};
use crate::rng;
use crate::tensor::Tensor2D;

/// Feature extractor `input → hidden… → D` followed by the shared linear
/// classifier `D → C`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierModel {
    pub features: Mlp,
    pub classifier: Linear,
}

impl ClassifierModel {
    pub fn init(
        input_dim: usize,
        hidden: &[usize],
        feature_dim: usize,
        classes: usize,
        seed: u64,
    ) -> Result<Self> {
        if input_dim == 0 || feature_dim == 0 || classes == 0 || hidden.contains(&0) {
            return Err(Error::input("model dimensions must be positive"));
        }
        let mut rng = rng::stream(seed, rng::MODEL_INIT);
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(feature_dim);
        let features = Mlp::init(&dims, &mut rng);
        // A zero classifier keeps the run seed out of the first anchor updates.
        let classifier = Linear::zeros(feature_dim, classes);
        Ok(Self {
            features,
            classifier,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.features.in_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.out_dim()
    }

    pub fn classes(&self) -> usize {
        self.classifier.out_dim()
    }

    pub fn embed(&self, x: &Tensor2D) -> Result<Tensor2D> {
        self.features.forward(x)
    }

    pub fn logits(&self, x: &Tensor2D) -> Result<Tensor2D> {
        self.classifier.forward(&self.embed(x)?)
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        BoundModel {
            features: self.features.bind(tape),
            classifier: self.classifier.bind(tape),
        }
    }

    /// Feature-extractor tensors first, then classifier weight and bias.
    pub fn tensors(&self) -> Vec<&Tensor2D> {
        let mut v = self.features.tensors();
        v.push(&self.classifier.weight);
        v.push(&self.classifier.bias);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor2D> {
        let mut v = self.features.tensors_mut();
        v.push(&mut self.classifier.weight);
        v.push(&mut self.classifier.bias);
        v
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.tensors().iter().map(|t| t.shape()).collect()
    }

    pub fn names(&self) -> Vec<String> {
        let mut v = self.features.names("features");
        v.push("classifier.w".into());
        v.push("classifier.b".into());
        v
    }

    pub fn load(&mut self, values: &[Tensor2D]) -> Result<()> {
        load_into(self.tensors_mut(), values)
    }
}

pub(crate) fn load_into(dst: Vec<&mut Tensor2D>, values: &[Tensor2D]) -> Result<()> {
    if dst.len() != values.len() {
        return Err(Error::input(format!(
            "expected {} tensors, got {}",
            dst.len(),
            values.len()
        )));
    }
    for (d, v) in dst.into_iter().zip(values) {
        if d.shape() != v.shape() {
            return Err(Error::Dimension {
                op: "load",
                lhs: d.shape(),
                rhs: v.shape(),
            });
        }
        *d = v.clone();
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct BoundModel {
    pub features: BoundMlp,
    pub classifier: BoundLinear,
}

impl BoundModel {
    /// Returns `(features, logits)`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
        let f = self.features.forward(tape, x)?;
        let z = self.classifier.forward(tape, f)?;
        Ok((f, z))
    }

    /// Aligned with [`ClassifierModel::tensors`].
    pub fn grads(&self, g: &Gradients) -> Vec<Tensor2D> {
        let mut v = self.features.grads(g);
        v.extend(self.classifier.grads(g));
        v
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
