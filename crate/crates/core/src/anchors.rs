//! Fixed pre-defined class anchors.
//!
//! Three generators are provided: i.i.d. standard normal rows (`Nd`),
//! orthonormal rows (`Om`) and a simplex equiangular tight frame (`Mes`),
//! in which every pair of the `C` unit rows has cosine `−1/(C−1)`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor2D;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnchorSource {
    /// Standard normal entries.
    Nd,
    /// Random orthonormal rows.
    Om,
    /// Simplex equiangular tight frame.
    Mes,
}

impl fmt::Display for AnchorSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AnchorSource::Nd => "nd",
            AnchorSource::Om => "om",
            AnchorSource::Mes => "mes",
        })
    }
}

impl FromStr for AnchorSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nd" => Ok(AnchorSource::Nd),
            "om" => Ok(AnchorSource::Om),
            "mes" => Ok(AnchorSource::Mes),
            other => Err(Error::input(format!(
                "unknown anchor source {other:?} (expected nd, om or mes)"
            ))),
        }
    }
}

/// Immutable `C×D` anchor matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    anchors: Tensor2D,
    source: AnchorSource,
    seed: u64,
}

impl AnchorSet {
    pub fn matrix(&self) -> &Tensor2D {
        &self.anchors
    }

    pub fn source(&self) -> AnchorSource {
        self.source
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn classes(&self) -> usize {
        self.anchors.rows()
    }

    pub fn dim(&self) -> usize {
        self.anchors.cols()
    }

    /// Frozen anchors are never updated by training.
    pub fn frozen(&self) -> bool {
        true
    }

    pub fn pairwise_cosine(&self) -> Result<Tensor2D> {
        pairwise_cosine(&self.anchors)
    }
}

pub fn generate_anchors(
    source: AnchorSource,
    classes: usize,
    dim: usize,
    seed: u64,
) -> Result<AnchorSet> {
    if classes < 2 {
        return Err(Error::input(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    if dim == 0 {
        return Err(Error::input("anchor dimension must be positive"));
    }
    if matches!(source, AnchorSource::Om | AnchorSource::Mes) && dim < classes {
        return Err(Error::Capability(format!(
            "{source} anchors need dimension >= classes (got D={dim} < C={classes})"
        )));
    }
    let mut rows_rng = rng::stream(seed, rng::ANCHOR_ROWS);
    let anchors = match source {
        AnchorSource::Nd => {
            let data = (0..classes * dim)
                .map(|_| rows_rng.sample::<f64, _>(StandardNormal))
                .collect();
            Tensor2D::from_vec(classes, dim, data)?
        }
        AnchorSource::Om => orthonormal_rows(classes, dim, &mut rows_rng),
        AnchorSource::Mes => {
            let simplex = simplex_etf(classes);
            let mut embed_rng = rng::stream(seed, rng::ANCHOR_EMBED);
            let basis = orthonormal_rows(classes, dim, &mut embed_rng);
            simplex.matmul(&basis)?
        }
    };
    Ok(AnchorSet {
        anchors,
        source,
        seed,
    })
}

/// `sqrt(C/(C−1)) · (I − 11ᵀ/C)`.
pub fn simplex_etf(classes: usize) -> Tensor2D {
    let c = classes as f64;
    let scale = (c / (c - 1.0)).sqrt();
    let mut m = Tensor2D::zeros(classes, classes);
    for i in 0..classes {
        for j in 0..classes {
            let delta = if i == j { 1.0 } else { 0.0 };
            m.set(i, j, scale * (delta - 1.0 / c));
        }
    }
    m
}

/// Modified Gram–Schmidt with one re-orthogonalization pass over Gaussian
/// rows. A row that collapses numerically is redrawn.
fn orthonormal_rows(rows: usize, dim: usize, rng: &mut impl Rng) -> Tensor2D {
    let mut out = Tensor2D::zeros(rows, dim);
    let mut i = 0;
    while i < rows {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let start: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for _pass in 0..2 {
            for j in 0..i {
                let u = out.row(j);
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                for (a, b) in v.iter_mut().zip(u) {
                    *a -= dot * b;
                }
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm <= 1e-8 * start {
            continue;
        }
        for (dst, x) in out.row_mut(i).iter_mut().zip(&v) {
            *dst = x / norm;
        }
        i += 1;
    }
    out
}

/// Cosine similarity between every pair of rows.
pub fn pairwise_cosine(m: &Tensor2D) -> Result<Tensor2D> {
    let norms: Vec<f64> = (0..m.rows())
        .map(|r| m.row(r).iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    if let Some(r) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::numeric(format!("row {r} has zero norm")));
    }
    let c = m.rows();
    let mut out = Tensor2D::zeros(c, c);
    for i in 0..c {
        out.set(i, i, 1.0);
        for j in i + 1..c {
            let dot: f64 = m.row(i).iter().zip(m.row(j)).map(|(a, b)| a * b).sum();
            let v = dot / (norms[i] * norms[j]);
            out.set(i, j, v);
            out.set(j, i, v);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn off_diagonal(m: &Tensor2D) -> Vec<f64> {
        let mut v = Vec::new();
        for i in 0..m.rows() {
            for j in 0..m.cols() {
                if i != j {
                    v.push(m.get(i, j));
                }
            }
        }
        v
    }

    // Brute-force: cosine of every pair computed straight from the
    // closed-form simplex matrix, no embedding.
    fn etf_cosines_brute(c: usize) -> Vec<f64> {
        let mut out = Vec::new();
        let cf = c as f64;
        let entry = |i: usize, j: usize| (if i == j { 1.0 } else { 0.0 }) - 1.0 / cf;
        for i in 0..c {
            for j in 0..c {
                if i == j {
                    continue;
                }
                let dot: f64 = (0..c).map(|k| entry(i, k) * entry(j, k)).sum();
                let ni: f64 = (0..c).map(|k| entry(i, k).powi(2)).sum::<f64>().sqrt();
                let nj: f64 = (0..c).map(|k| entry(j, k).powi(2)).sum::<f64>().sqrt();
                out.push(dot / (ni * nj));
            }
        }
        out
    }

    #[test]
    fn mes_two_classes_antipodal() {
        let a = generate_anchors(AnchorSource::Mes, 2, 2, 5).unwrap();
        let cos = a.pairwise_cosine().unwrap();
        assert!((cos.get(0, 1) + 1.0).abs() < 1e-12);
        for r in 0..2 {
            let n: f64 = a.matrix().row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mes_matches_brute_force_cosines() {
        for c in [3usize, 4] {
            let brute = etf_cosines_brute(c);
            for b in &brute {
                assert!((b + 1.0 / (c as f64 - 1.0)).abs() < 1e-12);
            }
            let a = generate_anchors(AnchorSource::Mes, c, 7, 11).unwrap();
            let got = off_diagonal(&a.pairwise_cosine().unwrap());
            for (g, b) in got.iter().zip(&brute) {
                assert!((g - b).abs() < 1e-9, "{g} vs {b}");
            }
        }
    }

    #[test]
    fn om_gram_is_identity() {
        let a = generate_anchors(AnchorSource::Om, 6, 9, 3).unwrap();
        let gram = a.matrix().matmul(&a.matrix().transpose()).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((gram.get(i, j) - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        for src in [AnchorSource::Nd, AnchorSource::Om, AnchorSource::Mes] {
            let a = generate_anchors(src, 4, 8, 42).unwrap();
            let b = generate_anchors(src, 4, 8, 42).unwrap();
            let c = generate_anchors(src, 4, 8, 43).unwrap();
            assert_eq!(a, b);
            assert_ne!(a, c);
        }
    }

    #[test]
    fn dimension_requirement() {
        for src in [AnchorSource::Om, AnchorSource::Mes] {
            let err = generate_anchors(src, 5, 4, 0).unwrap_err();
            assert!(matches!(err, Error::Capability(_)), "{err}");
        }
        assert!(generate_anchors(AnchorSource::Nd, 5, 4, 0).is_ok());
        assert!(generate_anchors(AnchorSource::Nd, 1, 4, 0).is_err());
    }

    #[test]
    fn nd_moments() {
        let (c, d) = (20, 500);
        let a = generate_anchors(AnchorSource::Nd, c, d, 9).unwrap();
        let n = (c * d) as f64;
        let mean: f64 = a.matrix().data().iter().sum::<f64>() / n;
        let var: f64 = a
            .matrix()
            .data()
            .iter()
            .map(|x| (x - mean).powi(2))
            .sum::<f64>()
            / n;
        assert!(mean.abs() <= 4.0 / n.sqrt(), "{mean}");
        assert!((var - 1.0).abs() <= 0.05, "{var}");
    }

    #[test]
    fn cosine_edge_cases() {
        let id = Tensor2D::identity(3);
        assert_eq!(pairwise_cosine(&id).unwrap(), id);
        let dup = Tensor2D::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![0.0, 1.0]]);
        assert!((pairwise_cosine(&dup).unwrap().get(0, 1) - 1.0).abs() < 1e-12);
        let zero = Tensor2D::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        let err = pairwise_cosine(&zero).unwrap_err();
        assert!(err.to_string().contains("row 1"));
    }

    #[test]
    fn source_parsing() {
        assert_eq!("MES".parse::<AnchorSource>().unwrap(), AnchorSource::Mes);
        assert!("xyz".parse::<AnchorSource>().is_err());
    }
}
