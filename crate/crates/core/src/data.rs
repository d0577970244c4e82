//! Synthetic long-tailed Gaussian-mixture datasets.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor2D;

const MEAN_ATTEMPTS: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmSpec {
    pub classes: usize,
    pub input_dim: usize,
    pub n_max: usize,
    /// Imbalance factor `N_max / N_min`.
    pub beta: f64,
    /// Minimum pairwise distance between class means, in units of `noise_sigma`.
    pub class_separation: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for GmmSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            input_dim: 16,
            n_max: 500,
            beta: 100.0,
            class_separation: 5.0,
            noise_sigma: 1.0,
            seed: 0,
        }
    }
}

impl GmmSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::input(format!(
                "classes must be >= 2, got {}",
                self.classes
            )));
        }
        if self.input_dim == 0 || self.n_max == 0 {
            return Err(Error::input("input_dim and n_max must be positive"));
        }
        if self.beta.is_nan() || self.beta < 1.0 || self.beta.is_infinite() {
            return Err(Error::input(format!(
                "beta must be >= 1, got {}",
                self.beta
            )));
        }
        if [self.class_separation, self.noise_sigma]
            .iter()
            .any(|v| v.is_nan() || *v < 0.0)
        {
            return Err(Error::input(
                "class_separation and noise_sigma must be non-negative",
            ));
        }
        Ok(())
    }

    /// `key=value` lines, one per field.
    pub fn to_metadata(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "classes={}", self.classes);
        let _ = writeln!(s, "input_dim={}", self.input_dim);
        let _ = writeln!(s, "n_max={}", self.n_max);
        let _ = writeln!(s, "beta={}", self.beta);
        let _ = writeln!(s, "class_separation={}", self.class_separation);
        let _ = writeln!(s, "noise_sigma={}", self.noise_sigma);
        let _ = writeln!(s, "seed={}", self.seed);
        s
    }

    pub fn from_metadata(text: &str) -> Result<Self> {
        let mut spec = GmmSpec::default();
        let mut seen = [false; 7];
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse { line: n + 1, msg };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            let bad = |_| err(format!("invalid value {v:?} for {k}"));
            let idx = match k {
                "classes" => {
                    spec.classes = v.parse().map_err(bad)?;
                    0
                }
                "input_dim" => {
                    spec.input_dim = v.parse().map_err(bad)?;
                    1
                }
                "n_max" => {
                    spec.n_max = v.parse().map_err(bad)?;
                    2
                }
                "beta" => {
                    spec.beta = v
                        .parse()
                        .map_err(|_| err(format!("invalid value {v:?} for {k}")))?;
                    3
                }
                "class_separation" => {
                    spec.class_separation = v
                        .parse()
                        .map_err(|_| err(format!("invalid value {v:?} for {k}")))?;
                    4
                }
                "noise_sigma" => {
                    spec.noise_sigma = v
                        .parse()
                        .map_err(|_| err(format!("invalid value {v:?} for {k}")))?;
                    5
                }
                "seed" => {
                    spec.seed = v.parse().map_err(bad)?;
                    6
                }
                other => return Err(err(format!("unknown key {other:?}"))),
            };
            seen[idx] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            let names = [
                "classes",
                "input_dim",
                "n_max",
                "beta",
                "class_separation",
                "noise_sigma",
                "seed",
            ];
            return Err(Error::Parse {
                line: 0,
                msg: format!("metadata is missing {}", names[i]),
            });
        }
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongTailDataset {
    pub x: Tensor2D,
    pub y: Vec<usize>,
    pub class_counts: Vec<usize>,
    pub spec: GmmSpec,
}

impl LongTailDataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.class_counts.len()
    }

    fn subset(&self, idx: &[usize]) -> Self {
        let y: Vec<usize> = idx.iter().map(|&i| self.y[i]).collect();
        let mut counts = vec![0; self.classes()];
        for &l in &y {
            counts[l] += 1;
        }
        Self {
            x: self.x.select_rows(idx),
            y,
            class_counts: counts,
            spec: self.spec.clone(),
        }
    }
}

/// `N_c = round(N_max · β^(−c/(C−1)))`, clamped to at least 1.
pub fn class_counts(classes: usize, n_max: usize, beta: f64) -> Result<Vec<usize>> {
    if classes < 2 {
        return Err(Error::input(format!("classes must be >= 2, got {classes}")));
    }
    if n_max == 0 {
        return Err(Error::input("n_max must be positive"));
    }
    if beta.is_nan() || beta < 1.0 || beta.is_infinite() {
        return Err(Error::input(format!("beta must be >= 1, got {beta}")));
    }
    let last = (classes - 1) as f64;
    Ok((0..classes)
        .map(|c| {
            let n = (n_max as f64 * beta.powf(-(c as f64) / last)).round();
            (n as usize).max(1)
        })
        .collect())
}

/// Class means at least `class_separation · noise_sigma` apart.
pub fn class_means(spec: &GmmSpec) -> Result<Tensor2D> {
    spec.validate()?;
    let min_dist = spec.class_separation * spec.noise_sigma;
    // Gaussian directions scaled so that a typical pair lands ~1.5x the
    // minimum distance apart.
    let unit = if spec.noise_sigma > 0.0 {
        spec.noise_sigma
    } else {
        1.0
    };
    let scale = 1.5 * spec.class_separation.max(1.0) * unit / (2.0 * spec.input_dim as f64).sqrt();
    let mut rng = rng::stream(spec.seed, rng::DATA_MEANS);
    let mut means = Tensor2D::zeros(spec.classes, spec.input_dim);
    for c in 0..spec.classes {
        let mut placed = false;
        for _ in 0..MEAN_ATTEMPTS {
            let cand: Vec<f64> = (0..spec.input_dim)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let ok = (0..c).all(|o| {
                let d2: f64 = means
                    .row(o)
                    .iter()
                    .zip(&cand)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum();
                d2.sqrt() >= min_dist
            });
            if ok {
                means.row_mut(c).copy_from_slice(&cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Capability(format!(
                "could not place {} class means {min_dist} apart in {} dimensions; \
                 increase input_dim or lower class_separation",
                spec.classes, spec.input_dim
            )));
        }
    }
    Ok(means)
}

/// Samples `class_counts(spec)` points per class around seeded means.
pub fn sample_gmm(spec: &GmmSpec) -> Result<LongTailDataset> {
    sample_with_extra(spec, 0)
}

/// Like [`sample_gmm`] but draws `extra` additional points per class, so a
/// balanced test split of that size can be carved off afterwards.
pub fn sample_with_extra(spec: &GmmSpec, extra: usize) -> Result<LongTailDataset> {
    spec.validate()?;
    let means = class_means(spec)?;
    let counts: Vec<usize> = class_counts(spec.classes, spec.n_max, spec.beta)?
        .into_iter()
        .map(|n| n + extra)
        .collect();
    let total: usize = counts.iter().sum();
    let mut rng = rng::stream(spec.seed, rng::DATA_SAMPLES);
    let mut x = Tensor2D::zeros(total, spec.input_dim);
    let mut y = Vec::with_capacity(total);
    let mut row = 0;
    for (c, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            for (dst, &m) in x.row_mut(row).iter_mut().zip(means.row(c)) {
                let z: f64 = rng.sample(StandardNormal);
                *dst = m + spec.noise_sigma * z;
            }
            y.push(c);
            row += 1;
        }
    }
    Ok(LongTailDataset {
        x,
        y,
        class_counts: counts,
        spec: spec.clone(),
    })
}

/// Holds out exactly `test_per_class` samples of every class.
pub fn split(
    ds: &LongTailDataset,
    test_per_class: usize,
    seed: u64,
) -> Result<(LongTailDataset, LongTailDataset)> {
    if test_per_class > 0 {
        if let Some(c) = ds.class_counts.iter().position(|&n| n <= test_per_class) {
            return Err(Error::input(format!(
                "class {c} has {} samples; needs more than {test_per_class} to keep a training remainder",
                ds.class_counts[c]
            )));
        }
    }
    let mut rng = rng::stream(seed, rng::DATA_SPLIT);
    let mut is_test = vec![false; ds.len()];
    for c in 0..ds.classes() {
        let mut members: Vec<usize> = (0..ds.len()).filter(|&i| ds.y[i] == c).collect();
        members.shuffle(&mut rng);
        for &i in members.iter().take(test_per_class) {
            is_test[i] = true;
        }
    }
    let train: Vec<usize> = (0..ds.len()).filter(|&i| !is_test[i]).collect();
    let test: Vec<usize> = (0..ds.len()).filter(|&i| is_test[i]).collect();
    Ok((ds.subset(&train), ds.subset(&test)))
}

/// Long-tailed training set with profile `class_counts(spec)` plus a balanced
/// test set of `test_per_class` per class drawn from the same mixture.
pub fn train_test(
    spec: &GmmSpec,
    test_per_class: usize,
) -> Result<(LongTailDataset, LongTailDataset)> {
    let full = sample_with_extra(spec, test_per_class)?;
    split(&full, test_per_class, spec.seed)
}

/// Path of the metadata sidecar written next to a dataset CSV.
pub fn metadata_path(csv: &Path) -> PathBuf {
    let mut name = csv
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".meta");
    csv.with_file_name(name)
}

/// Writes `label,f_0..f_{K-1}` rows plus a `key=value` metadata sidecar.
pub fn save_csv(ds: &LongTailDataset, path: &Path) -> Result<()> {
    let mut s = String::new();
    s.push_str("label");
    for k in 0..ds.x.cols() {
        let _ = write!(s, ",f_{k}");
    }
    s.push('\n');
    for (i, &l) in ds.y.iter().enumerate() {
        let _ = write!(s, "{l}");
        for v in ds.x.row(i) {
            // `{:?}` on f64 prints the shortest round-tripping form.
            let _ = write!(s, ",{v:?}");
        }
        s.push('\n');
    }
    fs::write(path, s)?;
    let mut meta = ds.spec.to_metadata();
    let counts: Vec<String> = ds.class_counts.iter().map(ToString::to_string).collect();
    let _ = writeln!(meta, "# class_counts={}", counts.join(","));
    fs::write(metadata_path(path), meta)?;
    Ok(())
}

pub fn load_csv(path: &Path) -> Result<LongTailDataset> {
    let text = fs::read_to_string(path)?;
    let spec = GmmSpec::from_metadata(&fs::read_to_string(metadata_path(path))?)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty file".into(),
    })?;
    let cols: Vec<&str> = header.split(',').collect();
    let width = cols.len().saturating_sub(1);
    let expected: Vec<String> = std::iter::once("label".to_string())
        .chain((0..width).map(|k| format!("f_{k}")))
        .collect();
    if cols.is_empty() || width == 0 || cols != expected {
        return Err(Error::Parse {
            line: 1,
            msg: format!("bad header {header:?}; expected label,f_0,..."),
        });
    }
    let mut data = Vec::new();
    let mut y = Vec::new();
    for (n, line) in lines.enumerate() {
        let lineno = n + 2;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != width + 1 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected {} fields, found {}", width + 1, fields.len()),
            });
        }
        let label: usize = fields[0].trim().parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("bad label {:?}", fields[0]),
        })?;
        if label >= spec.classes {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("label {label} out of range for {} classes", spec.classes),
            });
        }
        y.push(label);
        for f in &fields[1..] {
            data.push(f.trim().parse::<f64>().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("bad value {f:?}"),
            })?);
        }
    }
    let mut counts = vec![0; spec.classes];
    for &l in &y {
        counts[l] += 1;
    }
    Ok(LongTailDataset {
        x: Tensor2D::from_vec(y.len(), width, data)?,
        y,
        class_counts: counts,
        spec,
    })
}
