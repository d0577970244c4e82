//! Accuracy splits, feature-space geometry and cross-seed dependency
//! consistency.
//!
//! Head/body/tail groups are count tertiles: classes are sorted by training
//! count (descending, ties by class index) and split into three groups, with
//! remainder classes going to the head group first, then body.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor2D;

/// Reported in place of separability when features have zero spread.
pub const SEPARABILITY_CAP: f64 = 1e12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall_acc: f64,
    /// `None` for classes absent from the evaluation set.
    pub per_class_acc: Vec<Option<f64>>,
    pub head_acc: Option<f64>,
    pub body_acc: Option<f64>,
    pub tail_acc: Option<f64>,
    pub compactness: f64,
    pub separability: f64,
    /// Number of classes with a single evaluation sample (zero spread).
    pub singleton_classes: usize,
    /// What the dependency rows were computed from.
    pub dependency_source: String,
    /// Pairwise cosine of class representations; `None` where undefined.
    pub dependency: Vec<Vec<Option<f64>>>,
    pub group_rule: String,
}

pub const GROUP_RULE: &str = "count tertiles, remainder to head then body";

pub fn per_class_accuracy(preds: &[usize], labels: &[usize], classes: usize) -> Vec<Option<f64>> {
    let mut hit = vec![0usize; classes];
    let mut tot = vec![0usize; classes];
    for (&p, &l) in preds.iter().zip(labels) {
        tot[l] += 1;
        if p == l {
            hit[l] += 1;
        }
    }
    hit.iter()
        .zip(&tot)
        .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
        .collect()
}

/// Class indices of the head, body and tail groups.
pub fn hbt_groups(class_counts: &[usize]) -> [Vec<usize>; 3] {
    let c = class_counts.len();
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| class_counts[b].cmp(&class_counts[a]).then(a.cmp(&b)));
    if c < 3 {
        let head = order[..c.div_ceil(2)].to_vec();
        let tail = order[c.div_ceil(2)..].to_vec();
        return [head, Vec::new(), tail];
    }
    let base = c / 3;
    let rem = c % 3;
    let h = base + usize::from(rem >= 1);
    let b = base + usize::from(rem >= 2);
    [
        order[..h].to_vec(),
        order[h..h + b].to_vec(),
        order[h + b..].to_vec(),
    ]
}

fn group_mean(acc: &[Option<f64>], group: &[usize]) -> Option<f64> {
    let vals: Vec<f64> = group.iter().filter_map(|&c| acc[c]).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Mean accuracy of the head, body and tail groups.
pub fn hbt_summary(
    per_class_acc: &[Option<f64>],
    class_counts: &[usize],
) -> (Option<f64>, Option<f64>, Option<f64>) {
    let [h, b, t] = hbt_groups(class_counts);
    (
        group_mean(per_class_acc, &h),
        group_mean(per_class_acc, &b),
        group_mean(per_class_acc, &t),
    )
}

/// Per-class mean feature rows; `None` for classes with no samples.
pub fn centroids(features: &Tensor2D, labels: &[usize], classes: usize) -> Vec<Option<Vec<f64>>> {
    let d = features.cols();
    let mut sums = vec![vec![0.0; d]; classes];
    let mut n = vec![0usize; classes];
    for (i, &l) in labels.iter().enumerate() {
        n[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(features.row(i)) {
            *s += v;
        }
    }
    sums.into_iter()
        .zip(n)
        .map(|(s, k)| (k > 0).then(|| s.into_iter().map(|v| v / k as f64).collect()))
        .collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Mean Euclidean distance from each sample to its class centroid.
pub fn compactness(features: &Tensor2D, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return f64::NAN;
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let cents = centroids(features, labels, classes);
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            dist(
                features.row(i),
                cents[l].as_ref().expect("class has samples"),
            )
        })
        .sum();
    total / labels.len() as f64
}

/// Minimum distance between class centroids.
pub fn min_centroid_distance(features: &Tensor2D, labels: &[usize]) -> f64 {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let cents: Vec<Vec<f64>> = centroids(features, labels, classes)
        .into_iter()
        .flatten()
        .collect();
    let mut best = f64::INFINITY;
    for i in 0..cents.len() {
        for j in i + 1..cents.len() {
            best = best.min(dist(&cents[i], &cents[j]));
        }
    }
    best
}

/// Minimum centroid distance divided by compactness. Needs two classes.
pub fn separability(features: &Tensor2D, labels: &[usize]) -> f64 {
    let m = min_centroid_distance(features, labels);
    let c = compactness(features, labels);
    if !m.is_finite() {
        return f64::NAN;
    }
    if c == 0.0 {
        SEPARABILITY_CAP
    } else {
        (m / c).min(SEPARABILITY_CAP)
    }
}

/// Cosine similarity between rows; entries touching a zero (or missing) row
/// are `None` off the diagonal.
pub fn dependency_matrix(rows: &[Option<Vec<f64>>]) -> Vec<Vec<Option<f64>>> {
    let norms: Vec<Option<f64>> = rows
        .iter()
        .map(|r| {
            r.as_ref()
                .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
                .filter(|&n| n > 0.0)
        })
        .collect();
    let c = rows.len();
    let mut out = vec![vec![None; c]; c];
    for i in 0..c {
        out[i][i] = Some(1.0);
        for j in i + 1..c {
            if let (Some(a), Some(b), Some(na), Some(nb)) = (&rows[i], &rows[j], norms[i], norms[j])
            {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let v = dot / (na * nb);
                out[i][j] = Some(v);
                out[j][i] = Some(v);
            }
        }
    }
    out
}

pub fn matrix_rows(m: &Tensor2D) -> Vec<Option<Vec<f64>>> {
    (0..m.rows()).map(|r| Some(m.row(r).to_vec())).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyScore {
    /// Mean over defined pairs; `None` if no pair is defined.
    pub mean: Option<f64>,
    /// `(i, j, r)` for every run pair `i < j`; `r` is `None` when undefined.
    pub pairs: Vec<(usize, usize, Option<f64>)>,
}

fn upper_triangle(m: &[Vec<Option<f64>>]) -> Vec<Option<f64>> {
    let c = m.len();
    let mut v = Vec::new();
    for (i, row) in m.iter().enumerate() {
        for &x in &row[i + 1..c] {
            v.push(x);
        }
    }
    v
}

/// Pearson correlation of two samples; `None` when either has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len();
    if n < 2 || b.len() != n {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    // sqrt(x * x) == x exactly, so identical samples give exactly 1.
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson correlation between the strict upper triangles of every pair of
/// dependency matrices. Entries undefined in either matrix are dropped from
/// that pair.
pub fn cross_seed_consistency(matrices: &[Vec<Vec<Option<f64>>>]) -> ConsistencyScore {
    let tri: Vec<Vec<Option<f64>>> = matrices.iter().map(|m| upper_triangle(m)).collect();
    let mut pairs = Vec::new();
    for i in 0..tri.len() {
        for j in i + 1..tri.len() {
            let (a, b): (Vec<f64>, Vec<f64>) = tri[i]
                .iter()
                .zip(&tri[j])
                .filter_map(|(x, y)| Some(((*x)?, (*y)?)))
                .unzip();
            pairs.push((i, j, pearson(&a, &b)));
        }
    }
    let defined: Vec<f64> = pairs.iter().filter_map(|p| p.2).collect();
    let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    ConsistencyScore { mean, pairs }
}

/// Assembles the full report for one evaluated run.
pub fn report(
    preds: &[usize],
    labels: &[usize],
    features: &Tensor2D,
    train_counts: &[usize],
    representation: &[Option<Vec<f64>>],
    dependency_source: &str,
) -> MetricsReport {
    let classes = train_counts.len();
    let per_class = per_class_accuracy(preds, labels, classes);
    let (head, body, tail) = hbt_summary(&per_class, train_counts);
    let mut counts = vec![0usize; classes];
    labels.iter().for_each(|&l| counts[l] += 1);
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    MetricsReport {
        overall_acc: hits as f64 / labels.len().max(1) as f64,
        per_class_acc: per_class,
        head_acc: head,
        body_acc: body,
        tail_acc: tail,
        compactness: compactness(features, labels),
        separability: separability(features, labels),
        singleton_classes: counts.iter().filter(|&&n| n == 1).count(),
        dependency_source: dependency_source.to_string(),
        dependency: dependency_matrix(representation),
        group_rule: GROUP_RULE.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::{generate_anchors, AnchorSource};
    use proptest::prelude::*;

    #[test]
    fn per_class_examples() {
        assert_eq!(
            per_class_accuracy(&[0, 1], &[0, 1], 2),
            vec![Some(1.0), Some(1.0)]
        );
        assert_eq!(
            per_class_accuracy(&[0, 1, 1], &[0, 0, 1], 2),
            vec![Some(0.5), Some(1.0)]
        );
        assert_eq!(per_class_accuracy(&[0], &[0], 2), vec![Some(1.0), None]);
    }

    #[test]
    fn hbt_examples() {
        let acc = vec![Some(0.7); 6];
        let (h, b, t) = hbt_summary(&acc, &[5; 6]);
        assert_eq!((h, b, t), (Some(0.7), Some(0.7), Some(0.7)));

        let (h, b, t) = hbt_summary(&[Some(0.9), Some(0.6), Some(0.3)], &[100, 10, 1]);
        assert_eq!((h, b, t), (Some(0.9), Some(0.6), Some(0.3)));

        let g = hbt_groups(&[9, 8, 7, 6, 5, 4, 3, 2, 1]);
        assert_eq!(g.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 3]);
        let g = hbt_groups(&[500, 300, 180, 108, 65, 39, 23, 14, 8, 5]);
        assert_eq!(g, [vec![0, 1, 2, 3], vec![4, 5, 6], vec![7, 8, 9]]);
        let g = hbt_groups(&[3, 1]);
        assert_eq!(g, [vec![0], vec![], vec![1]]);
    }

    #[test]
    fn geometry_examples() {
        let f = Tensor2D::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0], vec![3.0, 4.0]]);
        let y = [0, 0, 1];
        assert_eq!(compactness(&f, &y), 0.0);
        assert_eq!(min_centroid_distance(&f, &y), 5.0);
        assert_eq!(separability(&f, &y), SEPARABILITY_CAP);

        let f = Tensor2D::from_rows(&[
            vec![-1.0, 0.0],
            vec![1.0, 0.0],
            vec![9.0, 0.0],
            vec![11.0, 0.0],
        ]);
        let y = [0, 0, 1, 1];
        assert_eq!(compactness(&f, &y), 1.0);
        assert_eq!(separability(&f, &y), 10.0);
    }

    #[test]
    fn dependency_examples() {
        let d = dependency_matrix(&matrix_rows(&Tensor2D::identity(3)));
        assert_eq!(d[0][1], Some(0.0));
        let mes = generate_anchors(AnchorSource::Mes, 3, 5, 2).unwrap();
        let d = dependency_matrix(&matrix_rows(mes.matrix()));
        assert!((d[0][2].unwrap() + 0.5).abs() < 1e-9);
        let dup = vec![Some(vec![1.0, 2.0]), Some(vec![1.0, 2.0])];
        assert!((dependency_matrix(&dup)[0][1].unwrap() - 1.0).abs() < 1e-12);
        let zero = vec![Some(vec![1.0, 2.0]), Some(vec![0.0, 0.0]), None];
        let d = dependency_matrix(&zero);
        assert_eq!(d[0][1], None);
        assert_eq!(d[1][1], Some(1.0));
        assert_eq!(d[0][2], None);
    }

    fn sym(upper: [f64; 3]) -> Vec<Vec<Option<f64>>> {
        let [a, b, c] = upper;
        vec![
            vec![Some(1.0), Some(a), Some(b)],
            vec![Some(a), Some(1.0), Some(c)],
            vec![Some(b), Some(c), Some(1.0)],
        ]
    }

    #[test]
    fn consistency_examples() {
        let m = sym([0.1, 0.2, 0.3]);
        assert!(
            (cross_seed_consistency(&[m.clone(), m.clone()])
                .mean
                .unwrap()
                - 1.0)
                .abs()
                < 1e-12
        );
        let neg = sym([-0.1, -0.2, -0.3]);
        assert!((cross_seed_consistency(&[m.clone(), neg]).mean.unwrap() + 1.0).abs() < 1e-12);
        let scaled = sym([0.2, 0.4, 0.6]);
        assert!((cross_seed_consistency(&[m.clone(), scaled]).mean.unwrap() - 1.0).abs() < 1e-12);
        let flat = sym([0.5, 0.5, 0.5]);
        let s = cross_seed_consistency(&[m, flat]);
        assert_eq!(s.mean, None);
        assert_eq!(s.pairs, vec![(0, 1, None)]);
    }

    proptest! {
        #[test]
        fn geometry_is_permutation_invariant(
            pts in prop::collection::vec((prop::collection::vec(-3.0f64..3.0, 3), 0usize..3), 6..30),
            seed in any::<u64>(),
        ) {
            let mut labels: Vec<usize> = pts.iter().map(|p| p.1).collect();
            // make sure at least two classes exist
            labels[0] = 0;
            labels[1] = 1;
            let rows: Vec<Vec<f64>> = pts.iter().map(|p| p.0.clone()).collect();
            let mut perm: Vec<usize> = (0..rows.len()).collect();
            let mut s = seed;
            for i in (1..perm.len()).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                perm.swap(i, (s >> 33) as usize % (i + 1));
            }
            let f = Tensor2D::from_rows(&rows);
            let fp = f.select_rows(&perm);
            let lp: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
            prop_assert!((compactness(&f, &labels) - compactness(&fp, &lp)).abs() < 1e-9);
            prop_assert!((min_centroid_distance(&f, &labels) - min_centroid_distance(&fp, &lp)).abs() < 1e-9);
        }

        #[test]
        fn dependency_scale_invariant(rows in prop::collection::vec(prop::collection::vec(0.1f64..2.0, 4), 2..6), k in 0.01f64..100.0) {
            let a: Vec<Option<Vec<f64>>> = rows.iter().cloned().map(Some).collect();
            let b: Vec<Option<Vec<f64>>> = rows.iter().map(|r| Some(r.iter().map(|v| v * k).collect())).collect();
            let (da, db) = (dependency_matrix(&a), dependency_matrix(&b));
            for (ra, rb) in da.iter().zip(&db) {
                for (x, y) in ra.iter().zip(rb) {
                    prop_assert!((x.unwrap() - y.unwrap()).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn consistency_order_invariant(u in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 2..5)) {
            let ms: Vec<_> = u.iter().map(|&x| sym(x)).collect();
            let mut rev = ms.clone();
            rev.reverse();
            let (a, b) = (cross_seed_consistency(&ms).mean, cross_seed_consistency(&rev).mean);
            match (a, b) {
                (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-9),
                (x, y) => prop_assert_eq!(x, y),
            }
        }

        #[test]
        fn hbt_equal_groups_average_back(acc in prop::collection::vec(0.0f64..1.0, 9)) {
            let counts: Vec<usize> = (0..9).map(|i| 100 - i).collect();
            let a: Vec<Option<f64>> = acc.iter().copied().map(Some).collect();
            let (h, b, t) = hbt_summary(&a, &counts);
            let overall = acc.iter().sum::<f64>() / 9.0;
            prop_assert!(((h.unwrap() + b.unwrap() + t.unwrap()) / 3.0 - overall).abs() < 1e-12);
        }
    }
}
