//! Cross-model and cross-dataset comparison of head tables.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{HeadMetric, HeadStatsTable};
use crate::error::{Error, Result};
use crate::metrics::neumaier_sum;

/// Largest head count the 2-D assignment variant accepts.
pub const MAX_2D_POINTS: usize = 1600;

/// Sample Pearson correlation. Constant inputs are an error rather than 0.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(Error::TooShort { min: 2, got: x.len() });
    }
    if is_constant(x) {
        return Err(Error::ZeroVariance("x"));
    }
    if is_constant(y) {
        return Err(Error::ZeroVariance("y"));
    }
    let n = x.len() as f64;
    let mx = neumaier_sum(x.iter().copied()) / n;
    let my = neumaier_sum(y.iter().copied()) / n;
    let sxy = neumaier_sum(x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)));
    let sxx = neumaier_sum(x.iter().map(|a| (a - mx) * (a - mx)));
    let syy = neumaier_sum(y.iter().map(|b| (b - my) * (b - my)));
    if sxx == 0.0 {
        return Err(Error::ZeroVariance("x"));
    }
    if syy == 0.0 {
        return Err(Error::ZeroVariance("y"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

fn is_constant(v: &[f64]) -> bool {
    v.iter().all(|&a| a == v[0])
}

/// Layer-major flattening of one metric.
pub fn head_vector(table: &HeadStatsTable, metric: HeadMetric) -> Result<Vec<f64>> {
    Ok(table.metric(metric)?.to_vec())
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Earth mover's distance between two equal-size, equal-weight multisets on
/// the line: the mean absolute difference of their order statistics.
///
/// Multisets of different sizes are rejected; [`wasserstein_1d`] compares
/// them through their quantile functions instead.
pub fn emd_1d(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch(x.len(), y.len()));
    }
    if x.is_empty() {
        return Err(Error::TooShort { min: 1, got: 0 });
    }
    let (sx, sy) = (sorted(x), sorted(y));
    Ok(neumaier_sum(sx.iter().zip(&sy).map(|(a, b)| (a - b).abs())) / x.len() as f64)
}

/// First Wasserstein distance between the empirical distributions of `x` and
/// `y`, which may differ in size: the integral of `|F^-1(t) - G^-1(t)|` over
/// `t` in `[0, 1]`, evaluated exactly on the merged quantile breakpoints.
/// Agrees with [`emd_1d`] when the sizes match.
pub fn wasserstein_1d(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::TooShort { min: 1, got: 0 });
    }
    let (sx, sy) = (sorted(x), sorted(y));
    let (n, m) = (sx.len(), sy.len());
    // Quantile breakpoints i/n and j/m, walked in integer units of 1/(n*m).
    let (mut i, mut j) = (0usize, 0usize);
    let mut t = 0usize;
    let total = n * m;
    let mut pieces = Vec::with_capacity(n + m);
    while t < total {
        let next_x = (i + 1) * m;
        let next_y = (j + 1) * n;
        let next = next_x.min(next_y);
        pieces.push((next - t) as f64 / total as f64 * (sx[i] - sy[j]).abs());
        t = next;
        if next == next_x {
            i += 1;
        }
        if next == next_y {
            j += 1;
        }
    }
    Ok(neumaier_sum(pieces))
}

/// Equal-weight earth mover's distance between two same-size point clouds in
/// the plane, solved exactly as a minimum-cost assignment on Euclidean cost.
pub fn emd_2d(x: &[(f64, f64)], y: &[(f64, f64)]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch(x.len(), y.len()));
    }
    if x.is_empty() {
        return Err(Error::TooShort { min: 1, got: 0 });
    }
    if x.len() > MAX_2D_POINTS {
        return Err(Error::ShapeMismatch(format!(
            "2-D EMD supports at most {MAX_2D_POINTS} points, got {}",
            x.len()
        )));
    }
    let n = x.len();
    let cost: Vec<f64> = x
        .iter()
        .flat_map(|a| y.iter().map(move |b| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()))
        .collect();
    let assignment = min_cost_assignment(n, &cost);
    Ok(neumaier_sum(assignment.iter().enumerate().map(|(r, &c)| cost[r * n + c])) / n as f64)
}

/// Hungarian algorithm with potentials on a dense `n x n` cost matrix;
/// returns the column assigned to each row.
pub(crate) fn min_cost_assignment(n: usize, cost: &[f64]) -> Vec<usize> {
    // 1-based arrays; index 0 is the virtual source column.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        row_of_col[0] = row;
        let mut col0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r = row_of_col[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0usize;
            for c in 1..=n {
                if used[c] {
                    continue;
                }
                let cur = cost[(r - 1) * n + (c - 1)] - u[r] - v[c];
                if cur < minv[c] {
                    minv[c] = cur;
                    way[c] = col0;
                }
                if minv[c] < delta {
                    delta = minv[c];
                    col1 = c;
                }
            }
            for c in 0..=n {
                if used[c] {
                    u[row_of_col[c]] += delta;
                    v[c] -= delta;
                } else {
                    minv[c] -= delta;
                }
            }
            col0 = col1;
            if row_of_col[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            row_of_col[col0] = row_of_col[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for c in 1..=n {
        if row_of_col[c] != 0 {
            assignment[row_of_col[c] - 1] = c - 1;
        }
    }
    assignment
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComparisonKind {
    Pearson,
    Emd,
}

impl std::str::FromStr for ComparisonKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "pearson" => Ok(ComparisonKind::Pearson),
            "emd" => Ok(ComparisonKind::Emd),
            other => Err(format!("unknown comparison kind {other:?} (expected pearson or emd)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableLabel {
    pub model_id: String,
    pub dataset_id: String,
}

impl TableLabel {
    fn display(&self) -> String {
        format!("{}/{}", self.model_id, self.dataset_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonMatrix {
    pub kind: ComparisonKind,
    /// Metric the head vectors were built from; the 2-D variant always uses
    /// (image mass, concentration).
    pub metric: HeadMetric,
    pub emd_2d: bool,
    pub labels: Vec<TableLabel>,
    pub values: Vec<Vec<f64>>,
}

impl ComparisonMatrix {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("label");
        for l in &self.labels {
            let _ = write!(out, ",{}", csv_field(&l.display()));
        }
        out.push('\n');
        for (l, row) in self.labels.iter().zip(&self.values) {
            out.push_str(&csv_field(&l.display()));
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompareOptions {
    pub kind: ComparisonKind,
    pub metric: HeadMetric,
    pub emd_2d: bool,
}

impl CompareOptions {
    pub fn new(kind: ComparisonKind, metric: HeadMetric) -> Self {
        Self {
            kind,
            metric,
            emd_2d: false,
        }
    }
}

/// Pairwise comparison of every table against every other.
pub fn comparison_matrix(tables: &[HeadStatsTable], opts: &CompareOptions) -> Result<ComparisonMatrix> {
    let first = tables.first().ok_or(Error::EmptyInput)?;
    if let Some(t) = tables
        .iter()
        .find(|t| t.layers != first.layers || t.heads != first.heads)
    {
        return Err(Error::ShapeMismatch(format!(
            "table {}/{} is {}x{}, expected {}x{}",
            t.model_id, t.dataset_id, t.layers, t.heads, first.layers, first.heads
        )));
    }
    let n = tables.len();
    let vectors: Vec<Vec<f64>> = tables
        .iter()
        .map(|t| head_vector(t, opts.metric))
        .collect::<Result<_>>()?;
    let clouds: Vec<Vec<(f64, f64)>> = if opts.emd_2d {
        tables
            .iter()
            .map(|t| {
                t.mean_image_mass
                    .iter()
                    .copied()
                    .zip(t.mean_concentration.iter().copied())
                    .collect()
            })
            .collect()
    } else {
        Vec::new()
    };
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
    let cells: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| match opts.kind {
            ComparisonKind::Pearson => pearson(&vectors[i], &vectors[j]),
            ComparisonKind::Emd if opts.emd_2d => emd_2d(&clouds[i], &clouds[j]),
            ComparisonKind::Emd => emd_1d(&vectors[i], &vectors[j]),
        })
        .collect::<Result<_>>()?;
    let mut values = vec![vec![0.0; n]; n];
    for (&(i, j), v) in pairs.iter().zip(cells) {
        values[i][j] = v;
        values[j][i] = v;
    }
    Ok(ComparisonMatrix {
        kind: opts.kind,
        metric: opts.metric,
        emd_2d: opts.emd_2d,
        labels: tables
            .iter()
            .map(|t| TableLabel {
                model_id: t.model_id.clone(),
                dataset_id: t.dataset_id.clone(),
            })
            .collect(),
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::MetricConfig;
    use proptest::prelude::*;

    fn table(id: &str, scores: Vec<f64>) -> HeadStatsTable {
        let n = scores.len();
        HeadStatsTable {
            model_id: id.into(),
            dataset_id: "d".into(),
            layers: 2,
            heads: n / 2,
            sample_count: 3,
            mean_image_mass: scores.iter().map(|s| s / 10.0).collect(),
            mean_qbbox_mass: None,
            qbbox_sample_count: 0,
            mean_concentration: scores.iter().map(|s| 1.0 - s / 10.0).collect(),
            mean_detection_score: scores,
            metric_config: MetricConfig::default(),
        }
    }

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0, 5.0];
        assert!((pearson(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
        // 3 / (sqrt(2) * sqrt(14/3))
        let expected = 3.0 / (2f64.sqrt() * (14.0f64 / 3.0).sqrt());
        let r = pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap();
        assert!((r - expected).abs() < 1e-12);
        assert!((r - 0.98198).abs() < 1e-5);
    }

    #[test]
    fn pearson_errors() {
        assert!(matches!(pearson(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::ZeroVariance("x"))));
        assert!(matches!(pearson(&[1.0, 2.0], &[3.0, 3.0]), Err(Error::ZeroVariance("y"))));
        assert!(matches!(pearson(&[1.0, 2.0], &[1.0]), Err(Error::LengthMismatch(2, 1))));
        assert!(matches!(pearson(&[1.0], &[1.0]), Err(Error::TooShort { .. })));
    }

    #[test]
    fn emd_examples() {
        assert_eq!(emd_1d(&[0.3, 0.1, 0.2], &[0.1, 0.2, 0.3]).unwrap(), 0.0);
        assert_eq!(emd_1d(&[0.0], &[1.0]).unwrap(), 1.0);
        assert_eq!(emd_1d(&[0.0, 1.0], &[0.5, 0.5]).unwrap(), 0.5);
        assert!(matches!(emd_1d(&[0.0], &[1.0, 2.0]), Err(Error::LengthMismatch(1, 2))));
    }

    /// Transportation LP for the two-point instance, solved by enumerating the
    /// one free variable of the 2x2 plan on a fine grid.
    #[test]
    fn emd_two_point_matches_transport_lp() {
        let (x, y): ([f64; 2], [f64; 2]) = ([0.0, 1.0], [0.5, 0.5]);
        let mut best = f64::INFINITY;
        for step in 0..=1000 {
            let p = 0.5 * step as f64 / 1000.0; // mass moved x0 -> y0
            let plan = [[p, 0.5 - p], [0.5 - p, p]];
            let cost: f64 = (0..2)
                .flat_map(|i| (0..2).map(move |j| (i, j)))
                .map(|(i, j)| plan[i][j] * (x[i] - y[j]).abs())
                .sum();
            best = best.min(cost);
        }
        assert!((best - emd_1d(&x, &y).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn wasserstein_handles_unequal_sizes() {
        assert!((wasserstein_1d(&[0.0, 1.0], &[0.5]).unwrap() - 0.5).abs() < 1e-12);
        // {0} vs {0, 0, 3}: a third of the mass travels 3
        assert!((wasserstein_1d(&[0.0], &[0.0, 0.0, 3.0]).unwrap() - 1.0).abs() < 1e-12);
    }

    fn brute_force_assignment(n: usize, cost: &[f64]) -> f64 {
        fn rec(row: usize, n: usize, cost: &[f64], used: &mut Vec<bool>) -> f64 {
            if row == n {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for c in 0..n {
                if !used[c] {
                    used[c] = true;
                    best = best.min(cost[row * n + c] + rec(row + 1, n, cost, used));
                    used[c] = false;
                }
            }
            best
        }
        rec(0, n, cost, &mut vec![false; n])
    }

    proptest! {
        #[test]
        fn assignment_is_optimal(n in 1usize..7, seed in prop::collection::vec(0.0f64..10.0, 49)) {
            let cost = &seed[..n * n];
            let a = min_cost_assignment(n, cost);
            let mut cols = a.clone();
            cols.sort();
            prop_assert_eq!(cols, (0..n).collect::<Vec<_>>());
            let total: f64 = a.iter().enumerate().map(|(r, &c)| cost[r * n + c]).sum();
            prop_assert!((total - brute_force_assignment(n, cost)).abs() < 1e-9);
        }

        #[test]
        fn emd_2d_reduces_to_1d_on_a_line(x in prop::collection::vec(-5.0f64..5.0, 1..8), shift in -2.0f64..2.0) {
            let y: Vec<f64> = x.iter().rev().map(|v| v * 0.5 + shift).collect();
            let px: Vec<(f64, f64)> = x.iter().map(|&v| (v, 0.0)).collect();
            let py: Vec<(f64, f64)> = y.iter().map(|&v| (v, 0.0)).collect();
            prop_assert!((emd_2d(&px, &py).unwrap() - emd_1d(&x, &y).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn wasserstein_agrees_with_sorted_formula(x in prop::collection::vec(-5.0f64..5.0, 1..40), seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let y: Vec<f64> = x.iter().map(|_| rng.random_range(-5.0..5.0)).collect();
            prop_assert!((wasserstein_1d(&x, &y).unwrap() - emd_1d(&x, &y).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn pearson_affine_invariance(x in prop::collection::vec(-10.0f64..10.0, 3..50), a in 0.1f64..5.0, c in -5.0f64..5.0, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let y: Vec<f64> = x.iter().map(|v| v + rng.random_range(-3.0..3.0)).collect();
            prop_assume!(!is_constant(&x) && !is_constant(&y));
            let r = pearson(&x, &y).unwrap();
            let up: Vec<f64> = x.iter().map(|v| a * v + c).collect();
            let down: Vec<f64> = x.iter().map(|v| -a * v + c).collect();
            prop_assert!((pearson(&up, &y).unwrap() - r).abs() < 1e-9);
            prop_assert!((pearson(&down, &y).unwrap() + r).abs() < 1e-9);
        }

        #[test]
        fn emd_translation(x in prop::collection::vec(-5.0f64..5.0, 1..30), c in -3.0f64..3.0) {
            let y: Vec<f64> = x.iter().map(|v| v + c).collect();
            prop_assert!((emd_1d(&x, &y).unwrap() - c.abs()).abs() < 1e-9);
        }
    }

    #[test]
    fn matrix_single_and_pair() {
        let t = table("a", vec![1.0, 2.0, 3.0, 4.0]);
        let p = comparison_matrix(
            std::slice::from_ref(&t),
            &CompareOptions::new(ComparisonKind::Pearson, HeadMetric::DetectionScore),
        )
        .unwrap();
        assert_eq!(p.values, vec![vec![1.0]]);
        let e = comparison_matrix(
            &[t.clone(), t.clone()],
            &CompareOptions::new(ComparisonKind::Emd, HeadMetric::DetectionScore),
        )
        .unwrap();
        assert_eq!(e.values, vec![vec![0.0, 0.0], vec![0.0, 0.0]]);
        assert_eq!(
            head_vector(&t, HeadMetric::DetectionScore).unwrap(),
            vec![1.0, 2.0, 3.0, 4.0]
        );
    }

    #[test]
    fn matrix_relabeling_permutes() {
        let tables = vec![
            table("a", vec![1.0, 2.0, 3.0, 4.0]),
            table("b", vec![2.0, 1.0, 4.0, 3.5]),
            table("c", vec![0.5, 3.0, 1.0, 2.0]),
        ];
        for kind in [ComparisonKind::Pearson, ComparisonKind::Emd] {
            let opts = CompareOptions::new(kind, HeadMetric::DetectionScore);
            let m = comparison_matrix(&tables, &opts).unwrap();
            let perm = [2usize, 0, 1];
            let permuted: Vec<_> = perm.iter().map(|&i| tables[i].clone()).collect();
            let pm = comparison_matrix(&permuted, &opts).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    assert_eq!(pm.values[i][j], m.values[perm[i]][perm[j]]);
                    assert_eq!(m.values[i][j], m.values[j][i]);
                }
            }
        }
        let opts = CompareOptions {
            emd_2d: true,
            ..CompareOptions::new(ComparisonKind::Emd, HeadMetric::DetectionScore)
        };
        let m = comparison_matrix(&tables, &opts).unwrap();
        assert!(m.values[0][0].abs() < 1e-12);
        assert!(m.values[0][1] > 0.0);
    }

    #[test]
    fn matrix_shape_mismatch_and_csv() {
        let a = table("a", vec![1.0, 2.0, 3.0, 4.0]);
        let b = table("b", vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let opts = CompareOptions::new(ComparisonKind::Pearson, HeadMetric::DetectionScore);
        assert!(matches!(
            comparison_matrix(&[a.clone(), b], &opts),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(comparison_matrix(&[], &opts), Err(Error::EmptyInput)));
        let m = comparison_matrix(&[a.clone(), a], &opts).unwrap();
        assert_eq!(m.to_csv(), "label,a/d,a/d\na/d,1,1\na/d,1,1\n");
    }
}
