//! Diversity-quality scores over a models × labels grid of F1 values, with an
//! optional Laplace-kernel (exponential) KDE smoothing of each row.

use serde::{Deserialize, Serialize};

use crate::error::{ColonyError, Result};

/// The published 9 × 10 grid of family F1 scores (average column dropped).
pub const REFERENCE_GRID_CSV: &str = include_str!("../fixtures/table1_grid.csv");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyGrid {
    pub row_labels: Vec<String>,
    pub column_labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl AccuracyGrid {
    pub fn new(row_labels: Vec<String>, column_labels: Vec<String>, values: Vec<Vec<f64>>) -> Result<Self> {
        let grid = AccuracyGrid {
            row_labels,
            column_labels,
            values,
        };
        grid.check_shape()?;
        if let Some(v) = grid.values.iter().flatten().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(ColonyError::Input(format!("grid entry {v} outside [0, 1]")));
        }
        Ok(grid)
    }

    /// Grid with generic row/column labels.
    pub fn from_rows(values: Vec<Vec<f64>>) -> Result<Self> {
        let rows = (0..values.len()).map(|i| format!("m{i}")).collect();
        let cols = (0..values.first().map_or(0, Vec::len)).map(|c| c.to_string()).collect();
        Self::new(rows, cols, values)
    }

    fn check_shape(&self) -> Result<()> {
        let p = self.values.len();
        let k = self.values.first().map_or(0, Vec::len);
        if p < 2 || k < 2 {
            return Err(ColonyError::Input(format!("grid must be at least 2x2, got {p}x{k}")));
        }
        if self.values.iter().any(|r| r.len() != k) || self.row_labels.len() != p || self.column_labels.len() != k {
            return Err(ColonyError::Input("ragged grid or label count mismatch".into()));
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.values.len()
    }

    pub fn cols(&self) -> usize {
        self.values[0].len()
    }

    /// Header row of column labels (first cell names the row-label column),
    /// then one row per model.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let header = reader
            .headers()
            .map_err(|e| ColonyError::Input(format!("grid csv header: {e}")))?
            .clone();
        let column_labels: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut row_labels = Vec::new();
        let mut values = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| ColonyError::Input(format!("grid csv row {}: {e}", i + 2)))?;
            row_labels.push(rec.get(0).unwrap_or_default().to_string());
            let row = rec
                .iter()
                .skip(1)
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| ColonyError::Input(format!("grid csv row {}: bad number {v:?}", i + 2)))
                })
                .collect::<Result<Vec<f64>>>()?;
            values.push(row);
        }
        Self::new(row_labels, column_labels, values)
    }

    pub fn reference() -> Self {
        Self::from_csv(REFERENCE_GRID_CSV).expect("bundled grid parses")
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn population_variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
}

/// Mean over model pairs `i < j` and labels of `|F1_i(d) − F1_j(d)|`.
pub fn pairwise_disagreement(grid: &AccuracyGrid) -> Result<f64> {
    grid.check_shape()?;
    let (p, k) = (grid.rows(), grid.cols());
    let mut total = 0.0;
    for i in 0..p {
        for j in i + 1..p {
            for d in 0..k {
                total += (grid.values[i][d] - grid.values[j][d]).abs();
            }
        }
    }
    Ok(total / ((p * (p - 1) / 2) as f64 * k as f64))
}

/// Shannon entropy (nats) of a non-negative vector normalized to sum 1.
pub fn row_entropy(row: &[f64]) -> Result<f64> {
    let sum: f64 = row.iter().sum();
    if sum <= 0.0 || row.iter().any(|&v| v < 0.0) {
        return Err(ColonyError::Input("entropy needs a non-negative row with positive sum".into()));
    }
    Ok(-row
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| {
            let q = v / sum;
            q * q.ln()
        })
        .sum::<f64>())
}

/// Mean row entropy.
pub fn system_entropy(grid: &AccuracyGrid) -> Result<f64> {
    grid.check_shape()?;
    let rows = grid.values.iter().map(|r| row_entropy(r)).collect::<Result<Vec<f64>>>()?;
    Ok(mean(&rows))
}

/// Mean over labels of the population variance across models.
pub fn accuracy_variance(grid: &AccuracyGrid) -> Result<f64> {
    grid.check_shape()?;
    let per_label: Vec<f64> = (0..grid.cols())
        .map(|d| population_variance(&grid.values.iter().map(|r| r[d]).collect::<Vec<_>>()))
        .collect();
    Ok(mean(&per_label))
}

/// Population variance of all `p·k` entries pooled together.
pub fn pooled_variance(grid: &AccuracyGrid) -> Result<f64> {
    grid.check_shape()?;
    let all: Vec<f64> = grid.values.iter().flatten().copied().collect();
    Ok(population_variance(&all))
}

fn sign(x: f64) -> i64 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// Tie-corrected Kendall tau-b; `None` when either side is entirely tied.
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len(), "tau-b needs equal-length rankings");
    let (mut s, mut tx, mut ty) = (0i64, 0i64, 0i64);
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            let (a, b) = (sign(x[i] - x[j]), sign(y[i] - y[j]));
            s += a * b;
            tx += a * a;
            ty += b * b;
        }
    }
    if tx == 0 || ty == 0 {
        return None;
    }
    Some(s as f64 / ((tx * ty) as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauStats {
    /// `None` when no pair has a defined tau.
    pub mean: Option<f64>,
    /// Population standard deviation over the included pairs.
    pub std: Option<f64>,
    pub pairs: usize,
    /// Row pairs with an undefined tau (one row fully tied).
    pub excluded: Vec<(usize, usize)>,
}

pub fn kendall_tau_stats(grid: &AccuracyGrid) -> Result<TauStats> {
    grid.check_shape()?;
    let mut taus = Vec::new();
    let mut excluded = Vec::new();
    for i in 0..grid.rows() {
        for j in i + 1..grid.rows() {
            match kendall_tau_b(&grid.values[i], &grid.values[j]) {
                Some(t) => taus.push(t),
                None => excluded.push((i, j)),
            }
        }
    }
    let defined = !taus.is_empty();
    Ok(TauStats {
        mean: defined.then(|| mean(&taus)),
        std: defined.then(|| population_variance(&taus).sqrt()),
        pairs: taus.len(),
        excluded,
    })
}

// ---------------------------------------------------------------------------
// KDE smoothing

pub const MIN_BANDWIDTH: f64 = 0.01;
pub const KDE_GRID_POINTS: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "rule", content = "value")]
pub enum Bandwidth {
    #[default]
    Silverman,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct KdeConfig {
    pub bandwidth: Bandwidth,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// `0.9 · min(s, IQR/1.34) · n^(−1/5)` with sample std `s`, floored at 0.01.
pub fn silverman_bandwidth(row: &[f64]) -> f64 {
    let n = row.len() as f64;
    let m = mean(row);
    let s = (row.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    let mut sorted = row.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
    let spread = if iqr > 0.0 { s.min(iqr / 1.34) } else { s };
    (0.9 * spread * n.powf(-0.2)).max(MIN_BANDWIDTH)
}

impl KdeConfig {
    pub fn resolve(&self, row: &[f64]) -> Result<f64> {
        match self.bandwidth {
            Bandwidth::Silverman => Ok(silverman_bandwidth(row)),
            Bandwidth::Fixed(h) if h > 0.0 && h.is_finite() => Ok(h),
            Bandwidth::Fixed(h) => Err(ColonyError::Config(format!("bandwidth {h} must be positive"))),
        }
    }
}

/// Laplace CDF with location `mu` and scale `h`.
fn laplace_cdf(x: f64, mu: f64, h: f64) -> f64 {
    if x < mu {
        0.5 * ((x - mu) / h).exp()
    } else {
        1.0 - 0.5 * (-(x - mu) / h).exp()
    }
}

/// `∫_{−∞}^{x} t · f(t) dt` for the Laplace density.
fn laplace_partial_mean(x: f64, mu: f64, h: f64) -> f64 {
    if x < mu {
        0.5 * ((x - mu) / h).exp() * (x - h)
    } else {
        mu - 0.5 * (-(x - mu) / h).exp() * (x + h)
    }
}

/// Density of the row's kernel mixture at `x`.
pub fn kde_density(row: &[f64], h: f64, x: f64) -> f64 {
    row.iter().map(|&mu| (-(x - mu).abs() / h).exp() / (2.0 * h)).sum::<f64>() / row.len() as f64
}

/// Replace each entry by the mixture's expectation restricted to the window
/// `[x − h, x + h]` around it.
pub fn kde_smooth_row(row: &[f64], h: f64) -> Vec<f64> {
    row.iter()
        .map(|&x| {
            let (lo, hi) = (x - h, x + h);
            let (mut mass, mut moment) = (0.0, 0.0);
            for &mu in row {
                mass += laplace_cdf(hi, mu, h) - laplace_cdf(lo, mu, h);
                moment += laplace_partial_mean(hi, mu, h) - laplace_partial_mean(lo, mu, h);
            }
            moment / mass
        })
        .collect()
}

/// Density on an evenly spaced grid over `[−3h, 1 + 3h]`, rescaled so its
/// trapezoid integral is exactly 1. Returns `(xs, density, raw mass)`.
pub fn kde_grid(row: &[f64], h: f64) -> (Vec<f64>, Vec<f64>, f64) {
    let (lo, hi) = (-3.0 * h, 1.0 + 3.0 * h);
    let step = (hi - lo) / (KDE_GRID_POINTS - 1) as f64;
    let xs: Vec<f64> = (0..KDE_GRID_POINTS).map(|i| lo + step * i as f64).collect();
    let ys: Vec<f64> = xs.iter().map(|&x| kde_density(row, h, x)).collect();
    let mass = trapezoid(&ys, step);
    (xs, ys.iter().map(|y| y / mass).collect(), mass)
}

pub fn trapezoid(ys: &[f64], step: f64) -> f64 {
    ys.windows(2).map(|w| (w[0] + w[1]) * step / 2.0).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DqMode {
    Plain,
    Kde,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DqReport {
    pub mode: DqMode,
    pub pairwise_disagreement: f64,
    pub system_entropy: f64,
    pub accuracy_variance: f64,
    pub pooled_variance: f64,
    pub mean_tau: Option<f64>,
    pub std_tau: Option<f64>,
    pub excluded_tau_pairs: Vec<(usize, usize)>,
    /// Per-row bandwidths (kde mode only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bandwidths: Option<Vec<f64>>,
}

fn scores(grid: &AccuracyGrid, mode: DqMode, bandwidths: Option<Vec<f64>>) -> Result<DqReport> {
    let tau = kendall_tau_stats(grid)?;
    Ok(DqReport {
        mode,
        pairwise_disagreement: pairwise_disagreement(grid)?,
        system_entropy: system_entropy(grid)?,
        accuracy_variance: accuracy_variance(grid)?,
        pooled_variance: pooled_variance(grid)?,
        mean_tau: tau.mean,
        std_tau: tau.std,
        excluded_tau_pairs: tau.excluded,
        bandwidths,
    })
}

pub fn dq_report(grid: &AccuracyGrid, mode: DqMode, kde: &KdeConfig) -> Result<DqReport> {
    grid.check_shape()?;
    match mode {
        DqMode::Plain => scores(grid, mode, None),
        DqMode::Kde => {
            let mut hs = Vec::with_capacity(grid.rows());
            let mut smoothed = grid.clone();
            for row in &mut smoothed.values {
                let h = kde.resolve(row)?;
                *row = kde_smooth_row(row, h);
                hs.push(h);
            }
            scores(&smoothed, mode, Some(hs))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(v: Vec<Vec<f64>>) -> AccuracyGrid {
        AccuracyGrid::from_rows(v).unwrap()
    }

    #[test]
    fn disagreement_examples() {
        assert_eq!(pairwise_disagreement(&grid(vec![vec![0.5; 3]; 4])).unwrap(), 0.0);
        assert_eq!(pairwise_disagreement(&grid(vec![vec![1.0, 0.0], vec![0.0, 1.0]])).unwrap(), 1.0);
    }

    #[test]
    fn entropy_examples() {
        let g = grid(vec![vec![0.7; 10], vec![0.2; 10]]);
        assert!((system_entropy(&g).unwrap() - 10f64.ln()).abs() < 1e-12);
        let mut one = vec![0.0; 10];
        one[0] = 1.0;
        assert_eq!(row_entropy(&one).unwrap(), 0.0);
        assert!(system_entropy(&grid(vec![vec![0.0; 3], vec![1.0; 3]])).is_err());
    }

    #[test]
    fn variance_examples() {
        assert_eq!(accuracy_variance(&grid(vec![vec![0.3; 4]; 3])).unwrap(), 0.0);
        let g = grid(vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert_eq!(accuracy_variance(&g).unwrap(), 0.25);
        assert_eq!(pooled_variance(&g).unwrap(), 0.25);
    }

    #[test]
    fn tau_examples() {
        assert_eq!(kendall_tau_b(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), Some(1.0));
        assert_eq!(kendall_tau_b(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        let t = kendall_tau_b(&[0.1, 0.2, 0.3], &[0.1, 0.3, 0.2]).unwrap();
        assert!((t - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(kendall_tau_b(&[0.5, 0.5], &[0.1, 0.2]), None);
        let g = grid(vec![vec![0.5, 0.5, 0.5], vec![0.1, 0.2, 0.3], vec![0.1, 0.2, 0.3]]);
        let s = kendall_tau_stats(&g).unwrap();
        assert_eq!(s.excluded, vec![(0, 1), (0, 2)]);
        assert_eq!((s.mean, s.std, s.pairs), (Some(1.0), Some(0.0), 1));
    }

    #[test]
    fn reference_grid_loads() {
        let g = AccuracyGrid::reference();
        assert_eq!((g.rows(), g.cols()), (9, 10));
        assert_eq!(g.values[1][0], 0.49);
        assert_eq!(g.row_labels[4], "F(16, 19, 19, 10k, 3)");
    }

    #[test]
    fn smoothing_constant_row_is_identity() {
        let row = vec![0.8; 10];
        for v in kde_smooth_row(&row, 0.05) {
            assert!((v - 0.8).abs() < 1e-12);
        }
        let g = grid(vec![vec![0.4; 10]; 3]);
        let r = dq_report(&g, DqMode::Kde, &KdeConfig::default()).unwrap();
        assert!(r.pairwise_disagreement.abs() < 1e-12 && r.accuracy_variance.abs() < 1e-12);
        assert!((r.system_entropy - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn wide_bandwidth_shrinks_toward_row_mean() {
        let row = [0.2, 0.9, 0.5, 0.7];
        let m = mean(&row);
        for (&x, v) in row.iter().zip(kde_smooth_row(&row, 1e4)) {
            assert!((v - m).abs() < (x - m).abs());
            assert!((v - x) * (m - x) >= 0.0);
        }
        let g = grid(vec![
            vec![0.91, 0.42, 0.77, 0.63, 0.18],
            vec![0.35, 0.88, 0.54, 0.97, 0.71],
            vec![0.66, 0.29, 0.83, 0.47, 0.95],
        ]);
        let plain = dq_report(&g, DqMode::Plain, &KdeConfig::default()).unwrap();
        let wide = KdeConfig {
            bandwidth: Bandwidth::Fixed(1e4),
        };
        let kde = dq_report(&g, DqMode::Kde, &wide).unwrap();
        assert!(kde.pairwise_disagreement < plain.pairwise_disagreement);
    }

    #[test]
    fn grid_density_normalized() {
        let row = [0.95, 0.98, 0.92, 0.98, 0.95, 0.95, 0.92, 0.90, 0.88, 0.86];
        let h = silverman_bandwidth(&row);
        let (xs, ys, mass) = kde_grid(&row, h);
        assert!((trapezoid(&ys, xs[1] - xs[0]) - 1.0).abs() < 1e-6);
        assert!(mass > 0.9 && mass <= 1.0 + 1e-9);
    }
}
