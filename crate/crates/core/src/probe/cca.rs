//! Canonical correlation analysis between hidden states and head scores.
//!
//! Hidden states are z-scored and head scores min-max scaled per column.
//! Each side is reduced by PCA to the components explaining the requested
//! share of variance, whitened to unit variance, and the canonical
//! correlations are the singular values of the regularised whitened
//! cross-covariance.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::dataset::{collect_pairs, TraceFeatures};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CcaConfig {
    pub n_components: usize,
    pub hidden_variance: f64,
    pub score_variance: f64,
    pub ridge: f64,
}

impl Default for CcaConfig {
    fn default() -> Self {
        Self {
            n_components: 50,
            hidden_variance: 0.95,
            score_variance: 0.99,
            ridge: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CcaResult {
    /// Descending, each in [0, 1].
    pub correlations: Vec<f64>,
    pub hidden_rank: usize,
    pub score_rank: usize,
    /// One side had no variance; `correlations` is empty.
    pub degenerate: bool,
    /// The requested component count exceeded the reduced ranks.
    pub clamped: bool,
}

impl CcaResult {
    fn mean_top(&self, n: usize) -> Option<f64> {
        let take = self.correlations.len().min(n);
        (take > 0).then(|| self.correlations[..take].iter().sum::<f64>() / take as f64)
    }

    pub fn top1(&self) -> Option<f64> {
        self.correlations.first().copied()
    }

    pub fn top10_mean(&self) -> Option<f64> {
        self.mean_top(10)
    }

    pub fn top50_mean(&self) -> Option<f64> {
        self.mean_top(50)
    }
}

fn to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::InvalidInput("rows have differing widths".into()));
    }
    Ok(DMatrix::from_fn(n, d, |i, j| rows[i][j]))
}

/// Per-column z-scores; constant columns become 0.
pub fn z_score_columns(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows() as f64;
    let mut out = m.clone();
    for mut col in out.column_iter_mut() {
        let mean = col.sum() / n;
        let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        col.apply(|x| *x = if sd > 0.0 { (*x - mean) / sd } else { 0.0 });
    }
    out
}

/// Per-column scaling to [0, 1]; constant columns become 0.
pub fn min_max_columns(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut col in out.column_iter_mut() {
        let lo = col.min();
        let hi = col.max();
        let span = hi - lo;
        col.apply(|x| *x = if span > 0.0 { (*x - lo) / span } else { 0.0 });
    }
    out
}

/// Principal components of a data matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: DVector<f64>,
    /// Columns are orthonormal principal directions, by descending variance.
    pub components: DMatrix<f64>,
    pub variances: Vec<f64>,
    pub retained: f64,
}

impl Pca {
    /// Keeps the fewest components whose variance share reaches `fraction`,
    /// ignoring directions with numerically zero variance.
    pub fn fit(x: &DMatrix<f64>, fraction: f64) -> Result<Self> {
        let n = x.nrows();
        if n < 2 {
            return Err(Error::InvalidInput("PCA needs at least two rows".into()));
        }
        let mean = x.row_mean().transpose();
        let mut centered = x.clone();
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centered.tr_mul(&centered) / (n - 1) as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
        let top = eig.eigenvalues[order[0]].max(0.0);
        let floor = top * 1e-10;
        let mut keep = Vec::new();
        let mut acc = 0.0;
        if total > 0.0 {
            for &i in &order {
                let v = eig.eigenvalues[i];
                if v <= floor {
                    break;
                }
                keep.push(i);
                acc += v;
                if acc / total >= fraction - 1e-12 {
                    break;
                }
            }
        }
        let components = DMatrix::from_fn(x.ncols(), keep.len(), |r, c| eig.eigenvectors[(r, keep[c])]);
        Ok(Self {
            mean,
            components,
            variances: keep.iter().map(|&i| eig.eigenvalues[i]).collect(),
            retained: if total > 0.0 { acc / total } else { 0.0 },
        })
    }

    pub fn rank(&self) -> usize {
        self.variances.len()
    }

    /// Projects onto the components and scales each to unit variance.
    pub fn whiten(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut centered = x.clone();
        for mut row in centered.row_iter_mut() {
            row -= self.mean.transpose();
        }
        let mut z = centered * &self.components;
        for (j, mut col) in z.column_iter_mut().enumerate() {
            col /= self.variances[j].sqrt();
        }
        z
    }
}

fn inv_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v.max(1e-300).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Canonical correlations between the rows of `x` (hidden states) and `y` (scores).
pub fn cca(x: &[Vec<f64>], y: &[Vec<f64>], config: &CcaConfig) -> Result<CcaResult> {
    if x.len() != y.len() {
        return Err(Error::InvalidInput("CCA inputs have differing row counts".into()));
    }
    if x.len() < 2 {
        return Err(Error::InvalidInput("CCA needs at least two rows".into()));
    }
    let xm = z_score_columns(&to_matrix(x)?);
    let ym = min_max_columns(&to_matrix(y)?);
    let px = Pca::fit(&xm, config.hidden_variance)?;
    let py = Pca::fit(&ym, config.score_variance)?;
    let (p, q) = (px.rank(), py.rank());
    if p == 0 || q == 0 {
        return Ok(CcaResult {
            correlations: Vec::new(),
            hidden_rank: p,
            score_rank: q,
            degenerate: true,
            clamped: false,
        });
    }
    let n_comp = config.n_components.min(p).min(q);
    let clamped = n_comp < config.n_components;
    if clamped {
        log::warn!("CCA components clamped from {} to {n_comp} (ranks {p}, {q})", config.n_components);
    }
    let zx = px.whiten(&xm);
    let zy = py.whiten(&ym);
    let scale = 1.0 / (x.len() - 1) as f64;
    let ridge = |m: DMatrix<f64>| {
        let k = m.nrows();
        m + DMatrix::identity(k, k) * config.ridge
    };
    let cxx = ridge(zx.tr_mul(&zx) * scale);
    let cyy = ridge(zy.tr_mul(&zy) * scale);
    let cxy = zx.tr_mul(&zy) * scale;
    let t = inv_sqrt(&cxx) * cxy * inv_sqrt(&cyy);
    let mut sv: Vec<f64> = t.singular_values().iter().map(|s| s.clamp(0.0, 1.0)).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv.truncate(n_comp);
    Ok(CcaResult {
        correlations: sv,
        hidden_rank: p,
        score_rank: q,
        degenerate: false,
        clamped,
    })
}

/// CCA of hidden states at n against scores at n + k for each k.
pub fn temporal_sweep(
    traces: &[TraceFeatures],
    offsets: impl IntoIterator<Item = usize>,
    config: &CcaConfig,
) -> Result<Vec<(usize, CcaResult)>> {
    offsets
        .into_iter()
        .map(|k| {
            let d = collect_pairs(traces, k, 0);
            cca(&d.hidden, &d.targets, config).map(|r| (k, r))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn gaussian(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = crate::seed::rng(seed);
        (0..n).map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect()).collect()
    }

    #[test]
    fn pca_components_orthonormal_and_retained() {
        let x = to_matrix(&gaussian(200, 8, 1)).unwrap();
        let pca = Pca::fit(&x, 0.9).unwrap();
        assert!(pca.retained >= 0.9);
        let g = pca.components.tr_mul(&pca.components);
        assert!((g - DMatrix::identity(pca.rank(), pca.rank())).abs().max() < 1e-8);
    }

    #[test]
    fn self_correlation() {
        let x = gaussian(300, 6, 2);
        let r = cca(&x, &x, &CcaConfig::default()).unwrap();
        assert!(r.clamped);
        assert!(r.correlations.iter().all(|&c| c >= 0.999), "{:?}", r.correlations);
    }

    #[test]
    fn constant_scores_are_degenerate() {
        let x = gaussian(50, 4, 3);
        let y = vec![vec![0.5, 1.0]; 50];
        let r = cca(&x, &y, &CcaConfig::default()).unwrap();
        assert!(r.degenerate && r.correlations.is_empty());
    }

    #[test]
    fn independent_data_correlates_weakly() {
        let x = gaussian(2000, 3, 4);
        let y = gaussian(2000, 3, 5);
        let r = cca(&x, &y, &CcaConfig::default()).unwrap();
        assert!(r.top1().unwrap() < 0.15);
    }
}
