use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ConstraintModel;
use crate::error::{Error, Result};
use crate::model::Grid;
use crate::numeric::{log_softmax, softmax};
use crate::params::{Layout, ParamVector};
use crate::rng::SeededStream;

/// Cells in a 3×3 patch.
const PATCH: usize = 9;
/// Bias and squared centred patch values. Sign-free, since part signs vary
/// per instance.
pub const PATCH_FEATURES: usize = 1 + PATCH;

/// Side information of one grid instance: the true target and its per-cell
/// part labels (label 0 is background).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSide {
    pub target: Grid,
    pub labels: Vec<usize>,
}

/// Linear per-cell part classifier over the 3×3 neighbourhood of the cell
/// (edges clamped). Logits are `Φ u_c` with `Φ` a `labels × 10` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct PartClassifier {
    labels: usize,
    params: ParamVector,
}

fn neighbours(grid: &Grid, cell: usize) -> [usize; PATCH] {
    let (h, w) = (grid.height as isize, grid.width as isize);
    let (r, c) = ((cell / grid.width) as isize, (cell % grid.width) as isize);
    let mut out = [0; PATCH];
    let mut i = 0;
    for dr in -1..=1 {
        for dc in -1..=1 {
            let rr = (r + dr).clamp(0, h - 1);
            let cc = (c + dc).clamp(0, w - 1);
            out[i] = (rr * w + cc) as usize;
            i += 1;
        }
    }
    out
}

fn patch_features(grid: &Grid, cell: usize) -> [f64; PATCH_FEATURES] {
    let mut u = [0.0; PATCH_FEATURES];
    u[0] = 1.0;
    for (i, n) in neighbours(grid, cell).iter().enumerate() {
        let v = grid.values[*n] - 0.5;
        u[1 + i] = v * v;
    }
    u
}

impl PartClassifier {
    pub fn new(labels: usize) -> Result<Self> {
        if labels < 2 {
            return Err(Error::InvalidArgument("part classifier needs at least two labels".into()));
        }
        Ok(Self { labels, params: ParamVector::zeros(Layout::contiguous([("logits", labels * PATCH_FEATURES)])) })
    }

    pub fn randomized(labels: usize, scale: f64, rng: &mut SeededStream) -> Result<Self> {
        let c = Self::new(labels)?;
        let normal = Normal::new(0.0, scale).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let values = (0..c.params.len()).map(|_| normal.sample(rng)).collect();
        c.with_params(ParamVector::new(c.params.layout().clone(), values)?)
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn with_params(&self, params: ParamVector) -> Result<Self> {
        if params.layout() != self.params.layout() {
            return Err(Error::DimensionMismatch { expected: self.params.len(), got: params.len() });
        }
        Ok(Self { labels: self.labels, params })
    }

    fn row(&self, k: usize) -> &[f64] {
        &self.params.values()[k * PATCH_FEATURES..(k + 1) * PATCH_FEATURES]
    }

    pub fn cell_logits(&self, grid: &Grid, cell: usize) -> Vec<f64> {
        let u = patch_features(grid, cell);
        (0..self.labels).map(|k| self.row(k).iter().zip(&u).map(|(a, b)| a * b).sum()).collect()
    }

    pub fn cell_probs(&self, grid: &Grid, cell: usize) -> Vec<f64> {
        softmax(&self.cell_logits(grid, cell))
    }

    pub fn predict(&self, grid: &Grid) -> Vec<usize> {
        (0..grid.cells())
            .map(|c| {
                let l = self.cell_logits(grid, c);
                (0..l.len()).fold(0, |best, k| if l[k] > l[best] { k } else { best })
            })
            .collect()
    }

    /// Mean per-cell cross entropy against the given labels.
    pub fn cross_entropy(&self, data: &[(Grid, Vec<usize>)]) -> Result<f64> {
        let mut total = 0.0;
        let mut cells = 0usize;
        for (grid, labels) in data {
            self.check_labels(grid, labels)?;
            for (c, y) in labels.iter().enumerate() {
                total -= log_softmax(&self.cell_logits(grid, c))[*y];
            }
            cells += labels.len();
        }
        if cells == 0 {
            return Err(Error::InvalidArgument("no labelled cells".into()));
        }
        Ok(total / cells as f64)
    }

    fn check_labels(&self, grid: &Grid, labels: &[usize]) -> Result<()> {
        if labels.len() != grid.cells() {
            return Err(Error::DimensionMismatch { expected: grid.cells(), got: labels.len() });
        }
        if let Some(y) = labels.iter().find(|y| **y >= self.labels) {
            return Err(Error::InvalidArgument(format!("label {y} >= {}", self.labels)));
        }
        Ok(())
    }

    /// Full-batch gradient descent on the mean cell cross entropy.
    pub fn fit_supervised(&self, data: &[(Grid, Vec<usize>)], steps: usize, rate: f64) -> Result<Self> {
        let mut current = self.clone();
        let cells: usize = data.iter().map(|(g, _)| g.cells()).sum();
        if cells == 0 {
            return Err(Error::InvalidArgument("no labelled cells".into()));
        }
        for (g, y) in data {
            self.check_labels(g, y)?;
        }
        for _ in 0..steps {
            let mut grad = vec![0.0; current.params.len()];
            for (grid, labels) in data {
                for (c, y) in labels.iter().enumerate() {
                    let u = patch_features(grid, c);
                    let p = softmax(&current.cell_logits(grid, c));
                    for k in 0..current.labels {
                        let d = p[k] - if k == *y { 1.0 } else { 0.0 };
                        for (j, uj) in u.iter().enumerate() {
                            grad[k * PATCH_FEATURES + j] += d * uj;
                        }
                    }
                }
            }
            let step = -rate / cells as f64;
            current.params = current.params.stepped(&grad, step)?;
        }
        Ok(current)
    }
}

/// `f_φ(x, s) = −(1/2C) Σ_c Σ_k (p_ck − r_ck)(log p_ck − log r_ck)`
///
/// `r_c` and `p_c` are the classifier's part distributions at cell `c` of the
/// generated grid and of the true target. The inner sum is the sum of the two
/// cross entropies minus the two entropies, so the score is symmetric in the
/// two grids, never positive, and zero exactly when every cell distribution
/// coincides.
#[derive(Clone, Debug, PartialEq)]
pub struct PartConsistencyConstraint {
    classifier: PartClassifier,
}

struct CellTerms {
    u_gen: [f64; PATCH_FEATURES],
    u_true: [f64; PATCH_FEATURES],
    d_gen: Vec<f64>,
    d_true: Vec<f64>,
}

impl PartConsistencyConstraint {
    pub fn new(classifier: PartClassifier) -> Self {
        Self { classifier }
    }

    pub fn classifier(&self) -> &PartClassifier {
        &self.classifier
    }

    fn check(&self, x: &Grid, s: &GridSide) -> Result<()> {
        if x.height != s.target.height || x.width != s.target.width {
            return Err(Error::DimensionMismatch { expected: s.target.cells(), got: x.cells() });
        }
        Ok(())
    }

    /// Per-cell gap and its derivatives with respect to both logit vectors.
    fn cell(&self, x: &Grid, y: &Grid, c: usize) -> (f64, CellTerms) {
        let u_gen = patch_features(x, c);
        let u_true = patch_features(y, c);
        let lr = log_softmax(&self.classifier.cell_logits(x, c));
        let lp = log_softmax(&self.classifier.cell_logits(y, c));
        let r: Vec<f64> = lr.iter().map(|v| v.exp()).collect();
        let p: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
        let d: Vec<f64> = lp.iter().zip(&lr).map(|(a, b)| a - b).collect();
        let gap: f64 = (0..d.len()).map(|k| (p[k] - r[k]) * d[k]).sum();
        let rd: f64 = r.iter().zip(&d).map(|(a, b)| a * b).sum();
        let pd: f64 = p.iter().zip(&d).map(|(a, b)| a * b).sum();
        let d_gen = (0..d.len()).map(|m| -r[m] * (d[m] - rd) - (p[m] - r[m])).collect();
        let d_true = (0..d.len()).map(|m| p[m] * (d[m] - pd) + (p[m] - r[m])).collect();
        (gap, CellTerms { u_gen, u_true, d_gen, d_true })
    }
}

impl ConstraintModel for PartConsistencyConstraint {
    type Sample = Grid;
    type Side = GridSide;

    fn params(&self) -> &ParamVector {
        self.classifier.params()
    }

    fn with_params(&self, params: ParamVector) -> Result<Self> {
        Ok(Self { classifier: self.classifier.with_params(params)? })
    }

    fn evaluate(&self, x: &Grid, s: &GridSide) -> Result<f64> {
        self.check(x, s)?;
        let cells = x.cells();
        let total: f64 = (0..cells).map(|c| self.cell(x, &s.target, c).0).sum();
        // round-off can leave a tiny positive value at equality
        Ok((-total / (2.0 * cells as f64)).min(0.0))
    }

    fn accumulate_grad_params(&self, x: &Grid, s: &GridSide, scale: f64, acc: &mut [f64]) -> Result<()> {
        self.check(x, s)?;
        if acc.len() != self.params().len() {
            return Err(Error::DimensionMismatch { expected: self.params().len(), got: acc.len() });
        }
        let k = -scale / (2.0 * x.cells() as f64);
        for c in 0..x.cells() {
            let (_, t) = self.cell(x, &s.target, c);
            for m in 0..self.classifier.labels {
                let row = &mut acc[m * PATCH_FEATURES..(m + 1) * PATCH_FEATURES];
                for j in 0..PATCH_FEATURES {
                    row[j] += k * (t.d_gen[m] * t.u_gen[j] + t.d_true[m] * t.u_true[j]);
                }
            }
        }
        Ok(())
    }

    fn grad_sample(&self, x: &Grid, s: &GridSide) -> Result<Vec<f64>> {
        self.check(x, s)?;
        let k = -1.0 / (2.0 * x.cells() as f64);
        let mut grad = vec![0.0; x.cells()];
        for c in 0..x.cells() {
            let (_, t) = self.cell(x, &s.target, c);
            for (i, n) in neighbours(x, c).iter().enumerate() {
                let v = x.values[*n] - 0.5;
                let mut g = 0.0;
                for m in 0..self.classifier.labels {
                    let row = self.classifier.row(m);
                    g += t.d_gen[m] * 2.0 * v * row[1 + i];
                }
                grad[*n] += k * g;
            }
        }
        Ok(grad)
    }
}
