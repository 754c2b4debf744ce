//! Part-structured grids: parts of a source grid moved to keypoint
//! positions in the target.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::constraints::{GridSide, PartClassifier};
use crate::error::{Error, Result};
use crate::model::{CellFeatures, Grid, ImplicitModel, ImplicitPushforwardModel};
use crate::rng::StreamFamily;
use crate::trainer::{Demo, DemonstrationSet, Split, TrainHooks};

pub const MAX_SIDE: usize = 16;
pub const MAX_PARTS: usize = 4;
pub const BACKGROUND: f64 = 0.5;
/// Deviation of part `p` from the background, before its sign.
pub const PART_DEVIATIONS: [f64; MAX_PARTS] = [0.15, 0.30, 0.45, 0.225];

pub type GridDemo = Demo<Grid, GridSide, CellFeatures>;
pub type GridSet = DemonstrationSet<Grid, GridSide, CellFeatures>;

/// One generated triple with its bookkeeping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridInstance {
    pub source: Grid,
    /// Block centres `(row, col)` in the source, one per part.
    pub source_keypoints: Vec<(usize, usize)>,
    /// Block centres in the target.
    pub keypoints: Vec<(usize, usize)>,
    pub target: Grid,
    /// Per-cell labels of the target, 0 for background and `p + 1` for part `p`.
    pub labels: Vec<usize>,
    pub signs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridDataset {
    pub instances: Vec<GridInstance>,
    pub demos: GridSet,
}

/// Shape and appearance of a grid domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridDomain {
    pub height: usize,
    pub width: usize,
    pub parts: usize,
    /// Half-width of the uniform per-cell noise added to targets.
    pub noise: f64,
    pub deviations: Vec<f64>,
}

impl GridDomain {
    pub fn new(height: usize, width: usize, parts: usize, noise: f64) -> Result<Self> {
        if !(3..=MAX_SIDE).contains(&height) || !(3..=MAX_SIDE).contains(&width) || !(1..=MAX_PARTS).contains(&parts) {
            return Err(Error::InvalidConfig(format!(
                "grid needs sides in 3..={MAX_SIDE} and 1..={MAX_PARTS} parts, got {height}x{width} with {parts}"
            )));
        }
        if !(0.0..=0.1).contains(&noise) {
            return Err(Error::InvalidConfig(format!("noise must lie in [0, 0.1], got {noise}")));
        }
        if (height / 3) * (width / 3) < parts {
            return Err(Error::InvalidConfig("grid too small for non-overlapping part blocks".into()));
        }
        Ok(Self { height, width, parts, noise, deviations: PART_DEVIATIONS[..parts].to_vec() })
    }

    /// Same shape with every deviation scaled by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self { deviations: self.deviations.iter().map(|d| (d * factor).min(0.49)).collect(), ..self.clone() }
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    fn block(&self, centre: (usize, usize)) -> impl Iterator<Item = usize> + '_ {
        let (r, c) = centre;
        (r - 1..=r + 1).flat_map(move |rr| (c - 1..=c + 1).map(move |cc| rr * self.width + cc))
    }

    fn keypoints(&self, rng: &mut impl Rng) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = Vec::with_capacity(self.parts);
        let fits = |out: &[(usize, usize)], cand: (usize, usize)| {
            out.iter().all(|k: &(usize, usize)| k.0.abs_diff(cand.0) >= 3 || k.1.abs_diff(cand.1) >= 3)
        };
        while out.len() < self.parts {
            let open = (1..self.height - 1).any(|r| (1..self.width - 1).any(|c| fits(&out, (r, c))));
            if !open {
                // earlier placements left no room; start over
                out.clear();
            }
            let cand = (rng.random_range(1..self.height - 1), rng.random_range(1..self.width - 1));
            if fits(&out, cand) {
                out.push(cand);
            }
        }
        out
    }

    fn paint(&self, keypoints: &[(usize, usize)], signs: &[f64]) -> (Grid, Vec<usize>) {
        let mut grid = Grid::filled(self.height, self.width, BACKGROUND);
        let mut labels = vec![0; self.cells()];
        for (p, k) in keypoints.iter().enumerate() {
            for cell in self.block(*k) {
                grid.values[cell] = BACKGROUND + signs[p] * self.deviations[p];
                labels[cell] = p + 1;
            }
        }
        (grid, labels)
    }

    /// Keypoint masks `[1, M_1, .., M_P]` per cell.
    pub fn features(&self, keypoints: &[(usize, usize)]) -> CellFeatures {
        let dim = self.parts + 1;
        let mut values = vec![0.0; self.cells() * dim];
        for c in 0..self.cells() {
            values[c * dim] = 1.0;
        }
        for (p, k) in keypoints.iter().enumerate() {
            for cell in self.block(*k) {
                values[cell * dim + p + 1] = 1.0;
            }
        }
        CellFeatures::new(self.cells(), dim, values).expect("shape by construction")
    }

    /// Moves the source's parts onto `keypoints`.
    pub fn rearrange(&self, source: &Grid, source_keypoints: &[(usize, usize)], keypoints: &[(usize, usize)]) -> Grid {
        let mut out = Grid::filled(self.height, self.width, BACKGROUND);
        for (from, to) in source_keypoints.iter().zip(keypoints) {
            for (a, b) in self.block(*from).zip(self.block(*to)) {
                out.values[b] = source.values[a];
            }
        }
        out
    }

    pub fn instance(&self, rng: &mut impl Rng) -> GridInstance {
        let signs: Vec<f64> = (0..self.parts).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
        let source_keypoints = self.keypoints(rng);
        let keypoints = self.keypoints(rng);
        let (source, _) = self.paint(&source_keypoints, &signs);
        let mut target = self.rearrange(&source, &source_keypoints, &keypoints);
        let (_, labels) = self.paint(&keypoints, &signs);
        if self.noise > 0.0 {
            for v in &mut target.values {
                *v = (*v + rng.random_range(-self.noise..=self.noise)).clamp(0.0, 1.0);
            }
        }
        GridInstance { source, source_keypoints, keypoints, target, labels, signs }
    }
}

pub fn generate_grid_dataset(domain: &GridDomain, n_train: usize, n_test: usize, seed: u64) -> Result<GridDataset> {
    let mut rng = StreamFamily::new(seed, "grid-data").substream(0);
    let mut instances = Vec::with_capacity(n_train + n_test);
    let mut records = Vec::with_capacity(n_train + n_test);
    for i in 0..n_train + n_test {
        let inst = domain.instance(&mut rng);
        records.push(Demo {
            sample: inst.target.clone(),
            side: GridSide { target: inst.target.clone(), labels: inst.labels.clone() },
            context: domain.features(&inst.keypoints),
            split: if i < n_train { Split::Train } else { Split::Test },
        });
        instances.push(inst);
    }
    Ok(GridDataset { instances, demos: DemonstrationSet::new(records)? })
}

/// Supervised part classifier trained on `domain` (typically a shifted copy
/// of the task domain).
pub fn pretrain_classifier(domain: &GridDomain, n: usize, steps: usize, rate: f64, seed: u64) -> Result<PartClassifier> {
    let mut rng = StreamFamily::new(seed, "grid-pretrain").substream(0);
    let pairs: Vec<(Grid, Vec<usize>)> = (0..n).map(|_| domain.instance(&mut rng)).map(|i| (i.target, i.labels)).collect();
    PartClassifier::new(domain.parts + 1)?.fit_supervised(&pairs, steps, rate)
}

/// Labels each cell by the part whose deviation magnitude is nearest to
/// `|x − 0.5|` (background counts as deviation 0).
pub fn nearest_deviation_labels(grid: &Grid, deviations: &[f64]) -> Vec<usize> {
    grid.values
        .iter()
        .map(|v| {
            let dev = (v - BACKGROUND).abs();
            let mut best = (0, dev);
            for (p, d) in deviations.iter().enumerate() {
                let gap = (dev - d).abs();
                if gap < best.1 {
                    best = (p + 1, gap);
                }
            }
            best.0
        })
        .collect()
}

/// Mean over labels of the fraction of that label's cells labelled correctly.
pub fn part_consistency(grid: &Grid, labels: &[usize], deviations: &[f64]) -> f64 {
    let guess = nearest_deviation_labels(grid, deviations);
    let k = deviations.len() + 1;
    let mut hit = vec![0usize; k];
    let mut total = vec![0usize; k];
    for (g, l) in guess.iter().zip(labels) {
        total[*l] += 1;
        hit[*l] += usize::from(g == l);
    }
    let present: Vec<f64> = (0..k).filter(|l| total[*l] > 0).map(|l| hit[l] as f64 / total[l] as f64).collect();
    present.iter().sum::<f64>() / present.len() as f64
}

/// Single-scale SSIM averaged over all 3×3 windows, with `C1 = 0.01²` and
/// `C2 = 0.03²` for values in `[0, 1]`.
pub fn ssim_lite(a: &Grid, b: &Grid) -> Result<f64> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::DimensionMismatch { expected: a.cells(), got: b.cells() });
    }
    if a.height < 3 || a.width < 3 {
        return Err(Error::InvalidArgument("ssim-lite needs at least a 3x3 grid".into()));
    }
    const C1: f64 = 1e-4;
    const C2: f64 = 9e-4;
    let mut total = 0.0;
    let mut windows = 0;
    for r in 0..a.height - 2 {
        for c in 0..a.width - 2 {
            let cells: Vec<usize> = (r..r + 3).flat_map(|rr| (c..c + 3).map(move |cc| rr * a.width + cc)).collect();
            let n = cells.len() as f64;
            let ma = cells.iter().map(|i| a.values[*i]).sum::<f64>() / n;
            let mb = cells.iter().map(|i| b.values[*i]).sum::<f64>() / n;
            let va = cells.iter().map(|i| (a.values[*i] - ma).powi(2)).sum::<f64>() / n;
            let vb = cells.iter().map(|i| (b.values[*i] - mb).powi(2)).sum::<f64>() / n;
            let cov = cells.iter().map(|i| (a.values[*i] - ma) * (b.values[*i] - mb)).sum::<f64>() / n;
            total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
            windows += 1;
        }
    }
    Ok(total / windows as f64)
}

/// Fixed noise draws shared by every evaluation of a run.
pub fn evaluation_noise(model: &ImplicitPushforwardModel, draws: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = StreamFamily::new(seed, "grid-eval").substream(0);
    (0..draws).map(|_| model.draw_noise(&mut rng)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridMetric {
    PartConsistency,
    SsimLite,
}

/// Mean metric over test instances and fixed noise draws.
pub fn grid_metric(model: &ImplicitPushforwardModel, test: &[&GridDemo], deviations: &[f64], noise: &[Vec<f64>], metric: GridMetric) -> Result<f64> {
    if test.is_empty() || noise.is_empty() {
        return Err(Error::InvalidArgument("grid metric needs test instances and noise draws".into()));
    }
    let mut total = 0.0;
    for d in test {
        for z in noise {
            let x = model.push(&d.context, z);
            total += match metric {
                GridMetric::PartConsistency => part_consistency(&x, &d.side.labels, deviations),
                GridMetric::SsimLite => ssim_lite(&x, &d.side.target)?,
            };
        }
    }
    Ok(total / (test.len() * noise.len()) as f64)
}

pub struct GridHooks<'a> {
    pub test: Vec<&'a GridDemo>,
    pub deviations: Vec<f64>,
    pub noise: Vec<Vec<f64>>,
    pub metric: GridMetric,
}

impl<C> TrainHooks<ImplicitPushforwardModel, C> for GridHooks<'_>
where
    C: crate::constraints::ConstraintModel<Sample = Grid>,
{
    fn task_metric(&self, model: &ImplicitPushforwardModel, _: &C) -> Result<Option<f64>> {
        grid_metric(model, &self.test, &self.deviations, &self.noise, self.metric).map(Some)
    }
}
