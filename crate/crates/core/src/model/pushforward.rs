use serde::{Deserialize, Serialize};

use super::{GenerativeModel, Grid, ImplicitModel, ModelKind, SampleSpace};
use crate::error::{Error, Result};
use crate::numeric::sigmoid;
use crate::params::{Layout, ParamVector};
use crate::rng::SeededStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Identity,
    Sigmoid,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Self::Identity => x,
            Self::Sigmoid => sigmoid(x),
        }
    }

    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Self::Identity => 1.0,
            Self::Sigmoid => y * (1.0 - y),
        }
    }
}

/// Per-cell context features, a `cells × dim` row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFeatures {
    cells: usize,
    dim: usize,
    values: Vec<f64>,
}

impl CellFeatures {
    pub fn new(cells: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != cells * dim {
            return Err(Error::DimensionMismatch { expected: cells * dim, got: values.len() });
        }
        Ok(Self { cells, dim, values })
    }

    /// First feature is 1 in every cell, the rest 0.
    pub fn constant(cells: usize, dim: usize) -> Self {
        let mut values = vec![0.0; cells * dim];
        for c in 0..cells {
            values[c * dim] = 1.0;
        }
        Self { cells, dim, values }
    }

    pub fn row(&self, cell: usize) -> &[f64] {
        &self.values[cell * self.dim..(cell + 1) * self.dim]
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// `g_θ(z, u)_c = act( Σ_f u_{c,f} · (a_f + Σ_d V_{f,d} z_d) )`
///
/// An affine map of the per-cell context features whose coefficients are
/// themselves affine in the noise `z ~ N(0, I_D)`, followed by an elementwise
/// activation. Parameters: `a` (block `feature_weights`, length F) and `V`
/// (block `noise_loadings`, F×D row-major). No density is exposed.
#[derive(Clone, Debug, PartialEq)]
pub struct ImplicitPushforwardModel {
    height: usize,
    width: usize,
    features: usize,
    noise_dim: usize,
    activation: Activation,
    params: ParamVector,
}

impl ImplicitPushforwardModel {
    pub fn new(height: usize, width: usize, features: usize, noise_dim: usize, activation: Activation) -> Result<Self> {
        SampleSpace::grid(height, width)?;
        if features == 0 {
            return Err(Error::InvalidArgument("need at least one context feature".into()));
        }
        let params = ParamVector::zeros(Layout::contiguous([("feature_weights", features), ("noise_loadings", features * noise_dim)]));
        Ok(Self { height, width, features, noise_dim, activation, params })
    }

    /// The scalar rig `x = θ0 + θ1 z` on a 1×1 grid.
    pub fn affine_scalar(shift: f64, scale: f64) -> Self {
        let m = Self::new(1, 1, 1, 1, Activation::Identity).expect("valid shape");
        let p = ParamVector::new(m.params.layout().clone(), vec![shift, scale]).expect("finite");
        m.with_params(p).expect("same layout")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn feature_dim(&self) -> usize {
        self.features
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    fn coefficients(&self, z: &[f64]) -> Vec<f64> {
        let v = self.params.values();
        let (a, loadings) = v.split_at(self.features);
        (0..self.features).map(|f| a[f] + (0..self.noise_dim).map(|d| loadings[f * self.noise_dim + d] * z[d]).sum::<f64>()).collect()
    }

    fn check(&self, ctx: &CellFeatures, z: &[f64]) -> Result<()> {
        if ctx.cells != self.height * self.width || ctx.dim != self.features {
            return Err(Error::DimensionMismatch { expected: self.height * self.width * self.features, got: ctx.values.len() });
        }
        if z.len() != self.noise_dim {
            return Err(Error::DimensionMismatch { expected: self.noise_dim, got: z.len() });
        }
        Ok(())
    }
}

impl GenerativeModel for ImplicitPushforwardModel {
    type Sample = Grid;
    type Context = CellFeatures;

    fn kind(&self) -> ModelKind {
        ModelKind::Implicit
    }

    fn space(&self) -> SampleSpace {
        SampleSpace::RealGrid { height: self.height, width: self.width }
    }

    fn params(&self) -> &ParamVector {
        &self.params
    }

    fn with_params(&self, params: ParamVector) -> Result<Self> {
        if params.layout() != self.params.layout() {
            return Err(Error::DimensionMismatch { expected: self.params.len(), got: params.len() });
        }
        Ok(Self { params, ..self.clone() })
    }

    fn sample_one(&self, ctx: &CellFeatures, rng: &mut SeededStream) -> Grid {
        let z = self.draw_noise(rng);
        self.push(ctx, &z)
    }
}

impl ImplicitModel for ImplicitPushforwardModel {
    fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    fn push(&self, ctx: &CellFeatures, z: &[f64]) -> Grid {
        self.check(ctx, z).expect("context and noise shaped for this model");
        let k = self.coefficients(z);
        let values = (0..ctx.cells).map(|c| self.activation.apply(ctx.row(c).iter().zip(&k).map(|(u, kf)| u * kf).sum())).collect();
        Grid { height: self.height, width: self.width, values }
    }

    fn pullback_params(&self, ctx: &CellFeatures, z: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        self.check(ctx, z)?;
        if upstream.len() != ctx.cells {
            return Err(Error::DimensionMismatch { expected: ctx.cells, got: upstream.len() });
        }
        let out = self.push(ctx, z);
        let mut dk = vec![0.0; self.features];
        for c in 0..ctx.cells {
            let dpre = upstream[c] * self.activation.derivative_from_output(out.values[c]);
            if dpre == 0.0 {
                continue;
            }
            for (acc, u) in dk.iter_mut().zip(ctx.row(c)) {
                *acc += dpre * u;
            }
        }
        let mut grad = Vec::with_capacity(self.params.len());
        grad.extend_from_slice(&dk);
        for dkf in &dk {
            grad.extend(z.iter().map(|zd| dkf * zd));
        }
        Ok(grad)
    }
}
