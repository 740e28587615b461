use super::grid::TsdfGrid;
use crate::error::{Error, Result};

/// Volume density derived from a TSDF, same lattice as the source grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityGrid {
    resolution: usize,
    scale: f64,
    values: Vec<f64>,
}

impl DensityGrid {
    pub fn from_values(resolution: usize, scale: f64, values: Vec<f64>) -> Result<Self> {
        if values.len() != resolution.pow(3) {
            return Err(Error::invalid("density value count does not match resolution"));
        }
        if values.iter().any(|v| !(0.0..=scale).contains(v)) {
            return Err(Error::invalid("density values must lie in [0, α]"));
        }
        Ok(Self {
            resolution,
            scale,
            values,
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// The `α` used to build the grid (upper bound of every value).
    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.values[x + self.resolution * (y + self.resolution * z)]
    }
}

/// CDF of the zero-mean Laplace distribution with scale `beta`.
pub fn laplace_cdf(s: f64, beta: f64) -> f64 {
    if s <= 0.0 {
        0.5 * (s / beta).exp()
    } else {
        1.0 - 0.5 * (-s / beta).exp()
    }
}

/// `σ = α · Ψ_β(-sdf)` per voxel.
pub fn tsdf_to_density(grid: &TsdfGrid, alpha: f64, beta: f64) -> Result<DensityGrid> {
    if !(alpha > 0.0) || !(beta > 0.0) {
        return Err(Error::invalid(format!(
            "density needs α > 0 and β > 0, got α={alpha}, β={beta}"
        )));
    }
    let values = grid
        .values()
        .iter()
        .map(|&d| alpha * laplace_cdf(-(d as f64), beta))
        .collect();
    Ok(DensityGrid {
        resolution: grid.resolution(),
        scale: alpha,
        values,
    })
}
