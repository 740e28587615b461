//! Shape geometry: analytic SDFs, truncated grids, meshing, surface
//! sampling and density conversion for rendering.

mod density;
mod grid;
mod mc_tables;
mod mesh;
pub mod sdf;

pub use density::{laplace_cdf, tsdf_to_density, DensityGrid};
pub use grid::{rasterize_tsdf, TsdfGrid, DEFAULT_TRUNCATION, GRID_MAGIC};
pub use mesh::{marching_cubes, sample_surface_points, Mesh, PointCloud};
pub use sdf::{AnalyticSdf, Vec3};
