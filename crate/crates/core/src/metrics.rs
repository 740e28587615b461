//! Point-cloud metrics (Chamfer, UHD, TMD, F-score) and the k-sample
//! completion harness.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetSample, ObservationMask};
use crate::error::{Error, Result};
use crate::geometry::{marching_cubes, sample_surface_points, PointCloud, TsdfGrid, Vec3};

/// Surface samples per shape in the harness.
pub const DEFAULT_POINTS: usize = 2048;

fn dist(a: &Vec3, b: &Vec3) -> f64 {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Uniform hash grid over a point set for exact nearest-neighbour queries.
pub struct SpatialHash<'a> {
    points: &'a [Vec3],
    cell: f64,
    origin: Vec3,
    dims: [i64; 3],
    buckets: HashMap<[i64; 3], Vec<usize>>,
}

impl<'a> SpatialHash<'a> {
    pub fn new(cloud: &'a PointCloud) -> Self {
        let points = cloud.points();
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
        // About two points per occupied cell on surface-like sets.
        let target = (points.len() as f64 / 2.0).sqrt().max(1.0);
        let cell = if extent > 0.0 { extent / target } else { 1.0 };
        let mut dims = [1i64; 3];
        for a in 0..3 {
            dims[a] = ((hi[a] - lo[a]) / cell).floor() as i64 + 1;
        }
        let mut grid = Self {
            points,
            cell,
            origin: lo,
            dims,
            buckets: HashMap::new(),
        };
        for (i, p) in points.iter().enumerate() {
            let k = grid.key(p);
            grid.buckets.entry(k).or_default().push(i);
        }
        grid
    }

    fn key(&self, p: &Vec3) -> [i64; 3] {
        let mut k = [0i64; 3];
        for a in 0..3 {
            k[a] = ((p[a] - self.origin[a]) / self.cell).floor() as i64;
        }
        k
    }

    /// Distance from `q` to its nearest point in the set.
    pub fn nearest(&self, q: &Vec3) -> f64 {
        let c = self.key(q);
        // Largest ring needed to cover every cell from `c`.
        let (mut first, mut max_ring) = (0, 0);
        for a in 0..3 {
            let (below, above) = (-c[a], c[a] - (self.dims[a] - 1));
            first = first.max(below).max(above);
            max_ring = max_ring.max(below.abs()).max(above.abs());
        }
        let mut best = f64::INFINITY;
        for r in first..=max_ring {
            for dz in -r..=r {
                for dy in -r..=r {
                    for dx in -r..=r {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                            continue;
                        }
                        let k = [c[0] + dx, c[1] + dy, c[2] + dz];
                        if let Some(ids) = self.buckets.get(&k) {
                            for &i in ids {
                                best = best.min(dist(q, &self.points[i]));
                            }
                        }
                    }
                }
            }
            // Cells outside ring r are at least r cell widths away.
            if best <= r as f64 * self.cell {
                break;
            }
        }
        best
    }
}

/// For each point of `from`, the distance to its nearest point in `to`.
pub fn nearest_distances(from: &PointCloud, to: &PointCloud) -> Vec<f64> {
    let index = SpatialHash::new(to);
    from.points().iter().map(|p| index.nearest(p)).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Symmetric, averaged, non-squared Chamfer distance.
pub fn chamfer(p: &PointCloud, q: &PointCloud) -> f64 {
    0.5 * (mean(&nearest_distances(p, q)) + mean(&nearest_distances(q, p)))
}

/// Unidirectional Hausdorff distance from `partial` to `generated`.
pub fn uhd(partial: &PointCloud, generated: &PointCloud) -> f64 {
    nearest_distances(partial, generated).into_iter().fold(0.0, f64::max)
}

/// Mean pairwise Chamfer distance over `k >= 2` clouds.
pub fn tmd(generated: &[PointCloud]) -> Result<f64> {
    let k = generated.len();
    if k < 2 {
        return Err(Error::invalid(format!("TMD needs at least 2 shapes, got {k}")));
    }
    let mut total = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            total += chamfer(&generated[i], &generated[j]);
        }
    }
    Ok(total / (k * (k - 1) / 2) as f64)
}

/// Diagonal of the axis-aligned bounding box.
pub fn bbox_diagonal(cloud: &PointCloud) -> f64 {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in cloud.points() {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    dist(&lo, &hi)
}

/// F-score at `pct` percent of the ground-truth bounding-box diagonal.
pub fn fscore(gt: &PointCloud, pred: &PointCloud, pct: f64) -> Result<f64> {
    if !(pct > 0.0 && pct.is_finite()) {
        return Err(Error::invalid(format!("threshold percent must be > 0, got {pct}")));
    }
    let diag = bbox_diagonal(gt);
    if !(diag > 0.0) {
        return Err(Error::invalid("ground truth has a degenerate bounding box"));
    }
    let thr = pct / 100.0 * diag;
    let within = |d: Vec<f64>| d.iter().filter(|v| **v <= thr).count() as f64 / d.len() as f64;
    let precision = within(nearest_distances(pred, gt));
    let recall = within(nearest_distances(gt, pred));
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

/// Anything that completes a partial grid; `seed` selects the sample.
pub trait CompletionModel: Sync {
    fn complete(&self, partial: &TsdfGrid, mask: &ObservationMask, seed: u64) -> Result<TsdfGrid>;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub k: usize,
    pub n_points: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 10,
            n_points: DEFAULT_POINTS,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeScore {
    pub id: String,
    pub uhd: f64,
    pub tmd: f64,
    /// Completions whose mesh was empty and were scored on the fallback.
    pub empty_meshes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionReport {
    pub k: usize,
    pub n_points: usize,
    pub seed: u64,
    pub shapes: Vec<ShapeScore>,
    pub mean_uhd: f64,
    pub mean_tmd: f64,
    pub empty_meshes: usize,
}

impl CompletionReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned text table with one row per shape and a summary row.
    pub fn to_table(&self) -> String {
        let w = self.shapes.iter().map(|s| s.id.len()).max().unwrap_or(0).max(5);
        let mut out = String::new();
        let _ = writeln!(out, "{:<w$}  {:>10}  {:>10}  {:>5}", "shape", "UHD", "TMD", "empty");
        for s in &self.shapes {
            let _ = writeln!(out, "{:<w$}  {:>10.5}  {:>10.5}  {:>5}", s.id, s.uhd, s.tmd, s.empty_meshes);
        }
        let _ = writeln!(
            out,
            "{:<w$}  {:>10.5}  {:>10.5}  {:>5}",
            "mean", self.mean_uhd, self.mean_tmd, self.empty_meshes
        );
        let _ = write!(out, "k = {}, points = {}", self.k, self.n_points);
        out
    }
}

/// Surface samples of `grid`, or `None` when it has no zero crossing.
pub fn grid_surface_points(grid: &TsdfGrid, n: usize, seed: u64) -> Result<Option<PointCloud>> {
    let mesh = marching_cubes(grid, 0.0);
    if mesh.is_empty() {
        return Ok(None);
    }
    sample_surface_points(&mesh, n, seed).map(Some)
}

/// Centres of the voxels closest to the surface, used when a completion
/// has no zero crossing.
fn fallback_points(grid: &TsdfGrid) -> Result<PointCloud> {
    let d = grid.resolution();
    let min = grid.values().iter().copied().fold(f32::INFINITY, f32::min);
    let mut pts = Vec::new();
    for z in 0..d {
        for y in 0..d {
            for x in 0..d {
                if grid.get(x, y, z) <= min {
                    pts.push(grid.center(x, y, z));
                }
            }
        }
    }
    PointCloud::new(pts)
}

/// Ground-truth surface points inside observed voxels.
pub fn observed_surface_points(
    full: &TsdfGrid,
    mask: &ObservationMask,
    n: usize,
    seed: u64,
) -> Result<Option<PointCloud>> {
    let Some(cloud) = grid_surface_points(full, n, seed)? else {
        return Ok(None);
    };
    let d = full.resolution();
    let vs = full.voxel_size();
    let cell = |v: f64| (((v + 1.0) / vs).floor().max(0.0) as usize).min(d - 1);
    Ok(cloud.filtered(|p| mask.get(cell(p[0]), cell(p[1]), cell(p[2]))))
}

fn score_shape(model: &dyn CompletionModel, sample: &DatasetSample, cfg: &EvalConfig, index: usize) -> Result<ShapeScore> {
    let base = cfg.seed.wrapping_add((index as u64).wrapping_mul(1_000_003));
    let observed = observed_surface_points(&sample.grid, &sample.mask, cfg.n_points, base)?
        .ok_or_else(|| Error::invalid(format!("shape {} has no observed surface", sample.id)))?;
    let mut clouds = Vec::with_capacity(cfg.k);
    let mut empty = 0;
    for j in 0..cfg.k {
        let seed = base.wrapping_add(j as u64 + 1);
        let grid = model.complete(&sample.partial, &sample.mask, seed)?;
        // Same sampling seed for every completion: equal shapes give equal clouds.
        match grid_surface_points(&grid, cfg.n_points, base)? {
            Some(c) => clouds.push(c),
            None => {
                empty += 1;
                clouds.push(fallback_points(&grid)?);
            }
        }
    }
    let fidelity = clouds.iter().map(|c| uhd(&observed, c)).sum::<f64>() / clouds.len() as f64;
    Ok(ShapeScore {
        id: sample.id.clone(),
        uhd: fidelity,
        tmd: tmd(&clouds)?,
        empty_meshes: empty,
    })
}

/// Run `k` completions per test shape and score fidelity (UHD, averaged
/// over the `k` results) and diversity (TMD). Shapes are scored in
/// parallel; the report does not depend on the thread count.
pub fn evaluate_completion(
    model: &dyn CompletionModel,
    testset: &[DatasetSample],
    cfg: &EvalConfig,
) -> Result<CompletionReport> {
    if cfg.k < 2 {
        return Err(Error::invalid(format!("k must be >= 2, got {}", cfg.k)));
    }
    if cfg.n_points == 0 || testset.is_empty() {
        return Err(Error::invalid("need at least one test shape and one point"));
    }
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(testset.len());
    let mut slots: Vec<Option<Result<ShapeScore>>> = (0..testset.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let chunk = testset.len().div_ceil(threads);
        for (c, out) in slots.chunks_mut(chunk).enumerate() {
            scope.spawn(move || {
                for (o, slot) in out.iter_mut().enumerate() {
                    let i = c * chunk + o;
                    *slot = Some(score_shape(model, &testset[i], cfg, i));
                }
            });
        }
    });
    let shapes: Vec<ShapeScore> = slots
        .into_iter()
        .map(|s| s.expect("every shape scored"))
        .collect::<Result<_>>()?;
    let n = shapes.len() as f64;
    Ok(CompletionReport {
        k: cfg.k,
        n_points: cfg.n_points,
        seed: cfg.seed,
        mean_uhd: shapes.iter().map(|s| s.uhd).sum::<f64>() / n,
        mean_tmd: shapes.iter().map(|s| s.tmd).sum::<f64>() / n,
        empty_meshes: shapes.iter().map(|s| s.empty_meshes).sum(),
        shapes,
    })
}
