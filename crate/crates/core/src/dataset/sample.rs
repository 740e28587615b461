use base64::Engine as _;
use serde::{Deserialize, Serialize};

use super::shapes::{generate_shape, Category, ShapeSpec};
use crate::error::{Error, Result};
use crate::geometry::{rasterize_tsdf, TsdfGrid};

pub const SILHOUETTE_SIZE: usize = 64;

/// Which part of a shape a partial observation keeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode", content = "seed")]
pub enum PartialMode {
    BottomHalf,
    TopHalf,
    /// Everything except one octant picked by the seed.
    Octant(u64),
}

impl PartialMode {
    fn observed(&self, d: usize, x: usize, y: usize, z: usize) -> bool {
        let half = d / 2;
        match *self {
            PartialMode::BottomHalf => z < half,
            PartialMode::TopHalf => z >= half,
            PartialMode::Octant(seed) => {
                // splitmix64 finaliser picks the missing octant.
                let mut h = seed.wrapping_add(0x9e3779b97f4a7c15);
                h = (h ^ (h >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
                h = (h ^ (h >> 27)).wrapping_mul(0x94d049bb133111eb);
                h ^= h >> 31;
                let missing = (h % 8) as usize;
                let oct = (x >= half) as usize | ((y >= half) as usize) << 1 | ((z >= half) as usize) << 2;
                oct != missing
            }
        }
    }
}

/// Binary voxel mask at grid resolution (`true` = observed).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ObservationMask {
    resolution: usize,
    bits: Vec<bool>,
}

impl ObservationMask {
    pub fn new(resolution: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != resolution.pow(3) {
            return Err(Error::invalid("mask size does not match resolution"));
        }
        Ok(Self { resolution, bits })
    }

    pub fn full(resolution: usize, value: bool) -> Self {
        Self {
            resolution,
            bits: vec![value; resolution.pow(3)],
        }
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.bits[x + self.resolution * (y + self.resolution * z)]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

/// Keep the region selected by `mode`; everything else becomes `+τ`.
pub fn make_partial(grid: &TsdfGrid, mode: PartialMode) -> (TsdfGrid, ObservationMask) {
    let d = grid.resolution();
    let tau = grid.truncation() as f32;
    let mut bits = Vec::with_capacity(d.pow(3));
    let mut values = Vec::with_capacity(d.pow(3));
    for z in 0..d {
        for y in 0..d {
            for x in 0..d {
                let keep = mode.observed(d, x, y, z);
                bits.push(keep);
                values.push(if keep { grid.get(x, y, z) } else { tau });
            }
        }
    }
    let observed = TsdfGrid::from_values(d, grid.truncation(), values).expect("same resolution");
    (observed, ObservationMask { resolution: d, bits })
}

/// A 64x64 binary image, row 0 at the top.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Silhouette {
    bits: Vec<bool>,
}

impl Silhouette {
    pub fn new(bits: Vec<bool>) -> Result<Self> {
        if bits.len() != SILHOUETTE_SIZE * SILHOUETTE_SIZE {
            return Err(Error::invalid("silhouette must be 64x64"));
        }
        Ok(Self { bits })
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * SILHOUETTE_SIZE + col]
    }

    pub fn count_on(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// Bits packed MSB-first into bytes, then standard base64.
    pub fn to_base64(&self) -> String {
        let mut bytes = vec![0u8; self.bits.len() / 8];
        for (i, &b) in self.bits.iter().enumerate() {
            if b {
                bytes[i / 8] |= 0x80 >> (i % 8);
            }
        }
        base64::engine::general_purpose::STANDARD.encode(bytes)
    }

    pub fn from_base64(s: &str) -> Result<Self> {
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(s)
            .map_err(|e| Error::invalid(format!("silhouette base64: {e}")))?;
        if bytes.len() * 8 != SILHOUETTE_SIZE * SILHOUETTE_SIZE {
            return Err(Error::invalid("silhouette payload has the wrong length"));
        }
        let bits = (0..bytes.len() * 8)
            .map(|i| bytes[i / 8] & (0x80 >> (i % 8)) != 0)
            .collect();
        Ok(Self { bits })
    }
}

/// Frontal orthographic occupancy: rays run along +y; columns map to x,
/// rows to z (top row = highest z).
pub fn render_silhouette(grid: &TsdfGrid) -> Silhouette {
    let d = grid.resolution();
    let n = SILHOUETTE_SIZE;
    let mut bits = vec![false; n * n];
    for row in 0..n {
        let zw = 1.0 - (row as f64 + 0.5) * 2.0 / n as f64;
        let z = (((zw + 1.0) / 2.0 * d as f64).floor() as usize).min(d - 1);
        for col in 0..n {
            let xw = -1.0 + (col as f64 + 0.5) * 2.0 / n as f64;
            let x = (((xw + 1.0) / 2.0 * d as f64).floor() as usize).min(d - 1);
            bits[row * n + col] = (0..d).any(|y| grid.get(x, y, z) < 0.0);
        }
    }
    Silhouette { bits }
}

/// One training example with every condition source it can provide.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSample {
    pub id: String,
    pub spec: ShapeSpec,
    pub grid: TsdfGrid,
    pub keywords: Vec<String>,
    pub silhouette: Silhouette,
    pub partial_mode: PartialMode,
    pub partial: TsdfGrid,
    pub mask: ObservationMask,
}

impl DatasetSample {
    pub fn from_spec(id: impl Into<String>, spec: ShapeSpec, resolution: usize, truncation: f64, partial_mode: PartialMode) -> Result<Self> {
        let tree = generate_shape(&spec)?;
        let grid = rasterize_tsdf(&tree, resolution, truncation)?;
        Ok(Self::from_grid(id, spec, grid, partial_mode))
    }

    pub(crate) fn from_grid(id: impl Into<String>, spec: ShapeSpec, grid: TsdfGrid, partial_mode: PartialMode) -> Self {
        let (partial, mask) = make_partial(&grid, partial_mode);
        Self {
            id: id.into(),
            spec,
            keywords: spec.keywords().into_iter().map(String::from).collect(),
            silhouette: render_silhouette(&grid),
            partial_mode,
            partial,
            mask,
            grid,
        }
    }

    pub fn category(&self) -> Category {
        self.spec.category
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::AnalyticSdf;

    #[test]
    fn bottom_half_mask() {
        let g = rasterize_tsdf(&AnalyticSdf::sphere(0.5), 16, 0.2).unwrap();
        let (obs, mask) = make_partial(&g, PartialMode::BottomHalf);
        for z in 0..16 {
            for y in 0..16 {
                for x in 0..16 {
                    assert_eq!(mask.get(x, y, z), z < 8);
                    if mask.get(x, y, z) {
                        assert_eq!(obs.get(x, y, z), g.get(x, y, z));
                    } else {
                        assert_eq!(obs.get(x, y, z), 0.2);
                    }
                }
            }
        }
    }

    #[test]
    fn octant_mode_is_seeded() {
        let g = TsdfGrid::empty(8, 0.3);
        let (_, a) = make_partial(&g, PartialMode::Octant(4));
        let (_, b) = make_partial(&g, PartialMode::Octant(4));
        assert_eq!(a, b);
        assert_eq!(a.count(), 512 - 64);
        let differs = (0..16).any(|s| make_partial(&g, PartialMode::Octant(s)).1 != a);
        assert!(differs);
    }

    #[test]
    fn empty_and_full_silhouettes() {
        assert_eq!(render_silhouette(&TsdfGrid::empty(16, 0.2)).count_on(), 0);
        let full = rasterize_tsdf(&AnalyticSdf::sphere(10.0), 16, 0.2).unwrap();
        assert_eq!(render_silhouette(&full).count_on(), 64 * 64);
    }

    #[test]
    fn sphere_projects_to_disc() {
        let g = rasterize_tsdf(&AnalyticSdf::sphere(0.5), 32, 0.2).unwrap();
        let s = render_silhouette(&g);
        // Disc of radius 0.5/(2/64) = 16 px: area ≈ π·16².
        let area = s.count_on() as f64;
        let radius = (area / std::f64::consts::PI).sqrt();
        assert!((radius - 16.0).abs() < 1.5, "{radius}");
        assert!(s.get(32, 32));
        assert!(!s.get(32, 32 + 19));
        assert!(!s.get(0, 0));
    }

    #[test]
    fn silhouette_base64_round_trip() {
        let g = rasterize_tsdf(&AnalyticSdf::cuboid([0.3, 0.2, 0.6]), 16, 0.2).unwrap();
        let s = render_silhouette(&g);
        assert_eq!(Silhouette::from_base64(&s.to_base64()).unwrap(), s);
    }
}
