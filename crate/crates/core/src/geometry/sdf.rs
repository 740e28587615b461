//! Analytic signed distance functions and CSG composition.

pub type Vec3 = [f64; 3];

pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub(crate) fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

/// Row-major 3x3 rotation.
pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn rotation_z(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

pub fn rotation_x(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

fn mat_t_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Expression tree of primitives combined by CSG under similarity transforms.
///
/// Cylinders and capsules are aligned with the z axis (up).
#[derive(Clone, Debug, PartialEq)]
pub enum AnalyticSdf {
    /// No surface; distance is `+inf` everywhere.
    Empty,
    Sphere { radius: f64 },
    Box { half_extents: Vec3 },
    Cylinder { radius: f64, half_height: f64 },
    Capsule { radius: f64, half_length: f64 },
    Union(Vec<AnalyticSdf>),
    Intersection(Vec<AnalyticSdf>),
    /// `max(a, -b)`: `a` with `b` carved out.
    Subtraction(Box<AnalyticSdf>, Box<AnalyticSdf>),
    /// Child evaluated at `R^T (p - t) / s`, distance scaled by `s`.
    Transform {
        rotation: Mat3,
        translation: Vec3,
        scale: f64,
        child: Box<AnalyticSdf>,
    },
}

impl AnalyticSdf {
    pub fn sphere(radius: f64) -> Self {
        Self::Sphere { radius }
    }

    pub fn cuboid(half_extents: Vec3) -> Self {
        Self::Box { half_extents }
    }

    pub fn cylinder(radius: f64, half_height: f64) -> Self {
        Self::Cylinder {
            radius,
            half_height,
        }
    }

    pub fn capsule(radius: f64, half_length: f64) -> Self {
        Self::Capsule {
            radius,
            half_length,
        }
    }

    pub fn union(parts: Vec<AnalyticSdf>) -> Self {
        Self::Union(parts)
    }

    pub fn intersection(parts: Vec<AnalyticSdf>) -> Self {
        Self::Intersection(parts)
    }

    pub fn subtract(self, cut: AnalyticSdf) -> Self {
        Self::Subtraction(Box::new(self), Box::new(cut))
    }

    pub fn translate(self, t: Vec3) -> Self {
        self.transform(IDENTITY, t, 1.0)
    }

    pub fn rotate(self, rotation: Mat3) -> Self {
        self.transform(rotation, [0.0; 3], 1.0)
    }

    pub fn scaled(self, s: f64) -> Self {
        self.transform(IDENTITY, [0.0; 3], s)
    }

    /// Apply `p -> s R p + t` on top of the current placement.
    pub fn transform(self, rotation: Mat3, translation: Vec3, scale: f64) -> Self {
        match self {
            // Fold nested transforms: outer ∘ inner.
            Self::Transform {
                rotation: r0,
                translation: t0,
                scale: s0,
                child,
            } => Self::Transform {
                rotation: mat_mul(&rotation, &r0),
                translation: add(super::sdf::scale(mat_vec(&rotation, t0), scale), translation),
                scale: scale * s0,
                child,
            },
            other => Self::Transform {
                rotation,
                translation,
                scale,
                child: Box::new(other),
            },
        }
    }

    /// Signed distance at `p` (negative inside).
    pub fn evaluate(&self, p: Vec3) -> f64 {
        match self {
            Self::Empty => f64::INFINITY,
            Self::Sphere { radius } => norm(p) - radius,
            Self::Box { half_extents } => {
                let q = [
                    p[0].abs() - half_extents[0],
                    p[1].abs() - half_extents[1],
                    p[2].abs() - half_extents[2],
                ];
                let outside = norm([q[0].max(0.0), q[1].max(0.0), q[2].max(0.0)]);
                outside + q[0].max(q[1]).max(q[2]).min(0.0)
            }
            Self::Cylinder {
                radius,
                half_height,
            } => {
                let d = [
                    (p[0] * p[0] + p[1] * p[1]).sqrt() - radius,
                    p[2].abs() - half_height,
                ];
                d[0].max(d[1]).min(0.0) + (d[0].max(0.0).powi(2) + d[1].max(0.0).powi(2)).sqrt()
            }
            Self::Capsule {
                radius,
                half_length,
            } => {
                let z = p[2].clamp(-half_length, *half_length);
                norm([p[0], p[1], p[2] - z]) - radius
            }
            Self::Union(parts) => parts
                .iter()
                .map(|s| s.evaluate(p))
                .fold(f64::INFINITY, f64::min),
            Self::Intersection(parts) => parts
                .iter()
                .map(|s| s.evaluate(p))
                .fold(f64::NEG_INFINITY, f64::max),
            Self::Subtraction(a, b) => a.evaluate(p).max(-b.evaluate(p)),
            Self::Transform {
                rotation,
                translation,
                scale,
                child,
            } => {
                let local = super::sdf::scale(mat_t_vec(rotation, sub(p, *translation)), 1.0 / scale);
                scale * child.evaluate(local)
            }
        }
    }

    /// Number of primitive leaves.
    pub fn primitive_count(&self) -> usize {
        match self {
            Self::Empty => 0,
            Self::Sphere { .. } | Self::Box { .. } | Self::Cylinder { .. } | Self::Capsule { .. } => 1,
            Self::Union(p) | Self::Intersection(p) => p.iter().map(Self::primitive_count).sum(),
            Self::Subtraction(a, b) => a.primitive_count() + b.primitive_count(),
            Self::Transform { child, .. } => child.primitive_count(),
        }
    }
}
