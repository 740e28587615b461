//! Procedural furniture-like shapes and their keyword descriptions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::sdf::rotation_z;
use crate::geometry::AnalyticSdf;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Chair,
    Table,
    Sofa,
    Lamp,
}

impl Category {
    pub const ALL: [Category; 4] = [Category::Chair, Category::Table, Category::Sofa, Category::Lamp];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Chair => "chair",
            Category::Table => "table",
            Category::Sofa => "sofa",
            Category::Lamp => "lamp",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TopShape {
    Round,
    Square,
    LShaped,
}

/// Shape attributes. Ranges:
///
/// * `legs`: 0 (solid base), 1 (pedestal), 3 or 4
/// * `height`: total height in `[0.6, 1.5]` shape units
/// * `back_height`: `[0, 0.8]`; 0 means no back
/// * `width`: half-width in `[0.35, 0.8]`
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeAttributes {
    pub legs: u8,
    pub height: f64,
    pub back_height: f64,
    pub top: TopShape,
    pub width: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub category: Category,
    pub attributes: ShapeAttributes,
    pub seed: u64,
}

/// Keyword vocabulary shared by the text conditioner and the texture critic.
pub const VOCABULARY: [&str; 24] = [
    "chair", "table", "sofa", "lamp", "four-legged", "three-legged", "pedestal", "solid-base",
    "round", "square", "L-shaped", "tall", "short", "high-back", "low-back", "backless", "wide",
    "narrow", "red", "green", "blue", "yellow", "white", "black",
];

pub fn keyword_id(word: &str) -> Option<usize> {
    VOCABULARY.iter().position(|w| *w == word)
}

const FLOOR: f64 = -0.85;

impl ShapeSpec {
    pub fn validate(&self) -> Result<()> {
        let a = &self.attributes;
        let bad = |what: &str| Err(Error::invalid(format!("{what} out of range in {self:?}")));
        if !matches!(a.legs, 0 | 1 | 3 | 4) {
            return bad("legs");
        }
        if !(0.6..=1.5).contains(&a.height) {
            return bad("height");
        }
        if !(0.0..=0.8).contains(&a.back_height) {
            return bad("back_height");
        }
        if !(0.35..=0.8).contains(&a.width) {
            return bad("width");
        }
        Ok(())
    }

    /// Draw a random in-range spec of the given category.
    pub fn random<R: Rng + ?Sized>(category: Category, rng: &mut R) -> Self {
        let top = [TopShape::Round, TopShape::Square, TopShape::LShaped][rng.random_range(0..3)];
        let (legs, height, back_height, width) = match category {
            Category::Chair => (
                [3, 4, 4][rng.random_range(0..3)],
                rng.random_range(0.6..0.8),
                if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.4..0.8) },
                rng.random_range(0.35..0.45),
            ),
            Category::Table => (
                [1, 3, 4][rng.random_range(0..3)],
                rng.random_range(0.8..1.2),
                0.0,
                rng.random_range(0.5..0.65),
            ),
            Category::Sofa => (
                0,
                rng.random_range(0.6..0.75),
                rng.random_range(0.3..0.6),
                rng.random_range(0.65..0.8),
            ),
            Category::Lamp => (
                1,
                rng.random_range(1.1..1.5),
                0.0,
                rng.random_range(0.35..0.5),
            ),
        };
        Self {
            category,
            attributes: ShapeAttributes {
                legs,
                height,
                back_height,
                top,
                width,
            },
            seed: rng.random(),
        }
    }

    /// Deterministic description of the attributes.
    pub fn keywords(&self) -> Vec<&'static str> {
        let a = &self.attributes;
        let mut k = vec![self.category.name()];
        match self.category {
            Category::Chair | Category::Table => k.push(match a.legs {
                4 => "four-legged",
                3 => "three-legged",
                1 => "pedestal",
                _ => "solid-base",
            }),
            Category::Sofa | Category::Lamp => {}
        }
        if matches!(self.category, Category::Table | Category::Lamp) {
            k.push(match a.top {
                TopShape::Round => "round",
                TopShape::Square => "square",
                TopShape::LShaped => "L-shaped",
            });
        }
        let tall_cut = match self.category {
            Category::Chair => 0.7,
            Category::Table => 1.0,
            Category::Sofa => 0.675,
            Category::Lamp => 1.3,
        };
        k.push(if a.height >= tall_cut { "tall" } else { "short" });
        if matches!(self.category, Category::Chair | Category::Sofa) {
            k.push(if a.back_height == 0.0 {
                "backless"
            } else if a.back_height >= 0.5 {
                "high-back"
            } else {
                "low-back"
            });
        }
        let wide_cut = match self.category {
            Category::Chair => 0.4,
            Category::Table => 0.575,
            Category::Sofa => 0.725,
            Category::Lamp => 0.425,
        };
        k.push(if a.width >= wide_cut { "wide" } else { "narrow" });
        k
    }
}

fn slab(half: [f64; 3], center: [f64; 3]) -> AnalyticSdf {
    AnalyticSdf::cuboid(half).translate(center)
}

fn post(radius: f64, bottom: f64, top: f64, x: f64, y: f64) -> AnalyticSdf {
    let hh = 0.5 * (top - bottom);
    AnalyticSdf::cylinder(radius, hh).translate([x, y, bottom + hh])
}

fn leg_positions(legs: u8, inset: f64) -> Vec<(f64, f64)> {
    match legs {
        4 => vec![(-inset, -inset), (inset, -inset), (inset, inset), (-inset, inset)],
        3 => (0..3)
            .map(|i| {
                let a = std::f64::consts::TAU * i as f64 / 3.0 + std::f64::consts::FRAC_PI_2;
                (inset * a.cos(), inset * a.sin())
            })
            .collect(),
        1 => vec![(0.0, 0.0)],
        _ => vec![],
    }
}

/// Build the CSG tree for `spec` (at most 12 primitives).
pub fn generate_shape(spec: &ShapeSpec) -> Result<AnalyticSdf> {
    spec.validate()?;
    let a = spec.attributes;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let jitter = |rng: &mut ChaCha8Rng, s: f64| rng.random_range(-s..s);
    let w = a.width;
    let leg_r = 0.12 + jitter(&mut rng, 0.015);
    let top_z = FLOOR + a.height;
    let mut parts = Vec::new();
    match spec.category {
        Category::Chair => {
            let t = 0.1;
            let seat_z = FLOOR + 0.55 * a.height;
            parts.push(slab([w, w, t], [0.0, 0.0, seat_z]));
            for (x, y) in leg_positions(a.legs, w - leg_r) {
                parts.push(post(leg_r, FLOOR, seat_z, x, y));
            }
            if a.back_height > 0.0 {
                let hh = 0.5 * a.back_height;
                parts.push(slab([w, 0.11, hh], [0.0, w - 0.11, seat_z + hh]));
            }
        }
        Category::Table => {
            let t = 0.1;
            let top_center = top_z - t;
            match a.top {
                TopShape::Square => parts.push(slab([w, w, t], [0.0, 0.0, top_center])),
                TopShape::Round => parts.push(
                    AnalyticSdf::cylinder(w, t).translate([0.0, 0.0, top_center]),
                ),
                TopShape::LShaped => {
                    parts.push(slab([w, 0.5 * w, t], [0.0, -0.5 * w, top_center]));
                    parts.push(slab([0.5 * w, w, t], [-0.5 * w, 0.0, top_center]));
                }
            }
            let inset = if a.top == TopShape::Round { 0.6 * w } else { w - leg_r - 0.05 };
            let leg_r = if a.legs == 1 { 0.14 } else { leg_r };
            for (x, y) in leg_positions(a.legs, inset) {
                let (x, y) = if a.top == TopShape::LShaped && x > 0.0 && y > 0.0 {
                    (x, -0.2 * w)
                } else {
                    (x, y)
                };
                parts.push(post(leg_r, FLOOR, top_center, x, y));
            }
            if a.legs == 1 {
                parts.push(AnalyticSdf::cylinder(0.45 * w, 0.06).translate([0.0, 0.0, FLOOR + 0.06]));
            }
        }
        Category::Sofa => {
            let depth = 0.45;
            let seat_top = FLOOR + 0.5 * a.height;
            let base_hh = 0.5 * (seat_top - FLOOR);
            parts.push(slab([w, depth, base_hh], [0.0, 0.0, FLOOR + base_hh]));
            let back_top = seat_top + a.back_height;
            let back_hh = 0.5 * (back_top - FLOOR);
            parts.push(slab([w, 0.12, back_hh], [0.0, depth - 0.12, FLOOR + back_hh]));
            let arm_hh = 0.5 * (seat_top + 0.2 - FLOOR);
            for side in [-1.0, 1.0] {
                parts.push(slab([0.12, depth, arm_hh], [side * (w - 0.12), 0.0, FLOOR + arm_hh]));
            }
        }
        Category::Lamp => {
            let base = AnalyticSdf::cylinder(w * 0.8, 0.06).translate([0.0, 0.0, FLOOR + 0.06]);
            parts.push(base);
            let shade_h = 0.3;
            let pole_top = top_z - shade_h;
            let half = 0.5 * (pole_top - FLOOR);
            parts.push(AnalyticSdf::capsule(0.11, half).translate([0.0, 0.0, FLOOR + half]));
            let shade = match a.top {
                TopShape::Round => AnalyticSdf::sphere(w).translate([0.0, 0.0, top_z - w.min(shade_h)]),
                TopShape::Square => slab([w, w, 0.5 * shade_h], [0.0, 0.0, top_z - 0.5 * shade_h]),
                TopShape::LShaped => AnalyticSdf::cylinder(w, 0.5 * shade_h)
                    .translate([0.0, 0.0, top_z - 0.5 * shade_h]),
            };
            parts.push(shade);
        }
    }
    let angle = jitter(&mut rng, 0.15);
    let tree = AnalyticSdf::union(parts).rotate(rotation_z(angle));
    debug_assert!(tree.primitive_count() <= 12);
    Ok(tree)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(category: Category, legs: u8, back: f64, top: TopShape) -> ShapeSpec {
        ShapeSpec {
            category,
            attributes: ShapeAttributes {
                legs,
                height: 1.0,
                back_height: back,
                top,
                width: 0.6,
            },
            seed: 5,
        }
    }

    fn primitives(tree: &AnalyticSdf) -> Vec<&AnalyticSdf> {
        fn walk<'a>(t: &'a AnalyticSdf, out: &mut Vec<&'a AnalyticSdf>) {
            match t {
                AnalyticSdf::Union(p) | AnalyticSdf::Intersection(p) => p.iter().for_each(|c| walk(c, out)),
                AnalyticSdf::Subtraction(a, b) => {
                    walk(a, out);
                    walk(b, out);
                }
                AnalyticSdf::Transform { child, .. } => walk(child, out),
                AnalyticSdf::Empty => {}
                leaf => out.push(leaf),
            }
        }
        let mut out = Vec::new();
        walk(tree, &mut out);
        out
    }

    #[test]
    fn square_table_is_top_plus_four_legs() {
        let tree = generate_shape(&spec(Category::Table, 4, 0.0, TopShape::Square)).unwrap();
        let prims = primitives(&tree);
        assert_eq!(prims.len(), 5);
        assert_eq!(prims.iter().filter(|p| matches!(p, AnalyticSdf::Box { .. })).count(), 1);
        assert_eq!(prims.iter().filter(|p| matches!(p, AnalyticSdf::Cylinder { .. })).count(), 4);
    }

    #[test]
    fn same_spec_same_tree() {
        let s = spec(Category::Lamp, 1, 0.0, TopShape::Round);
        assert_eq!(generate_shape(&s).unwrap(), generate_shape(&s).unwrap());
    }

    #[test]
    fn zero_back_height_is_a_stool() {
        let stool = generate_shape(&spec(Category::Chair, 4, 0.0, TopShape::Square)).unwrap();
        let chair = generate_shape(&spec(Category::Chair, 4, 0.5, TopShape::Square)).unwrap();
        assert_eq!(stool.primitive_count() + 1, chair.primitive_count());
        assert!(spec(Category::Chair, 4, 0.0, TopShape::Square).keywords().contains(&"backless"));
    }

    #[test]
    fn out_of_range_rejected() {
        let mut s = spec(Category::Chair, 4, 0.3, TopShape::Square);
        s.attributes.legs = 2;
        assert!(generate_shape(&s).is_err());
        let mut s = spec(Category::Chair, 4, 0.3, TopShape::Square);
        s.attributes.height = 3.0;
        assert!(generate_shape(&s).is_err());
    }

    #[test]
    fn random_specs_are_valid_and_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for i in 0..200 {
            let s = ShapeSpec::random(Category::ALL[i % 4], &mut rng);
            let tree = generate_shape(&s).unwrap();
            assert!(tree.primitive_count() <= 12);
            assert!(!s.keywords().is_empty());
            for k in s.keywords() {
                assert!(keyword_id(k).is_some(), "{k}");
            }
        }
    }

    #[test]
    fn l_shaped_table_keyword() {
        let s = spec(Category::Table, 4, 0.0, TopShape::LShaped);
        assert!(s.keywords().contains(&"L-shaped"));
        assert!(s.keywords().contains(&"four-legged"));
    }
}
