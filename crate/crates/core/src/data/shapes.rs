//! Parametric shape families with uniform surface sampling.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::geometry::{normalize_unit_sphere, PointCloud};

/// Shape family of a synthetic object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Sphere,
    Box,
    Cylinder,
    LBracket,
    Lamp,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 5] = [
        ShapeFamily::Sphere,
        ShapeFamily::Box,
        ShapeFamily::Cylinder,
        ShapeFamily::LBracket,
        ShapeFamily::Lamp,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ShapeFamily::Sphere => "sphere",
            ShapeFamily::Box => "box",
            ShapeFamily::Cylinder => "cylinder",
            ShapeFamily::LBracket => "l_bracket",
            ShapeFamily::Lamp => "lamp",
        }
    }

    pub fn from_name(s: &str) -> Option<ShapeFamily> {
        ShapeFamily::ALL.into_iter().find(|f| f.name() == s)
    }
}

/// A concrete shape: family, sampled dimensions, and a surface point budget.
#[derive(Debug, Clone)]
pub struct ShapeSpec {
    pub family: ShapeFamily,
    /// Family-specific dimensions, all positive.
    pub params: Vec<f64>,
    pub budget: usize,
}

impl ShapeSpec {
    /// Draw random dimensions for `family`.
    pub fn sample<R: Rng>(family: ShapeFamily, budget: usize, rng: &mut R) -> ShapeSpec {
        let params = match family {
            ShapeFamily::Sphere => vec![rng.random_range(0.5..1.0)],
            ShapeFamily::Box => vec![
                rng.random_range(0.4..1.2),
                rng.random_range(0.4..1.2),
                rng.random_range(0.4..1.2),
            ],
            ShapeFamily::Cylinder => vec![rng.random_range(0.3..0.8), rng.random_range(0.6..1.6)],
            // Horizontal arm (lx, t, lz) plus vertical arm height ly.
            ShapeFamily::LBracket => vec![
                rng.random_range(0.8..1.4),
                rng.random_range(0.15..0.3),
                rng.random_range(0.4..0.8),
                rng.random_range(0.6..1.2),
            ],
            // Base radius, pole height, shade bottom/top radii, shade height.
            ShapeFamily::Lamp => vec![
                rng.random_range(0.3..0.5),
                rng.random_range(0.8..1.2),
                rng.random_range(0.35..0.6),
                rng.random_range(0.15..0.3),
                rng.random_range(0.3..0.5),
            ],
        };
        ShapeSpec {
            family,
            params,
            budget,
        }
    }
}

fn sphere_point<R: Rng>(r: f64, rng: &mut R) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-12 {
            return [r * v[0] / n, r * v[1] / n, r * v[2] / n];
        }
    }
}

/// Uniform point on the surface of an axis-aligned box centered at `center`.
fn box_point<R: Rng>(center: [f64; 3], ext: [f64; 3], rng: &mut R) -> [f64; 3] {
    let areas = [
        ext[1] * ext[2], // x faces
        ext[0] * ext[2], // y faces
        ext[0] * ext[1], // z faces
    ];
    let total = 2.0 * (areas[0] + areas[1] + areas[2]);
    let mut pick = rng.random_range(0.0..total);
    for axis in 0..3 {
        for side in [-0.5f64, 0.5] {
            if pick < areas[axis] {
                let mut p = [0.0; 3];
                p[axis] = side * ext[axis];
                let (a1, a2) = ((axis + 1) % 3, (axis + 2) % 3);
                p[a1] = rng.random_range(-0.5..0.5) * ext[a1];
                p[a2] = rng.random_range(-0.5..0.5) * ext[a2];
                for k in 0..3 {
                    p[k] += center[k];
                }
                return p;
            }
            pick -= areas[axis];
        }
    }
    unreachable!("face selection covers the total area")
}

/// Uniform point on a z-aligned cone frustum (cylinder when r0 == r1),
/// caps included, base at z0.
fn frustum_point<R: Rng>(
    center_xy: [f64; 2],
    z0: f64,
    h: f64,
    r0: f64,
    r1: f64,
    caps: bool,
    rng: &mut R,
) -> [f64; 3] {
    let slant = (h * h + (r1 - r0) * (r1 - r0)).sqrt();
    let lateral = std::f64::consts::PI * (r0 + r1) * slant;
    let cap0 = if caps { std::f64::consts::PI * r0 * r0 } else { 0.0 };
    let cap1 = if caps { std::f64::consts::PI * r1 * r1 } else { 0.0 };
    let pick = rng.random_range(0.0..lateral + cap0 + cap1);
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    if pick < lateral {
        // Density along z is proportional to the local radius.
        let u: f64 = rng.random_range(0.0..1.0);
        let t = if (r1 - r0).abs() < 1e-12 {
            u
        } else {
            // Inverse CDF of a linear density r(t) = r0 + (r1-r0) t.
            let a = r1 * r1 - r0 * r0;
            ((r0 * r0 + u * a).sqrt() - r0) / (r1 - r0)
        };
        let r = r0 + (r1 - r0) * t;
        [
            center_xy[0] + r * theta.cos(),
            center_xy[1] + r * theta.sin(),
            z0 + t * h,
        ]
    } else {
        let (r_cap, z) = if pick < lateral + cap0 {
            (r0, z0)
        } else {
            (r1, z0 + h)
        };
        let rr = r_cap * rng.random_range(0.0f64..1.0).sqrt();
        [
            center_xy[0] + rr * theta.cos(),
            center_xy[1] + rr * theta.sin(),
            z,
        ]
    }
}

/// Sample `spec.budget` points uniformly on the shape surface and normalize
/// the result into the unit sphere.
pub fn gen_shape<R: Rng>(spec: &ShapeSpec, rng: &mut R) -> PointCloud {
    let p = &spec.params;
    let mut pts = Vec::with_capacity(spec.budget);
    match spec.family {
        ShapeFamily::Sphere => {
            // Antipodal pairs: the centroid cancels exactly, so unit-sphere
            // normalization rescales without shifting the center.
            while pts.len() + 2 <= spec.budget {
                let q = sphere_point(p[0], rng);
                pts.push(q);
                pts.push([-q[0], -q[1], -q[2]]);
            }
            if pts.len() < spec.budget {
                pts.push(sphere_point(p[0], rng));
            }
        }
        ShapeFamily::Box => {
            for _ in 0..spec.budget {
                pts.push(box_point([0.0; 3], [p[0], p[1], p[2]], rng));
            }
        }
        ShapeFamily::Cylinder => {
            for _ in 0..spec.budget {
                pts.push(frustum_point([0.0, 0.0], -p[1] / 2.0, p[1], p[0], p[0], true, rng));
            }
        }
        ShapeFamily::LBracket => {
            let (lx, t, lz, ly) = (p[0], p[1], p[2], p[3]);
            // Two boxes forming an L: a horizontal arm and a vertical arm
            // rising from its end.
            let arm_h = ([0.0, 0.0, 0.0], [lx, t, lz]);
            let arm_v = ([-lx / 2.0 + t / 2.0, t / 2.0 + ly / 2.0, 0.0], [t, ly, lz]);
            let area = |e: [f64; 3]| 2.0 * (e[0] * e[1] + e[1] * e[2] + e[0] * e[2]);
            let (a0, a1) = (area(arm_h.1), area(arm_v.1));
            for _ in 0..spec.budget {
                let (c, e) = if rng.random_range(0.0..a0 + a1) < a0 {
                    arm_h
                } else {
                    arm_v
                };
                pts.push(box_point(c, e, rng));
            }
        }
        ShapeFamily::Lamp => {
            let (r_base, h_pole, r_shade0, r_shade1, h_shade) = (p[0], p[1], p[2], p[3], p[4]);
            let base_h = 0.06;
            let pole_r = 0.04;
            let comps: [(f64, f64, f64, f64, bool); 3] = [
                // (z0, h, r0, r1, caps)
                (0.0, base_h, r_base, r_base, true),
                (base_h, h_pole, pole_r, pole_r, false),
                (base_h + h_pole, h_shade, r_shade0, r_shade1, false),
            ];
            let area = |(_, h, r0, r1, caps): &(f64, f64, f64, f64, bool)| {
                let slant = (h * h + (r1 - r0) * (r1 - r0)).sqrt();
                let mut a = std::f64::consts::PI * (r0 + r1) * slant;
                if *caps {
                    a += std::f64::consts::PI * (r0 * r0 + r1 * r1);
                }
                a
            };
            let areas: Vec<f64> = comps.iter().map(area).collect();
            let total: f64 = areas.iter().sum();
            for _ in 0..spec.budget {
                let mut pick = rng.random_range(0.0..total);
                let mut chosen = 0;
                for (i, a) in areas.iter().enumerate() {
                    if pick < *a {
                        chosen = i;
                        break;
                    }
                    pick -= a;
                }
                let (z0, h, r0, r1, caps) = comps[chosen];
                // Lamp axis along y: sample along z then swap axes.
                let q = frustum_point([0.0, 0.0], z0, h, r0, r1, caps, rng);
                pts.push([q[0], q[2], q[1]]);
            }
        }
    }
    let (normalized, _, _) = normalize_unit_sphere(&PointCloud::new(pts));
    normalized
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sphere_points_sit_on_unit_radius() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = ShapeSpec {
            family: ShapeFamily::Sphere,
            params: vec![0.8],
            budget: 500,
        };
        let pc = gen_shape(&spec, &mut rng);
        assert_eq!(pc.len(), 500);
        for p in pc.points() {
            let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((r - 1.0).abs() < 1e-9, "radius {r}");
        }
    }

    #[test]
    fn box_points_lie_on_exactly_one_face() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ext = [1.0, 0.6, 0.8];
        for _ in 0..300 {
            let p = box_point([0.0; 3], ext, &mut rng);
            let on_face = (0..3)
                .filter(|&k| (p[k].abs() - ext[k] / 2.0).abs() < 1e-12)
                .count();
            assert!(on_face >= 1);
            for k in 0..3 {
                assert!(p[k].abs() <= ext[k] / 2.0 + 1e-12);
            }
        }
    }

    #[test]
    fn every_family_meets_its_budget() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for family in ShapeFamily::ALL {
            let spec = ShapeSpec::sample(family, 256, &mut rng);
            let pc = gen_shape(&spec, &mut rng);
            assert_eq!(pc.len(), 256, "{family:?}");
            assert!(pc
                .points()
                .iter()
                .all(|p| p.iter().all(|c| c.is_finite())));
        }
    }
}
