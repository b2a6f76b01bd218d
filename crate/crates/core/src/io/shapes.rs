//! Synthetic targets with exact normals and areas, and shape normalization.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spatial::GroundTruthCloud;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Shape {
    /// Square `[-side/2, side/2]²` in the plane `z = 0`, normal `+z`.
    Plane { side: f64 },
    /// Sphere centred at the origin with outward normals.
    Sphere { radius: f64 },
    /// Torus around the `z` axis.
    Torus { major: f64, minor: f64 },
    /// Axis-aligned box surface centred at the origin.
    Box { size: [f64; 3] },
    /// Plane square with a centred circular hole.
    PlaneWithHole { side: f64, hole_radius: f64 },
    /// Two parallel squares: `z = 0` with normal `+z` and `z = gap` with
    /// normal `−z`.
    TwoSheets { side: f64, gap: f64 },
}

pub const KINDS: [&str; 6] = ["plane", "sphere", "torus", "box", "plane-with-hole", "two-sheets"];

/// Geometric parameters that a command line may supply; unset fields take
/// per-kind defaults.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ShapeParams {
    pub side: Option<f64>,
    pub radius: Option<f64>,
    pub major: Option<f64>,
    pub minor: Option<f64>,
    pub size: Option<[f64; 3]>,
    pub hole_radius: Option<f64>,
    pub gap: Option<f64>,
}

impl Shape {
    pub fn from_kind(kind: &str, p: &ShapeParams) -> Result<Self> {
        let shape = match kind {
            "plane" => Shape::Plane {
                side: p.side.unwrap_or(1.0),
            },
            "sphere" => Shape::Sphere {
                radius: p.radius.unwrap_or(1.0),
            },
            "torus" => Shape::Torus {
                major: p.major.unwrap_or(1.0),
                minor: p.minor.unwrap_or(0.3),
            },
            "box" => Shape::Box {
                size: p.size.unwrap_or([1.0, 1.0, 1.0]),
            },
            "plane-with-hole" => Shape::PlaneWithHole {
                side: p.side.unwrap_or(1.0),
                hole_radius: p.hole_radius.unwrap_or(0.2),
            },
            "two-sheets" => Shape::TwoSheets {
                side: p.side.unwrap_or(1.0),
                gap: p.gap.unwrap_or(0.05),
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown shape kind `{other}` (expected one of {})",
                    KINDS.join(", ")
                )))
            }
        };
        shape.validate()?;
        Ok(shape)
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Shape::Plane { .. } => "plane",
            Shape::Sphere { .. } => "sphere",
            Shape::Torus { .. } => "torus",
            Shape::Box { .. } => "box",
            Shape::PlaneWithHole { .. } => "plane-with-hole",
            Shape::TwoSheets { .. } => "two-sheets",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive: Vec<f64> = match *self {
            Shape::Plane { side } => vec![side],
            Shape::Sphere { radius } => vec![radius],
            Shape::Torus { major, minor } => {
                if minor >= major {
                    return Err(Error::Config("torus minor radius must be below the major".into()));
                }
                vec![major, minor]
            }
            Shape::Box { size } => size.to_vec(),
            Shape::PlaneWithHole { side, hole_radius } => {
                if 2.0 * hole_radius >= side {
                    return Err(Error::Config("hole must fit inside the plane".into()));
                }
                vec![side, hole_radius]
            }
            Shape::TwoSheets { side, gap } => vec![side, gap],
        };
        if positive.iter().all(|x| *x > 0.0 && x.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config(format!("{} parameters must be positive", self.kind())))
        }
    }

    /// Exact surface area.
    pub fn area(&self) -> f64 {
        match *self {
            Shape::Plane { side } => side * side,
            Shape::Sphere { radius } => 4.0 * PI * radius * radius,
            Shape::Torus { major, minor } => 4.0 * PI * PI * major * minor,
            Shape::Box { size: [a, b, c] } => 2.0 * (a * b + b * c + c * a),
            Shape::PlaneWithHole { side, hole_radius } => side * side - PI * hole_radius * hole_radius,
            Shape::TwoSheets { side, .. } => 2.0 * side * side,
        }
    }

    /// One area-uniform surface sample and its unit normal.
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ([f64; 3], [f64; 3]) {
        match *self {
            Shape::Plane { side } => {
                let (x, y) = square(side, rng);
                ([x, y, 0.0], [0.0, 0.0, 1.0])
            }
            Shape::Sphere { radius } => {
                let d = loop {
                    let v: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
                    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                    if n > 1e-12 {
                        break [v[0] / n, v[1] / n, v[2] / n];
                    }
                };
                ([d[0] * radius, d[1] * radius, d[2] * radius], d)
            }
            Shape::Torus { major, minor } => {
                // Tube angle accepted with probability proportional to the
                // local circumference.
                let phi = loop {
                    let phi = rng.random_range(0.0..2.0 * PI);
                    let w = (major + minor * phi.cos()) / (major + minor);
                    if rng.random::<f64>() < w {
                        break phi;
                    }
                };
                let theta = rng.random_range(0.0..2.0 * PI);
                let ring = major + minor * phi.cos();
                let p = [ring * theta.cos(), ring * theta.sin(), minor * phi.sin()];
                let n = [theta.cos() * phi.cos(), theta.sin() * phi.cos(), phi.sin()];
                (p, n)
            }
            Shape::Box { size: [a, b, c] } => {
                let faces = [b * c, b * c, a * c, a * c, a * b, a * b];
                let total: f64 = faces.iter().sum();
                let mut pick = rng.random::<f64>() * total;
                let mut face = 5;
                for (i, f) in faces.iter().enumerate() {
                    if pick < *f {
                        face = i;
                        break;
                    }
                    pick -= f;
                }
                let half = [a / 2.0, b / 2.0, c / 2.0];
                let axis = face / 2;
                let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
                let mut p = [0.0; 3];
                let mut n = [0.0; 3];
                for k in 0..3 {
                    p[k] = if k == axis {
                        sign * half[k]
                    } else {
                        rng.random_range(-half[k]..half[k])
                    };
                }
                n[axis] = sign;
                (p, n)
            }
            Shape::PlaneWithHole { side, hole_radius } => loop {
                let (x, y) = square(side, rng);
                if x * x + y * y >= hole_radius * hole_radius {
                    break ([x, y, 0.0], [0.0, 0.0, 1.0]);
                }
            },
            Shape::TwoSheets { side, gap } => {
                let (x, y) = square(side, rng);
                if rng.random::<bool>() {
                    ([x, y, 0.0], [0.0, 0.0, 1.0])
                } else {
                    ([x, y, gap], [0.0, 0.0, -1.0])
                }
            }
        }
    }
}

fn square<R: Rng + ?Sized>(side: f64, rng: &mut R) -> (f64, f64) {
    let h = side / 2.0;
    (rng.random_range(-h..h), rng.random_range(-h..h))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeSpec {
    pub shape: Shape,
    pub n: usize,
    pub noise: f64,
    pub seed: u64,
}

/// Samples `spec.n` points uniformly by area with exact normals and area;
/// noise is applied along the normal afterwards.
pub fn gen_shape(spec: &ShapeSpec) -> Result<GroundTruthCloud> {
    spec.shape.validate()?;
    if spec.n < 4 {
        return Err(Error::Config(format!("need at least 4 samples, got {}", spec.n)));
    }
    if !(spec.noise >= 0.0) {
        return Err(Error::Config(format!("noise must be non-negative, got {}", spec.noise)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut points = Vec::with_capacity(spec.n);
    let mut normals = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let (mut p, n) = spec.shape.sample(&mut rng);
        if spec.noise > 0.0 {
            let e = noise.sample(&mut rng);
            for k in 0..3 {
                p[k] += e * n[k];
            }
        }
        points.push(p);
        normals.push(n);
    }
    GroundTruthCloud::new(points, normals, spec.shape.area())
}

/// `p' = (p − translation) · scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Transform {
    pub translation: [f64; 3],
    pub scale: f64,
}

impl Transform {
    pub fn identity() -> Self {
        Self {
            translation: [0.0; 3],
            scale: 1.0,
        }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|k| (p[k] - self.translation[k]) * self.scale)
    }

    pub fn invert(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|k| p[k] / self.scale + self.translation[k])
    }
}

/// Moves the centroid to the origin and scales uniformly so the largest
/// bounding-box half-extent is one. Areas scale by the square of the factor.
pub fn normalize(cloud: &GroundTruthCloud) -> Result<(GroundTruthCloud, Transform)> {
    let pts = cloud.points();
    let n = pts.len() as f64;
    let mut c = [0.0; 3];
    for p in pts {
        for k in 0..3 {
            c[k] += p[k];
        }
    }
    for x in &mut c {
        *x /= n;
    }
    let mut half = 0.0f64;
    for k in 0..3 {
        let lo = pts.iter().map(|p| p[k]).fold(f64::INFINITY, f64::min);
        let hi = pts.iter().map(|p| p[k]).fold(f64::NEG_INFINITY, f64::max);
        half = half.max((hi - lo) / 2.0);
    }
    if !(half > 0.0) {
        return Err(Error::Config("cloud has zero extent".into()));
    }
    let t = Transform {
        translation: c,
        scale: 1.0 / half,
    };
    let out = GroundTruthCloud::new(
        pts.iter().map(|p| t.apply(*p)).collect(),
        cloud.normals().to_vec(),
        cloud.area() * t.scale * t.scale,
    )?;
    Ok((out, t))
}

pub fn denormalize(cloud: &GroundTruthCloud, t: &Transform) -> Result<GroundTruthCloud> {
    GroundTruthCloud::new(
        cloud.points().iter().map(|p| t.invert(*p)).collect(),
        cloud.normals().to_vec(),
        cloud.area() / (t.scale * t.scale),
    )
}
