//! Labeled synthetic shapes built from boxes, cylinders and hemispheres.
//!
//! Points are sampled uniformly by area over each shape's surface. Each
//! instance stretches its template by a random factor per axis.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::formats::write_atomic;
use crate::pointcloud::{format_cloud, load_cloud, LabeledPointCloud, Point3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ShapeKind {
    Table,
    Chair,
    Lamp,
    Rocket,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Table, ShapeKind::Chair, ShapeKind::Lamp, ShapeKind::Rocket];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Table => "table",
            ShapeKind::Chair => "chair",
            ShapeKind::Lamp => "lamp",
            ShapeKind::Rocket => "rocket",
        }
    }

    pub fn parts(self) -> usize {
        match self {
            ShapeKind::Table => 2,
            ShapeKind::Chair => 3,
            ShapeKind::Lamp => 3,
            ShapeKind::Rocket => 4,
        }
    }

    /// First global part id of this category.
    pub fn label_offset(self) -> u32 {
        ShapeKind::ALL
            .iter()
            .take_while(|&&k| k != self)
            .map(|k| k.parts() as u32)
            .sum()
    }

    /// Global part ids of this category.
    pub fn global_parts(self) -> Vec<u32> {
        let o = self.label_offset();
        (o..o + self.parts() as u32).collect()
    }
}

/// Total part count over all categories.
pub fn total_parts() -> usize {
    ShapeKind::ALL.iter().map(|k| k.parts()).sum()
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown shape kind `{s}`")))
    }
}

/// Closed surface primitives; cylinders and hemispheres are aligned with z.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Primitive {
    Box { center: Point3, half: [f64; 3] },
    Cylinder { center: Point3, radius: f64, half_height: f64 },
    /// Upper half sphere without its disc.
    Dome { center: Point3, radius: f64 },
}

impl Primitive {
    pub fn area(&self) -> f64 {
        use std::f64::consts::PI;
        match *self {
            Primitive::Box { half: [a, b, c], .. } => 8.0 * (a * b + b * c + a * c),
            Primitive::Cylinder { radius, half_height, .. } => {
                4.0 * PI * radius * half_height + 2.0 * PI * radius * radius
            }
            Primitive::Dome { radius, .. } => 2.0 * PI * radius * radius,
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> Point3 {
        use std::f64::consts::PI;
        match *self {
            Primitive::Box { center, half } => {
                let areas = [half[1] * half[2], half[0] * half[2], half[0] * half[1]];
                let axis = pick(&areas, rng);
                let mut p = [0.0; 3];
                for (i, v) in p.iter_mut().enumerate() {
                    *v = if i == axis {
                        if rng.random::<bool>() {
                            half[i]
                        } else {
                            -half[i]
                        }
                    } else {
                        rng.random_range(-half[i]..=half[i])
                    };
                }
                [center[0] + p[0], center[1] + p[1], center[2] + p[2]]
            }
            Primitive::Cylinder { center, radius, half_height } => {
                let side = 4.0 * PI * radius * half_height;
                let cap = PI * radius * radius;
                let theta = rng.random_range(0.0..2.0 * PI);
                let (r, z) = match pick(&[side, cap, cap], rng) {
                    0 => (radius, rng.random_range(-half_height..=half_height)),
                    1 => (radius * rng.random::<f64>().sqrt(), half_height),
                    _ => (radius * rng.random::<f64>().sqrt(), -half_height),
                };
                [center[0] + r * theta.cos(), center[1] + r * theta.sin(), center[2] + z]
            }
            Primitive::Dome { center, radius } => {
                let v: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
                let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(f64::MIN_POSITIVE);
                [
                    center[0] + radius * v[0] / len,
                    center[1] + radius * v[1] / len,
                    center[2] + radius * v[2].abs() / len,
                ]
            }
        }
    }

    /// Unsigned distance from `p` to the surface.
    pub fn surface_distance(&self, p: &Point3) -> f64 {
        match *self {
            Primitive::Box { center, half } => {
                let q: [f64; 3] = std::array::from_fn(|i| (p[i] - center[i]).abs() - half[i]);
                shell_distance(&q)
            }
            Primitive::Cylinder { center, radius, half_height } => {
                let (dx, dy) = (p[0] - center[0], p[1] - center[1]);
                let q = [(dx * dx + dy * dy).sqrt() - radius, (p[2] - center[2]).abs() - half_height];
                shell_distance(&q)
            }
            Primitive::Dome { center, radius } => {
                let d: [f64; 3] = std::array::from_fn(|i| p[i] - center[i]);
                if d[2] >= 0.0 {
                    ((d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt() - radius).abs()
                } else {
                    let rim = (d[0] * d[0] + d[1] * d[1]).sqrt() - radius;
                    (rim * rim + d[2] * d[2]).sqrt()
                }
            }
        }
    }

    fn stretched(&self, s: [f64; 3]) -> Primitive {
        let scale = |c: Point3| [c[0] * s[0], c[1] * s[1], c[2] * s[2]];
        let radial = 0.5 * (s[0] + s[1]);
        match *self {
            Primitive::Box { center, half } => Primitive::Box {
                center: scale(center),
                half: scale(half),
            },
            Primitive::Cylinder { center, radius, half_height } => Primitive::Cylinder {
                center: scale(center),
                radius: radius * radial,
                half_height: half_height * s[2],
            },
            Primitive::Dome { center, radius } => Primitive::Dome {
                center: scale(center),
                radius: radius * radial,
            },
        }
    }
}

fn shell_distance(q: &[f64]) -> f64 {
    let outside = q.iter().map(|v| v.max(0.0).powi(2)).sum::<f64>().sqrt();
    if outside > 0.0 {
        outside
    } else {
        -q.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

fn pick(weights: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut t = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if t < w {
            return i;
        }
        t -= w;
    }
    weights.len() - 1
}

fn cuboid(center: Point3, half: [f64; 3]) -> Primitive {
    Primitive::Box { center, half }
}

fn cylinder(center: Point3, radius: f64, half_height: f64) -> Primitive {
    Primitive::Cylinder { center, radius, half_height }
}

/// Unstretched template: primitives paired with their local part id.
pub fn template(kind: ShapeKind) -> Vec<(Primitive, u32)> {
    let corners = |x: f64, y: f64| [[x, y], [-x, y], [x, -y], [-x, -y]];
    match kind {
        ShapeKind::Table => {
            let mut v = vec![(cuboid([0.0, 0.0, 0.45], [0.8, 0.5, 0.05]), 0)];
            v.extend(corners(0.7, 0.4).map(|[x, y]| (cuboid([x, y, 0.0], [0.05, 0.05, 0.4]), 1)));
            v
        }
        ShapeKind::Chair => {
            let mut v = vec![
                (cuboid([0.0, 0.0, 0.0], [0.45, 0.45, 0.05]), 0),
                (cuboid([0.0, -0.42, 0.5], [0.45, 0.04, 0.45]), 1),
            ];
            v.extend(corners(0.4, 0.4).map(|[x, y]| (cuboid([x, y, -0.45], [0.04, 0.04, 0.4]), 2)));
            v
        }
        ShapeKind::Lamp => vec![
            (cylinder([0.0, 0.0, -0.85], 0.4, 0.05), 0),
            (cylinder([0.0, 0.0, -0.2], 0.04, 0.6), 1),
            (cylinder([0.0, 0.0, 0.6], 0.35, 0.2), 2),
        ],
        ShapeKind::Rocket => vec![
            (cylinder([0.0, 0.0, 0.0], 0.2, 0.6), 0),
            (Primitive::Dome { center: [0.0, 0.0, 0.6], radius: 0.2 }, 1),
            (cuboid([0.3, 0.0, -0.45], [0.1, 0.02, 0.15]), 2),
            (cuboid([-0.3, 0.0, -0.45], [0.1, 0.02, 0.15]), 2),
            (cuboid([0.0, 0.3, -0.45], [0.02, 0.1, 0.15]), 2),
            (cuboid([0.0, -0.3, -0.45], [0.02, 0.1, 0.15]), 2),
            (cylinder([0.0, 0.0, -0.7], 0.12, 0.1), 3),
        ],
    }
}

/// Template after the per-instance stretch drawn from `seed`.
pub fn instance_primitives(kind: ShapeKind, seed: u64) -> Vec<(Primitive, u32)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    stretched_template(kind, &mut rng)
}

fn stretched_template(kind: ShapeKind, rng: &mut impl Rng) -> Vec<(Primitive, u32)> {
    let s: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.85..1.15));
    template(kind).into_iter().map(|(p, l)| (p.stretched(s), l)).collect()
}

/// Samples `n_points` surface points with local part labels `0..kind.parts()`.
/// Every part receives at least one point.
pub fn synth(kind: ShapeKind, n_points: usize, noise_sd: f64, seed: u64) -> Result<LabeledPointCloud> {
    if n_points < kind.parts() {
        return Err(Error::InvalidArgument(format!(
            "{kind} has {} parts, cannot sample {n_points} points",
            kind.parts()
        )));
    }
    if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
        return Err(Error::InvalidArgument("noise sd must be finite and non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prims = stretched_template(kind, &mut rng);
    let areas: Vec<f64> = prims.iter().map(|(p, _)| p.area()).collect();
    let noise = Normal::new(0.0, noise_sd).expect("valid sd");

    let mut choice: Vec<usize> = (0..kind.parts() as u32)
        .map(|part| {
            let idx: Vec<usize> = (0..prims.len()).filter(|&i| prims[i].1 == part).collect();
            let w: Vec<f64> = idx.iter().map(|&i| areas[i]).collect();
            idx[pick(&w, &mut rng)]
        })
        .collect();
    while choice.len() < n_points {
        choice.push(pick(&areas, &mut rng));
    }
    choice.shuffle(&mut rng);

    let mut points = Vec::with_capacity(n_points);
    let mut labels = Vec::with_capacity(n_points);
    for &c in &choice {
        let mut p = prims[c].0.sample(&mut rng);
        if noise_sd > 0.0 {
            for v in &mut p {
                *v += noise.sample(&mut rng);
            }
        }
        points.push(p);
        labels.push(prims[c].1);
    }
    LabeledPointCloud::new(points, Some(labels))
}

/// One generated cloud with labels already offset to global part ids.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub kind: ShapeKind,
    pub cloud: LabeledPointCloud,
}

/// `count` clouds cycling through the categories; each draws its own seed
/// from a generator seeded with `seed`.
pub fn synth_dataset(count: usize, n_points: usize, noise_sd: f64, seed: u64) -> Result<Vec<SynthSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let kind = ShapeKind::ALL[i % ShapeKind::ALL.len()];
            let local = synth(kind, n_points, noise_sd, rng.next_u64())?;
            let offset = kind.label_offset();
            let labels = local.labels().expect("synth labels").iter().map(|l| l + offset).collect::<Vec<_>>();
            Ok(SynthSample {
                kind,
                cloud: local.with_labels(Some(labels))?,
            })
        })
        .collect()
}

const INDEX_FILE: &str = "index.txt";

/// Writes one text cloud per sample plus an `index.txt` of `file kind` lines.
pub fn save_dataset(dir: &Path, samples: &[SynthSample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = String::new();
    for (i, s) in samples.iter().enumerate() {
        let name = format!("{i:05}_{}.txt", s.kind);
        write_atomic(&dir.join(&name), format_cloud(&s.cloud).as_bytes())?;
        index.push_str(&format!("{name} {}\n", s.kind));
    }
    write_atomic(&dir.join(INDEX_FILE), index.as_bytes())
}

pub fn load_dataset(dir: &Path) -> Result<Vec<SynthSample>> {
    let path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let (Some(file), Some(kind), None) = (it.next(), it.next(), it.next()) else {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected `file kind` in {}", path.display()),
            });
        };
        out.push(SynthSample {
            kind: kind.parse()?,
            cloud: load_cloud(dir.join(file), true)?,
        });
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(out)
}
