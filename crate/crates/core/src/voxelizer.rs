//! RBF subvoxelization and the boolean occupancy baseline.
//!
//! A cloud's bounding box is split into `D x H x W` voxels (along z, y, x),
//! each voxel into `k^3` subvoxels. A subvoxel holds the kernel response of
//! the points that influence it, evaluated at its center.

use ndarray::{Array4, Array6};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::pointcloud::{bounding_box, dist2, Aabb, LabeledPointCloud, Point3};

/// Padding applied to zero-extent bounding-box axes, in world units.
pub const DEGENERATE_PAD: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Kernel {
    /// `exp(-d^2 / (2 sigma^2))`
    Gaussian,
    /// `1 / (1 + sigma^2 d^2)`
    InverseQuadratic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Combine {
    Max,
    /// Unit-weight sum of kernel responses.
    Sum,
}

/// Which points influence a subvoxel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Neighborhood {
    /// Only points binned into the subvoxel's own voxel.
    Local,
    /// Every point of the cloud.
    Global,
}

macro_rules! named_enum {
    ($ty:ident { $($variant:ident => $name:literal),+ $(,)? }) => {
        impl $ty {
            pub fn name(self) -> &'static str {
                match self {
                    $($ty::$variant => $name),+
                }
            }
        }

        impl std::fmt::Display for $ty {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(self.name())
            }
        }

        impl std::str::FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($ty::$variant),)+
                    other => Err(Error::InvalidArgument(format!(
                        concat!("unknown ", stringify!($ty), " `{}`"),
                        other
                    ))),
                }
            }
        }
    };
}

named_enum!(Kernel { Gaussian => "gaussian", InverseQuadratic => "inverse_quadratic" });
named_enum!(Combine { Max => "max", Sum => "sum" });
named_enum!(Neighborhood { Local => "local", Global => "global" });

/// Kernel width, either absolute or relative to the smallest voxel edge.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sigma {
    World(f64),
    VoxelMultiple(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    /// Voxel count along z.
    pub d: usize,
    /// Voxel count along y.
    pub h: usize,
    /// Voxel count along x.
    pub w: usize,
    /// Subvoxels per voxel edge.
    pub k: usize,
    pub sigma: Sigma,
    pub kernel: Kernel,
    pub combine: Combine,
    pub neighborhood: Neighborhood,
}

impl GridSpec {
    /// `(16, 16, 16)`, `k = 4`, `sigma = min voxel edge`.
    pub fn shapenet() -> Self {
        Self::cube(16, 4, Sigma::VoxelMultiple(1.0))
    }

    /// `(16, 16, 32)`, `k = 4`, `sigma = 5 * min voxel edge`.
    pub fn s3dis() -> Self {
        GridSpec {
            d: 16,
            h: 16,
            w: 32,
            ..Self::cube(16, 4, Sigma::VoxelMultiple(5.0))
        }
    }

    pub fn cube(n: usize, k: usize, sigma: Sigma) -> Self {
        GridSpec {
            d: n,
            h: n,
            w: n,
            k,
            sigma,
            kernel: Kernel::Gaussian,
            combine: Combine::Max,
            neighborhood: Neighborhood::Local,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.h == 0 || self.w == 0 || self.k == 0 {
            return Err(Error::InvalidArgument(format!(
                "grid dims must be positive, got {}x{}x{} k={}",
                self.d, self.h, self.w, self.k
            )));
        }
        let s = match self.sigma {
            Sigma::World(s) | Sigma::VoxelMultiple(s) => s,
        };
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma must be positive, got {s}")));
        }
        Ok(())
    }

    pub fn voxels(&self) -> usize {
        self.d * self.h * self.w
    }

    pub fn block_len(&self) -> usize {
        self.k * self.k * self.k
    }

    /// Voxel edge lengths `(v_D, v_H, v_W)` for a (padded) box.
    pub fn voxel_sizes(&self, bbox: &Aabb) -> [f64; 3] {
        let e = bbox.extent();
        [e[2] / self.d as f64, e[1] / self.h as f64, e[0] / self.w as f64]
    }

    /// Absolute kernel width for the given box.
    pub fn resolve_sigma(&self, bbox: &Aabb) -> f64 {
        match self.sigma {
            Sigma::World(s) => s,
            Sigma::VoxelMultiple(c) => {
                let v = self.voxel_sizes(bbox);
                c * v[0].min(v[1]).min(v[2])
            }
        }
    }

    pub fn rbf(&self, bbox: &Aabb) -> Rbf {
        Rbf {
            kernel: self.kernel,
            combine: self.combine,
            sigma: self.resolve_sigma(bbox),
        }
    }
}

/// A fully resolved kernel: shape, combination rule and absolute width.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rbf {
    pub kernel: Kernel,
    pub combine: Combine,
    pub sigma: f64,
}

impl Rbf {
    #[inline]
    fn response(&self, d2: f64) -> f64 {
        match self.kernel {
            Kernel::Gaussian => (-d2 / (2.0 * self.sigma * self.sigma)).exp(),
            Kernel::InverseQuadratic => 1.0 / (1.0 + self.sigma * self.sigma * d2),
        }
    }
}

/// Kernel field of `pts` evaluated at `p`; zero for an empty point set.
pub fn rbf_value(p: &Point3, pts: &[Point3], rbf: &Rbf) -> f64 {
    if pts.is_empty() {
        return 0.0;
    }
    match rbf.combine {
        // Both kernels decrease with distance, so the max is taken at the
        // nearest point.
        Combine::Max => {
            let nearest = pts.iter().map(|v| dist2(p, v)).fold(f64::INFINITY, f64::min);
            rbf.response(nearest)
        }
        Combine::Sum => pts.iter().map(|v| rbf.response(dist2(p, v))).sum(),
    }
}

#[inline]
fn bin(coord: f64, min: f64, extent: f64, cells: usize) -> usize {
    let t = ((coord - min) / extent * cells as f64).floor();
    if t <= 0.0 {
        0
    } else {
        (t as usize).min(cells - 1)
    }
}

/// Half-open voxel binning; points on the max face land in the last cell.
pub fn voxel_of(point: &Point3, spec: &GridSpec, bbox: &Aabb) -> (usize, usize, usize) {
    let e = bbox.extent();
    (
        bin(point[2], bbox.min[2], e[2], spec.d),
        bin(point[1], bbox.min[1], e[1], spec.h),
        bin(point[0], bbox.min[0], e[0], spec.w),
    )
}

/// Center of subvoxel `(a, b, c)` (along z, y, x) of voxel `(d, h, w)`.
pub fn subvoxel_center(
    spec: &GridSpec,
    bbox: &Aabb,
    voxel: (usize, usize, usize),
    sub: (usize, usize, usize),
) -> Point3 {
    let [vd, vh, vw] = spec.voxel_sizes(bbox);
    let k = spec.k as f64;
    [
        bbox.min[0] + (voxel.2 as f64 + (sub.2 as f64 + 0.5) / k) * vw,
        bbox.min[1] + (voxel.1 as f64 + (sub.1 as f64 + 0.5) / k) * vh,
        bbox.min[2] + (voxel.0 as f64 + (sub.0 as f64 + 0.5) / k) * vd,
    ]
}

/// Dense `(D, H, W, k, k, k)` grid of kernel responses.
#[derive(Clone, Debug, PartialEq)]
pub struct SubvoxelTensor {
    pub values: Vec<f64>,
    pub spec: GridSpec,
    pub bbox: Aabb,
}

impl SubvoxelTensor {
    pub fn dims(&self) -> [usize; 6] {
        let s = &self.spec;
        [s.d, s.h, s.w, s.k, s.k, s.k]
    }

    pub fn block(&self, d: usize, h: usize, w: usize) -> &[f64] {
        let len = self.spec.block_len();
        let v = (d * self.spec.h + h) * self.spec.w + w;
        &self.values[v * len..(v + 1) * len]
    }

    /// Blocks in voxel row-major order.
    pub fn blocks(&self) -> std::slice::Chunks<'_, f64> {
        self.values.chunks(self.spec.block_len())
    }

    pub fn to_array(&self) -> Array6<f64> {
        Array6::from_shape_vec(self.dims(), self.values.clone()).expect("dims match values")
    }
}

/// The cloud's bounding box with degenerate axes padded.
pub fn grid_box(cloud: &LabeledPointCloud) -> Aabb {
    bounding_box(cloud).padded(DEGENERATE_PAD)
}

pub fn voxelize(cloud: &LabeledPointCloud, spec: &GridSpec) -> Result<SubvoxelTensor> {
    voxelize_in(cloud, spec, &grid_box(cloud))
}

/// Voxelizes against an explicit box. Points outside it are clamped into the
/// border voxels.
pub fn voxelize_in(cloud: &LabeledPointCloud, spec: &GridSpec, bbox: &Aabb) -> Result<SubvoxelTensor> {
    spec.validate()?;
    let bbox = bbox.padded(DEGENERATE_PAD);
    let rbf = spec.rbf(&bbox);
    let k = spec.k;
    let block_len = spec.block_len();

    let mut members: Vec<Vec<Point3>> = Vec::new();
    if spec.neighborhood == Neighborhood::Local {
        members = vec![Vec::new(); spec.voxels()];
        for p in cloud.points() {
            let (d, h, w) = voxel_of(p, spec, &bbox);
            members[(d * spec.h + h) * spec.w + w].push(*p);
        }
    }

    let mut values = vec![0.0; spec.voxels() * block_len];
    values
        .par_chunks_mut(block_len)
        .enumerate()
        .for_each(|(v, block)| {
            let pts: &[Point3] = match spec.neighborhood {
                Neighborhood::Local => &members[v],
                Neighborhood::Global => cloud.points(),
            };
            if pts.is_empty() {
                return;
            }
            let voxel = (v / (spec.h * spec.w), (v / spec.w) % spec.h, v % spec.w);
            for (s, out) in block.iter_mut().enumerate() {
                let sub = (s / (k * k), (s / k) % k, s % k);
                let center = subvoxel_center(spec, &bbox, voxel, sub);
                *out = rbf_value(&center, pts, &rbf);
            }
        });

    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("subvoxel {i}")));
    }
    Ok(SubvoxelTensor {
        values,
        spec: *spec,
        bbox,
    })
}

/// Boolean grid at subvoxel resolution `(D*k, H*k, W*k)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OccupancyGrid {
    pub dims: [usize; 3],
    pub bits: Vec<u8>,
}

impl OccupancyGrid {
    pub fn get(&self, z: usize, y: usize, x: usize) -> u8 {
        self.bits[(z * self.dims[1] + y) * self.dims[2] + x]
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b != 0).count()
    }

    /// Regroups the bits as a `(D, H, W, k^3)` voxel grid with one channel per
    /// subvoxel, ordered like a `SubvoxelTensor` block.
    pub fn to_voxel_channels(&self, k: usize) -> Array4<f64> {
        let [dz, dy, dx] = self.dims;
        let mut out = Array4::zeros((dz / k, dy / k, dx / k, k * k * k));
        for z in 0..dz {
            for y in 0..dy {
                for x in 0..dx {
                    if self.get(z, y, x) != 0 {
                        let ch = ((z % k) * k + y % k) * k + x % k;
                        out[[z / k, y / k, x / k, ch]] = 1.0;
                    }
                }
            }
        }
        out
    }
}

pub fn occupancy(cloud: &LabeledPointCloud, spec: &GridSpec) -> Result<OccupancyGrid> {
    occupancy_in(cloud, spec, &grid_box(cloud))
}

pub fn occupancy_in(cloud: &LabeledPointCloud, spec: &GridSpec, bbox: &Aabb) -> Result<OccupancyGrid> {
    spec.validate()?;
    let bbox = bbox.padded(DEGENERATE_PAD);
    let dims = [spec.d * spec.k, spec.h * spec.k, spec.w * spec.k];
    let e = bbox.extent();
    let mut bits = vec![0u8; dims[0] * dims[1] * dims[2]];
    for p in cloud.points() {
        let z = bin(p[2], bbox.min[2], e[2], dims[0]);
        let y = bin(p[1], bbox.min[1], e[1], dims[1]);
        let x = bin(p[0], bbox.min[0], e[0], dims[2]);
        bits[(z * dims[1] + y) * dims[2] + x] = 1;
    }
    Ok(OccupancyGrid { dims, bits })
}
