//! Gaussian primitives, the scene container, point-cloud initialization and
//! the binary checkpoint format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Quaternion;

use crate::error::{Error, Result};
use crate::lie::{quaternion_matrix, Mat3, Pose, Vec3};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BSGS";
pub const CHECKPOINT_VERSION: u32 = 1;
/// f32 values stored per primitive.
pub const FLOATS_PER_PRIMITIVE: usize = 14;

pub const INITIAL_OPACITY: f64 = 0.1;
/// Scale floor relative to the scene extent, guarding coincident points.
pub const SCALE_FLOOR: f64 = 1e-6;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// One anisotropic 3D Gaussian with degree-0 color.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPrimitive {
    pub mean: Vec3,
    /// Quaternion `(w, x, y, z)`; normalized wherever it is consumed.
    pub rotation: [f64; 4],
    /// Natural log of the per-axis standard deviation.
    pub log_scale: Vec3,
    pub opacity_logit: f64,
    pub color: Vec3,
}

impl GaussianPrimitive {
    pub fn isotropic(mean: Vec3, scale: f64, opacity: f64, color: Vec3) -> Self {
        Self {
            mean,
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale: Vec3::repeat(scale.ln()),
            opacity_logit: logit(opacity),
            color,
        }
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scales(&self) -> Vec3 {
        self.log_scale.map(f64::exp)
    }

    pub fn unit_rotation(&self) -> [f64; 4] {
        let [w, x, y, z] = self.rotation;
        let n = (w * w + x * x + y * y + z * z).sqrt();
        [w / n, x / n, y / n, z / n]
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        quaternion_matrix(self.unit_rotation())
    }

    pub fn covariance(&self) -> Mat3 {
        covariance_3d(self)
    }

    pub fn normalize_rotation(&mut self) {
        self.rotation = self.unit_rotation();
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && self.log_scale.iter().all(|v| v.is_finite())
            && self.opacity_logit.is_finite()
            && self.color.iter().all(|v| v.is_finite())
    }
}

/// `R diag(exp(2 log_scale)) R^T`.
pub fn covariance_3d(g: &GaussianPrimitive) -> Mat3 {
    let r = g.rotation_matrix();
    let var = g.log_scale.map(|s| (2.0 * s).exp());
    let rs = r * Mat3::from_diagonal(&var);
    let cov = rs * r.transpose();
    // Exact symmetry; the two triangles can differ in the last bit.
    (cov + cov.transpose()) * 0.5
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub primitives: Vec<GaussianPrimitive>,
    /// Radius of the bounding sphere of the initial points.
    pub extent: f64,
}

impl Scene {
    pub fn new(primitives: Vec<GaussianPrimitive>, extent: f64) -> Result<Self> {
        if !(extent > 0.0 && extent.is_finite()) {
            return Err(Error::ParameterOutOfRange(format!(
                "scene extent must be positive, got {extent}"
            )));
        }
        Ok(Self { primitives, extent })
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    /// The scene with every primitive moved rigidly by `g`.
    pub fn transformed(&self, g: &Pose) -> Scene {
        let gq = *g.rotation.quaternion();
        let primitives = self
            .primitives
            .iter()
            .map(|p| {
                let [w, x, y, z] = p.unit_rotation();
                let q = gq * Quaternion::new(w, x, y, z);
                GaussianPrimitive {
                    mean: g.apply(&p.mean),
                    rotation: [q.w, q.i, q.j, q.k],
                    ..p.clone()
                }
            })
            .collect();
        Scene {
            primitives,
            extent: self.extent,
        }
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.primitives.len() as u64).to_le_bytes())?;
        w.write_all(&self.extent.to_le_bytes())?;
        for p in &self.primitives {
            let values: [f64; FLOATS_PER_PRIMITIVE] = [
                p.mean.x,
                p.mean.y,
                p.mean.z,
                p.rotation[0],
                p.rotation[1],
                p.rotation[2],
                p.rotation[3],
                p.log_scale.x,
                p.log_scale.y,
                p.log_scale.z,
                p.opacity_logit,
                p.color.x,
                p.color.y,
                p.color.z,
            ];
            for v in values {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Scene> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        r.read_exact(&mut b8)?;
        let count = u64::from_le_bytes(b8) as usize;
        r.read_exact(&mut b8)?;
        let extent = f64::from_le_bytes(b8);

        let mut primitives = Vec::with_capacity(count);
        let mut v = [0f64; FLOATS_PER_PRIMITIVE];
        for _ in 0..count {
            for slot in v.iter_mut() {
                r.read_exact(&mut b4)?;
                *slot = f32::from_le_bytes(b4) as f64;
            }
            primitives.push(GaussianPrimitive {
                mean: Vec3::new(v[0], v[1], v[2]),
                rotation: [v[3], v[4], v[5], v[6]],
                log_scale: Vec3::new(v[7], v[8], v[9]),
                opacity_logit: v[10],
                color: Vec3::new(v[11], v[12], v[13]),
            });
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Checkpoint("trailing bytes after last primitive".into()));
        }
        Scene::new(primitives, extent)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Scene> {
        Scene::read_checkpoint(BufReader::new(File::open(path)?))
    }
}

/// Radius of a bounding sphere centered on the centroid.
pub fn bounding_radius(points: &[Vec3]) -> f64 {
    let centroid = points.iter().sum::<Vec3>() / points.len() as f64;
    points
        .iter()
        .map(|p| (p - centroid).norm())
        .fold(0.0, f64::max)
}

/// One isotropic primitive per point, sized by the mean distance to its
/// three nearest neighbours.
pub fn init_scene(points: &[Vec3], colors: &[Vec3]) -> Result<Scene> {
    if points.len() < 4 {
        return Err(Error::InsufficientPoints(points.len()));
    }
    if colors.len() != points.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} points but {} colors",
            points.len(),
            colors.len()
        )));
    }
    let mut extent = bounding_radius(points);
    if extent <= 0.0 {
        // Every point coincides; fall back to a unit extent.
        extent = 1.0;
    }
    let floor = SCALE_FLOOR * extent;

    let primitives = points
        .iter()
        .zip(colors)
        .enumerate()
        .map(|(i, (p, c))| {
            let scale = mean_three_nn_distance(points, i).max(floor);
            GaussianPrimitive::isotropic(*p, scale, INITIAL_OPACITY, c.map(|v| v.clamp(0.0, 1.0)))
        })
        .collect();
    Scene::new(primitives, extent)
}

fn mean_three_nn_distance(points: &[Vec3], i: usize) -> f64 {
    let mut best = [f64::INFINITY; 3];
    for (j, q) in points.iter().enumerate() {
        if j == i {
            continue;
        }
        let d = (q - points[i]).norm();
        if d < best[2] {
            best[2] = d;
            best.sort_by(|a, b| a.total_cmp(b));
        }
    }
    best.iter().sum::<f64>() / 3.0
}
