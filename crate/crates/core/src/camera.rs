//! Pinhole cameras, LiDAR-to-image projection and extrinsic perturbation.
//!
//! Camera frame convention: `z` forward, `x` right, `y` down. A LiDAR point `p`
//! maps to `q = R p + T` and then to pixels
//! `(u, v) = h * (fx * qx / qz + cx, fy * qy / qz + cy)` with depth `z_c = qz`.

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ORTHO_TOL: f64 = 1e-6;

/// Miscalibration magnitudes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    /// Std-dev of the extrinsic rotation error, degrees.
    pub rot_deg: f64,
    /// Std-dev of the extrinsic translation error per axis, meters.
    pub trans_m: f64,
    /// Largest global BEV shift, in cells.
    pub bev_shift_max: u32,
}

impl NoiseSpec {
    pub const ZERO: NoiseSpec = NoiseSpec {
        rot_deg: 0.0,
        trans_m: 0.0,
        bev_shift_max: 0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.rot_deg >= 0.0 && self.rot_deg.is_finite()) || !(self.trans_m >= 0.0 && self.trans_m.is_finite()) {
            return Err(Error::config(format!(
                "noise magnitudes must be finite and >= 0, got rot {} deg, trans {} m",
                self.rot_deg, self.trans_m
            )));
        }
        Ok(())
    }
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            rot_deg: 1.0,
            trans_m: 0.1,
            bev_shift_max: 4,
        }
    }
}

/// Pinhole camera with LiDAR-to-camera extrinsics.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraModel {
    k: Matrix3<f64>,
    r: Matrix3<f64>,
    t: Vector3<f64>,
    scale: f64,
    height: usize,
    width: usize,
}

impl CameraModel {
    pub fn new(
        k: Matrix3<f64>,
        r: Matrix3<f64>,
        t: Vector3<f64>,
        scale: f64,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        let cam = Self {
            k,
            r,
            t,
            scale,
            height,
            width,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `center` (LiDAR frame) looking along heading `yaw` (radians
    /// about the LiDAR z axis, 0 = +x), level with the ground.
    pub fn looking_along(
        yaw: f64,
        center: Vector3<f64>,
        focal: f64,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        let forward = Vector3::new(yaw.cos(), yaw.sin(), 0.0);
        let right = Vector3::new(yaw.sin(), -yaw.cos(), 0.0);
        let down = Vector3::new(0.0, 0.0, -1.0);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(r * center);
        let k = Matrix3::new(
            focal,
            0.0,
            width as f64 / 2.0,
            0.0,
            focal,
            height as f64 / 2.0,
            0.0,
            0.0,
            1.0,
        );
        Self::new(k, r, t, 1.0, height, width)
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.k;
        let all_finite = k.iter().chain(self.r.iter()).chain(self.t.iter()).all(|v| v.is_finite());
        if !all_finite || !self.scale.is_finite() {
            return Err(Error::config("camera holds non-finite parameters"));
        }
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) {
            return Err(Error::config("camera focal lengths must be > 0"));
        }
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 || k[(2, 2)] != 1.0 || k[(0, 1)] != 0.0 {
            return Err(Error::config(
                "intrinsics must be upper-triangular with zero skew and K[2][2] = 1",
            ));
        }
        let gram = self.r * self.r.transpose();
        if (gram - Matrix3::identity()).abs().max() > ORTHO_TOL || (self.r.determinant() - 1.0).abs() > ORTHO_TOL {
            return Err(Error::config("camera rotation is not orthonormal with det 1"));
        }
        if !(self.scale > 0.0) {
            return Err(Error::config("downsample scale must be > 0"));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::config("camera image size must be >= 1"));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.k
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.r
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.t
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Image size `(H, W)` of the pixel grid that projections index.
    pub fn image_size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// The same camera with a different downsample scale and image size.
    pub fn with_scale(&self, scale: f64, height: usize, width: usize) -> Result<Self> {
        Self::new(self.k, self.r, self.t, scale, height, width)
    }

    /// Camera center in the LiDAR frame.
    pub fn center(&self) -> Vector3<f64> {
        -(self.r.transpose() * self.t)
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.r * p + self.t
    }

    pub fn to_lidar(&self, q: &Vector3<f64>) -> Vector3<f64> {
        self.r.transpose() * (q - self.t)
    }

    /// Continuous pixel and depth of a LiDAR-frame point.
    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64, f64) {
        let q = self.to_camera(p);
        let z = q.z;
        let u = self.scale * (self.k[(0, 0)] * q.x / z + self.k[(0, 2)]);
        let v = self.scale * (self.k[(1, 1)] * q.y / z + self.k[(1, 2)]);
        (u, v, z)
    }

    /// Camera-frame ray direction through pixel `(u, v)`, normalized to unit depth.
    pub fn ray_through(&self, u: f64, v: f64) -> Vector3<f64> {
        let x = (u / self.scale - self.k[(0, 2)]) / self.k[(0, 0)];
        let y = (v / self.scale - self.k[(1, 2)]) / self.k[(1, 1)];
        Vector3::new(x, y, 1.0)
    }

    /// LiDAR-frame point at pixel `(u, v)` and camera depth `z_c`.
    pub fn back_project(&self, u: f64, v: f64, z_c: f64) -> Vector3<f64> {
        self.to_lidar(&(self.ray_through(u, v) * z_c))
    }
}

/// N x 3 points in the LiDAR frame, meters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self> {
        if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::config("point cloud holds non-finite coordinates"));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Stores as a `(1, 3, 1, N)` tensor: x row, then y row, then z row.
    pub fn to_tensor(&self) -> crate::io::Tensor {
        let n = self.points.len();
        let mut data = Vec::with_capacity(3 * n);
        for axis in 0..3 {
            data.extend(self.points.iter().map(|p| p[axis] as f32));
        }
        crate::io::Tensor {
            dims: vec![1, 3, 1, n as u64],
            data,
        }
    }

    pub fn from_tensor(t: &crate::io::Tensor) -> Result<Self> {
        if t.dims.len() != 4 || t.dims[0] != 1 || t.dims[1] != 3 || t.dims[2] != 1 {
            return Err(Error::format(format!(
                "point cloud tensor must be (1, 3, 1, N), got {:?}",
                t.dims
            )));
        }
        let n = t.dims[3] as usize;
        let points = (0..n)
            .map(|i| Vector3::new(t.data[i] as f64, t.data[n + i] as f64, t.data[2 * n + i] as f64))
            .collect();
        Self::new(points).map_err(|e| Error::format(e.to_string()))
    }
}

/// One projected point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projected {
    pub u: f64,
    pub v: f64,
    pub z_c: f64,
    pub valid: bool,
}

impl Projected {
    /// Integer pixel `(u, v)` using round-half-away-from-zero.
    pub fn pixel(&self) -> (i64, i64) {
        (self.u.round() as i64, self.v.round() as i64)
    }
}

/// Per-point projections of a cloud into one camera.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelProjection {
    pub points: Vec<Projected>,
    pub image_size: (usize, usize),
}

impl PixelProjection {
    pub fn valid(&self) -> impl Iterator<Item = &Projected> {
        self.points.iter().filter(|p| p.valid)
    }
}

pub fn project_points(cloud: &PointCloud, cam: &CameraModel) -> PixelProjection {
    let (h, w) = cam.image_size();
    let points = cloud
        .points
        .iter()
        .map(|p| {
            let (u, v, z_c) = cam.project(p);
            let (ui, vi) = (u.round(), v.round());
            let valid = z_c > 0.0
                && u.is_finite()
                && v.is_finite()
                && ui >= 0.0
                && vi >= 0.0
                && ui < w as f64
                && vi < h as f64;
            Projected { u, v, z_c, valid }
        })
        .collect();
    PixelProjection {
        points,
        image_size: (h, w),
    }
}

/// Composes the extrinsic rotation with a random rotation (axis uniform on the
/// sphere, angle ~ N(0, rot_deg)) and shifts the translation by N(0, trans_m)
/// per axis. Deterministic in `seed`.
pub fn perturb_extrinsics(cam: &CameraModel, noise: &NoiseSpec, seed: u64) -> Result<CameraModel> {
    noise.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let axis = loop {
        let a = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        if a.norm() > 1e-9 {
            break a;
        }
    };
    let z_angle: f64 = rng.sample(StandardNormal);
    let shift = Vector3::new(
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
    );

    let mut out = cam.clone();
    if noise.rot_deg > 0.0 {
        let angle = z_angle * noise.rot_deg.to_radians();
        let delta = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle);
        out.r = orthonormalize(&(delta.matrix() * cam.r));
    }
    if noise.trans_m > 0.0 {
        out.t = cam.t + shift * noise.trans_m;
    }
    out.validate()?;
    Ok(out)
}

/// Angle (radians) of the relative rotation `R_aᵀ R_b`.
pub fn rotation_angle_between(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let rel = a.transpose() * b;
    ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

fn orthonormalize(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * v_t;
    }
    r
}

/// JSON form of one camera: row-major `K` and `R`, `T`, `h`, `H`, `W`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRecord {
    #[serde(rename = "K")]
    pub k: [f64; 9],
    #[serde(rename = "R")]
    pub r: [f64; 9],
    #[serde(rename = "T")]
    pub t: [f64; 3],
    pub h: f64,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
}

impl From<&CameraModel> for CameraRecord {
    fn from(cam: &CameraModel) -> Self {
        let row_major = |m: &Matrix3<f64>| {
            let mut a = [0.0; 9];
            for i in 0..3 {
                for j in 0..3 {
                    a[i * 3 + j] = m[(i, j)];
                }
            }
            a
        };
        Self {
            k: row_major(&cam.k),
            r: row_major(&cam.r),
            t: [cam.t.x, cam.t.y, cam.t.z],
            h: cam.scale,
            height: cam.height,
            width: cam.width,
        }
    }
}

impl TryFrom<&CameraRecord> for CameraModel {
    type Error = Error;

    fn try_from(rec: &CameraRecord) -> Result<Self> {
        CameraModel::new(
            Matrix3::from_row_slice(&rec.k),
            Matrix3::from_row_slice(&rec.r),
            Vector3::from_row_slice(&rec.t),
            rec.h,
            rec.height,
            rec.width,
        )
    }
}

/// A list of cameras, serialized as `{"cameras": [...]}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Rig {
    pub cameras: Vec<CameraModel>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RigRecord {
    cameras: Vec<CameraRecord>,
}

impl Rig {
    /// Six level cameras at 60 degree heading steps, mounted around the LiDAR.
    pub fn surround(height: usize, width: usize, focal: f64) -> Result<Self> {
        let cameras = (0..6)
            .map(|i| {
                let yaw = (i as f64 * 60.0).to_radians();
                let center = Vector3::new(0.4 * yaw.cos(), 0.4 * yaw.sin(), -0.3);
                CameraModel::looking_along(yaw, center, focal, height, width)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { cameras })
    }

    pub fn to_json(&self) -> String {
        let rec = RigRecord {
            cameras: self.cameras.iter().map(CameraRecord::from).collect(),
        };
        serde_json::to_string_pretty(&rec).expect("rig serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rec: RigRecord = serde_json::from_str(text).map_err(|e| Error::format(format!("rig JSON: {e}")))?;
        if rec.cameras.is_empty() {
            return Err(Error::config("rig needs at least one camera"));
        }
        let cameras = rec
            .cameras
            .iter()
            .map(CameraModel::try_from)
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { cameras })
    }
}
