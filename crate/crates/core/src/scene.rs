//! Synthetic scenes: a ground plane plus yawed boxes, seen by a spinning LiDAR
//! and a camera rig. Everything is expressed in the LiDAR frame; the sensor
//! sits at the origin and the ground is the plane `z = ground_z`.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraModel, PointCloud, Rig};
use crate::error::{Error, Result};
use crate::tensor::{Dims, FeatureMap};

/// Elevation bands of the simulated spinning LiDAR.
pub const LIDAR_BANDS: usize = 32;
/// Lowest and highest band elevation, degrees.
pub const LIDAR_ELEVATION_DEG: (f64, f64) = (-30.0, 10.0);
/// Point-cloud range `[x_min, y_min, z_min, x_max, y_max, z_max]`, meters.
pub const POINT_RANGE: [f64; 6] = [-54.0, -54.0, -5.0, 54.0, 54.0, 3.0];
/// Ground height below the LiDAR origin.
pub const DEFAULT_GROUND_Z: f64 = -1.84;

const HIT_EPS: f64 = 1e-9;

/// Axis-aligned box rotated by `yaw` about the vertical axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneBox {
    pub center: [f64; 3],
    /// Length (along the yawed x axis), width, height.
    pub size: [f64; 3],
    pub yaw: f64,
}

impl SceneBox {
    pub fn validate(&self) -> Result<()> {
        if self.size.iter().any(|s| !(*s > 0.0 && s.is_finite()))
            || self.center.iter().any(|c| !c.is_finite())
            || !self.yaw.is_finite()
        {
            return Err(Error::config(format!("invalid box {self:?}")));
        }
        Ok(())
    }

    fn half(&self) -> Vector3<f64> {
        Vector3::new(self.size[0] / 2.0, self.size[1] / 2.0, self.size[2] / 2.0)
    }

    /// LiDAR-frame point expressed in the box's own frame.
    pub fn to_local(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let (s, c) = self.yaw.sin_cos();
        let d = p - Vector3::from(self.center);
        Vector3::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z)
    }

    fn dir_to_local(&self, d: &Vector3<f64>) -> Vector3<f64> {
        let (s, c) = self.yaw.sin_cos();
        Vector3::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z)
    }

    /// Signed distance-like measure: 0 on the surface, negative inside.
    pub fn surface_distance(&self, p: &Vector3<f64>) -> f64 {
        let l = self.to_local(p);
        let h = self.half();
        let q = Vector3::new(l.x.abs() - h.x, l.y.abs() - h.y, l.z.abs() - h.z);
        let outside = Vector3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm();
        outside + q.x.max(q.y).max(q.z).min(0.0)
    }

    /// Whether the vertical footprint of the box contains `(x, y)`.
    pub fn footprint_contains(&self, x: f64, y: f64) -> bool {
        let l = self.to_local(&Vector3::new(x, y, self.center[2]));
        let h = self.half();
        l.x.abs() <= h.x && l.y.abs() <= h.y
    }

    /// Entry distance of the ray `origin + t * dir`, if it hits.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let o = self.to_local(origin);
        let d = self.dir_to_local(dir);
        let h = self.half();
        let (mut t_near, mut t_far) = (f64::NEG_INFINITY, f64::INFINITY);
        for axis in 0..3 {
            if d[axis].abs() < 1e-300 {
                if o[axis].abs() > h[axis] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d[axis];
            let mut t0 = (-h[axis] - o[axis]) * inv;
            let mut t1 = (h[axis] - o[axis]) * inv;
            if t0 > t1 {
                std::mem::swap(&mut t0, &mut t1);
            }
            t_near = t_near.max(t0);
            t_far = t_far.min(t1);
            if t_near > t_far {
                return None;
            }
        }
        if t_near > HIT_EPS {
            Some(t_near)
        } else if t_far > HIT_EPS {
            Some(t_far)
        } else {
            None
        }
    }
}

/// Boxes, an optional ground plane, a camera rig and the seed that drives sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub boxes: Vec<SceneBox>,
    pub ground_z: Option<f64>,
    pub rig: Rig,
    pub seed: u64,
}

/// Knobs for [`Scene::generate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneGenConfig {
    pub boxes: usize,
    pub min_distance: f64,
    pub max_distance: f64,
    pub ground_z: f64,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        Self {
            boxes: 16,
            min_distance: 5.0,
            max_distance: 40.0,
            ground_z: DEFAULT_GROUND_Z,
        }
    }
}

impl Scene {
    pub fn new(boxes: Vec<SceneBox>, ground_z: Option<f64>, rig: Rig, seed: u64) -> Result<Self> {
        for b in &boxes {
            b.validate()?;
        }
        if rig.cameras.is_empty() {
            return Err(Error::config("scene needs at least one camera"));
        }
        Ok(Self {
            boxes,
            ground_z,
            rig,
            seed,
        })
    }

    /// Random vehicle- and pedestrian-sized boxes standing on the ground.
    pub fn generate(seed: u64, cfg: &SceneGenConfig, rig: Rig) -> Result<Self> {
        if !(cfg.min_distance > 0.0 && cfg.max_distance > cfg.min_distance) {
            return Err(Error::config("scene distance range must satisfy 0 < min < max"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce_e5ce);
        let boxes = (0..cfg.boxes)
            .map(|_| {
                let az = rng.random_range(0.0..std::f64::consts::TAU);
                let dist = rng.random_range(cfg.min_distance..cfg.max_distance);
                let size = if rng.random_bool(0.25) {
                    [rng.random_range(0.5..0.9), rng.random_range(0.5..0.9), rng.random_range(1.5..1.9)]
                } else {
                    [rng.random_range(3.5..5.0), rng.random_range(1.6..2.1), rng.random_range(1.4..2.2)]
                };
                SceneBox {
                    center: [dist * az.cos(), dist * az.sin(), cfg.ground_z + size[2] / 2.0],
                    size,
                    yaw: rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
                }
            })
            .collect();
        Self::new(boxes, Some(cfg.ground_z), rig, seed)
    }

    /// Distance along `dir` to the nearest surface, if any.
    pub fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let mut best = self.ground_z.and_then(|gz| {
            if dir.z.abs() < 1e-300 {
                return None;
            }
            let t = (gz - origin.z) / dir.z;
            (t > HIT_EPS).then_some(t)
        });
        for b in &self.boxes {
            if let Some(t) = b.intersect(origin, dir) {
                if best.is_none_or(|bt| t < bt) {
                    best = Some(t);
                }
            }
        }
        best
    }

    /// Exact camera depth of the surface seen through continuous pixel `(u, v)`; 0 if none.
    pub fn depth_at(&self, cam: &CameraModel, u: f64, v: f64) -> f64 {
        let ray = cam.ray_through(u, v);
        // unit camera depth along `ray`, so the hit distance is the depth
        let dir = cam.rotation().transpose() * ray;
        self.cast(&cam.center(), &dir).unwrap_or(0.0)
    }

    pub fn to_file(&self, rig_path: &str) -> SceneFile {
        SceneFile {
            boxes: self.boxes.clone(),
            ground_z: self.ground_z,
            rig: rig_path.to_string(),
            seed: self.seed,
        }
    }
}

/// On-disk scene: boxes, ground, a path to the rig JSON, and the seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub boxes: Vec<SceneBox>,
    pub ground_z: Option<f64>,
    pub rig: String,
    pub seed: u64,
}

impl SceneFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let file: SceneFile = serde_json::from_str(text).map_err(|e| Error::format(format!("scene JSON: {e}")))?;
        for b in &file.boxes {
            b.validate()?;
        }
        if file.ground_z.is_some_and(|z| !z.is_finite()) {
            return Err(Error::config("ground height must be finite"));
        }
        Ok(file)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene serializes")
    }

    pub fn into_scene(self, rig: Rig) -> Result<Scene> {
        Scene::new(self.boxes, self.ground_z, rig, self.seed)
    }
}

fn in_point_range(p: &Vector3<f64>) -> bool {
    let r = POINT_RANGE;
    p.x >= r[0] && p.x <= r[3] && p.y >= r[1] && p.y <= r[4] && p.z >= r[2] && p.z <= r[5]
}

/// Casts `rays` rays from the LiDAR origin, split round-robin over the
/// elevation bands, and keeps first hits inside [`POINT_RANGE`].
pub fn sample_lidar(scene: &Scene, rays: usize) -> Result<PointCloud> {
    if rays == 0 {
        return Err(Error::config("sample_lidar needs at least one ray"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
    let phase: Vec<f64> = (0..LIDAR_BANDS).map(|_| rng.random_range(0.0..1.0)).collect();
    let per_band = rays.div_ceil(LIDAR_BANDS);
    let (lo, hi) = LIDAR_ELEVATION_DEG;
    let origin = Vector3::zeros();
    let points = (0..rays)
        .into_par_iter()
        .filter_map(|i| {
            let band = i % LIDAR_BANDS;
            let step = i / LIDAR_BANDS;
            let elev = (lo + (hi - lo) * band as f64 / (LIDAR_BANDS - 1) as f64).to_radians();
            let az = std::f64::consts::TAU * (step as f64 + phase[band]) / per_band as f64;
            let dir = Vector3::new(elev.cos() * az.cos(), elev.cos() * az.sin(), elev.sin());
            let t = scene.cast(&origin, &dir)?;
            let p = dir * t;
            in_point_range(&p).then_some(p)
        })
        .collect();
    PointCloud::new(points)
}

/// Per-pixel exact depth (pixel centers at integer coordinates); 0 where no surface.
pub fn render_true_depth(scene: &Scene, cam: &CameraModel) -> Result<FeatureMap> {
    let (h, w) = cam.image_size();
    let mut data = vec![0f32; h * w];
    data.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, d) in row.iter_mut().enumerate() {
            *d = scene.depth_at(cam, x as f64, y as f64) as f32;
        }
    });
    FeatureMap::from_vec(Dims::new(1, 1, h, w), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rig() -> Rig {
        Rig::surround(64, 176, 125.0).unwrap()
    }

    #[test]
    fn empty_scene_yields_nothing() {
        let scene = Scene::new(vec![], None, rig(), 1).unwrap();
        assert!(sample_lidar(&scene, 4096).unwrap().is_empty());
        let depth = render_true_depth(&scene, &scene.rig.cameras[0]).unwrap();
        assert!(depth.data().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn single_box_hits_lie_on_its_faces() {
        let b = SceneBox {
            center: [12.0, 1.0, 0.0],
            size: [4.0, 2.0, 3.0],
            yaw: 0.4,
        };
        let scene = Scene::new(vec![b], None, rig(), 3).unwrap();
        let cloud = sample_lidar(&scene, 32 * 2048).unwrap();
        assert!(cloud.len() > 50);
        for p in &cloud.points {
            assert!(b.surface_distance(p).abs() < 1e-4, "{p:?}");
        }
    }

    #[test]
    fn sampling_is_deterministic_and_in_range() {
        let scene = Scene::generate(8, &SceneGenConfig::default(), rig()).unwrap();
        let a = sample_lidar(&scene, 32 * 512).unwrap();
        let b = sample_lidar(&scene, 32 * 512).unwrap();
        assert_eq!(a, b);
        assert!(a.points.iter().all(in_point_range));
    }

    #[test]
    fn wall_renders_constant_depth() {
        let cam = rig().cameras[0].clone();
        // a huge thin box perpendicular to the camera axis, 9 m in front of it
        let center = cam.back_project(88.0, 32.0, 9.0 + 0.05);
        let wall = SceneBox {
            center: [center.x, center.y, center.z],
            size: [0.1, 500.0, 500.0],
            yaw: 0.0,
        };
        let scene = Scene::new(vec![wall], None, rig(), 0).unwrap();
        let depth = render_true_depth(&scene, &cam).unwrap();
        for &d in depth.data() {
            assert!((d - 9.0).abs() < 1e-4, "{d}");
        }
    }

    #[test]
    fn scene_file_round_trip() {
        let scene = Scene::generate(2, &SceneGenConfig::default(), rig()).unwrap();
        let text = scene.to_file("rig.json").to_json();
        let back = SceneFile::from_json(&text).unwrap();
        assert_eq!(back.into_scene(rig()).unwrap(), scene);
        assert!(SceneFile::from_json(r#"{"boxes":[{"center":[0,0,0],"size":[0,1,1],"yaw":0}],"ground_z":null,"rig":"r","seed":1}"#).is_err());
    }
}
