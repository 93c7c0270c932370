use std::path::{Path, PathBuf};

use bevalign::camera::{NoiseSpec, Rig};
use bevalign::global_align::RecoveryConfig;
use bevalign::local_align::{BevGrid, FrustumConfig, Widths};
use bevalign::scene::SceneGenConfig;
use bevalign::{Error, Result};
use serde::{Deserialize, Serialize};

pub const DEFAULT_SWEEP: [usize; 5] = [5, 8, 12, 16, 25];

/// Everything a run needs. Every field has a default, so `{}` is a valid config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Rig JSON; the built-in six-camera surround rig when absent.
    pub rig: Option<PathBuf>,
    pub focal: f64,
    pub scene: SceneGenConfig,
    pub lidar_rays: usize,
    pub noise: NoiseSpec,
    pub k_graph: usize,
    pub sweep_k: Vec<usize>,
    pub widths: Widths,
    pub frustum: FrustumConfig,
    pub bev: BevGrid,
    pub recovery: RecoveryConfig,
    pub bench: BenchConfig,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            rig: None,
            focal: 500.0,
            scene: SceneGenConfig::default(),
            lidar_rays: 32 * 1800,
            noise: NoiseSpec::default(),
            k_graph: 8,
            sweep_k: DEFAULT_SWEEP.to_vec(),
            widths: Widths::default(),
            frustum: FrustumConfig::default(),
            bev: BevGrid::default(),
            recovery: RecoveryConfig::default(),
            bench: BenchConfig::default(),
            out: PathBuf::from("out"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub reps: usize,
    /// Cameras pushed through the dense camera stages.
    pub cameras: usize,
    /// Occupied-pixel counts for the KD-tree vs linear-scan comparison.
    pub knn_sizes: Vec<usize>,
    pub knn_queries: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            reps: 5,
            cameras: 1,
            knn_sizes: vec![1_000, 10_000, 100_000],
            knn_queries: 200,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub noise_rot_deg: Option<f64>,
    pub noise_trans_m: Option<f64>,
    pub bev_shift_max: Option<u32>,
    pub k_graph: Option<usize>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("config JSON: {e}")))
    }

    /// Reads a config file; relative rig paths resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        if let (Some(rig), Some(dir)) = (&cfg.rig, path.parent()) {
            if rig.is_relative() {
                cfg.rig = Some(dir.join(rig));
            }
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = &o.out {
            self.out = v.clone();
        }
        if let Some(v) = o.noise_rot_deg {
            self.noise.rot_deg = v;
        }
        if let Some(v) = o.noise_trans_m {
            self.noise.trans_m = v;
        }
        if let Some(v) = o.bev_shift_max {
            self.noise.bev_shift_max = v;
        }
        if let Some(v) = o.k_graph {
            self.k_graph = v;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.noise.validate()?;
        self.widths.validate()?;
        self.frustum.validate()?;
        self.bev.validate()?;
        self.recovery.validate()?;
        if self.k_graph == 0 {
            return Err(Error::config("k_graph must be >= 1"));
        }
        if self.sweep_k.is_empty() || self.sweep_k.contains(&0) {
            return Err(Error::config("sweep_k must list values >= 1"));
        }
        if self.lidar_rays == 0 {
            return Err(Error::config("lidar_rays must be >= 1"));
        }
        if !(self.focal > 0.0 && self.focal.is_finite()) {
            return Err(Error::config("focal must be finite and > 0"));
        }
        if self.bench.reps < 5 {
            return Err(Error::config("bench.reps must be >= 5"));
        }
        if self.bench.cameras == 0 || self.bench.knn_queries == 0 || self.bench.knn_sizes.is_empty() {
            return Err(Error::config("bench cameras, queries and sizes must be non-empty"));
        }
        if let Some(rig) = &self.rig {
            if !rig.is_file() {
                return Err(Error::config(format!("rig file {} does not exist", rig.display())));
            }
        }
        Ok(())
    }

    pub fn load_rig(&self) -> Result<Rig> {
        match &self.rig {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                Rig::from_json(&text)
            }
            None => Rig::surround(self.frustum.image.0, self.frustum.image.1, self.focal),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_default() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"kgraph": 8}"#).is_err());
    }

    #[test]
    fn partial_sections_fill_in() {
        let cfg = RunConfig::from_json(
            r#"{
                "noise": { "rot_deg": 1.0, "trans_m": 0.1, "bev_shift_max": 4 },
                "frustum": { "depth": { "start": 1.0, "stop": 60.0, "step": 0.5 }, "image": [256, 704], "downsample": 8 },
                "recovery": { "grid": 48, "margin": 8 },
                "bench": { "reps": 5, "cameras": 1 }
            }"#,
        )
        .unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.recovery, RecoveryConfig::default());
        assert_eq!(cfg.noise.bev_shift_max, 4);
    }

    #[test]
    fn overrides_win() {
        let mut cfg = RunConfig::default();
        cfg.apply(&Overrides {
            seed: Some(9),
            k_graph: Some(12),
            bev_shift_max: Some(2),
            ..Overrides::default()
        });
        assert_eq!((cfg.seed, cfg.k_graph, cfg.noise.bev_shift_max), (9, 12, 2));
    }

    #[test]
    fn missing_rig_is_a_config_error() {
        let cfg = RunConfig {
            rig: Some(PathBuf::from("/nonexistent/rig.json")),
            ..RunConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
