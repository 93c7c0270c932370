use std::fmt::Write as _;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use bevalign::camera::{PointCloud, Rig};
use bevalign::global_align::{recover_shift, StopReason};
use bevalign::io::{write_feature_map, Tensor};
use bevalign::local_align::eval::{project_scene, sweep_errors};
use bevalign::local_align::metrics::{summarize, DepthErrorReport};
use bevalign::scene::{render_true_depth, sample_lidar, Scene, SceneFile};
use bevalign::{Error, Result};
use serde::Serialize;

use crate::config::RunConfig;

pub const RIG_FILE: &str = "rig.json";
pub const SCENE_FILE: &str = "scene.json";
pub const CLOUD_FILE: &str = "cloud.gbev";

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub(crate) fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serializes") + "\n"
}

fn read_artifact(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| {
        if e.kind() == ErrorKind::NotFound {
            let hint = std::io::Error::new(
                ErrorKind::NotFound,
                "artifact missing; run `bevalign simulate` with the same --out first",
            );
            Error::io(path, hint)
        } else {
            Error::io(path, e)
        }
    })
}

#[derive(Debug, Serialize)]
pub struct SimulateSummary {
    pub seed: u64,
    pub boxes: usize,
    pub cameras: usize,
    pub points: usize,
    pub depth_nonzero_fraction: Vec<f64>,
    pub files: Vec<String>,
}

/// Generates a scene, samples LiDAR, renders per-camera depth and writes all of it under `cfg.out`.
pub fn simulate(cfg: &RunConfig) -> Result<SimulateSummary> {
    cfg.validate()?;
    let rig = cfg.load_rig()?;
    let scene = Scene::generate(cfg.seed, &cfg.scene, rig)?;
    let cloud = sample_lidar(&scene, cfg.lidar_rays)?;
    let out = &cfg.out;
    ensure_dir(&out.join("depth"))?;
    write_text(&out.join(RIG_FILE), &scene.rig.to_json())?;
    write_text(&out.join(SCENE_FILE), &scene.to_file(RIG_FILE).to_json())?;
    cloud.to_tensor().write(out.join(CLOUD_FILE))?;
    let mut files = vec![RIG_FILE.to_string(), SCENE_FILE.to_string(), CLOUD_FILE.to_string()];
    let mut fractions = Vec::with_capacity(scene.rig.cameras.len());
    for (i, cam) in scene.rig.cameras.iter().enumerate() {
        let depth = render_true_depth(&scene, cam)?;
        let nonzero = depth.data().iter().filter(|&&d| d > 0.0).count();
        fractions.push(nonzero as f64 / depth.data().len() as f64);
        let name = format!("depth/cam{i}.gbev");
        write_feature_map(&depth, out.join(&name))?;
        files.push(name);
    }
    let summary = SimulateSummary {
        seed: cfg.seed,
        boxes: scene.boxes.len(),
        cameras: scene.rig.cameras.len(),
        points: cloud.len(),
        depth_nonzero_fraction: fractions,
        files,
    };
    write_text(&out.join("simulate.json"), &to_json(&summary))?;
    Ok(summary)
}

/// Loads the scene and cloud written by [`simulate`].
pub fn load_simulation(dir: &Path) -> Result<(Scene, PointCloud)> {
    let scene_path = dir.join(SCENE_FILE);
    let text = String::from_utf8(read_artifact(&scene_path)?)
        .map_err(|_| Error::format(format!("{} is not UTF-8", scene_path.display())))?;
    let file = SceneFile::from_json(&text)?;
    let rig_path = dir.join(&file.rig);
    let rig_text = String::from_utf8(read_artifact(&rig_path)?)
        .map_err(|_| Error::format(format!("{} is not UTF-8", rig_path.display())))?;
    let scene = file.into_scene(Rig::from_json(&rig_text)?)?;
    let cloud = PointCloud::from_tensor(&Tensor::decode(&read_artifact(&dir.join(CLOUD_FILE))?)?)?;
    Ok((scene, cloud))
}

#[derive(Debug, Serialize)]
pub struct LocalAlignReport {
    pub seed: u64,
    pub rot_deg: f64,
    pub trans_m: f64,
    pub k_graph: usize,
    pub cameras: Vec<DepthErrorReport>,
    pub aggregate: DepthErrorReport,
    pub sweep: Vec<DepthErrorReport>,
}

/// Perturbed projection of the simulated cloud, scored against the clean render.
pub fn localalign_eval(cfg: &RunConfig, sweep: bool) -> Result<LocalAlignReport> {
    cfg.validate()?;
    let (scene, cloud) = load_simulation(&cfg.out)?;
    let projected = project_scene(&scene, &cloud, &cfg.noise, cfg.seed)?;
    let mut ks = if sweep { cfg.sweep_k.clone() } else { Vec::new() };
    ks.push(cfg.k_graph);
    ks.sort_unstable();
    ks.dedup();
    let errors = sweep_errors(&projected, &ks)?;
    let at_k = &errors.iter().find(|(k, _)| *k == cfg.k_graph).expect("k_graph is in the sweep").1;
    let cameras = (0..projected.sparse.cameras())
        .map(|b| {
            let mine: Vec<_> = at_k.iter().filter(|e| e.camera as usize == b).copied().collect();
            summarize(&mine, cfg.k_graph)
        })
        .collect();
    let report = LocalAlignReport {
        seed: cfg.seed,
        rot_deg: cfg.noise.rot_deg,
        trans_m: cfg.noise.trans_m,
        k_graph: cfg.k_graph,
        cameras,
        aggregate: summarize(at_k, cfg.k_graph),
        sweep: if sweep {
            errors.iter().filter(|(k, _)| cfg.sweep_k.contains(k)).map(|(k, e)| summarize(e, *k)).collect()
        } else {
            Vec::new()
        },
    };
    write_text(&cfg.out.join("localalign.json"), &to_json(&report))?;
    let mut csv = String::from("k,pixels,median_self,mean_self,median_best,mean_best,improved_fraction\n");
    for r in report.sweep.iter().chain(std::iter::once(&report.aggregate)) {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            r.k, r.pixels, r.median_self, r.mean_self, r.median_best, r.mean_best, r.improved_fraction
        );
    }
    write_text(&cfg.out.join("localalign.csv"), &csv)?;
    Ok(report)
}

#[derive(Debug, Serialize)]
pub struct RecoverReport {
    pub injected_u: i64,
    pub injected_v: i64,
    pub recovered_u: f64,
    pub recovered_v: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub iters: usize,
    pub stop: StopReason,
    pub loss_log: PathBuf,
}

/// Shifts the camera block of synthetic BEV features and recovers the shift.
pub fn globalalign_recover(cfg: &RunConfig) -> Result<RecoverReport> {
    cfg.validate()?;
    ensure_dir(&cfg.out)?;
    let r = recover_shift(&cfg.recovery, &cfg.noise, cfg.seed)?;
    let log_path = cfg.out.join("align_log.jsonl");
    write_text(&log_path, &r.result.log_jsonl())?;
    let mut csv = String::from("iter,loss\n");
    for (i, l) in r.result.losses.iter().enumerate() {
        let _ = writeln!(csv, "{i},{l}");
    }
    write_text(&cfg.out.join("loss_curve.csv"), &csv)?;
    write_feature_map(r.result.offsets.as_map(), cfg.out.join("offsets.gbev"))?;
    let report = RecoverReport {
        injected_u: r.injected.0,
        injected_v: r.injected.1,
        recovered_u: r.recovered.0,
        recovered_v: r.recovered.1,
        initial_loss: r.result.initial_loss(),
        final_loss: r.result.final_loss(),
        iters: r.result.iters,
        stop: r.result.stop,
        loss_log: log_path,
    };
    write_text(&cfg.out.join("globalalign.json"), &to_json(&report))?;
    Ok(report)
}
