use std::time::Instant;

use bevalign::camera::{perturb_extrinsics, project_points};
use bevalign::global_align::recover_shift;
use bevalign::local_align::depth::synthetic_camera_features;
use bevalign::local_align::eval::camera_seed;
use bevalign::local_align::{
    bev_pool_rig, build_sparse_depth, depth_context_product, depthnet, dual_transform, knn_neighbors,
    nearest_brute_force, DepthNet, DualTransform, FrustumGrid, KdTree,
};
use bevalign::scene::{sample_lidar, Scene};
use bevalign::Result;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::commands::{ensure_dir, to_json, write_text};
use crate::config::RunConfig;

pub const STAGES: [&str; 5] = ["projection", "knn", "dual_depthnet", "bev_pool", "optimize"];

/// Workload description. Identical for identical configs.
#[derive(Debug, Serialize)]
pub struct BenchWorkload {
    pub seed: u64,
    pub reps: usize,
    pub cameras: usize,
    pub points: usize,
    pub occupied_pixels: usize,
    pub k_graph: usize,
    pub stages: Vec<String>,
    pub knn_sizes: Vec<usize>,
    pub knn_queries: usize,
}

#[derive(Debug, Serialize)]
pub struct StageTiming {
    pub name: String,
    pub median_ms: f64,
    pub samples_ms: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct KnnTiming {
    pub n: usize,
    pub kd_query_us: f64,
    pub brute_query_us: f64,
    /// KD-tree over linear scan, per query.
    pub ratio: f64,
}

#[derive(Debug, Serialize)]
pub struct Timing {
    pub stages: Vec<StageTiming>,
    pub knn_scaling: Vec<KnnTiming>,
}

/// Everything under `timing` is wall-clock and varies between runs.
#[derive(Debug, Serialize)]
pub struct BenchReport {
    pub workload: BenchWorkload,
    pub timing: Timing,
}

fn median_of(samples: &[f64]) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// One warm-up call, then `reps` timed calls in milliseconds.
fn time_reps<T>(reps: usize, mut f: impl FnMut() -> Result<T>) -> Result<Vec<f64>> {
    std::hint::black_box(f()?);
    (0..reps)
        .map(|_| {
            let t = Instant::now();
            std::hint::black_box(f()?);
            Ok(t.elapsed().as_secs_f64() * 1e3)
        })
        .collect()
}

fn stage(name: &str, samples: Vec<f64>) -> StageTiming {
    StageTiming {
        name: name.to_string(),
        median_ms: median_of(&samples),
        samples_ms: samples,
    }
}

/// Per-query KD-tree and linear-scan times on `n` distinct random pixels.
pub fn knn_scaling_point(n: usize, queries: usize, k: usize, reps: usize, seed: u64) -> Result<KnnTiming> {
    let side = ((4 * n) as f64).sqrt().ceil() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ n as u64);
    let points: Vec<[i64; 2]> = sample(&mut rng, side * side, n)
        .into_iter()
        .map(|i| [(i % side) as i64, (i / side) as i64])
        .collect();
    let picks: Vec<usize> = sample(&mut rng, n, queries.min(n)).into_vec();
    let tree = KdTree::build(&points);
    let kd = time_reps(reps, || {
        Ok(picks.iter().map(|&i| tree.nearest(points[i], k, Some(i)).len()).sum::<usize>())
    })?;
    let brute = time_reps(reps, || {
        Ok(picks
            .iter()
            .map(|&i| nearest_brute_force(&points, points[i], k, Some(i)).len())
            .sum::<usize>())
    })?;
    let per_query = |ms: f64| ms * 1e3 / picks.len() as f64;
    let (kd_us, brute_us) = (per_query(median_of(&kd)), per_query(median_of(&brute)));
    Ok(KnnTiming {
        n,
        kd_query_us: kd_us,
        brute_query_us: brute_us,
        ratio: kd_us / brute_us,
    })
}

/// Times the five pipeline stages on the first `bench.cameras` cameras.
pub fn bench(cfg: &RunConfig) -> Result<BenchReport> {
    cfg.validate()?;
    ensure_dir(&cfg.out)?;
    let reps = cfg.bench.reps;
    let mut rig = cfg.load_rig()?;
    rig.cameras.truncate(cfg.bench.cameras);
    let scene = Scene::generate(cfg.seed, &cfg.scene, rig)?;
    let cloud = sample_lidar(&scene, cfg.lidar_rays)?;
    let cams = &scene.rig.cameras;
    let size = cams[0].image_size();
    let noisy = cams
        .iter()
        .enumerate()
        .map(|(i, c)| perturb_extrinsics(c, &cfg.noise, camera_seed(cfg.seed, i)))
        .collect::<Result<Vec<_>>>()?;
    let project = || {
        let proj: Vec<_> = noisy.iter().map(|c| project_points(&cloud, c)).collect();
        build_sparse_depth(&proj, size)
    };
    let mut stages = vec![stage("projection", time_reps(reps, project)?)];
    let sparse = project()?;

    stages.push(stage("knn", time_reps(reps, || knn_neighbors(&sparse, cfg.k_graph))?));
    let table = knn_neighbors(&sparse, cfg.k_graph)?;

    let w = &cfg.widths;
    let bins = cfg.frustum.bins();
    let fsize = cfg.frustum.feature_size();
    let dual = DualTransform::seeded(cfg.k_graph, w.sk, cfg.seed)?;
    let net = DepthNet::seeded(w.cam + w.sk, w.hidden, bins, w.context, cfg.seed + 1000)?;
    let f_cam = synthetic_camera_features(cams.len(), w.cam, fsize, Some(&sparse.depth), cfg.seed)?;
    let camera_path = || {
        let d_sk = dual_transform(&sparse.depth, &table.depth, &dual)?;
        depthnet(&f_cam, &d_sk, &net)
    };
    stages.push(stage("dual_depthnet", time_reps(reps, camera_path)?));
    let (logits, ctx) = camera_path()?;

    let f_dc = depth_context_product(&logits, &ctx)?;
    let frusta = cams
        .iter()
        .map(|c| FrustumGrid::build(c, &cfg.frustum))
        .collect::<Result<Vec<_>>>()?;
    stages.push(stage("bev_pool", time_reps(reps, || bev_pool_rig(&f_dc, &frusta, &cfg.bev))?));

    stages.push(stage(
        "optimize",
        time_reps(reps, || recover_shift(&cfg.recovery, &cfg.noise, cfg.seed))?,
    ));

    let knn_scaling = cfg
        .bench
        .knn_sizes
        .iter()
        .map(|&n| knn_scaling_point(n, cfg.bench.knn_queries, cfg.k_graph, reps, cfg.seed))
        .collect::<Result<Vec<_>>>()?;

    let report = BenchReport {
        workload: BenchWorkload {
            seed: cfg.seed,
            reps,
            cameras: cams.len(),
            points: cloud.len(),
            occupied_pixels: sparse.occupied(),
            k_graph: cfg.k_graph,
            stages: STAGES.iter().map(|s| s.to_string()).collect(),
            knn_sizes: cfg.bench.knn_sizes.clone(),
            knn_queries: cfg.bench.knn_queries,
        },
        timing: Timing { stages, knn_scaling },
    };
    write_text(&cfg.out.join("bench.json"), &to_json(&report))?;
    Ok(report)
}
