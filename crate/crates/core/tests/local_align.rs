use bevalign::camera::{NoiseSpec, Rig};
use bevalign::local_align::eval::{project_scene, sweep_errors};
use bevalign::local_align::metrics::median;
use bevalign::local_align::{depth_context_product, depthnet, dual_transform, knn_neighbors, DepthNet, DualTransform};
use bevalign::scene::{sample_lidar, Scene, SceneGenConfig};
use bevalign::{Dims, FeatureMap};

fn scene(seed: u64) -> (Scene, bevalign::camera::PointCloud) {
    let rig = Rig::surround(256, 704, 500.0).unwrap();
    let scene = Scene::generate(seed, &SceneGenConfig::default(), rig).unwrap();
    let cloud = sample_lidar(&scene, 32 * 1200).unwrap();
    (scene, cloud)
}

#[test]
fn neighbor_depth_is_a_lookup_of_sparse_depth() {
    let (scene, cloud) = scene(4);
    let projected = project_scene(&scene, &cloud, &NoiseSpec::default(), 4).unwrap();
    let sparse = &projected.sparse;
    let table = knn_neighbors(sparse, 8).unwrap();
    for b in 0..sparse.cameras() {
        let coords = table.neighbor_coords(sparse, b);
        for (&(u, v), row) in sparse.coords[b].iter().zip(&coords) {
            for (j, &(nu, nv)) in row.iter().enumerate() {
                assert_eq!(
                    table.depth.get(b, j, v as usize, u as usize),
                    sparse.depth.get(b, 0, nv as usize, nu as usize)
                );
            }
        }
    }
    let occupied: usize = table.depth.data().iter().filter(|&&d| d != 0.0).count();
    assert!(occupied <= sparse.occupied() * 8);
}

#[test]
fn clean_calibration_agrees_with_ray_cast() {
    let mut errors = Vec::new();
    for seed in 0..3 {
        let (scene, cloud) = scene(seed);
        let p = project_scene(&scene, &cloud, &NoiseSpec::ZERO, seed).unwrap();
        let (_, e) = sweep_errors(&p, &[1]).unwrap().remove(0);
        errors.extend(e.iter().map(|e| e.e_self as f64));
    }
    assert!(median(&errors) < 0.05, "{}", median(&errors));
}

#[test]
fn best_error_shrinks_with_more_neighbors() {
    let (scene, cloud) = scene(7);
    let noise = NoiseSpec {
        rot_deg: 1.0,
        trans_m: 0.1,
        bev_shift_max: 0,
    };
    let p = project_scene(&scene, &cloud, &noise, 7).unwrap();
    let sweep = sweep_errors(&p, &[5, 8, 12, 16, 25]).unwrap();
    for (_, errs) in &sweep {
        assert!(errs.iter().all(|e| e.e_best <= e.e_self));
    }
    for pair in sweep.windows(2) {
        for (a, b) in pair[0].1.iter().zip(&pair[1].1) {
            assert!(b.e_best <= a.e_best);
        }
    }
}

#[test]
fn camera_path_shapes() {
    let (scene, cloud) = scene(2);
    let p = project_scene(&scene, &cloud, &NoiseSpec::ZERO, 2).unwrap();
    let table = knn_neighbors(&p.sparse, 8).unwrap();
    let dual = DualTransform::seeded(8, 32, 1).unwrap();
    let d_sk = dual_transform(&p.sparse.depth, &table.depth, &dual).unwrap();
    assert_eq!(d_sk.dims(), Dims::new(6, 32, 32, 88));
    let f_cam = FeatureMap::zeros(Dims::new(6, 64, 32, 88)).unwrap();
    let net = DepthNet::seeded(96, 16, 118, 80, 2).unwrap();
    let (logits, ctx) = depthnet(&f_cam, &d_sk, &net).unwrap();
    assert_eq!((logits.dims().channels, ctx.dims().channels), (118, 80));
    let f_dc = depth_context_product(&logits, &ctx).unwrap();
    assert_eq!(f_dc.dims().channels, 118 * 80);
}
