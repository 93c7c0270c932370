use bevalign::camera::{perturb_extrinsics, project_points, rotation_angle_between, CameraModel, NoiseSpec, PointCloud};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn axis_camera() -> CameraModel {
    let k = Matrix3::new(500.0, 0.0, 352.0, 0.0, 500.0, 128.0, 0.0, 0.0, 1.0);
    CameraModel::new(k, Matrix3::identity(), Vector3::zeros(), 1.0, 256, 704).unwrap()
}

fn project_one(cam: &CameraModel, p: [f64; 3]) -> bevalign::camera::Projected {
    let cloud = PointCloud::new(vec![Vector3::from(p)]).unwrap();
    project_points(&cloud, cam).points[0]
}

#[test]
fn hand_evaluated_cases() {
    let cam = axis_camera();
    let p = project_one(&cam, [0.0, 0.0, 10.0]);
    assert!(p.valid);
    assert!((p.u - 352.0).abs() < 1e-6 && (p.v - 128.0).abs() < 1e-6 && (p.z_c - 10.0).abs() < 1e-6);

    // u = 500 * 2 / 10 + 352, v = 500 * 1 / 10 + 128
    let p = project_one(&cam, [2.0, 1.0, 10.0]);
    assert!(p.valid);
    assert!((p.u - 452.0).abs() < 1e-6 && (p.v - 178.0).abs() < 1e-6 && (p.z_c - 10.0).abs() < 1e-6);

    assert!(!project_one(&cam, [0.0, 0.0, -5.0]).valid);
}

#[test]
fn out_of_bounds_after_rounding_is_invalid() {
    let cam = axis_camera();
    // u = 703.4 rounds to 703, u = 703.5 rounds to 704
    assert!(project_one(&cam, [(703.4 - 352.0) / 50.0, 0.0, 10.0]).valid);
    assert!(!project_one(&cam, [(703.5 - 352.0) / 50.0, 0.0, 10.0]).valid);
}

#[test]
fn half_scale_halves_pixels() {
    let cam = axis_camera();
    let half = cam.with_scale(0.5, 128, 352).unwrap();
    for p in [[1.0, -0.5, 7.0], [-3.0, 2.0, 20.0], [0.25, 0.75, 3.0]] {
        let a = project_one(&cam, p);
        let b = project_one(&half, p);
        assert_eq!(b.u, a.u * 0.5);
        assert_eq!(b.v, a.v * 0.5);
        assert_eq!(b.z_c, a.z_c);
    }
}

#[test]
fn back_projection_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let cam = CameraModel::looking_along(0.7, Vector3::new(0.3, -0.2, -0.3), 480.0, 256, 704).unwrap();
    let mut checked = 0;
    while checked < 1000 {
        let p = Vector3::new(rng.random_range(-40.0..40.0), rng.random_range(-40.0..40.0), rng.random_range(-3.0..3.0));
        let proj = project_one(&cam, p.into());
        if !proj.valid {
            continue;
        }
        let back = cam.back_project(proj.u, proj.v, proj.z_c);
        assert!((back - p).norm() < 1e-4, "{p:?} -> {back:?}");
        checked += 1;
    }
}

#[test]
fn perturbation_stays_small_and_seeded() {
    let cam = CameraModel::looking_along(1.2, Vector3::new(0.1, 0.4, -0.3), 500.0, 256, 704).unwrap();
    let noise = NoiseSpec {
        rot_deg: 1.0,
        trans_m: 0.1,
        bev_shift_max: 0,
    };
    for seed in 0..1000 {
        let p = perturb_extrinsics(&cam, &noise, seed).unwrap();
        assert!(rotation_angle_between(cam.rotation(), p.rotation()).to_degrees() <= 5.0);
        let r = p.rotation();
        assert!((r * r.transpose() - Matrix3::identity()).abs().max() < 1e-9);
    }
    assert_eq!(perturb_extrinsics(&cam, &noise, 5).unwrap(), perturb_extrinsics(&cam, &noise, 5).unwrap());
    assert_eq!(perturb_extrinsics(&cam, &NoiseSpec::ZERO, 5).unwrap(), cam);
}
