use approx::assert_relative_eq;
use nalgebra::{Matrix3, Vector3};
use ppest::geometry::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Standalone pinhole projection with its own rotation matrix.
fn oracle_project(point: [f64; 3], position: [f64; 3], rpy: [f64; 3], focal: f64) -> [f64; 2] {
    let [r, p, y] = rpy;
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, r.cos(), -r.sin(), 0.0, r.sin(), r.cos());
    let ry = Matrix3::new(p.cos(), 0.0, p.sin(), 0.0, 1.0, 0.0, -p.sin(), 0.0, p.cos());
    let rz = Matrix3::new(y.cos(), -y.sin(), 0.0, y.sin(), y.cos(), 0.0, 0.0, 0.0, 1.0);
    let d = Vector3::from(point) - Vector3::from(position);
    let c = (rz * ry * rx).transpose() * d;
    [focal * c.y / c.x, focal * c.z / c.x]
}

#[test]
fn hand_computed_corner_projection() {
    let pose = Pose::at(-1000.0, 0.0, 26.2);
    let y = project(&WorldPoint::new(0.0, 30.0, 0.0), &pose, &CameraModel::default()).unwrap();
    assert_relative_eq!(y.right, 90.0, epsilon = 1e-10);
    assert_relative_eq!(y.up, -78.6, epsilon = 1e-10);
    let o = oracle_project([0.0, 30.0, 0.0], [-1000.0, 0.0, 26.2], [0.0; 3], 3000.0);
    assert_relative_eq!(y.right, o[0], epsilon = 1e-10);
    assert_relative_eq!(y.up, o[1], epsilon = 1e-10);
}

#[test]
fn optical_axis_projects_to_center() {
    for d in [0.5, 10.0, 1e4] {
        let y = project(
            &WorldPoint::new(d, 0.0, 0.0),
            &Pose::at(0.0, 0.0, 0.0),
            &CameraModel::default(),
        )
        .unwrap();
        assert_eq!((y.right, y.up), (0.0, 0.0));
    }
}

#[test]
fn sampled_poses_stay_in_the_cone() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let corners = runway_corners(&RunwaySpec::default());
    let (lo, hi) = (1f64.to_radians().tan(), 2f64.to_radians().tan());
    let ten = 10f64.to_radians();
    for _ in 0..10_000 {
        let pose = sample_pose(&mut rng);
        let p = pose.position;
        assert!((-6000.0..=-4000.0).contains(&p.x));
        let slope = p.z / p.x.abs();
        assert!(slope >= lo - 1e-15 && slope <= hi + 1e-15);
        assert!(p.y.abs() <= 20f64.to_radians().tan() * p.x.abs() + 1e-9);
        assert!(p.z > 69.8);
        let a = pose.attitude;
        assert!(a.roll.abs() <= ten && a.pitch.abs() <= ten && a.yaw.abs() <= ten);
        assert!(project_all(&corners, &pose, &CameraModel::default()).is_ok());
    }
}

fn pose_strategy() -> impl Strategy<Value = Pose> {
    any::<u64>().prop_map(|s| sample_pose(&mut ChaCha8Rng::seed_from_u64(s)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn project_all_matches_independent_projection(pose in pose_strategy()) {
        let corners = runway_corners(&RunwaySpec::default());
        let y = project_all(&corners, &pose, &CameraModel::default()).unwrap();
        let a = pose.attitude;
        for (i, c) in corners.iter().enumerate() {
            let o = oracle_project(
                [c.alongtrack, c.crosstrack, c.altitude],
                pose.position.into(),
                [a.roll, a.pitch, a.yaw],
                3000.0,
            );
            prop_assert!((y[2 * i] - o[0]).abs() <= 1e-9 * o[0].abs().max(1.0));
            prop_assert!((y[2 * i + 1] - o[1]).abs() <= 1e-9 * o[1].abs().max(1.0));
            let single = project(c, &pose, &CameraModel::default()).unwrap();
            prop_assert_eq!((y[2 * i], y[2 * i + 1]), (single.right, single.up));
        }
    }

    #[test]
    fn jacobian_matches_finite_differences(pose in pose_strategy()) {
        let scene = Scene::new(runway_corners(&RunwaySpec::default()), CameraModel::default(), pose.attitude);
        let j = scene.jacobian(&pose.position).unwrap();
        let fd = scene.jacobian_fd(&pose.position).unwrap();
        for (a, b) in j.iter().zip(fd.iter()) {
            prop_assert!((a - b).abs() <= 1e-5 * a.abs().max(1e-3), "{} vs {}", a, b);
        }
        let free = projection_jacobian(&pose, &runway_corners(&RunwaySpec::default()), &CameraModel::default()).unwrap();
        prop_assert_eq!(free, j);
    }

    #[test]
    fn camera_shift_mirrors_corner_shift(pose in pose_strategy(), corner in 0usize..4) {
        let corners = runway_corners(&RunwaySpec::default());
        let cam = CameraModel::default();
        let j = projection_jacobian(&pose, &corners, &cam).unwrap();
        let h = 1e-3;
        let c = corners[corner];
        let shifted = |dx: f64| project(&WorldPoint::new(c.alongtrack + dx, c.crosstrack, c.altitude), &pose, &cam).unwrap();
        let (a, b) = (shifted(h), shifted(-h));
        let d_right = (a.right - b.right) / (2.0 * h);
        let d_up = (a.up - b.up) / (2.0 * h);
        prop_assert!((j[(2 * corner, 0)] + d_right).abs() <= 1e-5 * d_right.abs().max(1e-3));
        prop_assert!((j[(2 * corner + 1, 0)] + d_up).abs() <= 1e-5 * d_up.abs().max(1e-3));
    }
}
