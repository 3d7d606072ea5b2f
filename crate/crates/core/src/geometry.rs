//! Pinhole projection of the four runway corners.
//!
//! World frame: `alongtrack` runs from the runway threshold towards the far
//! end, `crosstrack` is to the right when looking down the runway, and
//! `altitude` is up. The camera frame at zero attitude coincides with the
//! world axes: x′ forward, y′ right, z′ up.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Dual, Real};
use crate::error::{Error, Result};
use crate::{Matrix8x3, Vector8};

/// Number of runway corners observed.
pub const NUM_CORNERS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldPoint {
    pub alongtrack: f64,
    pub crosstrack: f64,
    pub altitude: f64,
}

impl WorldPoint {
    pub fn new(alongtrack: f64, crosstrack: f64, altitude: f64) -> Self {
        Self {
            alongtrack,
            crosstrack,
            altitude,
        }
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.alongtrack, self.crosstrack, self.altitude)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImagePoint {
    pub right: f64,
    pub up: f64,
}

/// Camera attitude in radians. Known, never estimated.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Attitude {
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

impl Attitude {
    pub fn new(roll: f64, pitch: f64, yaw: f64) -> Self {
        Self { roll, pitch, yaw }
    }

    /// Camera-to-world rotation, `Rz(yaw) · Ry(pitch) · Rx(roll)` (intrinsic
    /// yaw, then pitch, then roll).
    pub fn rotation(&self) -> Matrix3<f64> {
        let (sr, cr) = self.roll.sin_cos();
        let (sp, cp) = self.pitch.sin_cos();
        let (sy, cy) = self.yaw.sin_cos();
        let rz = Matrix3::new(cy, -sy, 0.0, sy, cy, 0.0, 0.0, 0.0, 1.0);
        let ry = Matrix3::new(cp, 0.0, sp, 0.0, 1.0, 0.0, -sp, 0.0, cp);
        let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cr, -sr, 0.0, sr, cr);
        rz * ry * rx
    }
}

/// Camera position (the estimated parameter) plus its known attitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub attitude: Attitude,
}

impl Pose {
    pub fn new(position: Vector3<f64>, attitude: Attitude) -> Self {
        Self { position, attitude }
    }

    pub fn at(alongtrack: f64, crosstrack: f64, altitude: f64) -> Self {
        Self::new(Vector3::new(alongtrack, crosstrack, altitude), Attitude::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    /// Focal length in pixels.
    pub focal_length: f64,
}

impl Default for CameraModel {
    fn default() -> Self {
        Self { focal_length: 3000.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunwaySpec {
    pub length: f64,
    pub width: f64,
}

impl Default for RunwaySpec {
    fn default() -> Self {
        Self {
            length: 3500.0,
            width: 60.0,
        }
    }
}

/// Corners in the order near-left, near-right, far-left, far-right.
pub fn runway_corners(spec: &RunwaySpec) -> [WorldPoint; NUM_CORNERS] {
    let half = spec.width / 2.0;
    [
        WorldPoint::new(0.0, -half, 0.0),
        WorldPoint::new(0.0, half, 0.0),
        WorldPoint::new(spec.length, -half, 0.0),
        WorldPoint::new(spec.length, half, 0.0),
    ]
}

/// Projects `point` for a camera at `position` with camera-to-world
/// rotation `rotation`. Generic so that the same code yields derivatives
/// when evaluated over dual numbers.
fn project_with<T: Real>(
    point: &WorldPoint,
    corner: usize,
    position: &[T; 3],
    rotation: &Matrix3<f64>,
    focal_length: f64,
) -> Result<[T; 2]> {
    let world = [point.alongtrack, point.crosstrack, point.altitude];
    let delta: [T; 3] = std::array::from_fn(|k| T::from(world[k]) - position[k]);
    // camera = Rᵀ · delta
    let cam: [T; 3] = std::array::from_fn(|i| {
        delta[0] * rotation[(0, i)] + delta[1] * rotation[(1, i)] + delta[2] * rotation[(2, i)]
    });
    let depth = cam[0].value();
    if !(depth > 0.0) {
        return Err(Error::PointBehindCamera { corner, depth });
    }
    Ok([cam[1] / cam[0] * focal_length, cam[2] / cam[0] * focal_length])
}

pub fn project(point: &WorldPoint, pose: &Pose, cam: &CameraModel) -> Result<ImagePoint> {
    let p = pose.position;
    let [right, up] = project_with(point, 0, &[p.x, p.y, p.z], &pose.attitude.rotation(), cam.focal_length)?;
    Ok(ImagePoint { right, up })
}

/// Stacks `[right₁, up₁, …, right₄, up₄]` in corner order.
pub fn project_all(corners: &[WorldPoint; NUM_CORNERS], pose: &Pose, cam: &CameraModel) -> Result<Vector8> {
    Scene::new(*corners, *cam, pose.attitude).project_all(&pose.position)
}

/// ∂(project_all)/∂position, in pixels per meter.
pub fn projection_jacobian(pose: &Pose, corners: &[WorldPoint; NUM_CORNERS], cam: &CameraModel) -> Result<Matrix8x3> {
    Scene::new(*corners, *cam, pose.attitude).jacobian(&pose.position)
}

/// Everything about the observation geometry except the camera position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scene {
    pub corners: [WorldPoint; NUM_CORNERS],
    pub camera: CameraModel,
    pub attitude: Attitude,
    rotation: Matrix3<f64>,
}

impl Scene {
    pub fn new(corners: [WorldPoint; NUM_CORNERS], camera: CameraModel, attitude: Attitude) -> Self {
        Self {
            corners,
            camera,
            attitude,
            rotation: attitude.rotation(),
        }
    }

    pub fn project_all(&self, position: &Vector3<f64>) -> Result<Vector8> {
        let pos = [position.x, position.y, position.z];
        let mut out = Vector8::zeros();
        for (i, corner) in self.corners.iter().enumerate() {
            let [r, u] = project_with(corner, i, &pos, &self.rotation, self.camera.focal_length)?;
            out[2 * i] = r;
            out[2 * i + 1] = u;
        }
        Ok(out)
    }

    /// Projection and its Jacobian from one forward-mode pass.
    pub fn project_with_jacobian(&self, position: &Vector3<f64>) -> Result<(Vector8, Matrix8x3)> {
        let pos = Dual::<3>::seed([position.x, position.y, position.z]);
        let mut value = Vector8::zeros();
        let mut jac = Matrix8x3::zeros();
        for (i, corner) in self.corners.iter().enumerate() {
            let pair = project_with(corner, i, &pos, &self.rotation, self.camera.focal_length)?;
            for (c, d) in pair.iter().enumerate() {
                let row = 2 * i + c;
                value[row] = d.re;
                for j in 0..3 {
                    jac[(row, j)] = d.eps[j];
                }
            }
        }
        Ok((value, jac))
    }

    pub fn jacobian(&self, position: &Vector3<f64>) -> Result<Matrix8x3> {
        self.project_with_jacobian(position).map(|(_, j)| j)
    }

    /// Central finite-difference Jacobian with step `1e-4·max(1, |βⱼ|)`.
    pub fn jacobian_fd(&self, position: &Vector3<f64>) -> Result<Matrix8x3> {
        let mut jac = Matrix8x3::zeros();
        for j in 0..3 {
            let h = 1e-4 * position[j].abs().max(1.0);
            let mut hi = *position;
            let mut lo = *position;
            hi[j] += h;
            lo[j] -= h;
            let col = (self.project_all(&hi)? - self.project_all(&lo)?) / (2.0 * h);
            jac.set_column(j, &col);
        }
        Ok(jac)
    }
}

/// Draws a camera pose from the approach cone in front of the threshold.
pub fn sample_pose<R: Rng + ?Sized>(rng: &mut R) -> Pose {
    let alongtrack = rng.random_range(-6000.0..=-4000.0);
    let distance = f64::abs(alongtrack);
    let cross_limit = 20f64.to_radians().tan();
    let crosstrack = rng.random_range(-cross_limit..=cross_limit) * distance;
    let altitude = rng.random_range(1f64.to_radians().tan()..=2f64.to_radians().tan()) * distance;
    let ten = 10f64.to_radians();
    let attitude = Attitude {
        roll: rng.random_range(-ten..=ten),
        pitch: rng.random_range(-ten..=ten),
        yaw: rng.random_range(-ten..=ten),
    };
    Pose::new(Vector3::new(alongtrack, crosstrack, altitude), attitude)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn corners_follow_documented_layout() {
        let c = runway_corners(&RunwaySpec::default());
        assert_eq!(c[0], WorldPoint::new(0.0, -30.0, 0.0));
        assert_eq!(c[1], WorldPoint::new(0.0, 30.0, 0.0));
        assert_eq!(c[2], WorldPoint::new(3500.0, -30.0, 0.0));
        assert_eq!(c[3], WorldPoint::new(3500.0, 30.0, 0.0));

        let c = runway_corners(&RunwaySpec {
            length: 1.0,
            width: 2.0,
        });
        assert_eq!(c[0], WorldPoint::new(0.0, -1.0, 0.0));
        assert_eq!(c[3], WorldPoint::new(1.0, 1.0, 0.0));

        let c = runway_corners(&RunwaySpec {
            length: 10.0,
            width: 0.0,
        });
        assert_eq!(c[0], c[1]);
        assert_eq!(c[2], c[3]);
    }

    #[test]
    fn project_direct_substitution() {
        let cam = CameraModel { focal_length: 1.0 };
        let y = project(&WorldPoint::new(2.0, 1.0, 0.5), &Pose::at(0.0, 0.0, 0.0), &cam).unwrap();
        assert_relative_eq!(y.right, 0.5, epsilon = 1e-15);
        assert_relative_eq!(y.up, 0.25, epsilon = 1e-15);

        for d in [0.1, 1.0, 1234.5] {
            let y = project(&WorldPoint::new(d, 0.0, 0.0), &Pose::at(0.0, 0.0, 0.0), &cam).unwrap();
            assert_eq!((y.right, y.up), (0.0, 0.0));
        }
    }

    #[test]
    fn point_behind_camera_is_rejected() {
        let cam = CameraModel::default();
        let err = project(&WorldPoint::new(-5.0, 0.0, 0.0), &Pose::at(0.0, 0.0, 0.0), &cam);
        assert!(matches!(err, Err(Error::PointBehindCamera { .. })));
        let err = project(&WorldPoint::new(0.0, 1.0, 0.0), &Pose::at(0.0, 0.0, 0.0), &cam);
        assert!(matches!(err, Err(Error::PointBehindCamera { .. })));
    }

    #[test]
    fn degenerate_runway_projects_to_zero() {
        let corners = runway_corners(&RunwaySpec {
            length: 0.0,
            width: 0.0,
        });
        let y = project_all(&corners, &Pose::at(-100.0, 0.0, 0.0), &CameraModel::default()).unwrap();
        assert_eq!(y, Vector8::zeros());
    }

    #[test]
    fn scaling_camera_frame_leaves_projection_unchanged() {
        let cam = CameraModel::default();
        let pose = Pose::at(0.0, 0.0, 0.0);
        let p = WorldPoint::new(700.0, -20.0, 13.0);
        let a = project(&p, &pose, &cam).unwrap();
        for c in [0.01, 3.0, 1e4] {
            let q = WorldPoint::new(700.0 * c, -20.0 * c, 13.0 * c);
            let b = project(&q, &pose, &cam).unwrap();
            assert_relative_eq!(a.right, b.right, max_relative = 1e-12);
            assert_relative_eq!(a.up, b.up, max_relative = 1e-12);
        }
    }

    #[test]
    fn jacobian_scales_with_focal_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pose = sample_pose(&mut rng);
        let corners = runway_corners(&RunwaySpec::default());
        let j1 = projection_jacobian(&pose, &corners, &CameraModel { focal_length: 1500.0 }).unwrap();
        let j2 = projection_jacobian(&pose, &corners, &CameraModel { focal_length: 3000.0 }).unwrap();
        assert_relative_eq!(j2, j1 * 2.0, max_relative = 1e-14);
    }

    #[test]
    fn sampled_pose_is_reproducible() {
        let a = sample_pose(&mut ChaCha8Rng::seed_from_u64(42));
        let b = sample_pose(&mut ChaCha8Rng::seed_from_u64(42));
        assert_eq!(a, b);
    }

    #[test]
    fn rotation_is_orthonormal() {
        let r = Attitude::new(0.1, -0.15, 0.17).rotation();
        assert_relative_eq!(r.transpose() * r, Matrix3::identity(), epsilon = 1e-15);
        assert_relative_eq!(r.determinant(), 1.0, epsilon = 1e-15);
    }
}
