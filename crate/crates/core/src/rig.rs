//! Dual-rotation capture platform geometry.
//!
//! The capture rig composes two rotations: `R_a` for the camera-object rig
//! (changes the effective light direction) and `R_b` for the object turntable
//! (changes the view). All rotations are about the origin, so the object
//! center stays fixed by construction.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A proper rotation (orthonormal, det +1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Validates orthonormality and determinant before wrapping.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        let rtr = m.transpose() * m;
        let id = Matrix3::<f64>::identity();
        for i in 0..3 {
            for j in 0..3 {
                let delta: f64 = rtr[(i, j)] - id[(i, j)];
                if delta.abs() > 1e-9 {
                    return Err(Error::validation("rotation matrix is not orthonormal"));
                }
            }
        }
        if (m.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::validation("rotation matrix determinant is not +1"));
        }
        Ok(Rotation(m))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Rotation {
        Rotation(self.0.transpose())
    }

    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    pub fn compose(&self, other: &Rotation) -> Rotation {
        Rotation(self.0 * other.0)
    }

    /// Row-major 9-element form used by the dataset manifest.
    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    pub fn from_row_major(v: &[f64; 9]) -> Result<Self> {
        Rotation::from_matrix(Matrix3::new(
            v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8],
        ))
    }
}

/// Rodrigues rotation about a unit axis, angle in degrees.
pub fn rotation_about_axis(axis: &Vector3<f64>, angle_deg: f64) -> Result<Rotation> {
    if (axis.norm() - 1.0).abs() > 1e-6 {
        return Err(Error::validation(format!(
            "rotation axis must be unit length, got norm {}",
            axis.norm()
        )));
    }
    let theta = angle_deg.to_radians();
    let (s, c) = theta.sin_cos();
    let k = axis;
    // K is the cross-product matrix of the axis.
    let kx = Matrix3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
    let m = Matrix3::identity() + kx * s + kx * kx * (1.0 - c);
    Ok(Rotation(m))
}

/// One rig/turntable pose, indices are 1-based.
#[derive(Debug, Clone)]
pub struct RigPose {
    pub rig_step_index: usize,
    pub turntable_step_index: usize,
    pub rig_angle_deg: f64,
    pub turntable_angle_deg: f64,
    pub r_a: Rotation,
    pub r_b: Rotation,
}

impl RigPose {
    pub fn identity() -> Self {
        RigPose {
            rig_step_index: 1,
            turntable_step_index: 1,
            rig_angle_deg: 0.0,
            turntable_angle_deg: 0.0,
            r_a: Rotation::identity(),
            r_b: Rotation::identity(),
        }
    }

    /// Composed light rotation `R_a * R_b`.
    pub fn light_rotation(&self) -> Rotation {
        self.r_a.compose(&self.r_b)
    }
}

/// A camera ray with unit direction.
#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
}

impl Ray {
    pub fn new(origin: Vector3<f64>, direction: Vector3<f64>) -> Result<Self> {
        let n = direction.norm();
        if n < 1e-12 {
            return Err(Error::validation("ray direction has zero length"));
        }
        Ok(Ray {
            origin,
            direction: direction / n,
        })
    }

    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }
}

/// Camera ray re-expressed in the object frame: `o' = R_b^T o`, `d' = R_b^T d`.
pub fn equivalent_ray(ray: &Ray, r_b: &Rotation) -> Ray {
    let rt = r_b.transpose();
    let d = rt.apply(&ray.direction);
    Ray {
        origin: rt.apply(&ray.origin),
        direction: d / d.norm(),
    }
}

/// Transformed incoming light direction `omega' = R_a R_b omega`.
pub fn world_light_direction(omega: &Vector3<f64>, pose: &RigPose) -> Vector3<f64> {
    let w = pose.light_rotation().apply(omega);
    w / w.norm()
}

/// Rotation axes of the platform. Defaults: turntable about world +Z (up),
/// rig about world +Y.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RigAxes {
    pub rig_axis: [f64; 3],
    pub turntable_axis: [f64; 3],
}

impl Default for RigAxes {
    fn default() -> Self {
        RigAxes {
            rig_axis: [0.0, 1.0, 0.0],
            turntable_axis: [0.0, 0.0, 1.0],
        }
    }
}

impl RigAxes {
    pub fn rig_axis_vec(&self) -> Vector3<f64> {
        Vector3::new(self.rig_axis[0], self.rig_axis[1], self.rig_axis[2])
    }

    pub fn turntable_axis_vec(&self) -> Vector3<f64> {
        Vector3::new(
            self.turntable_axis[0],
            self.turntable_axis[1],
            self.turntable_axis[2],
        )
    }
}

/// Full capture schedule: M rig steps by N turntable steps.
#[derive(Debug, Clone)]
pub struct CaptureSchedule {
    pub rig_steps: usize,
    pub turntable_steps: usize,
    pub rig_step_deg: f64,
    pub turntable_step_deg: f64,
    pub axes: RigAxes,
    pub poses: Vec<RigPose>,
}

/// Builds all M*N poses in row-major order (rig step outer, turntable inner).
pub fn build_schedule(
    rig_steps: usize,
    turntable_steps: usize,
    rig_step_deg: f64,
    turntable_step_deg: f64,
    axes: &RigAxes,
) -> Result<CaptureSchedule> {
    if rig_steps == 0 || turntable_steps == 0 {
        return Err(Error::validation("schedule step counts must be >= 1"));
    }
    let rig_axis = axes.rig_axis_vec();
    let tt_axis = axes.turntable_axis_vec();
    let mut poses = Vec::with_capacity(rig_steps * turntable_steps);
    for m in 1..=rig_steps {
        let rig_angle = (m - 1) as f64 * rig_step_deg;
        let r_a = rotation_about_axis(&rig_axis, rig_angle)?;
        for n in 1..=turntable_steps {
            let tt_angle = (n - 1) as f64 * turntable_step_deg;
            let r_b = rotation_about_axis(&tt_axis, tt_angle)?;
            poses.push(RigPose {
                rig_step_index: m,
                turntable_step_index: n,
                rig_angle_deg: rig_angle,
                turntable_angle_deg: tt_angle,
                r_a,
                r_b: r_b.clone(),
            });
        }
    }
    Ok(CaptureSchedule {
        rig_steps,
        turntable_steps,
        rig_step_deg,
        turntable_step_deg,
        axes: axes.clone(),
        poses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn z_axis() -> Vector3<f64> {
        Vector3::new(0.0, 0.0, 1.0)
    }

    #[test]
    fn rotation_zero_angle_is_identity() {
        let r = rotation_about_axis(&z_axis(), 0.0).unwrap();
        assert_relative_eq!(r.matrix(), &Matrix3::identity(), epsilon = 1e-12);
    }

    #[test]
    fn rotation_z_90_maps_x_to_y() {
        let r = rotation_about_axis(&z_axis(), 90.0).unwrap();
        let v = r.apply(&Vector3::new(1.0, 0.0, 0.0));
        assert_relative_eq!(v, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn twentyfive_steps_of_14p4_close_the_circle() {
        let step = rotation_about_axis(&z_axis(), 14.4).unwrap();
        let mut acc = Rotation::identity();
        for _ in 0..25 {
            acc = step.compose(&acc);
        }
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((acc.matrix()[(i, j)] - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn non_unit_axis_is_rejected() {
        let r = rotation_about_axis(&Vector3::new(0.0, 0.0, 2.0), 10.0);
        assert!(r.is_err());
    }

    #[test]
    fn equivalent_ray_identity_is_noop() {
        let ray = Ray::new(Vector3::new(1.0, 2.0, 3.0), Vector3::new(0.0, 0.0, -1.0)).unwrap();
        let out = equivalent_ray(&ray, &Rotation::identity());
        assert_relative_eq!(out.origin, ray.origin, epsilon = 1e-12);
        assert_relative_eq!(out.direction, ray.direction, epsilon = 1e-12);
    }

    #[test]
    fn equivalent_ray_z90_hand_check() {
        let r_b = rotation_about_axis(&z_axis(), 90.0).unwrap();
        let ray = Ray::new(Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.0, 0.0, -1.0)).unwrap();
        let out = equivalent_ray(&ray, &r_b);
        assert_relative_eq!(out.origin, Vector3::new(0.0, -1.0, 0.0), epsilon = 1e-12);
        assert_relative_eq!(out.direction, Vector3::new(0.0, 0.0, -1.0), epsilon = 1e-12);
    }

    #[test]
    fn equivalent_ray_round_trip() {
        let r_b = rotation_about_axis(&Vector3::new(0.0, 1.0, 0.0), 37.0).unwrap();
        let ray = Ray::new(Vector3::new(0.3, -0.2, 1.5), Vector3::new(0.1, 0.9, -0.4)).unwrap();
        let there = equivalent_ray(&ray, &r_b);
        let back = equivalent_ray(&there, &r_b.transpose());
        assert_relative_eq!(back.origin, ray.origin, epsilon = 1e-9);
        assert_relative_eq!(back.direction, ray.direction, epsilon = 1e-9);
    }

    #[test]
    fn world_light_direction_identity_pose() {
        let pose = RigPose::identity();
        let w = Vector3::new(0.0, 1.0, 0.0);
        assert_relative_eq!(world_light_direction(&w, &pose), w, epsilon = 1e-12);
    }

    #[test]
    fn world_light_direction_two_z90s() {
        let r = rotation_about_axis(&z_axis(), 90.0).unwrap();
        let pose = RigPose {
            r_a: r.clone(),
            r_b: r,
            ..RigPose::identity()
        };
        let w = world_light_direction(&Vector3::new(1.0, 0.0, 0.0), &pose);
        assert_relative_eq!(w, Vector3::new(-1.0, 0.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn schedule_paper_layout() {
        let sched = build_schedule(4, 25, 90.0, 14.4, &RigAxes::default()).unwrap();
        assert_eq!(sched.poses.len(), 100);
        // pose (2,1) is at flat index 25
        let p = &sched.poses[25];
        assert_eq!(p.rig_step_index, 2);
        assert_eq!(p.turntable_step_index, 1);
        assert_relative_eq!(p.rig_angle_deg, 90.0);
        assert_relative_eq!(p.turntable_angle_deg, 0.0);
    }

    #[test]
    fn schedule_single_pose_is_identity() {
        let sched = build_schedule(1, 1, 45.0, 45.0, &RigAxes::default()).unwrap();
        assert_eq!(sched.poses.len(), 1);
        let p = &sched.poses[0];
        assert_relative_eq!(p.r_a.matrix(), &Matrix3::identity(), epsilon = 1e-12);
        assert_relative_eq!(p.r_b.matrix(), &Matrix3::identity(), epsilon = 1e-12);
    }

    #[test]
    fn schedule_last_pose_angles() {
        let sched = build_schedule(2, 3, 10.0, 20.0, &RigAxes::default()).unwrap();
        assert_eq!(sched.poses.len(), 6);
        let p = sched.poses.last().unwrap();
        assert_relative_eq!(p.rig_angle_deg, 10.0);
        assert_relative_eq!(p.turntable_angle_deg, 40.0);
    }

    #[test]
    fn zero_counts_rejected() {
        assert!(build_schedule(0, 5, 1.0, 1.0, &RigAxes::default()).is_err());
        assert!(build_schedule(5, 0, 1.0, 1.0, &RigAxes::default()).is_err());
    }

    #[test]
    fn row_major_round_trip() {
        let r = rotation_about_axis(&Vector3::new(1.0, 0.0, 0.0), 33.0).unwrap();
        let arr = r.to_row_major();
        let back = Rotation::from_row_major(&arr).unwrap();
        assert_relative_eq!(back.matrix(), r.matrix(), epsilon = 1e-12);
    }

    #[test]
    fn tampered_rotation_rejected() {
        let mut arr = Rotation::identity().to_row_major();
        arr[0] = -1.0; // det becomes -1
        assert!(Rotation::from_row_major(&arr).is_err());
    }
}
