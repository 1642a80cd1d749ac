//! Distant environment light represented by real spherical harmonics.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quad::{ggx_lobe_dirs, QuadratureRule};
use crate::rig::{RigPose, Rotation};
use crate::sh;

pub type Rgb = Vector3<f64>;

/// Radiance field on the sphere of incoming directions.
pub trait Light {
    /// Raw radiance; may be negative for SH truncation, clamp at shading sites.
    fn radiance(&self, dir: &Vector3<f64>) -> Rgb;
}

/// Per-channel real SH coefficients up to band `l_max`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShEnvironment {
    pub l_max: usize,
    /// Channel-major: coeffs[c][lm] with lm the flat (l, m) index.
    pub coeffs: [Vec<f64>; 3],
}

impl ShEnvironment {
    pub fn zeros(l_max: usize) -> Self {
        let n = sh::basis_count(l_max);
        ShEnvironment {
            l_max,
            coeffs: [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
        }
    }

    /// Uniform environment of the given radiance per channel.
    pub fn constant(l_max: usize, radiance: Rgb) -> Self {
        let mut env = Self::zeros(l_max);
        let y00 = 0.28209479177387814;
        for c in 0..3 {
            env.coeffs[c][0] = radiance[c] / y00;
        }
        env
    }

    pub fn from_flat(l_max: usize, flat: &[f64]) -> Result<Self> {
        let n = sh::basis_count(l_max);
        if flat.len() != 3 * n {
            return Err(Error::validation(format!(
                "expected {} SH coefficients, got {}",
                3 * n,
                flat.len()
            )));
        }
        Ok(ShEnvironment {
            l_max,
            coeffs: [
                flat[0..n].to_vec(),
                flat[n..2 * n].to_vec(),
                flat[2 * n..3 * n].to_vec(),
            ],
        })
    }

    /// Channel-major flat layout used by checkpoints and manifests.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(3 * sh::basis_count(self.l_max));
        for c in 0..3 {
            out.extend_from_slice(&self.coeffs[c]);
        }
        out
    }

    pub fn scaled(&self, k: f64) -> Self {
        let mut env = self.clone();
        for c in 0..3 {
            for v in env.coeffs[c].iter_mut() {
                *v *= k;
            }
        }
        env
    }
}

impl Light for ShEnvironment {
    fn radiance(&self, dir: &Vector3<f64>) -> Rgb {
        eval_sh(self, dir)
    }
}

/// A light whose query directions are pre-rotated: L'(w) = L(R w).
pub struct RotatedLight<'a, L: Light + ?Sized> {
    pub inner: &'a L,
    pub rotation: Rotation,
}

impl<L: Light + ?Sized> Light for RotatedLight<'_, L> {
    fn radiance(&self, dir: &Vector3<f64>) -> Rgb {
        self.inner.radiance(&self.rotation.apply(dir))
    }
}

/// Zero radiance everywhere; stands in for an absent indirect field.
pub struct ZeroLight;

impl Light for ZeroLight {
    fn radiance(&self, _dir: &Vector3<f64>) -> Rgb {
        Rgb::zeros()
    }
}

/// Raw SH evaluation: sum over bands of c_lm * Y_lm(dir), per channel.
pub fn eval_sh(env: &ShEnvironment, dir: &Vector3<f64>) -> Rgb {
    let basis = sh::eval_basis(env.l_max, dir);
    let mut out = Rgb::zeros();
    for c in 0..3 {
        out[c] = env.coeffs[c]
            .iter()
            .zip(&basis)
            .map(|(co, b)| co * b)
            .sum();
    }
    out
}

/// SH evaluated at the rotated-capture direction `R_a R_b dir` (same code path
/// as composing `world_light_direction` with `eval_sh`).
pub fn eval_rotated(env: &ShEnvironment, dir: &Vector3<f64>, pose: &RigPose) -> Rgb {
    eval_sh(env, &pose.light_rotation().apply(dir))
}

fn clamp0(v: Rgb) -> Rgb {
    Rgb::new(v.x.max(0.0), v.y.max(0.0), v.z.max(0.0))
}

/// Hemisphere irradiance about `n`: quadrature of L(w) (w.n)+ over the rule.
pub fn diffuse_irradiance<L: Light + ?Sized>(
    light: &L,
    n: &Vector3<f64>,
    quad: &QuadratureRule,
) -> Result<Rgb> {
    quad.validate()?;
    let mut acc = Rgb::zeros();
    for (d, w) in quad.dirs.iter().zip(&quad.weights) {
        let c = d.dot(n);
        if c > 0.0 {
            acc += clamp0(light.radiance(d)) * (c * w);
        }
    }
    Ok(acc)
}

/// Prefiltered specular light: the rotated environment integrated against the
/// normalized GGX lobe centered at the reflection direction `t`.
///
/// Uses deterministic importance-warped lobe directions, so the estimator is
/// the plain mean of rotated-environment radiance over the warp.
pub fn prefiltered_specular_light<L: Light + ?Sized>(
    light: &L,
    t: &Vector3<f64>,
    rho: f64,
    pose: &RigPose,
    samples: usize,
) -> Result<Rgb> {
    if samples == 0 {
        return Err(Error::validation("prefilter sample count must be >= 1"));
    }
    let rho = rho.clamp(crate::brdf::RHO_MIN, 1.0);
    let rot = pose.light_rotation();
    let dirs = ggx_lobe_dirs(t, rho, samples);
    let mut acc = Rgb::zeros();
    for d in &dirs {
        acc += clamp0(light.radiance(&rot.apply(d)));
    }
    Ok(acc / samples as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad::fibonacci_sphere;
    use crate::rig::rotation_about_axis;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_env(l_max: usize, seed: u64) -> ShEnvironment {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = sh::basis_count(l_max);
        let mut env = ShEnvironment::zeros(l_max);
        for c in 0..3 {
            for i in 0..n {
                env.coeffs[c][i] = rng.random_range(-1.0..1.0);
            }
        }
        env
    }

    #[test]
    fn order0_env_evaluates_to_scaled_y00() {
        let mut env = ShEnvironment::zeros(0);
        env.coeffs[0][0] = 2.0;
        env.coeffs[1][0] = 2.0;
        env.coeffs[2][0] = 2.0;
        let v = eval_sh(&env, &Vector3::new(0.0, 1.0, 0.0));
        for c in 0..3 {
            assert!((v[c] - 2.0 * 0.2820948).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_env_is_black() {
        let env = ShEnvironment::zeros(3);
        let v = eval_sh(&env, &Vector3::new(0.0, 0.0, 1.0));
        assert_eq!(v, Rgb::zeros());
    }

    #[test]
    fn y10_band_is_antisymmetric_in_z() {
        let mut env = ShEnvironment::zeros(1);
        env.coeffs[0][sh::lm_index(1, 0)] = 1.0;
        let up = eval_sh(&env, &Vector3::new(0.0, 0.0, 1.0));
        let down = eval_sh(&env, &Vector3::new(0.0, 0.0, -1.0));
        assert!((up.x + down.x).abs() < 1e-12);
    }

    #[test]
    fn eval_rotated_identity_pose_matches_eval_sh() {
        let env = random_env(3, 1);
        let d = Vector3::new(0.3, 0.4, -0.5).normalize();
        let a = eval_rotated(&env, &d, &RigPose::identity());
        let b = eval_sh(&env, &d);
        assert!((a - b).norm() < 1e-12);
    }

    #[test]
    fn eval_rotated_constant_env_is_rotation_invariant() {
        let env = ShEnvironment::constant(0, Rgb::new(0.7, 0.8, 0.9));
        let r = rotation_about_axis(&Vector3::new(0.0, 1.0, 0.0), 63.0).unwrap();
        let pose = RigPose {
            r_a: r.clone(),
            r_b: r,
            ..RigPose::identity()
        };
        let d = Vector3::new(1.0, 0.0, 0.0);
        let a = eval_rotated(&env, &d, &pose);
        let b = eval_sh(&env, &d);
        assert!((a - b).norm() < 1e-12);
    }

    #[test]
    fn eval_rotated_two_z90s_flips_x() {
        let env = random_env(3, 2);
        let r = rotation_about_axis(&Vector3::new(0.0, 0.0, 1.0), 90.0).unwrap();
        let pose = RigPose {
            r_a: r.clone(),
            r_b: r,
            ..RigPose::identity()
        };
        let x = Vector3::new(1.0, 0.0, 0.0);
        let a = eval_rotated(&env, &x, &pose);
        let b = eval_sh(&env, &Vector3::new(-1.0, 0.0, 0.0));
        assert!((a - b).norm() < 1e-9);
    }

    #[test]
    fn constant_env_irradiance_is_pi() {
        let env = ShEnvironment::constant(0, Rgb::new(1.0, 1.0, 1.0));
        let quad = fibonacci_sphere(512);
        let n = Vector3::new(0.1, -0.3, 0.94).normalize();
        let irr = diffuse_irradiance(&env, &n, &quad).unwrap();
        for c in 0..3 {
            assert!(
                (irr[c] - std::f64::consts::PI).abs() < 0.02 * std::f64::consts::PI,
                "channel {c}: {}",
                irr[c]
            );
        }
    }

    #[test]
    fn zero_env_irradiance_is_zero() {
        let env = ShEnvironment::zeros(2);
        let quad = fibonacci_sphere(128);
        let irr = diffuse_irradiance(&env, &Vector3::z(), &quad).unwrap();
        assert_eq!(irr, Rgb::zeros());
    }

    #[test]
    fn empty_quadrature_rejected() {
        let env = ShEnvironment::zeros(0);
        let quad = QuadratureRule {
            dirs: vec![],
            weights: vec![],
        };
        assert!(diffuse_irradiance(&env, &Vector3::z(), &quad).is_err());
    }

    #[test]
    fn irradiance_is_linear_in_coefficients() {
        let env = random_env(3, 3);
        let quad = fibonacci_sphere(256);
        let n = Vector3::new(0.0, 0.6, 0.8);
        // Use a non-negative env so clamping does not break linearity.
        let mut env_pos = env.clone();
        env_pos.coeffs[0][0] += 10.0;
        env_pos.coeffs[1][0] += 10.0;
        env_pos.coeffs[2][0] += 10.0;
        let a = diffuse_irradiance(&env_pos, &n, &quad).unwrap();
        let b = diffuse_irradiance(&env_pos.scaled(2.5), &n, &quad).unwrap();
        assert!((b - a * 2.5).norm() < 1e-9);
    }

    #[test]
    fn irradiance_rotation_covariance() {
        let env = random_env(2, 4);
        let mut env_pos = env.clone();
        for c in 0..3 {
            env_pos.coeffs[c][0] += 8.0;
        }
        let quad = fibonacci_sphere(2048);
        let n = Vector3::new(0.3, 0.2, 0.93).normalize();
        let r = rotation_about_axis(&Vector3::new(1.0, 0.0, 0.0), 41.0).unwrap();
        let a = diffuse_irradiance(&env_pos, &n, &quad).unwrap();
        // Rotating both the environment query and the normal by the same
        // rotation leaves the integral unchanged.
        let rotated = RotatedLight {
            inner: &env_pos,
            rotation: r.transpose(),
        };
        let b = diffuse_irradiance(&rotated, &r.apply(&n), &quad).unwrap();
        assert!((a - b).norm() < 0.02 * a.norm().max(1.0), "{a:?} vs {b:?}");
    }

    #[test]
    fn prefiltered_constant_env_is_radiance() {
        let env = ShEnvironment::constant(0, Rgb::new(1.0, 1.0, 1.0));
        let t = Vector3::new(0.0, 0.3, 0.95).normalize();
        for rho in [0.2, 0.5, 0.9] {
            let v =
                prefiltered_specular_light(&env, &t, rho, &RigPose::identity(), 512).unwrap();
            for c in 0..3 {
                assert!((v[c] - 1.0).abs() < 0.02, "rho {rho}: {}", v[c]);
            }
        }
    }

    #[test]
    fn prefiltered_delta_limit_approaches_point_evaluation() {
        let mut env = random_env(2, 5);
        for c in 0..3 {
            env.coeffs[c][0] += 6.0;
        }
        let t = Vector3::new(0.4, -0.2, 0.89).normalize();
        let pose = RigPose::identity();
        let lobe = prefiltered_specular_light(&env, &t, crate::brdf::RHO_MIN, &pose, 4096)
            .unwrap();
        let point = eval_rotated(&env, &t, &pose);
        assert!(
            (lobe - point).norm() < 0.05 * point.norm(),
            "{lobe:?} vs {point:?}"
        );
    }

    #[test]
    fn prefiltered_zero_env_is_zero() {
        let env = ShEnvironment::zeros(3);
        let v = prefiltered_specular_light(
            &env,
            &Vector3::z(),
            0.4,
            &RigPose::identity(),
            128,
        )
        .unwrap();
        assert_eq!(v, Rgb::zeros());
    }

    #[test]
    fn prefiltered_monotone_under_env_scaling() {
        let env = ShEnvironment::constant(0, Rgb::new(0.5, 0.5, 0.5));
        let t = Vector3::z();
        let pose = RigPose::identity();
        let a = prefiltered_specular_light(&env, &t, 0.5, &pose, 256).unwrap();
        let b = prefiltered_specular_light(&env.scaled(3.0), &t, 0.5, &pose, 256).unwrap();
        assert!(b.x > a.x && b.y > a.y && b.z > a.z);
    }

    #[test]
    fn flat_round_trip() {
        let env = random_env(3, 6);
        let back = ShEnvironment::from_flat(3, &env.to_flat()).unwrap();
        assert_eq!(env.coeffs, back.coeffs);
        assert!(ShEnvironment::from_flat(3, &[0.0; 5]).is_err());
    }
}
