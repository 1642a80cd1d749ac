//! Micro-facet reflectance: GGX distribution, Schlick Fresnel, Smith
//! masking-shadowing, and the split-sum diffuse/specular shading terms.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::envlight::{
    diffuse_irradiance, prefiltered_specular_light, Light, Rgb, RotatedLight,
};
use crate::error::{Error, Result};
use crate::quad::{oriented_hemisphere, QuadratureRule};
use crate::rig::RigPose;

/// Roughness floor; the specular lobe is singular under point quadrature as
/// rho -> 0.
pub const RHO_MIN: f64 = 0.01;

/// Dielectric base reflectance of the metallic workflow.
pub const F0_DIELECTRIC: f64 = 0.04;

/// Per-point reflectance parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BrdfParams {
    pub albedo: [f64; 3],
    pub roughness: f64,
    pub metallic: f64,
}

impl BrdfParams {
    pub fn new(albedo: [f64; 3], roughness: f64, metallic: f64) -> Result<Self> {
        for a in albedo {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::validation("albedo components must be in [0, 1]"));
            }
        }
        if !(RHO_MIN..=1.0).contains(&roughness) {
            return Err(Error::validation(format!(
                "roughness must be in [{RHO_MIN}, 1]"
            )));
        }
        if !(0.0..=1.0).contains(&metallic) {
            return Err(Error::validation("metallic must be in [0, 1]"));
        }
        Ok(BrdfParams {
            albedo,
            roughness,
            metallic,
        })
    }

    pub fn validate(&self) -> Result<()> {
        Self::new(self.albedo, self.roughness, self.metallic).map(|_| ())
    }

    pub fn albedo_rgb(&self) -> Rgb {
        Rgb::new(self.albedo[0], self.albedo[1], self.albedo[2])
    }

    /// F0 = 0.04 (1 - m) + a m.
    pub fn f0(&self) -> Rgb {
        let a = self.albedo_rgb();
        let m = self.metallic;
        Rgb::new(
            F0_DIELECTRIC * (1.0 - m) + a.x * m,
            F0_DIELECTRIC * (1.0 - m) + a.y * m,
            F0_DIELECTRIC * (1.0 - m) + a.z * m,
        )
    }
}

/// Geometry of one shading point.
#[derive(Debug, Clone, Copy)]
pub struct ShadingPoint {
    pub position: Vector3<f64>,
    pub normal: Vector3<f64>,
    /// Toward the camera.
    pub view_dir: Vector3<f64>,
    /// Mirror reflection of the view direction about the normal.
    pub reflection: Vector3<f64>,
}

impl ShadingPoint {
    pub fn new(position: Vector3<f64>, normal: Vector3<f64>, view_dir: Vector3<f64>) -> Self {
        let n = normal.normalize();
        let wo = view_dir.normalize();
        let t = n * (2.0 * wo.dot(&n)) - wo;
        ShadingPoint {
            position,
            normal: n,
            view_dir: wo,
            reflection: t.normalize(),
        }
    }
}

/// GGX / Trowbridge-Reitz normal distribution with alpha = rho^2.
pub fn ggx_d(cosine: f64, rho: f64) -> f64 {
    if cosine <= 0.0 {
        return 0.0;
    }
    let cosine = cosine.min(1.0);
    let alpha = rho.clamp(RHO_MIN, 1.0).powi(2);
    let a2 = alpha * alpha;
    let denom = cosine * cosine * (a2 - 1.0) + 1.0;
    a2 / (std::f64::consts::PI * denom * denom)
}

/// Schlick approximation: F0 + (1 - F0)(1 - cos)^5.
pub fn fresnel_schlick(cosine: f64, f0: Rgb) -> Rgb {
    let c = cosine.clamp(0.0, 1.0);
    let k = (1.0 - c).powi(5);
    Rgb::new(
        f0.x + (1.0 - f0.x) * k,
        f0.y + (1.0 - f0.y) * k,
        f0.z + (1.0 - f0.z) * k,
    )
}

fn smith_g1(cosine: f64, alpha: f64) -> f64 {
    if cosine <= 0.0 {
        return 0.0;
    }
    let c = cosine.min(1.0);
    let a2 = alpha * alpha;
    2.0 * c / (c + (a2 + (1.0 - a2) * c * c).sqrt())
}

/// Separable Smith masking-shadowing for GGX.
pub fn smith_g(cos_i: f64, cos_o: f64, rho: f64) -> f64 {
    let alpha = rho.clamp(RHO_MIN, 1.0).powi(2);
    smith_g1(cos_i, alpha) * smith_g1(cos_o, alpha)
}

/// Diffuse term of the split shading: (a/pi)(1 - m) * hemisphere irradiance of
/// the pose-rotated environment about the shading normal.
pub fn shade_diffuse<L: Light + ?Sized>(
    params: &BrdfParams,
    sp: &ShadingPoint,
    light: &L,
    pose: &RigPose,
    quad: &QuadratureRule,
) -> Result<Rgb> {
    let rotated = RotatedLight {
        inner: light,
        rotation: pose.light_rotation(),
    };
    let irr = diffuse_irradiance(&rotated, &sp.normal, quad)?;
    let scale = (1.0 - params.metallic) / std::f64::consts::PI;
    Ok(irr.component_mul(&params.albedo_rgb()) * scale)
}

/// Split-sum BRDF factor: hemisphere quadrature of D F G / (4 (wo.n)).
pub fn brdf_integral_factor(params: &BrdfParams, sp: &ShadingPoint, samples: usize) -> Rgb {
    let n = &sp.normal;
    let wo = &sp.view_dir;
    let cos_o = wo.dot(n).max(1e-6);
    let f0 = params.f0();
    let rule = oriented_hemisphere(samples, n);
    let mut acc = Rgb::zeros();
    for (wi, w) in rule.dirs.iter().zip(&rule.weights) {
        let cos_i = wi.dot(n);
        if cos_i <= 0.0 {
            continue;
        }
        let h = (wi + wo).normalize();
        let d = ggx_d(n.dot(&h), params.roughness);
        let f = fresnel_schlick(wo.dot(&h), f0);
        let g = smith_g(cos_i, cos_o, params.roughness);
        acc += f * (d * g / (4.0 * cos_o) * w);
    }
    acc
}

/// Specular radiance as the product of the prefiltered light integral and the
/// BRDF integral factor (Eq. 7 split form). Returns zero for back-facing view
/// directions together with a flag.
pub fn shade_specular<L: Light + ?Sized>(
    params: &BrdfParams,
    sp: &ShadingPoint,
    light: &L,
    pose: &RigPose,
    samples: usize,
) -> Result<(Rgb, bool)> {
    if sp.view_dir.dot(&sp.normal) <= 0.0 {
        return Ok((Rgb::zeros(), true));
    }
    let lobe = prefiltered_specular_light(light, &sp.reflection, params.roughness, pose, samples)?;
    let factor = brdf_integral_factor(params, sp, samples);
    Ok((lobe.component_mul(&factor), false))
}

/// Learned maps applied to the direct/indirect prefiltered lobes.
pub trait SpecularMaps {
    fn g_direct(&self, lobe: Rgb) -> Rgb;
    fn g_indirect(&self, lobe: Rgb, position: &Vector3<f64>) -> Rgb;
}

/// Identity maps; the unlearned baseline.
pub struct IdentityMaps;

impl SpecularMaps for IdentityMaps {
    fn g_direct(&self, lobe: Rgb) -> Rgb {
        lobe
    }
    fn g_indirect(&self, lobe: Rgb, _position: &Vector3<f64>) -> Rgb {
        lobe
    }
}

/// Occlusion-aware specular light: blends the direct (rotated environment) and
/// indirect lobes by the occlusion probability `s_t`. This value replaces the
/// raw prefiltered light inside the specular product when occlusion handling
/// is enabled.
#[allow(clippy::too_many_arguments)]
pub fn specular_light<L, M, I>(
    params: &BrdfParams,
    sp: &ShadingPoint,
    light: &L,
    pose: &RigPose,
    s_t: f64,
    indirect_field: &I,
    maps: &M,
    samples: usize,
) -> Result<Rgb>
where
    L: Light + ?Sized,
    M: SpecularMaps + ?Sized,
    I: Light + ?Sized,
{
    let s_t = s_t.clamp(0.0, 1.0);
    let direct = prefiltered_specular_light(
        light,
        &sp.reflection,
        params.roughness,
        pose,
        samples,
    )?;
    let indirect = prefiltered_specular_light(
        indirect_field,
        &sp.reflection,
        params.roughness,
        &RigPose::identity(),
        samples,
    )?;
    Ok(maps.g_direct(direct) * (1.0 - s_t)
        + maps.g_indirect(indirect, &sp.position) * s_t)
}
