//! Volume rendering along equivalent rays: stratified sampling, signed
//! distance to compositing weights, pixel and image rendering, and occlusion
//! marching for the occlusion supervision target.

use nalgebra::Vector3;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::envlight::Rgb;
use crate::error::{Error, Result};
use crate::rig::{equivalent_ray, Ray, RigPose, Rotation};
use crate::sdf::{FieldSample, SdfEval};
use crate::brdf::ShadingPoint;

#[derive(Debug, Clone)]
pub struct RenderConfig {
    pub samples_per_ray: usize,
    pub near: f64,
    pub far: f64,
    /// Sharpness of the logistic weight function (learned during training).
    pub s_inv: f64,
    pub background: Rgb,
    /// Quadrature size for light integrals at each shading point.
    pub light_samples: usize,
    pub seed: u64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            samples_per_ray: 64,
            near: 0.5,
            far: 4.5,
            s_inv: 64.0,
            background: Rgb::zeros(),
            light_samples: 128,
            seed: 0,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.near >= self.far {
            return Err(Error::validation("near must be less than far"));
        }
        if self.samples_per_ray < 2 {
            return Err(Error::validation("need at least 2 samples per ray"));
        }
        if self.s_inv <= 0.0 {
            return Err(Error::validation("s_inv must be positive"));
        }
        Ok(())
    }
}

/// Everything recorded while compositing one pixel.
#[derive(Debug, Clone)]
pub struct PixelSampleRecord {
    pub positions: Vec<Vector3<f64>>,
    pub sdf: Vec<f64>,
    pub weights: Vec<f64>,
    pub radiances: Vec<Rgb>,
    pub color: Rgb,
    pub opacity: f64,
}

/// Stratified distances in [near, far), one per cell, strictly increasing.
pub fn sample_ray(config: &RenderConfig, rng: &mut impl Rng) -> Vec<f64> {
    let n = config.samples_per_ray;
    let span = (config.far - config.near) / n as f64;
    (0..n)
        .map(|i| config.near + span * (i as f64 + rng.random_range(0.0..1.0)))
        .collect()
}

fn logistic(x: f64) -> f64 {
    crate::autodiff::sigmoid(x)
}

/// Unbiased compositing weights from signed distances along the ray.
/// Returns one weight per interval (length = samples - 1).
pub fn sdf_weights(sdf: &[f64], s_inv: f64) -> Vec<f64> {
    assert!(sdf.len() >= 2, "need at least 2 samples");
    let phi: Vec<f64> = sdf.iter().map(|d| logistic(s_inv * d)).collect();
    let mut weights = Vec::with_capacity(sdf.len() - 1);
    let mut transmittance = 1.0;
    for i in 0..sdf.len() - 1 {
        let alpha = ((phi[i] - phi[i + 1]) / (phi[i] + 1e-12)).max(0.0);
        weights.push(transmittance * alpha);
        transmittance *= 1.0 - alpha;
    }
    weights
}

/// A scene a pixel can be rendered against: signed distance geometry plus a
/// shading rule for surface points under a capture pose.
pub trait RenderScene: Sync {
    fn geometry(&self) -> &dyn SdfEval;
    fn shade(&self, sp: &ShadingPoint, pose: &RigPose, light_samples: usize) -> Result<Rgb>;
    fn background(&self) -> Rgb;
}

impl RenderScene for crate::scene::AnalyticScene {
    fn geometry(&self) -> &dyn SdfEval {
        self
    }

    fn shade(&self, sp: &ShadingPoint, pose: &RigPose, light_samples: usize) -> Result<Rgb> {
        let params = self.brdf_at(&sp.position);
        let quad = crate::quad::fibonacci_sphere(light_samples);
        let mut c = crate::brdf::shade_diffuse(params, sp, &self.env, pose, &quad)?;
        if self.specular {
            let (spec, _) = crate::brdf::shade_specular(params, sp, &self.env, pose, light_samples)?;
            c += spec;
        }
        Ok(c)
    }

    fn background(&self) -> Rgb {
        self.background
    }
}

/// Renders one camera ray at a capture pose: the ray is re-expressed in the
/// object frame, sampled, shaded, and composited with the background filling
/// the residual transmittance.
pub fn render_pixel<S: RenderScene + ?Sized>(
    ray: &Ray,
    pose: &RigPose,
    scene: &S,
    config: &RenderConfig,
    rng: &mut impl Rng,
) -> Result<(Rgb, PixelSampleRecord)> {
    let eq = equivalent_ray(ray, &pose.r_b);
    let ts = sample_ray(config, rng);
    let positions: Vec<Vector3<f64>> = ts.iter().map(|t| eq.at(*t)).collect();
    let field = scene.geometry();
    let sdf: Vec<f64> = positions.iter().map(|p| field.sdf(p)).collect();
    let weights = sdf_weights(&sdf, config.s_inv);

    let view_dir = -eq.direction;
    let mut color = Rgb::zeros();
    let mut radiances = vec![Rgb::zeros(); weights.len()];
    let mut opacity = 0.0;
    for (i, w) in weights.iter().enumerate() {
        opacity += w;
        if *w < 1e-7 {
            continue;
        }
        let sample = field.sample(&positions[i]);
        let sp = ShadingPoint::new(positions[i], sample.normal, view_dir);
        let c = scene.shade(&sp, pose, config.light_samples)?;
        if !(c.x.is_finite() && c.y.is_finite() && c.z.is_finite()) {
            return Err(Error::NonFinite(format!(
                "radiance at sample {i}, position {:?}, sdf {}",
                positions[i], sample.sdf
            )));
        }
        radiances[i] = c;
        color += c * *w;
    }
    color += scene.background() * (1.0 - opacity);
    if !(color.x.is_finite() && color.y.is_finite() && color.z.is_finite()) {
        return Err(Error::NonFinite("composited pixel color".into()));
    }
    Ok((
        color,
        PixelSampleRecord {
            positions,
            sdf,
            weights,
            radiances,
            color,
            opacity,
        },
    ))
}

/// Result of occlusion marching.
#[derive(Debug, Clone, Copy)]
pub struct MarchResult {
    /// 1.0 when another surface blocks the direction, else 0.0.
    pub hard: f64,
    /// Sigmoid of the negated minimum distance encountered.
    pub soft: f64,
    /// True when the step budget ran out before a hit or escape.
    pub budget_exhausted: bool,
}

/// Sphere-traces from just above the surface point along `t` and reports
/// whether the scene occludes that direction.
pub fn march_occlusion<F: SdfEval + ?Sized>(
    field: &F,
    p: &Vector3<f64>,
    t: &Vector3<f64>,
    epsilon: f64,
    max_distance: f64,
) -> Result<MarchResult> {
    if (t.norm() - 1.0).abs() > 1e-6 {
        return Err(Error::validation("occlusion direction must be unit length"));
    }
    let FieldSample { normal, .. } = field.sample(p);
    let start = p + normal * epsilon;
    let mut dist = 0.0;
    let mut min_sdf = f64::INFINITY;
    let soft_sharpness = 50.0;
    let mut steps = 0usize;
    let max_steps = 256;
    while dist < max_distance {
        if steps >= max_steps {
            return Ok(MarchResult {
                hard: 0.0,
                soft: logistic(-soft_sharpness * min_sdf),
                budget_exhausted: true,
            });
        }
        steps += 1;
        let q = start + t * dist;
        let d = field.sdf(&q);
        min_sdf = min_sdf.min(d);
        if d < 1e-4 {
            // peek just past the hit so the soft value reflects penetration
            min_sdf = min_sdf.min(field.sdf(&(q + t * 2e-3)));
            return Ok(MarchResult {
                hard: 1.0,
                soft: logistic(-soft_sharpness * min_sdf),
                budget_exhausted: false,
            });
        }
        dist += d.max(1e-3);
    }
    Ok(MarchResult {
        hard: 0.0,
        soft: logistic(-soft_sharpness * min_sdf),
        budget_exhausted: false,
    })
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    /// Square image with a given vertical field of view in degrees.
    pub fn from_fov(size: usize, fov_deg: f64) -> Self {
        let f = size as f64 / (2.0 * (fov_deg.to_radians() / 2.0).tan());
        CameraIntrinsics {
            fx: f,
            fy: f,
            cx: size as f64 / 2.0,
            cy: size as f64 / 2.0,
            width: size,
            height: size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fx <= 0.0 || self.fy <= 0.0 || self.width == 0 || self.height == 0 {
            return Err(Error::validation("camera intrinsics must be positive"));
        }
        Ok(())
    }
}

/// Camera placement: position plus camera-to-world rotation. Camera frame is
/// +X right, +Y down (image rows), +Z forward.
#[derive(Debug, Clone)]
pub struct CameraPose {
    pub position: Vector3<f64>,
    pub cam_to_world: Rotation,
}

impl CameraPose {
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::validation("camera eye and target coincide"))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::validation("camera up is parallel to view direction"))?;
        let down = forward.cross(&right);
        let m = nalgebra::Matrix3::from_columns(&[right, down, forward]);
        Ok(CameraPose {
            position: eye,
            cam_to_world: Rotation::from_matrix(m)?,
        })
    }

    pub fn pixel_ray(&self, cam: &CameraIntrinsics, x: usize, y: usize) -> Result<Ray> {
        let dx = (x as f64 + 0.5 - cam.cx) / cam.fx;
        let dy = (y as f64 + 0.5 - cam.cy) / cam.fy;
        let dir_cam = Vector3::new(dx, dy, 1.0);
        Ray::new(self.position, self.cam_to_world.apply(&dir_cam))
    }
}

/// A full linear-radiance render: rgb per pixel plus accumulated opacity.
pub struct RenderedImage {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<Rgb>,
    pub opacity: Vec<f64>,
}

impl RenderedImage {
    pub fn at(&self, x: usize, y: usize) -> Rgb {
        self.rgb[y * self.width + x]
    }
}

/// Per-pixel render over the pinhole grid. Deterministic for a fixed config
/// seed regardless of pixel evaluation order.
pub fn render_image<S: RenderScene + ?Sized>(
    pose: &RigPose,
    cam: &CameraIntrinsics,
    cam_pose: &CameraPose,
    scene: &S,
    config: &RenderConfig,
) -> Result<RenderedImage> {
    cam.validate()?;
    config.validate()?;
    let frame_tag = (pose.rig_step_index as u64) << 32 | pose.turntable_step_index as u64;
    let pixels: Vec<Result<(Rgb, f64)>> = (0..cam.height * cam.width)
        .into_par_iter()
        .map(|idx| {
            let x = idx % cam.width;
            let y = idx / cam.width;
            let mut rng = ChaCha8Rng::seed_from_u64(
                config
                    .seed
                    .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                    .wrapping_add(frame_tag.wrapping_mul(0x2545_f491_4f6c_dd1d))
                    .wrapping_add(idx as u64),
            );
            let ray = cam_pose.pixel_ray(cam, x, y)?;
            let (c, rec) = render_pixel(&ray, pose, scene, config, &mut rng)
                .map_err(|e| Error::NonFinite(format!("pixel ({x}, {y}): {e}")))?;
            Ok((c, rec.opacity))
        })
        .collect();
    let mut rgb = Vec::with_capacity(pixels.len());
    let mut opacity = Vec::with_capacity(pixels.len());
    for p in pixels {
        let (c, o) = p?;
        rgb.push(c);
        opacity.push(o);
    }
    Ok(RenderedImage {
        width: cam.width,
        height: cam.height,
        rgb,
        opacity,
    })
}
