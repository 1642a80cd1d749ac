//! Signed distance field evaluation contract and analytic ground-truth fields.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::rig::Rotation;

pub const LATENT_DIM: usize = 32;

/// One field query result.
#[derive(Debug, Clone)]
pub struct FieldSample {
    pub sdf: f64,
    pub gradient: Vector3<f64>,
    /// gradient / |gradient|; +Z when the gradient degenerates.
    pub normal: Vector3<f64>,
    pub latent: [f64; LATENT_DIM],
    pub degenerate_gradient: bool,
}

impl FieldSample {
    pub fn from_gradient(sdf: f64, gradient: Vector3<f64>, latent: [f64; LATENT_DIM]) -> Self {
        let norm = gradient.norm();
        let (normal, degenerate) = if norm > 1e-8 {
            (gradient / norm, false)
        } else {
            (Vector3::z(), true)
        };
        FieldSample {
            sdf,
            gradient,
            normal,
            latent,
            degenerate_gradient: degenerate,
        }
    }
}

/// Evaluation contract shared by the neural field and analytic adapters.
pub trait SdfEval: Sync {
    fn sdf(&self, p: &Vector3<f64>) -> f64;
    fn sample(&self, p: &Vector3<f64>) -> FieldSample;
}

/// Exact sphere SDF.
#[derive(Debug, Clone)]
pub struct AnalyticSphere {
    pub center: Vector3<f64>,
    pub radius: f64,
}

pub fn analytic_sphere(radius: f64) -> Result<AnalyticSphere> {
    if radius <= 0.0 {
        return Err(Error::validation("sphere radius must be positive"));
    }
    Ok(AnalyticSphere {
        center: Vector3::zeros(),
        radius,
    })
}

impl SdfEval for AnalyticSphere {
    fn sdf(&self, p: &Vector3<f64>) -> f64 {
        (p - self.center).norm() - self.radius
    }

    fn sample(&self, p: &Vector3<f64>) -> FieldSample {
        let d = p - self.center;
        let n = d.norm();
        let grad = if n > 1e-12 { d / n } else { Vector3::zeros() };
        FieldSample::from_gradient(n - self.radius, grad, [0.0; LATENT_DIM])
    }
}

/// Exact axis-aligned box SDF.
#[derive(Debug, Clone)]
pub struct AnalyticBox {
    pub center: Vector3<f64>,
    pub half_extents: Vector3<f64>,
}

pub fn analytic_box(half_extents: Vector3<f64>) -> Result<AnalyticBox> {
    if half_extents.min() <= 0.0 {
        return Err(Error::validation("box half-extents must be positive"));
    }
    Ok(AnalyticBox {
        center: Vector3::zeros(),
        half_extents,
    })
}

impl SdfEval for AnalyticBox {
    fn sdf(&self, p: &Vector3<f64>) -> f64 {
        let q = (p - self.center).abs() - self.half_extents;
        let outside = Vector3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0));
        outside.norm() + q.max().min(0.0)
    }

    fn sample(&self, p: &Vector3<f64>) -> FieldSample {
        // Central differences are exact enough for the analytic adapter; the
        // box gradient is piecewise and h stays well inside each region.
        let h = 1e-6;
        let mut grad = Vector3::zeros();
        for axis in 0..3 {
            let mut pp = *p;
            let mut pm = *p;
            pp[axis] += h;
            pm[axis] -= h;
            grad[axis] = (self.sdf(&pp) - self.sdf(&pm)) / (2.0 * h);
        }
        FieldSample::from_gradient(self.sdf(p), grad, [0.0; LATENT_DIM])
    }
}

/// Union of fields (min of SDFs); approximate but exact away from seams.
pub struct UnionSdf<A: SdfEval, B: SdfEval> {
    pub a: A,
    pub b: B,
}

impl<A: SdfEval, B: SdfEval> SdfEval for UnionSdf<A, B> {
    fn sdf(&self, p: &Vector3<f64>) -> f64 {
        self.a.sdf(p).min(self.b.sdf(p))
    }

    fn sample(&self, p: &Vector3<f64>) -> FieldSample {
        if self.a.sdf(p) <= self.b.sdf(p) {
            self.a.sample(p)
        } else {
            self.b.sample(p)
        }
    }
}

/// Field rotated rigidly: sdf'(p) = sdf(R^T p). Used by the scene-equivalence
/// tests.
pub struct RotatedSdf<F: SdfEval> {
    pub inner: F,
    pub rotation: Rotation,
}

impl<F: SdfEval> SdfEval for RotatedSdf<F> {
    fn sdf(&self, p: &Vector3<f64>) -> f64 {
        self.inner.sdf(&self.rotation.transpose().apply(p))
    }

    fn sample(&self, p: &Vector3<f64>) -> FieldSample {
        let local = self.inner.sample(&self.rotation.transpose().apply(p));
        FieldSample::from_gradient(
            local.sdf,
            self.rotation.apply(&local.gradient),
            local.latent,
        )
    }
}

/// Newton-style projection onto the zero level set: p <- p - sdf * normal.
/// Returns the last iterate and whether |sdf| < 1e-5 was reached.
pub fn surface_project<F: SdfEval + ?Sized>(
    field: &F,
    p: &Vector3<f64>,
    max_iters: usize,
) -> (Vector3<f64>, bool) {
    let mut q = *p;
    for _ in 0..max_iters {
        let s = field.sample(&q);
        if s.sdf.abs() < 1e-5 {
            return (q, true);
        }
        if s.degenerate_gradient {
            return (q, false);
        }
        q -= s.normal * s.sdf;
    }
    let converged = field.sdf(&q).abs() < 1e-5;
    (q, converged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn sphere_sdf_values() {
        let s = analytic_sphere(1.0).unwrap();
        assert_relative_eq!(s.sdf(&Vector3::zeros()), -1.0);
        assert_relative_eq!(s.sdf(&Vector3::new(0.0, 0.0, 1.0)), 0.0);
        // at |p| = 2r the sdf equals r
        assert_relative_eq!(s.sdf(&Vector3::new(0.0, 0.0, 2.0)), 1.0);
    }

    #[test]
    fn box_sdf_outside_face() {
        let b = analytic_box(Vector3::new(1.0, 1.0, 1.0)).unwrap();
        assert_relative_eq!(b.sdf(&Vector3::new(2.0, 0.0, 0.0)), 1.0);
        assert_relative_eq!(b.sdf(&Vector3::zeros()), -1.0);
        // corner distance
        let corner = b.sdf(&Vector3::new(2.0, 2.0, 2.0));
        assert_relative_eq!(corner, 3.0_f64.sqrt(), epsilon = 1e-9);
    }

    #[test]
    fn invalid_sizes_rejected() {
        assert!(analytic_sphere(0.0).is_err());
        assert!(analytic_box(Vector3::new(1.0, -1.0, 1.0)).is_err());
    }

    #[test]
    fn sphere_projection_is_radial() {
        let s = analytic_sphere(1.0).unwrap();
        let (p, ok) = surface_project(&s, &Vector3::new(2.0, 0.0, 0.0), 16);
        assert!(ok);
        assert_relative_eq!(p, Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-5);
    }

    #[test]
    fn projection_of_surface_point_is_noop() {
        let s = analytic_sphere(1.0).unwrap();
        let start = Vector3::new(0.0, 1.0, 0.0);
        let (p, ok) = surface_project(&s, &start, 16);
        assert!(ok);
        assert!((p - start).norm() < 1e-6);
    }

    #[test]
    fn box_corner_projection_lands_on_surface() {
        let b = analytic_box(Vector3::new(1.0, 0.5, 0.75)).unwrap();
        let (p, _) = surface_project(&b, &Vector3::new(1.7, 1.1, 1.3), 32);
        assert!(b.sdf(&p).abs() < 1e-4);
    }

    #[test]
    fn rotated_sphere_is_unchanged() {
        let rot = crate::rig::rotation_about_axis(&Vector3::new(0.0, 1.0, 0.0), 30.0).unwrap();
        let field = RotatedSdf {
            inner: analytic_sphere(0.7).unwrap(),
            rotation: rot,
        };
        let p = Vector3::new(0.3, -0.4, 0.8);
        assert_relative_eq!(
            field.sdf(&p),
            p.norm() - 0.7,
            epsilon = 1e-12
        );
    }

    #[test]
    fn degenerate_gradient_flagged() {
        let s = FieldSample::from_gradient(0.1, Vector3::zeros(), [0.0; LATENT_DIM]);
        assert!(s.degenerate_gradient);
        assert_eq!(s.normal, Vector3::z());
    }
}
