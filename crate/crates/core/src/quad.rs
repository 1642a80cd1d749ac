//! Deterministic spherical quadrature rules.

use nalgebra::Vector3;

use crate::error::{Error, Result};

/// Fixed direction/weight rule for integrals over the sphere or hemisphere.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    pub dirs: Vec<Vector3<f64>>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.dirs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dirs.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dirs.is_empty() {
            return Err(Error::validation("quadrature rule has no samples"));
        }
        Ok(())
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }
}

const GOLDEN_ANGLE: f64 = 2.399963229728653; // pi * (3 - sqrt(5))

/// Fibonacci spiral covering the full sphere; weights sum to 4*pi exactly.
pub fn fibonacci_sphere(samples: usize) -> QuadratureRule {
    let mut dirs = Vec::with_capacity(samples);
    let w = 4.0 * std::f64::consts::PI / samples as f64;
    for i in 0..samples {
        let z = 1.0 - (2.0 * i as f64 + 1.0) / samples as f64;
        let r = (1.0 - z * z).max(0.0).sqrt();
        let phi = GOLDEN_ANGLE * i as f64;
        dirs.push(Vector3::new(r * phi.cos(), r * phi.sin(), z));
    }
    QuadratureRule {
        dirs,
        weights: vec![w; samples],
    }
}

/// Fibonacci spiral on the +Z hemisphere; weights sum to 2*pi exactly.
pub fn fibonacci_hemisphere(samples: usize) -> QuadratureRule {
    let mut dirs = Vec::with_capacity(samples);
    let w = 2.0 * std::f64::consts::PI / samples as f64;
    for i in 0..samples {
        let z = 1.0 - (i as f64 + 0.5) / samples as f64;
        let r = (1.0 - z * z).max(0.0).sqrt();
        let phi = GOLDEN_ANGLE * i as f64;
        dirs.push(Vector3::new(r * phi.cos(), r * phi.sin(), z));
    }
    QuadratureRule {
        dirs,
        weights: vec![w; samples],
    }
}

/// Orthonormal frame with `n` as the third column.
pub fn build_frame(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let a = if n.x.abs() < 0.9 {
        Vector3::new(1.0, 0.0, 0.0)
    } else {
        Vector3::new(0.0, 1.0, 0.0)
    };
    let u = n.cross(&a).normalize();
    let v = n.cross(&u);
    (u, v)
}

/// Rotates a +Z-hemisphere rule so its pole lies along `n`.
pub fn oriented_hemisphere(samples: usize, n: &Vector3<f64>) -> QuadratureRule {
    let base = fibonacci_hemisphere(samples);
    let (u, v) = build_frame(n);
    let dirs = base
        .dirs
        .iter()
        .map(|d| u * d.x + v * d.y + n * d.z)
        .collect();
    QuadratureRule {
        dirs,
        weights: base.weights,
    }
}

/// Deterministic GGX-lobe sample directions around axis `t` with `alpha = rho^2`.
///
/// The directions are importance-warped so that for any integrand f,
/// `mean_j f(dir_j)` estimates `integral f(w) D(w.t) (w.t)+ dw` where D is the
/// GGX normal distribution. The lobe integrates to 1 by construction.
pub fn ggx_lobe_dirs(t: &Vector3<f64>, rho: f64, samples: usize) -> Vec<Vector3<f64>> {
    let alpha = (rho * rho).max(1e-8);
    let a2 = alpha * alpha;
    let (u, v) = build_frame(t);
    let mut dirs = Vec::with_capacity(samples);
    for i in 0..samples {
        let e = (i as f64 + 0.5) / samples as f64;
        let ct = ((1.0 - e) / (1.0 + (a2 - 1.0) * e)).max(0.0).sqrt();
        let st = (1.0 - ct * ct).max(0.0).sqrt();
        let phi = GOLDEN_ANGLE * i as f64;
        let local = Vector3::new(st * phi.cos(), st * phi.sin(), ct);
        dirs.push(u * local.x + v * local.y + t * local.z);
    }
    dirs
}
