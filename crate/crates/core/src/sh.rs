//! Real spherical harmonics basis.

use nalgebra::Vector3;

/// Number of basis functions for a given maximum band.
pub fn basis_count(l_max: usize) -> usize {
    (l_max + 1) * (l_max + 1)
}

/// Flat index of (l, m) with m in -l..=l.
pub fn lm_index(l: usize, m: i64) -> usize {
    (l * l) as usize + (m + l as i64) as usize
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Associated Legendre P_l^m(x) for m >= 0, Condon-Shortley phase included.
fn assoc_legendre(l: usize, m: usize, x: f64) -> f64 {
    debug_assert!(m <= l);
    // P_m^m by the double-factorial closed form.
    let somx2 = ((1.0 - x) * (1.0 + x)).max(0.0).sqrt();
    let mut pmm = 1.0;
    let mut fact = 1.0;
    for _ in 0..m {
        pmm *= -fact * somx2;
        fact += 2.0;
    }
    if l == m {
        return pmm;
    }
    let mut pmmp1 = x * (2.0 * m as f64 + 1.0) * pmm;
    if l == m + 1 {
        return pmmp1;
    }
    let mut pll = 0.0;
    for ll in (m + 2)..=l {
        pll = ((2.0 * ll as f64 - 1.0) * x * pmmp1 - (ll + m - 1) as f64 * pmm)
            / (ll - m) as f64;
        pmm = pmmp1;
        pmmp1 = pll;
    }
    pll
}

fn normalization(l: usize, m: usize) -> f64 {
    ((2.0 * l as f64 + 1.0) / (4.0 * std::f64::consts::PI) * factorial(l - m)
        / factorial(l + m))
        .sqrt()
}

/// Evaluates the full real SH basis up to `l_max` at a unit direction.
///
/// Convention: z is the polar axis, phi measured from +x toward +y.
pub fn eval_basis(l_max: usize, dir: &Vector3<f64>) -> Vec<f64> {
    let ct = dir.z.clamp(-1.0, 1.0);
    let phi = dir.y.atan2(dir.x);
    let sqrt2 = std::f64::consts::SQRT_2;
    let mut out = vec![0.0; basis_count(l_max)];
    for l in 0..=l_max {
        for m in -(l as i64)..=(l as i64) {
            let am = m.unsigned_abs() as usize;
            let p = assoc_legendre(l, am, ct);
            let k = normalization(l, am);
            let v = match m.cmp(&0) {
                std::cmp::Ordering::Equal => k * p,
                std::cmp::Ordering::Greater => sqrt2 * k * (m as f64 * phi).cos() * p,
                std::cmp::Ordering::Less => sqrt2 * k * (am as f64 * phi).sin() * p,
            };
            out[lm_index(l, m)] = v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad::fibonacci_sphere;

    #[test]
    fn y00_is_constant() {
        let b = eval_basis(0, &Vector3::new(0.3, -0.5, 0.8).normalize());
        assert!((b[0] - 0.28209479177387814).abs() < 1e-12);
    }

    #[test]
    fn y10_is_proportional_to_z() {
        let d = Vector3::new(0.1, 0.2, 0.9).normalize();
        let b = eval_basis(1, &d);
        let expect = (3.0 / (4.0 * std::f64::consts::PI)).sqrt() * d.z;
        assert!((b[lm_index(1, 0)] - expect).abs() < 1e-12);
    }

    #[test]
    fn basis_is_orthonormal_under_quadrature() {
        // Spot-check a few pairs with the Fibonacci rule.
        let rule = fibonacci_sphere(4096);
        let l_max = 3;
        let n = basis_count(l_max);
        let mut gram = vec![vec![0.0; n]; n];
        for (d, w) in rule.dirs.iter().zip(rule.weights.iter()) {
            let b = eval_basis(l_max, d);
            for i in 0..n {
                for j in 0..n {
                    gram[i][j] += b[i] * b[j] * w;
                }
            }
        }
        for i in 0..n {
            for j in 0..n {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (gram[i][j] - expect).abs() < 0.02,
                    "gram[{i}][{j}] = {}",
                    gram[i][j]
                );
            }
        }
    }
}
