//! Gauss rules: Hermite nodes for expectations under a standard normal law and
//! Legendre nodes for finite intervals.

use crate::error::{ModelError, Result};

pub const MAX_HERMITE_NODES: usize = 512;

/// Nodes and weights with `sum_i w_i f(xi_i) ~ E[f(N(0,1))]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn gauss_hermite(n: usize) -> Result<Self> {
        if n == 0 || n > MAX_HERMITE_NODES {
            return Err(ModelError::InvalidParameter(format!(
                "Gauss-Hermite node count must lie in 1..={MAX_HERMITE_NODES}, got {n}"
            )));
        }
        let (x, w) = physicists_hermite(n);
        let sqrt_pi = std::f64::consts::PI.sqrt();
        let nodes = x.iter().map(|v| v * std::f64::consts::SQRT_2).collect();
        let weights = w.iter().map(|v| v / sqrt_pi).collect();
        Ok(Self { nodes, weights })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// E[f(mean + sd * N(0,1))].
    pub fn expect<F: FnMut(f64) -> f64>(&self, mean: f64, sd: f64, mut f: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(xi, w)| w * f(mean + sd * xi))
            .sum()
    }
}

// Eigenvalues of the Jacobi matrix seed a Newton polish on the orthonormal
// Hermite recurrence; the asymptotic initial guesses skip roots for large n.
fn physicists_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    const PIM4: f64 = 0.751_125_544_464_942_5;
    let jacobi = nalgebra::DMatrix::from_fn(n, n, |i, j| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64 / 2.0).sqrt()
        } else {
            0.0
        }
    });
    let mut seeds: Vec<f64> = jacobi.symmetric_eigenvalues().iter().copied().collect();
    seeds.sort_by(|a, b| b.total_cmp(a));
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut z = seeds[i];
        let mut pp = 0.0;
        for it in 0..100 {
            let mut p1 = PIM4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) && it > 0 {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    (x, w)
}

/// Gauss-Legendre nodes and weights on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = 1.0;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = ((2.0 * jf + 1.0) * z * p2 - jf * p3) / (jf + 1.0);
            }
            pp = nf * (z * p1 - p2) / (z * z - 1.0);
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// Fixed-order Gauss-Legendre panel integrator.
#[derive(Debug, Clone)]
pub struct Legendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl Legendre {
    pub fn new(n: usize) -> Self {
        let (nodes, weights) = gauss_legendre(n);
        Self { nodes, weights }
    }

    pub fn integrate<F: FnMut(f64) -> f64>(&self, lo: f64, hi: f64, mut f: F) -> f64 {
        let half = 0.5 * (hi - lo);
        let mid = 0.5 * (hi + lo);
        half * self
            .nodes
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| w * f(mid + half * x))
            .sum::<f64>()
    }

    /// Composite rule on `panels` equal panels, split additionally at `breaks`.
    pub fn composite<F: FnMut(f64) -> f64>(
        &self,
        lo: f64,
        hi: f64,
        panel: f64,
        breaks: &[f64],
        mut f: F,
    ) -> f64 {
        let mut cuts: Vec<f64> = breaks.iter().copied().filter(|b| *b > lo && *b < hi).collect();
        cuts.push(lo);
        cuts.push(hi);
        cuts.sort_by(|a, b| a.total_cmp(b));
        cuts.dedup();
        let mut total = 0.0;
        for seg in cuts.windows(2) {
            let (a, b) = (seg[0], seg[1]);
            let k = ((b - a) / panel).ceil().max(1.0) as usize;
            let h = (b - a) / k as f64;
            for i in 0..k {
                let p = a + i as f64 * h;
                total += self.integrate(p, p + h, &mut f);
            }
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hermite_rule_moments() {
        for n in [8, 33, 64, 128, 256, 512] {
            let rule = QuadratureRule::gauss_hermite(n).unwrap();
            let total: f64 = rule.weights.iter().sum();
            assert!((total - 1.0).abs() < 1e-14, "n={n} sum={total}");
            let m1 = rule.expect(0.0, 1.0, |x| x);
            let m3 = rule.expect(0.0, 1.0, |x| x * x * x);
            assert!(m1.abs() < 1e-13 && m3.abs() < 1e-13);
            let m2 = rule.expect(0.0, 1.0, |x| x * x);
            assert!((m2 - 1.0).abs() < 1e-12, "n={n} m2={m2}");
        }
    }

    #[test]
    fn hermite_rule_reproduces_mgf() {
        let rule = QuadratureRule::gauss_hermite(64).unwrap();
        let est = rule.expect(0.0, 1.0, f64::exp);
        assert!((est / 0.5_f64.exp() - 1.0).abs() < 1e-13);
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(QuadratureRule::gauss_hermite(0).is_err());
        assert!(QuadratureRule::gauss_hermite(MAX_HERMITE_NODES + 1).is_err());
    }

    #[test]
    fn legendre_exactness() {
        let gl = Legendre::new(10);
        let v = gl.integrate(-1.0, 2.0, |x| x.powi(19));
        let exact = (2f64.powi(20) - 1.0) / 20.0;
        assert!((v / exact - 1.0).abs() < 1e-13);
        let c = gl.composite(0.0, 3.0, 0.1, &[1.234], |x| (x - 1.234).abs());
        let exact = (1.234f64.powi(2) + (3.0 - 1.234f64).powi(2)) / 2.0;
        assert!((c - exact).abs() < 1e-13);
    }
}
