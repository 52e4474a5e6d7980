//! Truncated Taylor series ("jets") used to obtain exact higher derivatives
//! of the risk-aversion shapes and of the utilities built from them.
//!
//! A jet `s` at a point `x0` stores `s[k] = f^(k)(x0) / k!`.

pub const JET_LEN: usize = 11;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jet(pub [f64; JET_LEN]);

impl Jet {
    pub fn constant(c: f64) -> Self {
        let mut s = [0.0; JET_LEN];
        s[0] = c;
        Jet(s)
    }

    /// The identity function expanded at `x0`.
    pub fn variable(x0: f64) -> Self {
        let mut s = [0.0; JET_LEN];
        s[0] = x0;
        s[1] = 1.0;
        Jet(s)
    }

    pub fn value(&self) -> f64 {
        self.0[0]
    }

    /// k-th derivative at the expansion point.
    pub fn derivative(&self, k: usize) -> f64 {
        self.0[k] * factorial(k)
    }

    pub fn derivatives(&self, order: usize) -> Vec<f64> {
        (0..=order).map(|k| self.derivative(k)).collect()
    }

    pub fn scale(&self, c: f64) -> Self {
        let mut out = self.0;
        out.iter_mut().for_each(|v| *v *= c);
        Jet(out)
    }

    pub fn add(&self, other: &Jet) -> Self {
        let mut out = self.0;
        for (o, b) in out.iter_mut().zip(other.0.iter()) {
            *o += b;
        }
        Jet(out)
    }

    pub fn add_constant(&self, c: f64) -> Self {
        let mut out = self.0;
        out[0] += c;
        Jet(out)
    }

    pub fn mul(&self, other: &Jet) -> Self {
        let mut out = [0.0; JET_LEN];
        for (i, a) in self.0.iter().enumerate() {
            if *a == 0.0 {
                continue;
            }
            for (j, b) in other.0.iter().take(JET_LEN - i).enumerate() {
                out[i + j] += a * b;
            }
        }
        Jet(out)
    }

    /// Antiderivative vanishing at the expansion point; the top coefficient is dropped.
    pub fn integrate(&self) -> Self {
        let mut out = [0.0; JET_LEN];
        for k in 1..JET_LEN {
            out[k] = self.0[k - 1] / k as f64;
        }
        Jet(out)
    }

    pub fn exp(&self) -> Self {
        let f = &self.0;
        let mut g = [0.0; JET_LEN];
        g[0] = f[0].exp();
        for k in 1..JET_LEN {
            let mut acc = 0.0;
            for j in 1..=k {
                acc += j as f64 * f[j] * g[k - j];
            }
            g[k] = acc / k as f64;
        }
        Jet(g)
    }

    pub fn sin_cos(&self) -> (Self, Self) {
        let f = &self.0;
        let mut s = [0.0; JET_LEN];
        let mut c = [0.0; JET_LEN];
        s[0] = f[0].sin();
        c[0] = f[0].cos();
        for k in 1..JET_LEN {
            let mut acc_s = 0.0;
            let mut acc_c = 0.0;
            for j in 1..=k {
                let jf = j as f64 * f[j];
                acc_s += jf * c[k - j];
                acc_c -= jf * s[k - j];
            }
            s[k] = acc_s / k as f64;
            c[k] = acc_c / k as f64;
        }
        (Jet(s), Jet(c))
    }

    /// tanh via t' = (1 - t^2) f'.
    pub fn tanh(&self) -> Self {
        let f = &self.0;
        let mut t = [0.0; JET_LEN];
        let mut t2 = [0.0; JET_LEN];
        t[0] = f[0].tanh();
        t2[0] = t[0] * t[0];
        for k in 1..JET_LEN {
            let mut acc = 0.0;
            for j in 1..=k {
                let one_minus = if k == j { 1.0 } else { 0.0 } - t2[k - j];
                acc += j as f64 * f[j] * one_minus;
            }
            t[k] = acc / k as f64;
            t2[k] = (0..=k).map(|i| t[i] * t[k - i]).sum();
        }
        Jet(t)
    }

    pub fn recip(&self) -> Self {
        let f = &self.0;
        let mut g = [0.0; JET_LEN];
        g[0] = 1.0 / f[0];
        for k in 1..JET_LEN {
            let acc: f64 = (1..=k).map(|j| f[j] * g[k - j]).sum();
            g[k] = -acc / f[0];
        }
        Jet(g)
    }
}

pub fn factorial(k: usize) -> f64 {
    (1..=k).fold(1.0, |acc, i| acc * i as f64)
}
