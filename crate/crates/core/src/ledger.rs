//! Run constants for the general pipeline and the limit map.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstantsLedger {
    #[serde(rename = "C")]
    pub c: f64,
    #[serde(rename = "D")]
    pub d: f64,
    pub k: f64,
    pub x: f64,
    pub eps: f64,
    pub delta: f64,
    pub lambda: f64,
    #[serde(rename = "K1")]
    pub k1: f64,
    #[serde(rename = "K2")]
    pub k2: f64,
    #[serde(rename = "K3")]
    pub k3: f64,
    #[serde(rename = "X")]
    pub x_bound: f64,
    #[serde(rename = "Y1")]
    pub y1: f64,
    /// Envelope constant `Y = Y_2` used in the coefficient bound.
    #[serde(rename = "Y")]
    pub y: f64,
    /// `4 D^2 K_3 / C^2 (6 Y X + 1)`, the envelope constant for late trains.
    pub z_formula: f64,
    /// Envelope constant actually used: sup of observed coefficient ratios.
    #[serde(rename = "Z")]
    pub z: Option<f64>,
    #[serde(rename = "M")]
    pub m: Option<f64>,
    pub j0: Option<usize>,
    pub j1: Option<usize>,
}

/// Upper limit for epsilon: `min{(11-5k)/4, (5-2k)/3, (3-k)/2}`.
pub fn eps_limit(k: f64) -> f64 {
    ((11.0 - 5.0 * k) / 4.0).min((5.0 - 2.0 * k) / 3.0).min((3.0 - k) / 2.0)
}

pub fn k1(c_: f64, d: f64, x: f64) -> f64 {
    d / (c_ * (1.0 - d.powf(1.0 - 1.0 / x)))
}

pub fn k2(c_: f64, d: f64, k: f64, x: f64) -> f64 {
    let k1 = k1(c_, d, x);
    (2.0 * k1 * k1).powf(x + 1.0) * d.powf(-(k - x) * (x + 1.0) / x)
}

impl ConstantsLedger {
    pub fn new(c_: f64, d: f64, k: f64, x: f64, eps: Option<f64>, delta: Option<f64>, lambda: Option<f64>) -> Result<Self> {
        if !(0.0 < c_ && c_ <= d && d < 1.0) {
            return Err(Error::Config(format!("need 0 < C <= D < 1, got C={c_}, D={d}")));
        }
        if !(1.0 < x && x < k) {
            return Err(Error::Config(format!("need 1 < x < k, got x={x}, k={k}")));
        }
        let lim = eps_limit(k);
        if lim <= 0.0 {
            return Err(Error::Config(format!("no admissible epsilon for k={k}: min bound {lim} <= 0")));
        }
        let eps = eps.unwrap_or(lim / 2.0);
        if !(0.0 < eps && eps < lim) {
            return Err(Error::Config(format!("need 0 < eps < {lim}, got eps={eps}")));
        }
        let delta = delta.unwrap_or(0.05);
        if delta <= 0.0 {
            return Err(Error::Config(format!("need delta > 0, got {delta}")));
        }
        let dk_c = d.powf(k) / c_;
        if dk_c >= 1.0 {
            return Err(Error::Config(format!("need D^k < C, got D^k={} and C={c_}", d.powf(k))));
        }
        let lambda = lambda.unwrap_or((dk_c + 1.0) / 2.0);
        if !(lambda < 1.0 && dk_c < lambda) {
            return Err(Error::Config(format!("need D^k < lambda C and lambda < 1, got lambda={lambda}")));
        }
        let k1 = k1(c_, d, x);
        let k2 = k2(c_, d, k, x);
        let k3 = k2.powf(1.0 / x);
        let de = d.powf(eps / 2.0);
        let x_bound = 4.0 * d * d / (c_ * c_ * delta * (1.0 - de));
        let denom = c_ * c_ * c_.powf(1.0 - eps) * de * (1.0 - de);
        let y1 = 4.0 * d * d / denom + 1.0;
        let y = y1 * (8.0 * d * d / denom + 1.0);
        let z_formula = 4.0 * d * d * k3 / (c_ * c_) * (6.0 * y * x_bound + 1.0);
        Ok(ConstantsLedger { c: c_, d, k, x, eps, delta, lambda, k1, k2, k3, x_bound, y1, y, z_formula, z: None, m: None, j0: None, j1: None })
    }

    /// Exponent `k - 2 + eps` of the coefficient envelope.
    pub fn envelope_exponent(&self) -> f64 {
        self.k - 2.0 + self.eps
    }

    /// Contraction ratio `D^k / (lambda C)` of the limit-map estimates.
    pub fn rho(&self) -> f64 {
        self.d.powf(self.k) / (self.lambda * self.c)
    }

    /// Smallest `j >= 1` with `(1 + Z/(C(1-D))) D^{2^{j-1}/(k-x)} < 1/2`.
    pub fn compute_j1(&self, z: f64) -> usize {
        let lead = (1.0 + z / (self.c * (1.0 - self.d))).ln();
        let mut j = 1usize;
        while lead + 2f64.powi(j as i32 - 1) / (self.k - self.x) * self.d.ln() >= (0.5f64).ln() {
            j += 1;
        }
        j
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k1_formula_value() {
        let v = k1(0.4, 0.5, 1.5);
        let direct = 0.5 / (0.4 * (1.0 - 0.5f64.powf(1.0 / 3.0)));
        assert!((v - direct).abs() <= 1e-14 * direct);
        assert!((v - 6.059_152_627_328_84).abs() < 1e-12);
        assert!((v - 6.068).abs() / 6.068 < 0.01);
    }

    #[test]
    fn eps_limit_at_k_2_1() {
        // (11-10.5)/4 = 0.125 is the binding bound
        assert!((eps_limit(2.1) - 0.125).abs() < 1e-12);
    }

    #[test]
    fn ledger_rejects_large_eps() {
        assert!(ConstantsLedger::new(0.3, 0.5, 2.1, 1.5, Some(0.2), None, None).is_err());
        assert!(ConstantsLedger::new(0.3, 0.5, 2.1, 1.5, Some(0.1), Some(0.05), None).is_ok());
    }

    #[test]
    fn default_lambda_is_admissible() {
        let l = ConstantsLedger::new(0.3, 0.5, 2.1, 1.5, None, None, None).unwrap();
        assert!(l.lambda < 1.0 && l.rho() < 1.0);
        assert!(l.k3 >= 1.0);
    }

    #[test]
    fn j1_satisfies_its_inequality() {
        let l = ConstantsLedger::new(0.3, 0.5, 2.1, 1.5, None, None, None).unwrap();
        let j = l.compute_j1(100.0);
        let f = |j: usize| (1.0 + 100.0 / (0.3 * 0.5)) * 0.5f64.powf(2f64.powi(j as i32 - 1) / 0.6);
        assert!(f(j) < 0.5);
        assert!(j == 1 || f(j - 1) >= 0.5);
    }
}
