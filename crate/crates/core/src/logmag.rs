//! Magnitudes stored as natural logarithms.

use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::ops::{Div, Mul};

/// A nonnegative magnitude held as its natural log. Zero is `ln = -inf`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogMag {
    pub ln: f64,
}

impl LogMag {
    pub const ONE: LogMag = LogMag { ln: 0.0 };
    pub const ZERO: LogMag = LogMag { ln: f64::NEG_INFINITY };

    pub fn from_f64(x: f64) -> Self {
        LogMag { ln: x.abs().ln() }
    }

    pub fn from_ln(ln: f64) -> Self {
        LogMag { ln }
    }

    /// `base^e` with the exponent kept exact as a multiplier on `ln base`.
    pub fn powf_of(base: f64, e: f64) -> Self {
        LogMag { ln: e * base.ln() }
    }

    pub fn is_zero(&self) -> bool {
        self.ln == f64::NEG_INFINITY
    }

    pub fn powf(self, e: f64) -> Self {
        if self.is_zero() {
            return if e > 0.0 { LogMag::ZERO } else { LogMag::ONE };
        }
        LogMag { ln: self.ln * e }
    }

    pub fn recip(self) -> Self {
        LogMag { ln: -self.ln }
    }

    /// Value as a float; may over- or underflow.
    pub fn to_f64(self) -> f64 {
        self.ln.exp()
    }

    /// Logarithm in base `1/d`.
    pub fn log_base_inv(self, d: f64) -> f64 {
        self.ln / (1.0 / d).ln()
    }

    pub fn max(self, o: LogMag) -> LogMag {
        if self.ln >= o.ln {
            self
        } else {
            o
        }
    }

    pub fn min(self, o: LogMag) -> LogMag {
        if self.ln <= o.ln {
            self
        } else {
            o
        }
    }

    pub fn add(self, o: LogMag) -> LogMag {
        let (hi, lo) = if self.ln >= o.ln { (self.ln, o.ln) } else { (o.ln, self.ln) };
        if hi == f64::NEG_INFINITY {
            return LogMag::ZERO;
        }
        LogMag { ln: hi + (lo - hi).exp().ln_1p() }
    }

    /// Log-domain slack of `self <= bound`; nonnegative when it holds.
    pub fn slack_le(self, bound: LogMag) -> f64 {
        bound.ln - self.ln
    }

    /// Log-domain slack of `self >= bound`.
    pub fn slack_ge(self, bound: LogMag) -> f64 {
        self.ln - bound.ln
    }
}

impl Mul for LogMag {
    type Output = LogMag;
    fn mul(self, o: LogMag) -> LogMag {
        LogMag { ln: self.ln + o.ln }
    }
}

impl Div for LogMag {
    type Output = LogMag;
    fn div(self, o: LogMag) -> LogMag {
        LogMag { ln: self.ln - o.ln }
    }
}

impl PartialOrd for LogMag {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        self.ln.partial_cmp(&o.ln)
    }
}

/// Prefix sums of per-step log values, so that `range(m, n) = Σ_{i=m}^{n-1} x_i`.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct LogPrefix {
    prefix: Vec<f64>,
}

impl LogPrefix {
    pub fn new() -> Self {
        LogPrefix { prefix: vec![0.0] }
    }

    pub fn from_steps(steps: impl IntoIterator<Item = f64>) -> Self {
        let mut p = LogPrefix::new();
        for s in steps {
            p.push(s);
        }
        p
    }

    pub fn push(&mut self, step: f64) {
        let last = *self.prefix.last().unwrap();
        self.prefix.push(last + step);
    }

    pub fn len(&self) -> usize {
        self.prefix.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Log of the product over steps `m..n`.
    pub fn range(&self, m: usize, n: usize) -> f64 {
        self.prefix[n] - self.prefix[m]
    }

    pub fn mag(&self, m: usize, n: usize) -> LogMag {
        LogMag::from_ln(self.range(m, n))
    }
}
