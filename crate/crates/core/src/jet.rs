//! Truncated jets of maps C^2 -> C^2.
//!
//! Coefficients live in a dense triangular array indexed by bidegree `(i, j)`,
//! the exponents of `z` and `w`. Composition truncates at the cutoff right away.

use crate::error::{Error, Result};
use crate::linalg::{cr, Mat2, Vec2, C64};
use serde::{Deserialize, Serialize};

#[inline]
pub(crate) fn tri(k: usize) -> usize {
    (k + 1) * (k + 2) / 2
}

#[inline]
pub(crate) fn idx(i: usize, j: usize) -> usize {
    let m = i + j;
    m * (m + 1) / 2 + i
}

/// Dense scalar polynomial in (z, w) truncated at total degree `k`.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Series {
    k: usize,
    c: Vec<C64>,
}

impl Series {
    fn zero(k: usize) -> Self {
        Series { k, c: vec![cr(0.0); tri(k)] }
    }

    fn mul(&self, o: &Series) -> Series {
        let k = self.k;
        let mut out = Series::zero(k);
        for m1 in 0..=k {
            for i1 in 0..=m1 {
                let a = self.c[idx(i1, m1 - i1)];
                if a == cr(0.0) {
                    continue;
                }
                for m2 in 0..=(k - m1) {
                    for i2 in 0..=m2 {
                        let b = o.c[idx(i2, m2 - i2)];
                        if b == cr(0.0) {
                            continue;
                        }
                        out.c[idx(i1 + i2, m1 + m2 - i1 - i2)] += a * b;
                    }
                }
            }
        }
        out
    }

    fn one(k: usize) -> Series {
        let mut s = Series::zero(k);
        s.c[0] = cr(1.0);
        s
    }

    fn axpy(&mut self, a: C64, x: &Series) {
        for (y, v) in self.c.iter_mut().zip(&x.c) {
            *y += a * v;
        }
    }
}

/// A truncated polynomial map of two complex variables.
#[derive(Clone, Debug, PartialEq)]
pub struct PolyMap2 {
    k: usize,
    comps: [Vec<C64>; 2],
}

#[derive(Serialize, Deserialize)]
struct PolyJson {
    #[serde(rename = "K")]
    k: usize,
    coeffs: Vec<(u8, usize, usize, f64, f64)>,
}

impl PolyMap2 {
    pub fn zero(k: usize) -> Self {
        assert!(k >= 1, "cutoff must be at least 1");
        PolyMap2 { k, comps: [vec![cr(0.0); tri(k)], vec![cr(0.0); tri(k)]] }
    }

    pub fn identity(k: usize) -> Self {
        PolyMap2::linear(&Mat2::identity(), k)
    }

    pub fn linear(m: &Mat2, k: usize) -> Self {
        let mut p = PolyMap2::zero(k);
        p.set(0, 1, 0, m.a11);
        p.set(0, 0, 1, m.a12);
        p.set(1, 1, 0, m.a21);
        p.set(1, 0, 1, m.a22);
        p
    }

    pub fn cutoff(&self) -> usize {
        self.k
    }

    /// Coefficient of `z^i w^j` in component `comp` (0 or 1).
    pub fn get(&self, comp: usize, i: usize, j: usize) -> C64 {
        if i + j > self.k {
            return cr(0.0);
        }
        self.comps[comp][idx(i, j)]
    }

    /// Sets a coefficient; terms above the cutoff are rejected.
    pub fn set(&mut self, comp: usize, i: usize, j: usize, v: C64) {
        assert!(i + j <= self.k, "bidegree ({i},{j}) above cutoff {}", self.k);
        self.comps[comp][idx(i, j)] = v;
    }

    pub fn add_to(&mut self, comp: usize, i: usize, j: usize, v: C64) {
        assert!(i + j <= self.k);
        self.comps[comp][idx(i, j)] += v;
    }

    pub fn constant(&self) -> Vec2 {
        Vec2::new(self.comps[0][0], self.comps[1][0])
    }

    pub fn linear_part(&self) -> Mat2 {
        Mat2::new(self.get(0, 1, 0), self.get(0, 0, 1), self.get(1, 1, 0), self.get(1, 0, 1))
    }

    /// Iterates over `(comp, i, j, coefficient)` for all stored terms of degree >= 1.
    pub fn terms(&self) -> impl Iterator<Item = (usize, usize, usize, C64)> + '_ {
        (0..2).flat_map(move |comp| (1..=self.k).flat_map(move |m| (0..=m).map(move |i| (comp, i, m - i, self.get(comp, i, m - i)))))
    }

    /// Copy with all terms of total degree outside `lo..=hi` removed.
    pub fn degree_band(&self, lo: usize, hi: usize) -> PolyMap2 {
        let mut out = PolyMap2::zero(self.k);
        for (comp, i, j, v) in self.terms() {
            let m = i + j;
            if m >= lo && m <= hi {
                out.set(comp, i, j, v);
            }
        }
        if lo == 0 {
            out.comps[0][0] = self.comps[0][0];
            out.comps[1][0] = self.comps[1][0];
        }
        out
    }

    /// Same map with a new cutoff (terms above it dropped).
    pub fn with_cutoff(&self, k: usize) -> PolyMap2 {
        let mut out = PolyMap2::zero(k);
        for m in 0..=k.min(self.k) {
            for i in 0..=m {
                for c_ in 0..2 {
                    out.comps[c_][idx(i, m - i)] = self.comps[c_][idx(i, m - i)];
                }
            }
        }
        out
    }

    pub fn add(&self, o: &PolyMap2) -> PolyMap2 {
        let k = self.k.max(o.k);
        let mut out = self.with_cutoff(k);
        for (comp, i, j, v) in o.terms() {
            out.add_to(comp, i, j, v);
        }
        out
    }

    pub fn sub(&self, o: &PolyMap2) -> PolyMap2 {
        self.add(&o.scale(cr(-1.0)))
    }

    pub fn scale(&self, s: C64) -> PolyMap2 {
        let mut out = self.clone();
        for comp in out.comps.iter_mut() {
            for v in comp.iter_mut() {
                *v *= s;
            }
        }
        out
    }

    /// Largest coefficient modulus among degrees in `lo..=hi`.
    pub fn max_abs_in(&self, lo: usize, hi: usize) -> f64 {
        self.terms().filter(|&(_, i, j, _)| i + j >= lo && i + j <= hi).map(|t| t.3.norm()).fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.max_abs_in(1, self.k)
    }

    /// Largest coefficient difference over the common cutoff.
    pub fn max_diff(&self, o: &PolyMap2) -> f64 {
        let k = self.k.min(o.k);
        self.with_cutoff(k).sub(&o.with_cutoff(k)).max_abs()
    }

    /// Largest deviation from the identity, coefficient-wise.
    pub fn max_diff_identity(&self) -> f64 {
        self.max_diff(&PolyMap2::identity(self.k))
    }

    pub fn is_finite(&self) -> bool {
        self.comps.iter().all(|c_| c_.iter().all(|v| v.is_finite()))
    }

    /// Highest total degree with a nonzero coefficient (0 for the zero map).
    pub fn degree(&self) -> usize {
        self.terms().filter(|t| t.3 != cr(0.0)).map(|t| t.1 + t.2).max().unwrap_or(0)
    }

    /// Highest total degree whose coefficients exceed `tol` in modulus.
    pub fn degree_tol(&self, tol: f64) -> usize {
        self.terms().filter(|t| t.3.norm() > tol).map(|t| t.1 + t.2).max().unwrap_or(0)
    }

    /// Sum over degrees m >= 2 of the coefficient moduli, per component.
    pub fn nonlinear_l1(&self) -> [f64; 2] {
        let mut s = [0.0; 2];
        for (comp, i, j, v) in self.terms() {
            if i + j >= 2 {
                s[comp] += v.norm();
            }
        }
        s
    }

    fn component_series(&self, comp: usize, k: usize) -> Series {
        let mut s = Series::zero(k);
        for m in 0..=k.min(self.k) {
            for i in 0..=m {
                s.c[idx(i, m - i)] = self.comps[comp][idx(i, m - i)];
            }
        }
        s
    }

    fn from_series(k: usize, s0: &Series, s1: &Series) -> PolyMap2 {
        PolyMap2 { k, comps: [s0.c.clone(), s1.c.clone()] }
    }

    /// Horner evaluation.
    pub fn evaluate(&self, v: &Vec2) -> Vec2 {
        Vec2::new(self.eval_comp(0, v), self.eval_comp(1, v))
    }

    fn eval_comp(&self, comp: usize, v: &Vec2) -> C64 {
        let k = self.k;
        let c_ = &self.comps[comp];
        let mut outer = cr(0.0);
        for i in (0..=k).rev() {
            let mut inner = cr(0.0);
            for j in (0..=(k - i)).rev() {
                inner = inner * v.w + c_[idx(i, j)];
            }
            outer = outer * v.z + inner;
        }
        outer
    }

    /// Jacobian matrix at a point.
    pub fn jacobian(&self, v: &Vec2) -> Mat2 {
        let mut m = [[cr(0.0); 2]; 2];
        for (comp, i, j, a) in self.terms() {
            if a == cr(0.0) {
                continue;
            }
            if i > 0 {
                m[comp][0] += a * cr(i as f64) * v.z.powu(i as u32 - 1) * v.w.powu(j as u32);
            }
            if j > 0 {
                m[comp][1] += a * cr(j as f64) * v.z.powu(i as u32) * v.w.powu(j as u32 - 1);
            }
        }
        Mat2::new(m[0][0], m[0][1], m[1][0], m[1][1])
    }

    /// `M ∘ self`.
    pub fn left_linear(&self, m: &Mat2) -> PolyMap2 {
        let mut out = PolyMap2::zero(self.k);
        for t in 0..tri(self.k) {
            let (a, b) = (self.comps[0][t], self.comps[1][t]);
            out.comps[0][t] = m.a11 * a + m.a12 * b;
            out.comps[1][t] = m.a21 * a + m.a22 * b;
        }
        out
    }

    /// `self ∘ M`.
    pub fn right_linear(&self, m: &Mat2) -> PolyMap2 {
        compose(self, &PolyMap2::linear(m, self.k), self.k).expect("linear map has no constant term")
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        let mut coeffs = Vec::new();
        for (comp, i, j, v) in self.terms() {
            if v != cr(0.0) {
                coeffs.push((comp as u8 + 1, i, j, v.re, v.im));
            }
        }
        serde_json::to_value(PolyJson { k: self.k, coeffs }).expect("serializable")
    }

    pub fn to_json(&self) -> String {
        self.to_json_value().to_string()
    }

    pub fn from_json_value(v: &serde_json::Value) -> Result<PolyMap2> {
        let pj: PolyJson = serde_json::from_value(v.clone())?;
        if pj.k == 0 {
            return Err(Error::Parse("cutoff K must be at least 1".into()));
        }
        let mut p = PolyMap2::zero(pj.k);
        for (comp, i, j, re, im) in pj.coeffs {
            if comp != 1 && comp != 2 {
                return Err(Error::Parse(format!("component {comp} not in {{1,2}}")));
            }
            if i + j == 0 || i + j > pj.k {
                return Err(Error::Parse(format!("bidegree ({i},{j}) outside 1..={}", pj.k)));
            }
            if !re.is_finite() || !im.is_finite() {
                return Err(Error::Parse("non-finite coefficient".into()));
            }
            p.set(comp as usize - 1, i, j, C64::new(re, im));
        }
        Ok(p)
    }

    pub fn from_json(s: &str) -> Result<PolyMap2> {
        let v: serde_json::Value = serde_json::from_str(s)?;
        PolyMap2::from_json_value(&v)
    }

    /// Sets a constant term. Only used to build inputs that `compose` must reject.
    pub fn with_constant(mut self, c_: Vec2) -> PolyMap2 {
        self.comps[0][0] = c_.z;
        self.comps[1][0] = c_.w;
        self
    }
}

/// Truncation of `p ∘ q` to total degree `k`.
pub fn compose(p: &PolyMap2, q: &PolyMap2, k: usize) -> Result<PolyMap2> {
    if p.k < k || q.k < k {
        return Err(Error::Contract(format!("compose at cutoff {k} needs inputs with cutoff >= {k} (got {} and {})", p.k, q.k)));
    }
    if q.constant() != Vec2::ZERO {
        return Err(Error::Domain("inner map has a constant term".into()));
    }
    let q1 = q.component_series(0, k);
    let q2 = q.component_series(1, k);
    let mut pw2 = vec![Series::one(k)];
    for j in 1..=k {
        let next = pw2[j - 1].mul(&q2);
        pw2.push(next);
    }
    let mut out = [Series::zero(k), Series::zero(k)];
    // Horner in the first variable: sum_i q1^i * (sum_j c_ij q2^j)
    for (comp, acc) in out.iter_mut().enumerate() {
        let mut total = Series::zero(k);
        for i in (0..=k).rev() {
            let mut inner = Series::zero(k);
            for j in 0..=(k - i) {
                let a = p.get(comp, i, j);
                if a != cr(0.0) {
                    inner.axpy(a, &pw2[j]);
                }
            }
            total = total.mul(&q1);
            total.axpy(cr(1.0), &inner);
        }
        *acc = total;
    }
    Ok(PolyMap2::from_series(k, &out[0], &out[1]))
}

/// Formal inverse up to degree `k`: both compositions equal the identity through degree `k`.
pub fn invert_formal(p: &PolyMap2, k: usize) -> Result<PolyMap2> {
    if p.k < k {
        return Err(Error::Contract(format!("invert at cutoff {k} needs cutoff >= {k}")));
    }
    if p.constant() != Vec2::ZERO {
        return Err(Error::Domain("map has a constant term".into()));
    }
    let l = p.linear_part();
    if l.det().norm() <= 1e-14 {
        return Err(Error::Singular(format!("|det| = {:e}", l.det().norm())));
    }
    let linv = l.inverse().ok_or_else(|| Error::Singular("linear part not invertible".into()))?;
    let nonlin = p.with_cutoff(k).degree_band(2, k);
    let mut q = PolyMap2::linear(&linv, k);
    // q <- L^{-1} (Id - N∘q); each pass fixes one more degree
    for _ in 1..k {
        let nq = compose(&nonlin, &q, k)?;
        q = PolyMap2::identity(k).sub(&nq).left_linear(&linv);
    }
    Ok(q)
}

/// Result of checking the Cauchy coefficient bound.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CauchyReport {
    pub pass: bool,
    pub d: f64,
    /// `(comp, i, j, |coefficient|, bound)` for every violating term; comp is 1-based.
    pub violations: Vec<(u8, usize, usize, f64, f64)>,
}

/// Checks `|coefficient| <= D·(√2)^m` for every term of degree `m`.
pub fn cauchy_certify(p: &PolyMap2, d: f64) -> CauchyReport {
    let mut violations = Vec::new();
    for (comp, i, j, v) in p.terms() {
        let m = (i + j) as i32;
        let bound = d * std::f64::consts::SQRT_2.powi(m);
        if v.norm() > bound {
            violations.push((comp as u8 + 1, i, j, v.norm(), bound));
        }
    }
    CauchyReport { pass: violations.is_empty(), d, violations }
}
