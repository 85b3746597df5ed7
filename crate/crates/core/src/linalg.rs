//! Points and 2x2 complex matrices.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

pub type C64 = Complex64;

pub const UNITARY_TOL: f64 = 1e-12;

#[inline]
pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

#[inline]
pub fn cr(re: f64) -> C64 {
    C64::new(re, 0.0)
}

/// A point of C^2.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vec2 {
    pub z: C64,
    pub w: C64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { z: C64::new(0.0, 0.0), w: C64::new(0.0, 0.0) };

    pub fn new(z: C64, w: C64) -> Self {
        Vec2 { z, w }
    }

    pub fn real(z: f64, w: f64) -> Self {
        Vec2 { z: cr(z), w: cr(w) }
    }

    pub fn norm(&self) -> f64 {
        self.z.norm().hypot(self.w.norm())
    }

    pub fn is_finite(&self) -> bool {
        self.z.is_finite() && self.w.is_finite()
    }

    pub fn scale(&self, s: C64) -> Vec2 {
        Vec2 { z: self.z * s, w: self.w * s }
    }

    pub fn add(&self, o: &Vec2) -> Vec2 {
        Vec2 { z: self.z + o.z, w: self.w + o.w }
    }

    pub fn sub(&self, o: &Vec2) -> Vec2 {
        Vec2 { z: self.z - o.z, w: self.w - o.w }
    }

    pub fn dot(&self, o: &Vec2) -> C64 {
        self.z.conj() * o.z + self.w.conj() * o.w
    }

    pub fn normalized(&self) -> Vec2 {
        let n = self.norm();
        Vec2 { z: self.z / n, w: self.w / n }
    }

    /// Unit vector with the first nonzero component real and nonnegative.
    pub fn phase_normalized(&self) -> Vec2 {
        let u = self.normalized();
        let lead = if u.z.norm() > 1e-14 { u.z } else { u.w };
        if lead.norm() == 0.0 {
            return u;
        }
        let ph = lead.conj() / lead.norm();
        u.scale(ph)
    }
}

/// A 2x2 complex matrix, row major.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat2 {
    pub a11: C64,
    pub a12: C64,
    pub a21: C64,
    pub a22: C64,
    /// Set when the matrix has been checked to satisfy |M*M - I| <= 1e-12.
    #[serde(default)]
    pub unitary: bool,
}

impl Mat2 {
    pub fn new(a11: C64, a12: C64, a21: C64, a22: C64) -> Self {
        Mat2 { a11, a12, a21, a22, unitary: false }
    }

    pub fn identity() -> Self {
        Mat2 { a11: cr(1.0), a12: cr(0.0), a21: cr(0.0), a22: cr(1.0), unitary: true }
    }

    pub fn diag(a: C64, b: C64) -> Self {
        Mat2::new(a, cr(0.0), cr(0.0), b)
    }

    pub fn lower(a: C64, c_: C64, b: C64) -> Self {
        Mat2::new(a, cr(0.0), c_, b)
    }

    pub fn from_columns(c1: Vec2, c2: Vec2) -> Self {
        Mat2::new(c1.z, c2.z, c1.w, c2.w)
    }

    pub fn col(&self, i: usize) -> Vec2 {
        if i == 0 {
            Vec2::new(self.a11, self.a21)
        } else {
            Vec2::new(self.a12, self.a22)
        }
    }

    pub fn is_finite(&self) -> bool {
        self.a11.is_finite() && self.a12.is_finite() && self.a21.is_finite() && self.a22.is_finite()
    }

    pub fn det(&self) -> C64 {
        self.a11 * self.a22 - self.a12 * self.a21
    }

    pub fn trace(&self) -> C64 {
        self.a11 + self.a22
    }

    pub fn apply(&self, v: &Vec2) -> Vec2 {
        Vec2::new(self.a11 * v.z + self.a12 * v.w, self.a21 * v.z + self.a22 * v.w)
    }

    pub fn mul(&self, o: &Mat2) -> Mat2 {
        let mut m = Mat2::new(
            self.a11 * o.a11 + self.a12 * o.a21,
            self.a11 * o.a12 + self.a12 * o.a22,
            self.a21 * o.a11 + self.a22 * o.a21,
            self.a21 * o.a12 + self.a22 * o.a22,
        );
        if self.unitary && o.unitary {
            m.unitary = m.unitarity_defect() <= UNITARY_TOL;
        }
        m
    }

    pub fn add(&self, o: &Mat2) -> Mat2 {
        Mat2::new(self.a11 + o.a11, self.a12 + o.a12, self.a21 + o.a21, self.a22 + o.a22)
    }

    /// Largest entry of `self - I` in modulus.
    pub fn sub_identity_max(&self) -> f64 {
        let one = cr(1.0);
        (self.a11 - one).norm().max(self.a12.norm()).max(self.a21.norm()).max((self.a22 - one).norm())
    }

    pub fn scale(&self, s: C64) -> Mat2 {
        Mat2::new(self.a11 * s, self.a12 * s, self.a21 * s, self.a22 * s)
    }

    pub fn adjoint(&self) -> Mat2 {
        Mat2 { a11: self.a11.conj(), a12: self.a21.conj(), a21: self.a12.conj(), a22: self.a22.conj(), unitary: self.unitary }
    }

    pub fn inverse(&self) -> Option<Mat2> {
        if self.unitary {
            return Some(self.adjoint());
        }
        let d = self.det();
        if d.norm() == 0.0 || !d.is_finite() {
            return None;
        }
        Some(Mat2::new(self.a22 / d, -self.a12 / d, -self.a21 / d, self.a11 / d))
    }

    /// Max-entry norm of M*M - I.
    pub fn unitarity_defect(&self) -> f64 {
        let p = Mat2::new(
            self.a11.conj() * self.a11 + self.a21.conj() * self.a21,
            self.a11.conj() * self.a12 + self.a21.conj() * self.a22,
            self.a12.conj() * self.a11 + self.a22.conj() * self.a21,
            self.a12.conj() * self.a12 + self.a22.conj() * self.a22,
        );
        let one = cr(1.0);
        (p.a11 - one).norm().max(p.a12.norm()).max(p.a21.norm()).max((p.a22 - one).norm())
    }

    pub fn certify_unitary(mut self) -> Mat2 {
        self.unitary = self.unitarity_defect() <= UNITARY_TOL;
        self
    }

    /// Frobenius norm.
    pub fn frobenius(&self) -> f64 {
        (self.a11.norm_sqr() + self.a12.norm_sqr() + self.a21.norm_sqr() + self.a22.norm_sqr()).sqrt()
    }

    /// Singular values, largest first.
    pub fn singular_values(&self) -> (f64, f64) {
        let f2 = self.a11.norm_sqr() + self.a12.norm_sqr() + self.a21.norm_sqr() + self.a22.norm_sqr();
        let d = self.det().norm();
        let disc = (f2 * f2 - 4.0 * d * d).max(0.0).sqrt();
        let s1 = ((f2 + disc) / 2.0).sqrt();
        let s2 = if s1 > 0.0 { d / s1 } else { 0.0 };
        (s1, s2)
    }

    pub fn op_norm(&self) -> f64 {
        self.singular_values().0
    }

    /// Both eigenpairs; eigenvectors are unit length.
    pub fn eigen(&self) -> [(C64, Vec2); 2] {
        let tr = self.trace();
        let det = self.det();
        let disc = (tr * tr - det * 4.0).sqrt();
        let l1 = (tr + disc) / 2.0;
        let l2 = (tr - disc) / 2.0;
        [(l1, self.eigvec(l1)), (l2, self.eigvec(l2))]
    }

    /// Unit eigenvector for eigenvalue `l`, chosen from the better conditioned row.
    pub fn eigvec(&self, l: C64) -> Vec2 {
        let r1 = Vec2::new(-self.a12, self.a11 - l);
        let r2 = Vec2::new(self.a22 - l, -self.a21);
        let v = if r1.norm() >= r2.norm() { r1 } else { r2 };
        if v.norm() < 1e-300 {
            return Vec2::real(1.0, 0.0);
        }
        v.normalized()
    }
}

/// Unitary mapping the unit vector `u` to `e2 = [0,1]`, built from a
/// Householder-style QR of `[u_perp, u]` with a positive real diagonal.
pub fn unitary_to_e2(u: &Vec2) -> Mat2 {
    let u = u.normalized();
    // rows of the unitary: first row is the orthogonal complement, second is u*
    let perp = Vec2::new(-u.w.conj(), u.z.conj());
    Mat2 { a11: perp.z.conj(), a12: perp.w.conj(), a21: u.z.conj(), a22: u.w.conj(), unitary: true }.certify_unitary()
}

/// Lower-triangular check: upper-right entry relative to the matrix size.
pub fn upper_defect(m: &Mat2) -> f64 {
    m.a12.norm() / m.frobenius().max(1e-300)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unitary_to_e2_maps_vector() {
        let u = Vec2::new(c(0.3, 0.4), c(-0.2, 0.5)).normalized();
        let m = unitary_to_e2(&u);
        assert!(m.unitary);
        let e = m.apply(&u);
        assert!(e.z.norm() < 1e-14);
        assert!((e.w - cr(1.0)).norm() < 1e-14);
    }

    #[test]
    fn eigen_residuals() {
        let m = Mat2::new(c(0.4, 0.1), c(0.2, 0.0), c(-0.1, 0.3), c(0.25, -0.05));
        for (l, v) in m.eigen() {
            let r = m.apply(&v).sub(&v.scale(l));
            assert!(r.norm() < 1e-13);
        }
    }

    #[test]
    fn singular_values_of_diagonal() {
        let (s1, s2) = Mat2::diag(cr(0.3), c(0.0, -0.5)).singular_values();
        assert!((s1 - 0.5).abs() < 1e-15 && (s2 - 0.3).abs() < 1e-15);
    }

    #[test]
    fn phase_normalization_is_real_nonnegative() {
        let v = Vec2::new(c(0.0, -2.0), c(1.0, 1.0)).phase_normalized();
        assert!(v.z.im.abs() < 1e-15 && v.z.re > 0.0);
        assert!((v.norm() - 1.0).abs() < 1e-15);
    }
}
