//! Autonomous baseline: a single germ `F` with diagonal linear part,
//! conjugated to a triangular `G` through degree `k`, and the limit
//! `Phi = lim G^{-n} o X_k o F^n`.

use crate::error::{Error, Result};
use crate::jet::{compose, PolyMap2};
use crate::limit::{LimitSystem, PhiOptions, PhiTrace, TriangularGerm};
use crate::linalg::{cr, Mat2, Vec2, C64};
use crate::report::Check;
use crate::sequence::halton_ball_point;
use serde::{Deserialize, Serialize};

pub const RESONANCE_TOL: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct AutonomousForm {
    pub k: usize,
    /// `X_k`, tangent to the identity, degree at most `k`.
    pub x: PolyMap2,
    pub g: TriangularGerm,
    pub g_poly: PolyMap2,
    /// Smallest non-resonant divisor met.
    pub min_divisor: f64,
}

/// Coefficient matching of `X o F = G o X` degree by degree. Resonant
/// monomials of the weak coordinate in the strong component stay in `G`;
/// any other divisor below [`RESONANCE_TOL`] is an error.
pub fn autonomous_normal_form(f: &PolyMap2, k: usize) -> Result<AutonomousForm> {
    if k < 2 {
        return Err(Error::Contract("order of the normal form must be at least 2".into()));
    }
    let l = f.linear_part();
    if l.a12.norm() > 0.0 || l.a21.norm() > 0.0 {
        return Err(Error::Contract("the autonomous baseline needs a diagonal linear part".into()));
    }
    let lam = [l.a11, l.a22];
    if lam[0].norm() == 0.0 || lam[1].norm() == 0.0 {
        return Err(Error::Singular("zero eigenvalue".into()));
    }
    // weak coordinate r (larger modulus) drives the correction in the other one
    let upper = lam[1].norm() > lam[0].norm();
    let (r, other) = if upper { (1, 0) } else { (0, 1) };
    let cut = f.cutoff().max(k);
    let f = f.with_cutoff(cut);
    let mut x = PolyMap2::identity(cut);
    let mut g = PolyMap2::linear(&l, cut);
    let mut resonant: Option<(usize, C64)> = None;
    let mut min_divisor = f64::INFINITY;
    for m in 2..=k {
        let lhs = compose(&x, &f, m)?;
        let rhs = compose(&g, &x.with_cutoff(m), m)?;
        for comp in 0..2 {
            for i in 0..=m {
                let j = m - i;
                let rem = rhs.get(comp, i, j) - lhs.get(comp, i, j);
                let div = lam[0].powu(i as u32) * lam[1].powu(j as u32) - lam[comp];
                if div.norm() >= RESONANCE_TOL {
                    min_divisor = min_divisor.min(div.norm());
                    x.set(comp, i, j, rem / div);
                } else {
                    let pure = if r == 0 { j == 0 } else { i == 0 };
                    if comp != other || !pure {
                        return Err(Error::Degenerate(format!("resonance at component {comp}, monomial ({i},{j}), divisor {:e}", div.norm())));
                    }
                    if resonant.is_some() {
                        return Err(Error::Degenerate("more than one resonant degree".into()));
                    }
                    g.set(comp, i, j, -rem);
                    resonant = Some((m, -rem));
                }
            }
        }
    }
    let (gk, coef) = resonant.unwrap_or((2, cr(0.0)));
    let pivot = lam[r];
    let tg = TriangularGerm::new(l, coef, gk, upper, pivot)?;
    Ok(AutonomousForm { k, x: x.with_cutoff(k), g: tg, g_poly: g.with_cutoff(k), min_divisor })
}

/// The limit system of the constant sequence over `horizon` steps.
pub fn autonomous_system(f: &PolyMap2, form: &AutonomousForm, horizon: usize, c_: f64, d: f64) -> Result<LimitSystem> {
    let fs = vec![f.clone(); horizon];
    let gs = vec![form.g.clone(); horizon];
    let hs = vec![form.x.clone(); horizon + 1];
    let rho = d.powi(form.k as i32 + 1) / c_;
    LimitSystem::new(fs, gs, hs, Mat2::identity(), Mat2::identity(), form.k, rho, d)
}

/// Evaluator for `Phi` of an autonomous germ.
pub struct AutonomousBasinMap {
    pub form: AutonomousForm,
    pub system: LimitSystem,
}

pub fn autonomous_basin_map(f: &PolyMap2, k: usize, c_: f64, d: f64, horizon: usize) -> Result<AutonomousBasinMap> {
    if d.powi(k as i32 + 1) >= c_ {
        return Err(Error::Config(format!("need D^(k+1) < C, got D^(k+1) = {} and C = {c_}", d.powi(k as i32 + 1))));
    }
    let form = autonomous_normal_form(f, k)?;
    let system = autonomous_system(f, &form, horizon, c_, d)?;
    Ok(AutonomousBasinMap { form, system })
}

impl AutonomousBasinMap {
    pub fn phi(&self, z: &Vec2) -> Result<PhiTrace> {
        self.system.phi_at(z, &|u| Some(u), &PhiOptions::default())
    }

    /// `|Phi(F z) - G(Phi(z))|` on Halton samples of `B(0, radius)`.
    pub fn conjugacy_check(&self, f: &PolyMap2, samples: usize, radius: f64, tol: f64) -> Check {
        let mut ch = Check::new("autonomous.conjugacy", format!("{samples} points in B(0,{radius})"));
        for i in 1..=samples {
            let z = halton_ball_point(i).scale(cr(radius));
            match (self.phi(&f.evaluate(&z)), self.phi(&z)) {
                (Ok(a), Ok(b)) => {
                    let r = a.value.sub(&self.form.g.eval(&b.value)).norm();
                    ch.record_tol(tol - r, 0.0);
                }
                (Err(e), _) | (_, Err(e)) => ch.fail(e.to_string()),
            }
        }
        ch
    }
}

/// Degrees of `G^n` for `n = 1..=n_max`.
pub fn iterate_degrees(g: &PolyMap2, n_max: usize) -> Result<Vec<usize>> {
    let d = g.degree().max(1);
    let cut = d * d;
    let g = g.with_cutoff(cut);
    let mut it = g.clone();
    let mut out = vec![it.degree()];
    for _ in 1..n_max {
        it = compose(&g, &it, cut)?;
        out.push(it.degree_tol(1e-300));
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AutonomousReport {
    pub residual_max: f64,
    pub degrees: Vec<usize>,
    pub degrees_constant: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::c;

    fn henon_like() -> PolyMap2 {
        let mut f = PolyMap2::linear(&Mat2::diag(cr(0.5), cr(0.3)), 2);
        f.set(0, 0, 2, cr(1.0));
        f
    }

    #[test]
    fn linear_germ_gives_identity() {
        let f = PolyMap2::linear(&Mat2::diag(c(0.5, 0.1), cr(0.4)), 3);
        let m = autonomous_basin_map(&f, 2, 0.4, 0.51, 200).unwrap();
        assert_eq!(m.form.x.max_diff_identity(), 0.0);
        assert_eq!(m.form.g.coef, cr(0.0));
        let z = Vec2::new(c(0.1, 0.2), c(-0.3, 0.0));
        assert_eq!(m.phi(&z).unwrap().value, z);
    }

    #[test]
    fn quadratic_term_removed_by_x() {
        let form = autonomous_normal_form(&henon_like(), 2).unwrap();
        // (0.5 z + w^2, 0.3 w): X = (z + w^2 / 0.41, w)
        assert!((form.x.get(0, 0, 2) - cr(1.0 / 0.41)).norm() < 1e-14);
        assert_eq!(form.g.coef, cr(0.0));
    }

    #[test]
    fn resonant_term_stays_in_g() {
        // 0.25 = 0.5^2: z^2 in the second component is resonant
        let mut f = PolyMap2::linear(&Mat2::diag(cr(0.5), cr(0.25)), 2);
        f.set(1, 2, 0, cr(0.7));
        let form = autonomous_normal_form(&f, 2).unwrap();
        assert!((form.g_poly.get(1, 2, 0) - cr(0.7)).norm() < 1e-14);
        let z = Vec2::new(cr(0.2), cr(0.1));
        assert!((form.g.eval(&z).sub(&form.g_poly.evaluate(&z))).norm() < 1e-15);
        f.set(0, 0, 2, cr(0.4));
        let m = autonomous_basin_map(&f, 2, 0.25, 0.5, 300).unwrap();
        let ch = m.conjugacy_check(&f, 30, 0.05, 1e-8);
        assert!(ch.passed(), "{:?}", ch);
    }

    #[test]
    fn forbidden_resonance_is_degenerate() {
        // divisor of z w in the first component is 0.25 * 1 - 0.25 = 0
        let mut f = PolyMap2::linear(&Mat2::diag(cr(0.25), cr(1.0)), 2);
        f.set(0, 1, 1, cr(0.3));
        assert!(matches!(autonomous_normal_form(&f, 2), Err(Error::Degenerate(_))));
    }

    #[test]
    fn henon_like_conjugacy_and_degrees() {
        let f = henon_like();
        let m = autonomous_basin_map(&f, 2, 0.3, 0.5, 300).unwrap();
        let ch = m.conjugacy_check(&f, 50, 0.05, 1e-8);
        assert!(ch.passed(), "{:?}", ch);
        let deg = iterate_degrees(&m.form.g_poly, 20).unwrap();
        assert!(deg.iter().all(|&d| d == deg[0]));
    }
}
