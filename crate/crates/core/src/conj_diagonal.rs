//! Triangular normal forms for directed diagonal trains.
//!
//! Each directed germ is first reduced to `(a z + c w^k, b w + d z^k)` through
//! degree k. Odd trains are then conjugated to `g = (a z, b w + gamma z^k)` by
//! `h = (z + alpha w^k, w)`; even trains use the mirrored forms.

use crate::direct::Parity;
use crate::error::{Error, Result};
use crate::jet::{compose, PolyMap2};
use crate::linalg::{cr, Vec2, C64};
use crate::report::{Check, CheckSuite};
use serde::{Deserialize, Serialize};

/// Smallest divisor accepted by the preliminary reduction.
pub const MIN_DIVISOR: f64 = 1e-8;

/// Unique bounded orbit of `x_n = mult_n x_{n+1} + drive_n`, by backward iteration.
///
/// Returns `x_s, ..., x_e` for `span = s..e`, with `x_e = terminal`.
pub fn solve_bounded_orbit(mult: &[C64], drive: &[C64], terminal: C64, d: f64) -> Result<Vec<C64>> {
    if mult.len() != drive.len() {
        return Err(Error::Contract("mult and drive differ in length".into()));
    }
    if let Some((n, m)) = mult.iter().enumerate().find(|(_, m)| m.norm() > d * (1.0 + 1e-12)) {
        return Err(Error::Domain(format!("multiplier {n} has modulus {:e} > {d}", m.norm())));
    }
    let mut out = vec![cr(0.0); mult.len() + 1];
    out[mult.len()] = terminal;
    for n in (0..mult.len()).rev() {
        out[n] = mult[n] * out[n + 1] + drive[n];
    }
    let sup_drive = drive.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let bound = terminal.norm() + sup_drive / (1.0 - d);
    let sup = out.iter().map(|v| v.norm()).fold(0.0, f64::max);
    if sup > bound * (1.0 + 1e-9) + 1e-300 {
        return Err(Error::Invariant(format!("bounded orbit sup {sup:e} exceeds {bound:e}")));
    }
    Ok(out)
}

/// Degree-k monomials removed by the preliminary reduction: every one except
/// `w^k` in the first component and `z^k` in the second.
fn reduced_monomials(k: usize) -> Vec<(usize, usize, usize)> {
    let mut v = Vec::new();
    for i in 0..=k {
        if i > 0 {
            v.push((0, i, k - i));
        }
        if i < k {
            v.push((1, i, k - i));
        }
    }
    v
}

/// Preliminary changes of coordinates `phi_n = Id + P_n` with `P_n` homogeneous of degree k.
#[derive(Clone, Debug)]
pub struct Reduction {
    pub k: usize,
    pub phi: Vec<PolyMap2>,
    pub reduced: Vec<PolyMap2>,
    pub min_divisor: f64,
}

fn diag_of(f: &PolyMap2) -> (C64, C64) {
    (f.get(0, 1, 0), f.get(1, 0, 1))
}

/// Solves for `phi_n` so that `phi_{n+1} o f_n o phi_n^{-1}` has the two-term form through degree k.
pub fn reduce_two_term(directed: &[PolyMap2], k: usize, d: f64) -> Result<Reduction> {
    let n_total = directed.len();
    let mut min_divisor = f64::INFINITY;
    let mut phi = vec![PolyMap2::identity(k); n_total + 1];
    for (comp, i, j) in reduced_monomials(k) {
        let mut mult = Vec::with_capacity(n_total);
        let mut drive = Vec::with_capacity(n_total);
        for f in directed {
            let (a, b) = diag_of(f);
            let div = if comp == 0 { a } else { b };
            min_divisor = min_divisor.min(div.norm());
            if div.norm() < MIN_DIVISOR {
                return Err(Error::Degenerate(format!("divisor {:e} below {MIN_DIVISOR:e}", div.norm())));
            }
            mult.push(a.powu(i as u32) * b.powu(j as u32) / div);
            drive.push(f.get(comp, i, j) / div);
        }
        let orbit = solve_bounded_orbit(&mult, &drive, cr(0.0), d)?;
        for (n, v) in orbit.into_iter().enumerate() {
            phi[n].set(comp, i, j, v);
        }
    }
    let mut reduced = Vec::with_capacity(n_total);
    for (n, f) in directed.iter().enumerate() {
        let fk = f.with_cutoff(k);
        let inv = crate::jet::invert_formal(&phi[n], k)?;
        let r = compose(&compose(&phi[n + 1], &fk, k)?, &inv, k)?;
        reduced.push(r);
    }
    Ok(Reduction { k, phi, reduced, min_divisor })
}

/// One step of the normal-form chain.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChainStep {
    pub n: usize,
    pub parity: Parity,
    /// `alpha_n` on odd trains, `beta_n` on even trains.
    pub h_coef: C64,
    /// `gamma_n` on odd trains, `delta_n` on even trains.
    pub g_coef: C64,
    pub a: C64,
    pub b: C64,
}

#[derive(Clone, Debug)]
pub struct ConjugationChain {
    pub k: usize,
    pub steps: Vec<ChainStep>,
    /// `h_n` for `n = 0..=N`; `h_N` is the identity.
    pub h: Vec<PolyMap2>,
    pub g: Vec<PolyMap2>,
    /// `H_n = h_n o phi_n` truncated at degree k.
    pub full_h: Vec<PolyMap2>,
    pub reduction: Reduction,
    pub boundaries: Vec<usize>,
    pub sup_h: f64,
}

fn h_form(parity: Parity, k: usize, coef: C64) -> PolyMap2 {
    let mut h = PolyMap2::identity(k);
    match parity {
        Parity::Odd => h.set(0, 0, k, coef),
        Parity::Even => h.set(1, k, 0, coef),
    }
    h
}

fn g_form(parity: Parity, k: usize, a: C64, b: C64, coef: C64) -> PolyMap2 {
    let mut g = PolyMap2::zero(k);
    g.set(0, 1, 0, a);
    g.set(1, 0, 1, b);
    match parity {
        Parity::Odd => g.set(1, k, 0, coef),
        Parity::Even => g.set(0, 0, k, coef),
    }
    g
}

/// Coefficient of `h_{n}` given `h_{n+1}` and the reduced germ.
///
/// Returns `(h_coef_n, g_coef_n)`. `next` is `(parity, coef)` of `h_{n+1}`.
pub fn chain_step(parity: Parity, k: usize, a: C64, b: C64, c_: C64, d_: C64, next: (Parity, C64)) -> (C64, C64) {
    let ku = k as u32;
    match (parity, next.0) {
        (Parity::Odd, Parity::Odd) => ((c_ + next.1 * b.powu(ku)) / a, d_),
        (Parity::Odd, Parity::Even) => (c_ / a, d_ + next.1 * a.powu(ku)),
        (Parity::Even, Parity::Even) => ((d_ + next.1 * a.powu(ku)) / b, c_),
        (Parity::Even, Parity::Odd) => (d_ / b, c_ + next.1 * b.powu(ku)),
    }
}

/// Builds `(h_n, g_n)` train by train with terminal value 0.
pub fn build_conjugation_diagonal(directed: &[PolyMap2], parity: &[Parity], k: usize, d: f64) -> Result<ConjugationChain> {
    if parity.len() != directed.len() {
        return Err(Error::Contract("parity tags do not match the germs".into()));
    }
    for (n, f) in directed.iter().enumerate() {
        let (a, b) = diag_of(f);
        let ok = match parity[n] {
            Parity::Odd => a.norm() >= b.norm() * (1.0 - 1e-9),
            Parity::Even => b.norm() >= a.norm() * (1.0 - 1e-9),
        };
        if !ok {
            return Err(Error::Domain(format!("step {n} lacks the domination required by its train")));
        }
    }
    let reduction = reduce_two_term(directed, k, d)?;
    let n_total = directed.len();
    let mut boundaries = Vec::new();
    for n in 1..n_total {
        if parity[n] != parity[n - 1] {
            boundaries.push(n);
        }
    }
    let last = parity.last().copied().unwrap_or(Parity::Even);
    let mut next = (last, cr(0.0));
    let mut steps = vec![ChainStep { n: 0, parity: last, h_coef: cr(0.0), g_coef: cr(0.0), a: cr(0.0), b: cr(0.0) }; n_total];
    let mut sup_h: f64 = 0.0;
    for n in (0..n_total).rev() {
        let f = &reduction.reduced[n];
        let (a, b) = diag_of(f);
        let (c_, d_) = (f.get(0, 0, k), f.get(1, k, 0));
        let (hc, gc) = chain_step(parity[n], k, a, b, c_, d_, next);
        steps[n] = ChainStep { n, parity: parity[n], h_coef: hc, g_coef: gc, a, b };
        sup_h = sup_h.max(hc.norm());
        next = (parity[n], hc);
    }
    let mut h = Vec::with_capacity(n_total + 1);
    let mut g = Vec::with_capacity(n_total);
    for s in &steps {
        h.push(h_form(s.parity, k, s.h_coef));
        g.push(g_form(s.parity, k, s.a, s.b, s.g_coef));
    }
    h.push(PolyMap2::identity(k));
    let mut full_h = Vec::with_capacity(n_total + 1);
    for (n, hn) in h.iter().enumerate() {
        full_h.push(compose(hn, &reduction.phi[n], k)?);
    }
    Ok(ConjugationChain { k, steps, h, g, full_h, reduction, boundaries, sup_h })
}

impl ConjugationChain {
    pub fn len(&self) -> usize {
        self.g.len()
    }

    pub fn is_empty(&self) -> bool {
        self.g.is_empty()
    }

    pub fn to_json(&self) -> String {
        let steps: Vec<serde_json::Value> = self
            .steps
            .iter()
            .map(|s| {
                serde_json::json!({
                    "n": s.n,
                    "parity": s.parity,
                    "h_coef": [s.h_coef.re, s.h_coef.im],
                    "g_coef": [s.g_coef.re, s.g_coef.im],
                })
            })
            .collect();
        serde_json::to_string_pretty(&serde_json::json!({
            "k": self.k,
            "boundaries": self.boundaries,
            "sup_h": self.sup_h,
            "min_divisor": self.reduction.min_divisor,
            "steps": steps,
        }))
        .expect("chain serializes")
    }

    /// Closed-form inverse of `g_n`.
    pub fn g_inverse(&self, n: usize, u: &Vec2) -> Vec2 {
        let s = &self.steps[n];
        let k = self.k as u32;
        match s.parity {
            Parity::Odd => {
                let z = u.z / s.a;
                Vec2::new(z, (u.w - s.g_coef * z.powu(k)) / s.b)
            }
            Parity::Even => {
                let w = u.w / s.b;
                Vec2::new((u.z - s.g_coef * w.powu(k)) / s.a, w)
            }
        }
    }

    /// `g_n^{-1}(y + delta) - g_n^{-1}(y)` without cancellation.
    pub fn g_inverse_diff(&self, n: usize, y: &Vec2, delta: &Vec2) -> Vec2 {
        let s = &self.steps[n];
        match s.parity {
            Parity::Odd => {
                let dz = delta.z / s.a;
                let z = y.z / s.a;
                Vec2::new(dz, (delta.w - s.g_coef * power_diff(z, dz, self.k)) / s.b)
            }
            Parity::Even => {
                let dw = delta.w / s.b;
                let w = y.w / s.b;
                Vec2::new((delta.z - s.g_coef * power_diff(w, dw, self.k)) / s.a, dw)
            }
        }
    }
}

/// `(y + d)^k - y^k` expanded binomially.
pub fn power_diff(y: C64, d: C64, k: usize) -> C64 {
    let mut sum = cr(0.0);
    let mut binom = 1.0;
    for i in 1..=k {
        binom = binom * (k + 1 - i) as f64 / i as f64;
        sum += cr(binom) * y.powu((k - i) as u32) * d.powu(i as u32);
    }
    sum
}

fn relative_residual(lhs: &PolyMap2, rhs: &PolyMap2) -> f64 {
    let scale = lhs.max_abs().max(rhs.max_abs()).max(1.0);
    lhs.max_diff(rhs) / scale
}

/// Checks `g_n o H_n = H_{n+1} o f_n` through degree k, for both the reduced
/// germs with `h_n` and the directed germs with `H_n = h_n o phi_n`.
pub fn verify_commutation(chain: &ConjugationChain, source: &[PolyMap2], tol: f64) -> CheckSuite {
    let k = chain.k;
    let mut reduced = Check::new("triangulization.commutation_reduced", "all n, degree<=k");
    let mut full = Check::new("triangulization.commutation_source", "all n, degree<=k");
    let mut form = Check::new("triangulization.two_term_form", "all n");
    let mut bounded = Check::new("triangulization.uniform_bound", "per train");
    let mut divisor = Check::new("triangulization.min_divisor", "all n");
    divisor.record(chain.reduction.min_divisor - MIN_DIVISOR);
    for n in 0..chain.len().min(source.len()) {
        let red = &chain.reduction.reduced[n];
        let lhs = compose(&chain.g[n], &chain.h[n], k).expect("cutoff k");
        let rhs = compose(&chain.h[n + 1], red, k).expect("cutoff k");
        reduced.record(tol - relative_residual(&lhs, &rhs));
        let lhs = compose(&chain.g[n], &chain.full_h[n], k).expect("cutoff k");
        let rhs = compose(&chain.full_h[n + 1], &source[n].with_cutoff(k), k).expect("cutoff k");
        full.record(tol - relative_residual(&lhs, &rhs));
        let scale = red.max_abs().max(1.0);
        for (comp, i, j) in reduced_monomials(k) {
            form.record(tol - red.get(comp, i, j).norm() / scale);
        }
    }
    // sup of the h coefficients over a train against the geometric-series bound
    let mut start = 0;
    let mut ends: Vec<usize> = chain.boundaries.clone();
    ends.push(chain.len());
    for &end in &ends {
        let mut sup_drive: f64 = 0.0;
        let mut sup_h: f64 = 0.0;
        let mut dmax: f64 = 0.0;
        for n in start..end {
            let s = &chain.steps[n];
            let red = &chain.reduction.reduced[n];
            let (drive, mult) = match s.parity {
                Parity::Odd => (red.get(0, 0, k) / s.a, s.b.powu(k as u32) / s.a),
                Parity::Even => (red.get(1, k, 0) / s.b, s.a.powu(k as u32) / s.b),
            };
            sup_drive = sup_drive.max(drive.norm());
            sup_h = sup_h.max(s.h_coef.norm());
            dmax = dmax.max(mult.norm());
        }
        if end > start && dmax < 1.0 {
            bounded.record(sup_drive / (1.0 - dmax) - sup_h + 1e-12 * sup_h);
        } else if end > start {
            bounded.fail(format!("multiplier modulus {dmax} >= 1 on [{start},{end})"));
        }
        start = end;
    }
    let mut s = CheckSuite::new();
    for c in [reduced, full, form, bounded, divisor] {
        s.push(c);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{c, Mat2};

    #[test]
    fn constant_orbit_fixed_point() {
        let mult = vec![cr(0.5); 200];
        let drive = vec![cr(1.0); 200];
        let o = solve_bounded_orbit(&mult, &drive, cr(0.0), 0.5).unwrap();
        assert!((o[0] - cr(2.0)).norm() < 1e-12);
    }

    #[test]
    fn zero_drive_zero_orbit() {
        let o = solve_bounded_orbit(&[cr(0.3); 10], &[cr(0.0); 10], cr(0.0), 0.5).unwrap();
        assert!(o.iter().all(|v| *v == cr(0.0)));
    }

    #[test]
    fn quarter_multiplier_geometric_series() {
        let o = solve_bounded_orbit(&[cr(0.25); 40], &[cr(1.0); 40], cr(0.0), 0.5).unwrap();
        assert!((o[0] - cr(4.0 / 3.0)).norm() < 1e-10);
    }

    #[test]
    fn expanding_multiplier_is_rejected() {
        assert!(matches!(solve_bounded_orbit(&[cr(0.9)], &[cr(1.0)], cr(0.0), 0.5), Err(Error::Domain(_))));
    }

    fn germ(a: f64, b: f64, terms: &[(usize, usize, usize, C64)]) -> PolyMap2 {
        let mut f = PolyMap2::linear(&Mat2::diag(cr(a), cr(b)), 2);
        for &(comp, i, j, v) in terms {
            f.set(comp, i, j, v);
        }
        f
    }

    #[test]
    fn linear_germs_give_linear_chain() {
        let fs: Vec<PolyMap2> = (0..20).map(|_| germ(0.5, 0.4, &[])).collect();
        let par = vec![Parity::Odd; 20];
        let ch = build_conjugation_diagonal(&fs, &par, 2, 0.5).unwrap();
        assert!(ch.steps.iter().all(|s| s.h_coef == cr(0.0) && s.g_coef == cr(0.0)));
        assert!(verify_commutation(&ch, &fs, 1e-9).all_pass());
    }

    #[test]
    fn single_train_matches_bounded_orbit() {
        let fs: Vec<PolyMap2> = (0..30).map(|n| germ(0.5, 0.4, &[(0, 0, 2, c(0.1 * (n % 3) as f64, 0.05))])).collect();
        let par = vec![Parity::Odd; 30];
        let ch = build_conjugation_diagonal(&fs, &par, 2, 0.5).unwrap();
        let mult: Vec<C64> = fs.iter().map(|_| cr(0.16 / 0.5)).collect();
        let drive: Vec<C64> = fs.iter().map(|f| f.get(0, 0, 2) / cr(0.5)).collect();
        let o = solve_bounded_orbit(&mult, &drive, cr(0.0), 0.5).unwrap();
        for n in 0..30 {
            assert!((ch.steps[n].h_coef - o[n]).norm() < 1e-14);
        }
        let mut bad = ch.clone();
        bad.h[5].add_to(0, 0, 2, cr(1.0));
        assert!(!verify_commutation(&bad, &fs, 1e-9).all_pass());
        assert!(verify_commutation(&ch, &fs, 1e-9).all_pass());
    }

    #[test]
    fn boundary_coefficient_ignores_next_train() {
        let f = (c(0.5, 0.1), c(0.3, 0.0), c(0.2, -0.1), c(0.7, 0.2));
        let (h1, _) = chain_step(Parity::Odd, 2, f.0, f.1, f.2, f.3, (Parity::Even, cr(1.0)));
        let (h2, _) = chain_step(Parity::Odd, 2, f.0, f.1, f.2, f.3, (Parity::Even, cr(-3.0)));
        assert_eq!(h1, h2);
    }

    #[test]
    fn mixed_terms_are_reduced() {
        let mut fs = Vec::new();
        let mut par = Vec::new();
        for n in 0..40 {
            let (a, b, p) = if n < 20 { (0.5, 0.35, Parity::Odd) } else { (0.35, 0.5, Parity::Even) };
            fs.push(germ(
                a,
                b,
                &[
                    (0, 2, 0, c(0.2, 0.1)),
                    (0, 1, 1, c(-0.1, 0.0)),
                    (1, 1, 1, c(0.05, 0.3)),
                    (1, 0, 2, c(0.1, 0.0)),
                    (0, 0, 2, c(0.3, 0.0)),
                    (1, 2, 0, c(0.0, 0.2)),
                ],
            ));
            par.push(p);
        }
        let ch = build_conjugation_diagonal(&fs, &par, 2, 0.5).unwrap();
        let rep = verify_commutation(&ch, &fs, 1e-9);
        assert!(rep.all_pass(), "{:?}", rep.failures());
        assert_eq!(ch.boundaries, vec![20]);
    }

    #[test]
    fn inverse_difference_is_consistent() {
        let fs: Vec<PolyMap2> = (0..3).map(|_| germ(0.5, 0.4, &[(1, 2, 0, c(0.3, 0.1))])).collect();
        let ch = build_conjugation_diagonal(&fs, &[Parity::Odd; 3], 2, 0.5).unwrap();
        let y = Vec2::new(c(0.1, 0.2), c(-0.3, 0.05));
        let dlt = Vec2::new(c(1e-3, 0.0), c(0.0, 2e-3));
        let direct = ch.g_inverse(0, &y.add(&dlt)).sub(&ch.g_inverse(0, &y));
        assert!(direct.sub(&ch.g_inverse_diff(0, &y, &dlt)).norm() < 1e-15);
        let u = ch.g_inverse(0, &y);
        assert!(ch.g[0].evaluate(&u).sub(&y).norm() < 1e-15);
    }
}
