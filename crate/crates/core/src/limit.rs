//! The limit map `Phi_n = g_{n,0}^{-1} o h_n o f_{n,0}` and its radii.
//!
//! `Phi_{n+1} - Phi_n` is carried backward as a difference: the one-step
//! defect `g_n^{-1} o H_{n+1} o f_n - H_n` is an exact polynomial whose
//! matched low-degree part is cancelled once, and the differences are pulled
//! back through closed-form inverse differences of the triangular maps.

use crate::conj_diagonal::{power_diff, ConjugationChain};
use crate::direct::{DirectingWeights, Parity};
use crate::error::{Error, Result};
use crate::jet::{compose, PolyMap2};
use crate::ledger::ConstantsLedger;
use crate::linalg::{cr, Mat2, Vec2, C64};
use crate::quad_general::GeneralChain;
use crate::train_general::TriangularizedSequence;
use serde::{Deserialize, Serialize};

/// `u -> G u + coef (y_r / pivot)^k e_other` with `y = G u`; `r` is the first
/// coordinate for the lower form and the second for the upper form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriangularGerm {
    pub lin: Mat2,
    pub inv: Mat2,
    pub coef: C64,
    pub k: usize,
    pub upper: bool,
    pub pivot: C64,
}

impl TriangularGerm {
    pub fn new(lin: Mat2, coef: C64, k: usize, upper: bool, pivot: C64) -> Result<Self> {
        let inv = lin.inverse().ok_or_else(|| Error::Singular("linear part of g".into()))?;
        if pivot.norm() == 0.0 {
            return Err(Error::Singular("pivot of g".into()));
        }
        Ok(TriangularGerm { lin, inv, coef, k, upper, pivot })
    }

    fn read(&self, y: &Vec2) -> C64 {
        if self.upper {
            y.w / self.pivot
        } else {
            y.z / self.pivot
        }
    }

    fn other(&self, v: C64) -> Vec2 {
        if self.upper {
            Vec2::new(v, cr(0.0))
        } else {
            Vec2::new(cr(0.0), v)
        }
    }

    pub fn eval(&self, u: &Vec2) -> Vec2 {
        let y = self.lin.apply(u);
        y.add(&self.other(self.coef * self.read(&y).powu(self.k as u32)))
    }

    pub fn inverse(&self, v: &Vec2) -> Vec2 {
        let corr = self.other(self.coef * self.read(v).powu(self.k as u32));
        self.inv.apply(&v.sub(&corr))
    }

    /// `g^{-1}(base + delta) - g^{-1}(base)` without cancellation.
    pub fn inverse_diff(&self, base: &Vec2, delta: &Vec2) -> Vec2 {
        let d = power_diff(self.read(base), self.read(delta), self.k);
        self.inv.apply(&delta.sub(&self.other(self.coef * d)))
    }

    /// The inverse as a polynomial map.
    pub fn inverse_polymap(&self, cutoff: usize) -> PolyMap2 {
        let mut p = PolyMap2::linear(&self.inv, cutoff.max(self.k));
        let s = -self.coef / self.pivot.powu(self.k as u32);
        let (col, rz, rw) = if self.upper { (0, 0, self.k) } else { (1, self.k, 0) };
        let e = self.inv.col(col);
        p.add_to(0, rz, rw, s * e.z);
        p.add_to(1, rz, rw, s * e.w);
        p
    }

    pub fn polymap(&self, cutoff: usize) -> PolyMap2 {
        let mut p = PolyMap2::linear(&self.lin, cutoff.max(self.k));
        let y_r = if self.upper { (self.lin.a21, self.lin.a22) } else { (self.lin.a11, self.lin.a12) };
        // (y_r/pivot)^k expanded binomially in (z, w)
        let (p0, p1) = (y_r.0 / self.pivot, y_r.1 / self.pivot);
        let comp = if self.upper { 0 } else { 1 };
        let mut binom = 1.0;
        for i in 0..=self.k {
            let v = self.coef * cr(binom) * p0.powu((self.k - i) as u32) * p1.powu(i as u32);
            p.add_to(comp, self.k - i, i, v);
            binom = binom * (self.k - i) as f64 / (i + 1) as f64;
        }
        p
    }
}

fn total_degree(p: &PolyMap2) -> usize {
    p.degree().max(1)
}

/// A conjugation system ready for limit-map evaluation.
#[derive(Clone, Debug)]
pub struct LimitSystem {
    /// Barred germs `f_n`, `n < N`.
    pub f: Vec<PolyMap2>,
    pub flin: Vec<Mat2>,
    pub fnl: Vec<PolyMap2>,
    pub g: Vec<TriangularGerm>,
    /// `H_n - Id` for `n <= N`.
    pub q: Vec<PolyMap2>,
    /// One-step defect `g_n^{-1} o H_{n+1} o f_n - H_n`, degrees above `matched`.
    pub defect: Vec<PolyMap2>,
    pub matched: usize,
    /// Largest cancelled low-degree defect coefficient relative to the step's scale.
    pub low_residual: f64,
    /// Original coordinates to barred coordinates at level 0.
    pub input: Mat2,
    pub output: Mat2,
    /// Geometric certificate ratio used by the stopping rule.
    pub rho: f64,
    pub d: f64,
}

impl LimitSystem {
    /// Linear parts of `g` are replaced by those of `f`, and the linear part of
    /// every `H_n` must be the identity.
    pub fn new(f: Vec<PolyMap2>, mut g: Vec<TriangularGerm>, h: Vec<PolyMap2>, input: Mat2, output: Mat2, matched: usize, rho: f64, d: f64) -> Result<Self> {
        let n_total = f.len();
        if g.len() != n_total || h.len() != n_total + 1 {
            return Err(Error::Contract(format!("need N germs, N maps g and N+1 maps h (got {}, {}, {})", n_total, g.len(), h.len())));
        }
        let mut q = Vec::with_capacity(n_total + 1);
        for (n, hn) in h.iter().enumerate() {
            let lin = hn.linear_part();
            if lin.sub_identity_max() > 1e-12 {
                return Err(Error::Invariant(format!("h_{n} is not tangent to the identity")));
            }
            let mut qn = hn.sub(&PolyMap2::identity(hn.cutoff()));
            qn.set(0, 1, 0, cr(0.0));
            qn.set(0, 0, 1, cr(0.0));
            qn.set(1, 1, 0, cr(0.0));
            qn.set(1, 0, 1, cr(0.0));
            q.push(qn);
        }
        let mut flin = Vec::with_capacity(n_total);
        let mut fnl = Vec::with_capacity(n_total);
        let mut defect = Vec::with_capacity(n_total);
        let mut low_residual: f64 = 0.0;
        for n in 0..n_total {
            let l = f[n].linear_part();
            g[n].lin = l;
            g[n].inv = l.inverse().ok_or_else(|| Error::Singular(format!("linear part of f_{n}")))?;
            let mut nl = f[n].clone();
            nl.set(0, 1, 0, cr(0.0));
            nl.set(0, 0, 1, cr(0.0));
            nl.set(1, 1, 0, cr(0.0));
            nl.set(1, 0, 1, cr(0.0));
            let hdeg = total_degree(&h[n + 1]);
            let inner_deg = hdeg * total_degree(&f[n]);
            let cut = (g[n].k.max(1) * inner_deg).max(total_degree(&h[n]));
            let inner = compose(&h[n + 1].with_cutoff(inner_deg), &f[n].with_cutoff(inner_deg), inner_deg)?;
            let outer = compose(&g[n].inverse_polymap(cut), &inner.with_cutoff(cut), cut)?;
            let mut e = outer.sub(&h[n].with_cutoff(cut));
            let scale = f[n].max_abs().max(h[n].max_abs()).max(h[n + 1].max_abs()).max(1.0) / l.op_norm().clamp(1e-300, 1.0);
            for (comp, i, j, v) in e.clone().terms() {
                if i + j <= matched {
                    low_residual = low_residual.max(v.norm() / scale);
                    e.set(comp, i, j, cr(0.0));
                }
            }
            flin.push(l);
            fnl.push(nl);
            defect.push(e);
        }
        Ok(LimitSystem { f, flin, fnl, g, q, defect, matched, low_residual, input, output, rho, d })
    }

    pub fn len(&self) -> usize {
        self.f.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f.is_empty()
    }

    pub fn f_step(&self, n: usize, x: &Vec2) -> Vec2 {
        self.flin[n].apply(x).add(&self.fnl[n].evaluate(x))
    }

    pub fn h(&self, n: usize, x: &Vec2) -> Vec2 {
        x.add(&self.q[n].evaluate(x))
    }

    pub fn h_jacobian(&self, n: usize, x: &Vec2) -> Mat2 {
        self.q[n].jacobian(x).add(&Mat2::identity())
    }

    /// `g_n^{-1} o H_{n+1} o f_n (x) - H_n(x)`.
    pub fn step_defect(&self, n: usize, x: &Vec2) -> Vec2 {
        self.defect[n].evaluate(x)
    }

    /// Same quantity evaluated directly, for cross-checks.
    pub fn step_defect_direct(&self, n: usize, x: &Vec2) -> Vec2 {
        let y = self.f_step(n, x);
        self.g[n].inverse(&self.h(n + 1, &y)).sub(&self.h(n, x))
    }

    pub fn to_barred(&self, z: &Vec2) -> Vec2 {
        self.input.apply(z)
    }

    pub fn from_barred(&self, z: &Vec2) -> Vec2 {
        self.output.apply(z)
    }

    /// `DPhi_n(0)` from the construction: the defects and `H_n - Id` have no
    /// linear terms, so only the coordinate changes remain.
    pub fn dphi_zero(&self) -> Mat2 {
        self.output.mul(&self.input)
    }

    /// Runs `phi_{n,m0}(w)` for `n = m0, m0+1, ...` on barred coordinates.
    /// `stop(n, delta, value)` is called after each step with the original-coordinate
    /// difference and value; iteration ends when it returns true or at `n_max`.
    pub fn run_levels(&self, w: &Vec2, m0: usize, n_max: usize, mut stop: impl FnMut(usize, &Vec2, &Vec2, &[f64]) -> bool) -> Result<LevelRun> {
        let n_max = n_max.min(self.len());
        if m0 > n_max {
            return Err(Error::Contract(format!("start level {m0} beyond horizon {n_max}")));
        }
        let mut x = *w;
        let mut norms = vec![x.norm()];
        let mut levels = vec![self.h(m0, &x)];
        let mut phi = levels[0];
        let mut tail = Vec2::ZERO;
        let mut deltas = Vec::new();
        let mut n = m0;
        let mut stopped = false;
        while n < n_max {
            let e = self.step_defect(n, &x);
            let mut diff = e;
            for m in (m0..n).rev() {
                let base = levels[m + 1 - m0];
                levels[m + 1 - m0] = base.add(&diff);
                diff = self.g[m].inverse_diff(&base, &diff);
            }
            levels[0] = levels[0].add(&diff);
            phi = phi.add(&diff);
            tail = tail.add(&diff);
            x = self.f_step(n, &x);
            if !x.is_finite() || x.norm() > 1e8 {
                return Err(Error::Undecided(format!("orbit left every bounded region at step {}", n + 1)));
            }
            norms.push(x.norm());
            levels.push(self.h(n + 1, &x));
            n += 1;
            let d_orig = self.output.apply(&diff);
            deltas.push(d_orig);
            if stop(n, &d_orig, &self.output.apply(&phi), &norms) {
                stopped = true;
                break;
            }
        }
        Ok(LevelRun { start: m0, n, value: self.output.apply(&phi), barred: phi, tail, deltas, norms, stopped })
    }

    /// `Phi_n(z)` at a fixed `n` (original coordinates).
    pub fn phi_fixed(&self, z: &Vec2, n: usize) -> Result<Vec2> {
        Ok(self.run_levels(&self.to_barred(z), 0, n, |_, _, _, _| false)?.value)
    }

    /// `phi_{m+n,m}(w)` on barred coordinates at level `m`.
    pub fn phi_level(&self, w: &Vec2, m: usize, n: usize) -> Result<Vec2> {
        Ok(self.run_levels(w, m, m + n, |_, _, _, _| false)?.barred)
    }

    /// Limit value with the geometric stopping certificate.
    pub fn phi_at(&self, z: &Vec2, v_of: &dyn Fn(usize) -> Option<usize>, opts: &PhiOptions) -> Result<PhiTrace> {
        let zb = self.to_barred(z);
        let rho = self.rho;
        let mut u = if zb.norm() <= 1.0 { Some(0) } else { None };
        let mut v = u.and_then(v_of);
        let run = self.run_levels(&zb, 0, self.len(), |n, d, val, norms| {
            if u.is_none() && norms[n] <= 1.0 {
                u = Some(n);
                v = v_of(n);
            }
            match v {
                Some(v) if n >= v + opts.min_tail => d.norm() * rho / (1.0 - rho) <= opts.tol * val.norm().max(1.0),
                _ => false,
            }
        })?;
        let u = u.ok_or_else(|| Error::Undecided("orbit never entered the unit ball within the horizon".into()))?;
        let v = v.ok_or_else(|| Error::Undecided(format!("v(u) for u = {u} lies beyond the covered horizon")))?;
        if v >= run.n {
            return Err(Error::Undecided(format!("horizon {} ends before v(u) = {v}", run.n)));
        }
        let (ratio, fallback) = cauchy_ratio(&run.deltas, v, run.value.norm());
        Ok(PhiTrace {
            value: run.value,
            n: run.n,
            u,
            v,
            certified: run.stopped,
            ratio,
            ratio_fallback: fallback,
            deltas: run.deltas.iter().map(|d| d.norm()).collect(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct LevelRun {
    pub start: usize,
    pub n: usize,
    pub value: Vec2,
    pub barred: Vec2,
    /// `phi_{n,start}(w) - H_start(w)` on barred coordinates, summed without cancellation.
    pub tail: Vec2,
    /// `deltas[i] = Phi_{start+i+1} - Phi_{start+i}` in original coordinates.
    pub deltas: Vec<Vec2>,
    pub norms: Vec<f64>,
    pub stopped: bool,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PhiOptions {
    /// Relative tolerance of the certified tail.
    pub tol: f64,
    /// Steps past `v(u)` before stopping is allowed.
    pub min_tail: usize,
}

impl Default for PhiOptions {
    fn default() -> Self {
        PhiOptions { tol: 1e-14, min_tail: 8 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PhiTrace {
    pub value: Vec2,
    pub n: usize,
    pub u: usize,
    pub v: usize,
    /// Stopping certificate reached before the horizon.
    pub certified: bool,
    /// Geometric decay rate of `|Phi_{n+1} - Phi_n|` past `v(u)`.
    pub ratio: Option<f64>,
    pub ratio_fallback: bool,
    pub deltas: Vec<f64>,
}

impl PhiTrace {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["n", "abs_delta", "past_v"]).expect("csv header");
        for (i, d) in self.deltas.iter().enumerate() {
            let n = i + 1;
            w.write_record([n.to_string(), format!("{d:.12e}"), (n > self.v).to_string()]).expect("csv row");
        }
        String::from_utf8(w.into_inner().expect("csv flush")).expect("utf8")
    }
}

/// `exp` of the least-squares slope of `ln |Delta_n|` over `n > v` with
/// `|Delta_n|` above `1e-300`; with fewer than three such points the last
/// (up to eight) nonzero differences are used and the fallback flag is set.
pub fn cauchy_ratio(deltas: &[Vec2], v: usize, _scale: f64) -> (Option<f64>, bool) {
    let pts: Vec<(f64, f64)> = deltas
        .iter()
        .enumerate()
        .filter_map(|(i, d)| {
            let n = i + 1;
            let m = d.norm();
            (n > v && m > 1e-300 && m.is_finite()).then(|| (n as f64, m.ln()))
        })
        .collect();
    if pts.len() >= 3 {
        return (Some(slope(&pts).exp()), false);
    }
    let all: Vec<(f64, f64)> = deltas.iter().enumerate().filter(|&(_i, d)| d.norm() > 1e-300).map(|(i, d)| ((i + 1) as f64, d.norm().ln())).collect();
    let tail = &all[all.len().saturating_sub(8)..];
    if tail.len() >= 2 {
        (Some(slope(tail).exp()), true)
    } else {
        (None, true)
    }
}

fn slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

/// Limit system of the diagonal pipeline; `v(u) = u` is used there.
pub fn diagonal_system(directed: &[PolyMap2], chain: &ConjugationChain, weights: &DirectingWeights, c_: f64, d: f64) -> Result<LimitSystem> {
    let n_total = chain.len();
    let f: Vec<PolyMap2> = directed[..n_total].to_vec();
    let mut g = Vec::with_capacity(n_total);
    for (n, s) in chain.steps.iter().enumerate() {
        let l = f[n].linear_part();
        let (upper, pivot) = match s.parity {
            Parity::Odd => (false, l.a11),
            Parity::Even => (true, l.a22),
        };
        g.push(TriangularGerm::new(l, s.g_coef, chain.k, upper, pivot)?);
    }
    let (t0, u0) = (weights.ln_theta[0].exp(), weights.ln_tau[0].exp());
    let input = Mat2::diag(cr(t0), cr(u0));
    let output = Mat2::diag(cr(1.0 / t0), cr(1.0 / u0));
    let rho = d.powi(chain.k as i32 + 1) / c_;
    LimitSystem::new(f, g, chain.full_h.clone(), input, output, chain.k, rho, d)
}

/// Limit system of the general pipeline over the covered trains.
pub fn general_system(chain: &GeneralChain, tri: &TriangularizedSequence, ledger: &ConstantsLedger) -> Result<LimitSystem> {
    let f: Vec<PolyMap2> = (0..chain.end).map(|n| chain.f_bar(n)).collect();
    let mut g = Vec::with_capacity(chain.end);
    for (n, fb) in f.iter().enumerate() {
        g.push(TriangularGerm::new(fb.linear_part(), chain.d[n], 2, false, chain.recs[n].a)?);
    }
    let h: Vec<PolyMap2> = chain.h_bar.iter().map(|c| c.to_map(2)).collect();
    let input = tri.frame_in[0];
    LimitSystem::new(f, g, h, input, input.adjoint(), 2, ledger.rho(), ledger.d)
}

/// Radii on which the limit-map estimates hold, in log form.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RadiiSchedule {
    pub lambda: f64,
    #[serde(rename = "M")]
    pub m: f64,
    pub rho: f64,
    pub ln_r: Vec<f64>,
    pub ln_s: Vec<f64>,
    pub ln_d: f64,
    /// Smallest `ln s_{n+1} - ln s_n - ln D` over the range.
    pub monotone_slack: f64,
}

fn log_sum(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Envelope constant `M` of the one-step defect on `B(0, r_n)`, as a log.
pub fn defect_constant_ln(ledger: &ConstantsLedger, z: f64, ln_r: &[f64]) -> f64 {
    let (c_, d, k) = (ledger.c, ledger.d, ledger.k);
    let e = ledger.envelope_exponent();
    let ld = d.ln();
    let l3 = (19.0 * d * d * z * z / c_.powi(3)).ln() + (81.0 * 2f64.powf(1.5)).ln();
    let l4 = (28.0 * d * d * z.powi(3) / c_.powi(3)).ln();
    let mut best = f64::NEG_INFINITY;
    for (n, &lr) in ln_r.iter().enumerate() {
        let nf = n as f64;
        let mut total = l3 - 4.0 * nf * e * ld + (3.0 - k) * lr;
        let mut ell = 4usize;
        loop {
            let lf = ell as f64;
            let t = l4 - 6.0 * nf * e * ld + 5.0 * lf.ln() + lf / 2.0 * 2f64.ln() + (lf - k) * lr;
            total = log_sum(total, t);
            if (t < total - 40.0 && ell > 60) || ell > 20000 {
                break;
            }
            ell += 1;
        }
        best = best.max(total);
    }
    best
}

pub fn radii_schedule(ledger: &ConstantsLedger, n_max: usize) -> Result<RadiiSchedule> {
    let z = ledger.z.ok_or_else(|| Error::Config("radii need the envelope constant Z".into()))?;
    let (c_, d, k, lambda) = (ledger.c, ledger.d, ledger.k, ledger.lambda);
    let e = ledger.envelope_exponent();
    let third = 4.0 * e / (3.0 - k);
    if third >= 1.0 {
        return Err(Error::Config(format!("radii need 4(k-2+eps)/(3-k) < 1, got {third}")));
    }
    let rho = ledger.rho();
    let ld = d.ln();
    let ln_r: Vec<f64> = (0..=n_max)
        .map(|n| {
            let nf = n as f64;
            let a = ((1.0 - lambda) * c_ * c_ / (2.0 * z)).ln() + 2.0 * nf * e * ld;
            let b = (1.0 / (48.0 * z)).ln() + 2.0 * nf * e * ld;
            let t = (0.5f64).ln() + third * nf * ld;
            a.min(b).min(t)
        })
        .collect();
    let lm = defect_constant_ln(ledger, z, &ln_r);
    let m = lm.exp();
    let shrink = log_sum(lm - (1.0 - rho).ln(), 2f64.ln());
    let ln_s: Vec<f64> = ln_r.iter().map(|r| r - shrink).collect();
    let mut monotone_slack = f64::INFINITY;
    for w in ln_s.windows(2) {
        monotone_slack = monotone_slack.min(w[1] - w[0] - ld);
    }
    if monotone_slack <= 0.0 {
        return Err(Error::Config(format!("radii fail D s_n < s_(n+1) (slack {monotone_slack})")));
    }
    Ok(RadiiSchedule { lambda, m, rho, ln_r, ln_s, ln_d: ld, monotone_slack })
}

impl RadiiSchedule {
    pub fn r(&self, n: usize) -> f64 {
        self.ln_r[n].exp()
    }

    pub fn s(&self, n: usize) -> f64 {
        self.ln_s[n].exp()
    }

    /// Minimal `v` with `D^{v-u} < s_v`, by linear scan.
    pub fn v_of(&self, u: usize) -> Option<usize> {
        (u..self.ln_s.len()).find(|&v| (v - u) as f64 * self.ln_d < self.ln_s[v])
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schedule serializes")
    }
}
