//! Basin membership, fullness of the normal-form basin, injectivity and
//! coverage checks for `h_n`, surjectivity witnesses and PPM slices.

use crate::error::{Error, Result};
use crate::jet::PolyMap2;
use crate::ledger::ConstantsLedger;
use crate::limit::{LimitSystem, PhiOptions, RadiiSchedule};
use crate::linalg::{c, cr, Mat2, Vec2, C64};
use crate::report::{Check, CheckSuite, Status};
use crate::sequence::{halton_ball_point, halton_sphere_point};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Converged,
    Escaped,
    Undecided,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OrbitRecord {
    pub start: Vec2,
    pub images: Vec<Vec2>,
    pub norms: Vec<f64>,
    pub verdict: Verdict,
    /// Index where the verdict was reached (horizon when undecided).
    pub stop: usize,
}

pub const ESCAPE_RADIUS: f64 = 10.0;
/// Steps of `|x_{n+1}| <= D |x_n|` required after the threshold is reached.
pub const TAIL_STEPS: usize = 5;

/// Forward orbit under `germs`; converged once the norm is below `threshold`
/// and the next [`TAIL_STEPS`] steps contract by `d` (when known).
pub fn basin_membership(germs: &[PolyMap2], d: Option<f64>, z: &Vec2, threshold: f64, horizon: usize) -> OrbitRecord {
    let horizon = horizon.min(germs.len());
    let mut images = vec![*z];
    let mut norms = vec![z.norm()];
    let mut x = *z;
    let mut candidate: Option<usize> = None;
    for n in 0..=horizon {
        let nx = norms[n];
        if !nx.is_finite() || nx > ESCAPE_RADIUS {
            return OrbitRecord { start: *z, images, norms, verdict: Verdict::Escaped, stop: n };
        }
        if nx == 0.0 {
            return OrbitRecord { start: *z, images, norms, verdict: Verdict::Converged, stop: candidate.unwrap_or(n) };
        }
        match candidate {
            None if nx < threshold => {
                candidate = Some(n);
                if d.is_none() {
                    return OrbitRecord { start: *z, images, norms, verdict: Verdict::Converged, stop: n };
                }
            }
            Some(c0) => {
                let contracted = d.map(|d| nx <= d * norms[n - 1] * (1.0 + 1e-12)).unwrap_or(true);
                if !contracted || nx >= threshold {
                    candidate = if nx < threshold { Some(n) } else { None };
                } else if n - c0 >= TAIL_STEPS {
                    return OrbitRecord { start: *z, images, norms, verdict: Verdict::Converged, stop: c0 };
                }
            }
            None => {}
        }
        if n == horizon {
            break;
        }
        x = germs[n].evaluate(&x);
        images.push(x);
        norms.push(x.norm());
    }
    OrbitRecord { start: *z, images, norms, verdict: Verdict::Undecided, stop: horizon }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GBasinPoint {
    pub start: Vec2,
    /// `R_j` at each train start `p_j`, and at the end of coverage.
    pub radii: Vec<f64>,
    pub j_z: Option<usize>,
    pub final_norm: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GBasinReport {
    pub suite: CheckSuite,
    pub points: Vec<GBasinPoint>,
    pub j1: usize,
    /// All sampled orbits below `1e-6` at the end of coverage.
    pub full: bool,
}

/// Forward iteration of the barred `g_n` from points of norm at most `radius`.
/// `starts` lists `p_0 = 0, p_1, ..., p_J` with `p_J` the end of coverage.
pub fn verify_g_basin_full(sys: &LimitSystem, starts: &[usize], ledger: &ConstantsLedger, z_const: f64, samples: usize, radius: f64) -> GBasinReport {
    let (c_, d, k, x) = (ledger.c, ledger.d, ledger.k, ledger.x);
    let j1 = ledger.compute_j1(z_const);
    let quad = z_const / (c_ * (1.0 - d));
    let env = |j: usize| d.powf(2f64.powi(j as i32) / (k - x));
    let env_half = |j: usize| if j == 0 { d.powf(0.5 / (k - x)) } else { d.powf(2f64.powi(j as i32 - 1) / (k - x)) };
    let mut rec = Check::new("everything.recursion", "trains j>=1");
    let mut conv = Check::new("everything.final_norm", "sampled points");
    let mut regime = Check::new("everything.regime", "sampled points, j>=max(j_z, j1)");
    let end = *starts.last().unwrap_or(&0);
    let mut points = Vec::with_capacity(samples + 1);
    let mut full = true;
    for i in 0..=samples {
        let z = if i == 0 { Vec2::ZERO } else { halton_ball_point(i).scale(cr(radius)) };
        let mut y = z;
        let mut radii = vec![y.norm()];
        let mut next_start = 1;
        for n in 0..end.min(sys.len()) {
            y = sys.g[n].eval(&y);
            if next_start < starts.len() && n + 1 == starts[next_start] {
                radii.push(y.norm());
                next_start += 1;
            }
        }
        for j in 1..radii.len().saturating_sub(1) {
            let r = radii[j];
            let bound = env(j) * r + quad * env_half(j) * r * r;
            rec.record(bound - radii[j + 1]);
        }
        let j_z = (0..radii.len()).find(|&j| j >= j1 && (j..radii.len()).all(|i| radii[i] <= env_half(i)));
        if let Some(jz) = j_z {
            for w in radii[jz..].windows(2) {
                regime.record(w[0] - w[1]);
            }
        }
        let final_norm = *radii.last().unwrap_or(&0.0);
        if !(final_norm < 1e-6) || j_z.is_none() {
            full = false;
        }
        conv.record_tol(1e-6 - final_norm, 0.0);
        points.push(GBasinPoint { start: z, radii, j_z, final_norm });
    }
    let mut suite = CheckSuite::new();
    suite.push(rec);
    suite.push(regime);
    if !full {
        conv.status = Status::Undecided;
        conv.note = "insufficient coverage: some orbit has not reached 1e-6 or the decay regime".into();
    }
    suite.push(conv);
    GBasinReport { suite, points, j1, full }
}

fn ln_norm(v: &Vec2) -> f64 {
    v.norm().ln()
}

/// `p(r u) / r^low` for a polynomial whose terms all have degree `>= low`.
fn scaled_eval(bands: &[(usize, PolyMap2)], u: &Vec2, ln_r: f64, low: usize) -> Vec2 {
    let mut acc = Vec2::ZERO;
    for (deg, b) in bands {
        let f = ((*deg - low) as f64 * ln_r).exp();
        if f > 0.0 {
            acc = acc.add(&b.evaluate(u).scale(cr(f)));
        }
    }
    acc
}

fn scaled_jac(bands: &[(usize, PolyMap2)], u: &Vec2, ln_r: f64) -> Mat2 {
    let mut acc = Mat2::new(cr(0.0), cr(0.0), cr(0.0), cr(0.0));
    for (deg, b) in bands {
        let f = ((*deg - 1) as f64 * ln_r).exp();
        if f > 0.0 {
            acc = acc.add(&b.jacobian(u).scale(cr(f)));
        }
    }
    acc
}

fn bands_of(p: &PolyMap2, low: usize) -> Vec<(usize, PolyMap2)> {
    (low..=p.degree().max(low)).map(|d| (d, p.degree_band(d, d))).filter(|(_, b)| b.max_abs() > 0.0).collect()
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CoverageOptions {
    pub samples_per_level: usize,
    pub level_stride: usize,
    pub sphere_samples: usize,
    /// Steps used for `phi_{m+n,m}` on the spheres.
    pub phi_steps: usize,
}

impl Default for CoverageOptions {
    fn default() -> Self {
        CoverageOptions { samples_per_level: 1000, level_stride: 1, sphere_samples: 64, phi_steps: 60 }
    }
}

/// Bounds on `h_n` over `B(0, r_n)`, the one-step defect, the Lipschitz bound
/// of `g_n^{-1}`, and the sphere minimum of `phi_{m+n,m}` on `B(0, s_m)`.
/// Magnitudes are compared in logs with points written as `r u`, `|u| <= 1`.
pub fn verify_injectivity_coverage(sys: &LimitSystem, sched: &RadiiSchedule, ledger: &ConstantsLedger, opts: &CoverageOptions) -> CheckSuite {
    let k = ledger.k;
    let inv_c = 1.0 / (sched.lambda * ledger.c);
    let mut deriv = Check::new("h.derivative", "n, B(0,r_n)");
    let mut lower = Check::new("h.norm_lower", "n, B(0,r_n)");
    let mut upper = Check::new("part3.norm_upper", "n, B(0,r_n)");
    let mut sep = Check::new("h.separation", "n, pairs in B(0,r_n)");
    let mut part4 = Check::new("part4.defect", "n, B(0,r_n)");
    let mut part2 = Check::new("part2.g_inverse_lipschitz", "n, pairs in B(0,r_n)");
    let mut h2 = Check::new("h2.boundary_min", "m, sphere of radius s_m");
    let mut afst = Check::new("afstanden.i", "m, sphere of radius s_m");
    let lm = sched.m.ln();
    let lmr = (sched.m / (1.0 - sched.rho)).ln();
    let n_total = sys.len().min(sched.ln_r.len() - 1);
    let mut n = 0;
    while n < n_total {
        let lr = sched.ln_r[n];
        let qb = bands_of(&sys.q[n], 2);
        let eb = bands_of(&sys.defect[n], sys.matched + 1);
        let low_e = sys.matched + 1;
        let mut prev: Option<Vec2> = None;
        for i in 1..=opts.samples_per_level {
            let u = if i % 10 == 0 { halton_sphere_point(i) } else { halton_ball_point(i) };
            let un = u.norm();
            if un == 0.0 {
                continue;
            }
            let dq = scaled_jac(&qb, &u, lr);
            deriv.record(0.5 - dq.op_norm());
            let hu = u.add(&scaled_eval(&qb, &u, lr, 2).scale(cr(lr.exp())));
            let ratio = hu.norm() / un;
            lower.record(ratio - 0.5);
            upper.record(2.0 - ratio);
            if let (Some(p), true) = (prev, lr > -600.0) {
                let hp = p.add(&scaled_eval(&qb, &p, lr, 2).scale(cr(lr.exp())));
                let dz = u.sub(&p).norm();
                if dz > 0.0 {
                    sep.record(hu.sub(&hp).norm() - 0.5 * dz);
                }
                // g^{-1} on r-scaled points: linear part plus the scaled correction
                let (zr, wr) = (u.scale(cr(lr.exp())), p.scale(cr(lr.exp())));
                let diff = sys.g[n].inverse_diff(&wr, &zr.sub(&wr));
                let lhs = diff.norm().ln();
                let rhs = zr.sub(&wr).norm().ln() + inv_c.ln();
                if lhs.is_finite() && rhs.is_finite() {
                    part2.record(rhs - lhs);
                }
            }
            prev = Some(u);
            let e = scaled_eval(&eb, &u, lr, low_e);
            if e.norm() > 0.0 {
                let lhs = low_e as f64 * lr + ln_norm(&e);
                let rhs = lm + k * (lr + un.ln());
                part4.record(rhs - lhs);
            }
        }
        n += opts.level_stride.max(1);
    }
    let mut m = 0;
    while m < n_total {
        let ls = sched.ln_s[m];
        if ls < -600.0 {
            break;
        }
        let steps = opts.phi_steps.min(sys.len() - m);
        for i in 1..=opts.sphere_samples {
            let w = halton_sphere_point(i).scale(cr(ls.exp()));
            match sys.run_levels(&w, m, m + steps, |_, _, _, _| false) {
                Ok(run) => {
                    h2.record(run.barred.norm().ln() - (0.25f64.ln() + ls));
                    let dv = run.tail.norm();
                    if dv > 0.0 {
                        afst.record(lmr + k * ls - dv.ln());
                    }
                }
                Err(e) => h2.fail(e.to_string()),
            }
        }
        m += opts.level_stride.max(1) * 4;
    }
    let mut suite = CheckSuite::new();
    for ch in [deriv, lower, upper, sep, part4, part2, h2, afst] {
        suite.push(ch);
    }
    suite
}

/// Central-difference `DPhi_n(0)` compared with the identity.
pub fn verify_dphi_identity(sys: &LimitSystem, n: usize, tol: f64) -> Check {
    let mut ch = Check::new("phi.dphi_zero", format!("n = {n}"));
    let h = 1e-9;
    for (i, e) in [Vec2::new(cr(1.0), cr(0.0)), Vec2::new(cr(0.0), cr(1.0))].iter().enumerate() {
        let p = sys.phi_fixed(&e.scale(cr(h)), n);
        let m = sys.phi_fixed(&e.scale(cr(-h)), n);
        match (p, m) {
            (Ok(p), Ok(m)) => {
                let col = p.sub(&m).scale(cr(0.5 / h));
                let dev = col.sub(e).norm();
                ch.record_tol(tol - dev, 0.0);
                let _ = i;
            }
            (Err(er), _) | (_, Err(er)) => ch.fail(er.to_string()),
        }
    }
    let analytic = sys.dphi_zero().sub_identity_max();
    ch.record_tol(tol - analytic, 0.0);
    ch
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Witness {
    pub target: Vec2,
    /// Steps of `g` needed to bring the target into `B(0, 1/4)`.
    pub t: usize,
    pub guess: Vec2,
    pub preimage: Vec2,
    pub residual: f64,
    pub iterations: usize,
    pub n_eval: usize,
    pub verdict: Verdict,
    pub note: String,
}

fn newton_inverse(f: impl Fn(&Vec2) -> Vec2, jac: impl Fn(&Vec2) -> Mat2, y: &Vec2, start: Vec2) -> Vec2 {
    let mut x = start;
    for _ in 0..50 {
        let r = f(&x).sub(y);
        let Some(ji) = jac(&x).inverse() else { break };
        let step = ji.apply(&r);
        x = x.sub(&step);
        if step.norm() <= 1e-16 * x.norm().max(1e-300) {
            break;
        }
    }
    x
}

/// Preimage of `w` under `Phi` by Newton iteration on `Phi_n - w`, started
/// from the backward pull of `g_{t,0}(w)` through `H_t^{-1}` and `f^{-1}`.
pub fn surjectivity_witness(sys: &LimitSystem, v_of: &dyn Fn(usize) -> Option<usize>, w: &Vec2, tol: f64) -> Result<Witness> {
    let n_total = sys.len();
    let inv_out = sys.output.inverse().ok_or_else(|| Error::Singular("output frame".into()))?;
    let wb = inv_out.apply(w);
    let mut y = wb;
    let mut t = 0;
    while y.norm() >= 0.25 {
        if t >= n_total {
            return Err(Error::Undecided("target does not enter B(0,1/4) under g within the horizon".into()));
        }
        y = sys.g[t].eval(&y);
        t += 1;
    }
    let mut x = newton_inverse(|p| sys.h(t, p), |p| sys.h_jacobian(t, p), &y, y);
    for m in (0..t).rev() {
        let start = sys.flin[m].inverse().map(|li| li.apply(&x)).unwrap_or(x);
        x = newton_inverse(|p| sys.f_step(m, p), |p| sys.flin[m].add(&sys.fnl[m].jacobian(p)), &x, start);
    }
    let guess = sys.output.apply(&x);
    let mut z = if guess.is_finite() { guess } else { *w };
    let n_eval = {
        let probe = sys.phi_at(&z, v_of, &PhiOptions::default()).or_else(|_| sys.phi_at(w, v_of, &PhiOptions::default()))?;
        (probe.n + 8).min(n_total)
    };
    let phi = |p: &Vec2| sys.phi_fixed(p, n_eval);
    let mut residual = phi(&z)?.sub(w).norm();
    let mut iterations = 0;
    let scale = w.norm().max(1.0);
    while residual > 1e-13 * scale && iterations < 40 {
        iterations += 1;
        let h = 1e-6 * z.norm().max(1e-2);
        let mut cols = [Vec2::ZERO; 2];
        for (i, e) in [Vec2::new(cr(1.0), cr(0.0)), Vec2::new(cr(0.0), cr(1.0))].iter().enumerate() {
            let p = phi(&z.add(&e.scale(cr(h))))?;
            let m = phi(&z.sub(&e.scale(cr(h))))?;
            cols[i] = p.sub(&m).scale(cr(0.5 / h));
        }
        let j = Mat2::from_columns(cols[0], cols[1]);
        let Some(ji) = j.inverse() else { break };
        let r = phi(&z)?.sub(w);
        let step = ji.apply(&r);
        let mut lam = 1.0;
        let mut accepted = false;
        while lam > 1e-4 {
            let cand = z.sub(&step.scale(cr(lam)));
            if let Ok(v) = phi(&cand) {
                let nr = v.sub(w).norm();
                if nr < residual {
                    z = cand;
                    residual = nr;
                    accepted = true;
                    break;
                }
            }
            lam *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let verdict = if residual < tol { Verdict::Converged } else { Verdict::Undecided };
    let note = if verdict == Verdict::Converged { String::new() } else { format!("Newton stalled at residual {residual:e}") };
    Ok(Witness { target: *w, t, guess, preimage: z, residual, iterations, n_eval, verdict, note })
}

/// A complex line through `base` along one coordinate, sampled on a square.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlicePlane {
    /// 0 varies `z`, 1 varies `w`.
    pub axis: usize,
    pub fixed: C64,
    pub center: C64,
    pub radius: f64,
    pub size: usize,
}

pub fn parse_complex(s: &str) -> Result<C64> {
    let t: String = s.chars().filter(|ch| !ch.is_whitespace()).collect();
    if t.is_empty() {
        return Err(Error::Parse("empty complex number".into()));
    }
    if let Some(body) = t.strip_suffix('i') {
        let split = body.char_indices().skip(1).filter(|(i, ch)| (*ch == '+' || *ch == '-') && !body[..*i].ends_with(['e', 'E'])).map(|(i, _)| i).last();
        let (re, im) = match split {
            Some(i) => (&body[..i], &body[i..]),
            None => ("0", body),
        };
        let im = match im {
            "" | "+" => "1",
            "-" => "-1",
            x => x,
        };
        let re: f64 = re.parse().map_err(|_| Error::Parse(format!("bad real part in '{s}'")))?;
        let im: f64 = im.parse().map_err(|_| Error::Parse(format!("bad imaginary part in '{s}'")))?;
        Ok(c(re, im))
    } else {
        let re: f64 = t.parse().map_err(|_| Error::Parse(format!("bad number '{s}'")))?;
        Ok(cr(re))
    }
}

impl SlicePlane {
    /// Parses `axis=z,fixed=0.1+0.2i,center=0,radius=2,size=64`; keys may be omitted.
    pub fn parse(spec: &str) -> Result<SlicePlane> {
        let mut p = SlicePlane { axis: 0, fixed: cr(0.0), center: cr(0.0), radius: 1.0, size: 64 };
        for part in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (k, v) = part.split_once('=').ok_or_else(|| Error::Parse(format!("slice entry '{part}' lacks '='")))?;
            match k.trim() {
                "axis" => {
                    p.axis = match v.trim() {
                        "z" => 0,
                        "w" => 1,
                        o => return Err(Error::Parse(format!("slice axis must be z or w, got '{o}'"))),
                    }
                }
                "fixed" => p.fixed = parse_complex(v)?,
                "center" => p.center = parse_complex(v)?,
                "radius" => p.radius = v.trim().parse().map_err(|_| Error::Parse(format!("bad radius '{v}'")))?,
                "size" => p.size = v.trim().parse().map_err(|_| Error::Parse(format!("bad size '{v}'")))?,
                o => return Err(Error::Parse(format!("unknown slice key '{o}'"))),
            }
        }
        if p.size == 0 || p.size > 4096 || !(p.radius > 0.0) {
            return Err(Error::Parse("slice needs 0 < size <= 4096 and radius > 0".into()));
        }
        Ok(p)
    }

    /// Point of pixel `(col, row)`; row 0 is the top (largest imaginary part).
    pub fn point(&self, col: usize, row: usize) -> Vec2 {
        let step = 2.0 * self.radius / self.size as f64;
        let re = self.center.re - self.radius + (col as f64 + 0.5) * step;
        let im = self.center.im + self.radius - (row as f64 + 0.5) * step;
        let v = c(re, im);
        if self.axis == 0 {
            Vec2::new(v, self.fixed)
        } else {
            Vec2::new(self.fixed, v)
        }
    }
}

/// Pixel colour of a verdict: converged black, escaped white, undecided mid-grey.
pub fn verdict_rgb(v: Verdict) -> [u8; 3] {
    match v {
        Verdict::Converged => [0, 0, 0],
        Verdict::Escaped => [255, 255, 255],
        Verdict::Undecided => [128, 128, 128],
    }
}

pub fn basin_slice(germs: &[PolyMap2], d: Option<f64>, plane: &SlicePlane, threshold: f64, horizon: usize) -> Vec<Verdict> {
    let mut out = Vec::with_capacity(plane.size * plane.size);
    for row in 0..plane.size {
        for col in 0..plane.size {
            out.push(basin_membership(germs, d, &plane.point(col, row), threshold, horizon).verdict);
        }
    }
    out
}

/// Binary PPM (P6).
pub fn write_ppm(size: usize, verdicts: &[Verdict]) -> Vec<u8> {
    let mut out = format!("P6\n{size} {size}\n255\n").into_bytes();
    for v in verdicts {
        out.extend_from_slice(&verdict_rgb(*v));
    }
    out
}
