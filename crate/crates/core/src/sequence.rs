//! Seeded generators for uniformly attracting sequences of germs.
//!
//! Random families are this crate's own choice of distribution; reports label them as such.

use crate::error::{Error, Result};
use crate::jet::PolyMap2;
use crate::linalg::{c, cr, Mat2, Vec2, C64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttractionBounds {
    #[serde(rename = "C")]
    pub c: f64,
    #[serde(rename = "D")]
    pub d: f64,
}

impl AttractionBounds {
    pub fn new(c_: f64, d: f64) -> Result<Self> {
        if !(c_ > 0.0 && c_ <= d && d < 1.0) {
            return Err(Error::Config(format!("need 0 < C <= D < 1, got C={c_}, D={d}")));
        }
        Ok(AttractionBounds { c: c_, d })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    DiagonalRandom,
    TriangularRandom,
    FullRandom,
    Constant,
    FornaessShort,
    UserFile,
}

impl std::str::FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diagonal-random" => Ok(Family::DiagonalRandom),
            "triangular-random" => Ok(Family::TriangularRandom),
            "full-random" => Ok(Family::FullRandom),
            "constant" => Ok(Family::Constant),
            "fornaess-short" => Ok(Family::FornaessShort),
            "user-file" => Ok(Family::UserFile),
            other => Err(Error::Config(format!("unknown family '{other}'"))),
        }
    }
}

/// Block structure for the random families: the weakly contracting direction
/// swaps between consecutive blocks of lengths `first_block * growth^b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alternating {
    pub first_block: usize,
    pub growth: f64,
    /// Maximal per-step rotation of the frame inside a block (radians), full-random only.
    #[serde(default)]
    pub jitter: f64,
    /// In `[0,1)`: the weak modulus is drawn from the top `1 - separation` of the
    /// log band and the strong one from the bottom `1 - separation`.
    #[serde(default)]
    pub separation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceSpec {
    pub family: Family,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub bounds: Option<AttractionBounds>,
    /// Degrees `2..k-1` vanish in every generated germ.
    #[serde(default = "default_contact")]
    pub contact_order: usize,
    #[serde(default = "default_cutoff")]
    pub cutoff: usize,
    /// Share of the gap `(D-C)/2` spent on higher-order terms.
    #[serde(default = "default_budget")]
    pub nonlinear_budget: f64,
    #[serde(default)]
    pub alternating: Option<Alternating>,
    /// Germ used by the constant family, in the jet JSON format.
    #[serde(default)]
    pub constant_map: Option<serde_json::Value>,
    #[serde(default = "default_a0")]
    pub fornaess_a0: f64,
    #[serde(default)]
    pub user_file: Option<String>,
}

fn default_contact() -> usize {
    2
}
fn default_cutoff() -> usize {
    2
}
fn default_budget() -> f64 {
    0.5
}
fn default_a0() -> f64 {
    0.5
}

impl SequenceSpec {
    pub fn new(family: Family, seed: u64, bounds: Option<AttractionBounds>) -> Self {
        SequenceSpec {
            family,
            seed,
            bounds,
            contact_order: 2,
            cutoff: 2,
            nonlinear_budget: default_budget(),
            alternating: None,
            constant_map: None,
            fornaess_a0: default_a0(),
            user_file: None,
        }
    }

    pub fn constant(map: &PolyMap2, bounds: Option<AttractionBounds>) -> Self {
        let mut s = SequenceSpec::new(Family::Constant, 0, bounds);
        s.cutoff = map.cutoff();
        s.constant_map = Some(map.to_json_value());
        s
    }

    pub fn fornaess(a0: f64) -> Self {
        let mut s = SequenceSpec::new(Family::FornaessShort, 0, None);
        s.fornaess_a0 = a0;
        s
    }

    pub fn is_attracting_family(&self) -> bool {
        self.family != Family::FornaessShort && self.bounds.is_some()
    }
}

/// A seeded sequence of germs with a cache of generated terms.
#[derive(Clone, Debug)]
pub struct MapSequence {
    pub spec: SequenceSpec,
    cache: Vec<PolyMap2>,
    user: Vec<PolyMap2>,
    constant: Option<PolyMap2>,
}

impl MapSequence {
    pub fn new(spec: SequenceSpec) -> Result<Self> {
        if spec.cutoff < 1 {
            return Err(Error::Config("cutoff must be at least 1".into()));
        }
        if spec.contact_order < 2 {
            return Err(Error::Config("contact order must be at least 2".into()));
        }
        if let Some(b) = spec.bounds {
            AttractionBounds::new(b.c, b.d)?;
        }
        let needs_bounds = matches!(spec.family, Family::DiagonalRandom | Family::TriangularRandom | Family::FullRandom);
        if needs_bounds && spec.bounds.is_none() {
            return Err(Error::Config("random families need attraction bounds".into()));
        }
        if spec.family == Family::FornaessShort && spec.bounds.is_some() {
            return Err(Error::Config("fornaess-short carries no attraction bounds".into()));
        }
        let mut user = Vec::new();
        if spec.family == Family::UserFile {
            let path = spec.user_file.as_ref().ok_or_else(|| Error::Config("user-file family needs a path".into()))?;
            user = load_germs(path)?;
            if user.is_empty() {
                return Err(Error::Config(format!("{path}: no germs")));
            }
        }
        let constant = match (&spec.family, &spec.constant_map) {
            (Family::Constant, Some(v)) => Some(PolyMap2::from_json_value(v)?),
            (Family::Constant, None) => {
                let b = spec.bounds.ok_or_else(|| Error::Config("constant family needs a map or bounds".into()))?;
                Some(PolyMap2::linear(&Mat2::diag(cr(b.d), cr(b.c)), spec.cutoff))
            }
            _ => None,
        };
        Ok(MapSequence { spec, cache: Vec::new(), user, constant })
    }

    /// Sequence built from explicit germs (held at the last one past the end).
    pub fn from_germs(germs: Vec<PolyMap2>, bounds: Option<AttractionBounds>) -> Result<Self> {
        if germs.is_empty() {
            return Err(Error::Config("empty germ list".into()));
        }
        let mut spec = SequenceSpec::new(Family::UserFile, 0, bounds);
        spec.cutoff = germs[0].cutoff();
        Ok(MapSequence { spec, cache: Vec::new(), user: germs, constant: None })
    }

    pub fn bounds(&self) -> Option<AttractionBounds> {
        self.spec.bounds
    }

    /// Germ of f_n; identical for identical `(spec, n)`.
    pub fn get(&mut self, n: usize) -> PolyMap2 {
        while self.cache.len() <= n {
            let m = self.cache.len();
            let g = self.generate_uncached(m);
            self.cache.push(g);
        }
        self.cache[n].clone()
    }

    pub fn germs(&mut self, count: usize) -> Vec<PolyMap2> {
        if count > 0 {
            self.get(count - 1);
        }
        self.cache[..count].to_vec()
    }

    pub fn generate_uncached(&self, n: usize) -> PolyMap2 {
        generate_germ(&self.spec, n, &self.user, self.constant.as_ref())
    }
}

/// Germ of f_n for a spec, without caching.
pub fn generate(spec: &SequenceSpec, n: usize) -> Result<PolyMap2> {
    let seq = MapSequence::new(spec.clone())?;
    Ok(seq.generate_uncached(n))
}

fn load_germs(path: &str) -> Result<Vec<PolyMap2>> {
    let text = std::fs::read_to_string(path)?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    let list = match &v {
        serde_json::Value::Array(a) => a.clone(),
        serde_json::Value::Object(o) => match o.get("germs") {
            Some(serde_json::Value::Array(a)) => a.clone(),
            _ => vec![v.clone()],
        },
        _ => return Err(Error::Parse(format!("{path}: expected a germ or a list of germs"))),
    };
    list.iter().map(PolyMap2::from_json_value).collect()
}

fn rng_for(seed: u64, n: usize) -> ChaCha20Rng {
    let mut r = ChaCha20Rng::seed_from_u64(seed);
    r.set_stream(n as u64 + 1);
    r
}

fn block_parity(alt: &Alternating, n: usize) -> usize {
    let mut start = 0usize;
    let mut len = alt.first_block.max(1) as f64;
    let mut b = 0usize;
    loop {
        let l = len.round().max(1.0) as usize;
        if n < start + l {
            return b;
        }
        start += l;
        len *= alt.growth.max(1.0);
        b += 1;
    }
}

fn block_index(alt: &Alternating, n: usize) -> usize {
    block_parity(alt, n)
}

fn unit_phase(rng: &mut ChaCha20Rng) -> C64 {
    C64::from_polar(1.0, 2.0 * PI * rng.gen::<f64>())
}

fn log_uniform(rng: &mut ChaCha20Rng, lo: f64, hi: f64) -> f64 {
    (lo.ln() + (hi.ln() - lo.ln()) * rng.gen::<f64>()).exp()
}

fn random_unitary(rng: &mut ChaCha20Rng) -> Mat2 {
    let u = Vec2::new(c(gauss(rng), gauss(rng)), c(gauss(rng), gauss(rng))).normalized();
    let perp = Vec2::new(-u.w.conj(), u.z.conj());
    Mat2::from_columns(u, perp).scale(unit_phase(rng)).certify_unitary()
}

fn gauss(rng: &mut ChaCha20Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

fn rotation(theta: f64, phase: C64) -> Mat2 {
    Mat2::new(cr(theta.cos()), -cr(theta.sin()) * phase.conj(), cr(theta.sin()) * phase, cr(theta.cos())).certify_unitary()
}

/// Random terms in degrees `k..=K`, rescaled so the nonlinear part `N`
/// satisfies `|N(z)| <= eta |z|^2` on the unit ball.
fn random_nonlinear(rng: &mut ChaCha20Rng, k: usize, cutoff: usize, eta: f64) -> PolyMap2 {
    let mut p = PolyMap2::zero(cutoff);
    if k > cutoff || eta <= 0.0 {
        return p;
    }
    for m in k..=cutoff {
        for i in 0..=m {
            for comp in 0..2 {
                let mag: f64 = rng.gen::<f64>();
                p.set(comp, i, m - i, unit_phase(rng) * mag);
            }
        }
    }
    let l1 = p.nonlinear_l1();
    let size = l1[0].hypot(l1[1]);
    if size == 0.0 {
        return p;
    }
    p.scale(cr(eta / size))
}

fn generate_germ(spec: &SequenceSpec, n: usize, user: &[PolyMap2], constant: Option<&PolyMap2>) -> PolyMap2 {
    match spec.family {
        Family::Constant => constant.expect("constant germ").clone(),
        Family::UserFile => user[n.min(user.len() - 1)].clone(),
        Family::FornaessShort => {
            let a = spec.fornaess_a0.powf(2f64.powi(n.min(1000) as i32));
            let mut p = PolyMap2::zero(spec.cutoff.max(2));
            p.set(0, 2, 0, cr(1.0));
            p.set(0, 0, 1, cr(a));
            p.set(1, 1, 0, cr(a));
            p
        }
        Family::DiagonalRandom | Family::TriangularRandom | Family::FullRandom => random_germ(spec, n),
    }
}

fn random_germ(spec: &SequenceSpec, n: usize) -> PolyMap2 {
    let b = spec.bounds.expect("bounds checked at construction");
    let mut rng = rng_for(spec.seed, n);
    let eta = spec.nonlinear_budget.clamp(0.0, 0.999) * (b.d - b.c) / 2.0;
    let nonlin = random_nonlinear(&mut rng, spec.contact_order, spec.cutoff, eta);
    let l1 = nonlin.nonlinear_l1();
    let eta_used = l1[0].hypot(l1[1]);
    let (lo, hi) = (b.c + eta_used, b.d - eta_used);
    let sep = spec.alternating.map(|a| a.separation.clamp(0.0, 0.999)).unwrap_or(0.0);
    let cut = (1.0 - sep) * (hi.ln() - lo.ln());
    let mut x = log_uniform(&mut rng, (hi.ln() - cut).exp(), hi);
    let mut y = log_uniform(&mut rng, lo, (lo.ln() + cut).exp());
    let weak_first = match &spec.alternating {
        Some(alt) => block_parity(alt, n) % 2 == 1,
        None => rng.gen::<bool>(),
    };
    if spec.alternating.is_some() {
        // the weak (less contracting) modulus goes to the first coordinate on odd blocks
        if (x < y) == weak_first {
            std::mem::swap(&mut x, &mut y);
        }
    }
    let (pa, pb) = (unit_phase(&mut rng), unit_phase(&mut rng));
    let lin = match spec.family {
        Family::DiagonalRandom => Mat2::diag(pa * x, pb * y),
        Family::TriangularRandom => {
            let mut off = unit_phase(&mut rng) * (rng.gen::<f64>() * (hi - lo));
            // shrink the off-diagonal entry until the singular values fit the band
            for _ in 0..200 {
                let (s1, s2) = Mat2::lower(pa * x, off, pb * y).singular_values();
                if s1 <= hi && s2 >= lo {
                    break;
                }
                off *= 0.8;
            }
            let (s1, s2) = Mat2::lower(pa * x, off, pb * y).singular_values();
            if !(s1 <= hi && s2 >= lo) {
                off = cr(0.0);
            }
            Mat2::lower(pa * x, off, pb * y)
        }
        _ => {
            let frame = match &spec.alternating {
                Some(alt) => {
                    let blk = block_index(alt, n);
                    let mut brng = rng_for(spec.seed ^ 0x9e37_79b9_7f4a_7c15, blk);
                    let base = rotation(0.3 * gauss(&mut brng), unit_phase(&mut brng));
                    let jit = rotation(alt.jitter * (2.0 * rng.gen::<f64>() - 1.0), unit_phase(&mut rng));
                    base.mul(&jit)
                }
                None => random_unitary(&mut rng),
            };
            frame.mul(&Mat2::diag(pa * x, pb * y)).mul(&frame.adjoint())
        }
    };
    let mut germ = PolyMap2::linear(&lin, spec.cutoff);
    for (comp, i, j, v) in nonlin.terms() {
        if i + j >= 2 {
            germ.set(comp, i, j, v);
        }
    }
    germ
}

/// Halton low-discrepancy point of the unit ball in C^2 (index >= 1).
pub fn halton_ball_point(index: usize) -> Vec2 {
    let u1 = radical_inverse(index, 2);
    let u2 = radical_inverse(index, 3);
    let u3 = radical_inverse(index, 5);
    let u4 = radical_inverse(index, 7);
    let r = u1.powf(0.25);
    let eta = u2.sqrt().asin();
    let z = C64::from_polar(r * eta.cos(), 2.0 * PI * u3);
    let w = C64::from_polar(r * eta.sin(), 2.0 * PI * u4);
    Vec2::new(z, w)
}

/// Halton point of the unit sphere in C^2 (index >= 1).
pub fn halton_sphere_point(index: usize) -> Vec2 {
    let u2 = radical_inverse(index, 3);
    let u3 = radical_inverse(index, 5);
    let u4 = radical_inverse(index, 7);
    let eta = u2.sqrt().asin();
    Vec2::new(C64::from_polar(eta.cos(), 2.0 * PI * u3), C64::from_polar(eta.sin(), 2.0 * PI * u4))
}

fn radical_inverse(mut i: usize, base: usize) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttractionRow {
    pub n: usize,
    pub min_ratio: f64,
    pub max_ratio: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttractionReport {
    pub family: Family,
    pub bounds: Option<AttractionBounds>,
    pub samples: usize,
    pub rows: Vec<AttractionRow>,
    pub observed_min: f64,
    pub observed_max: f64,
    pub pass: bool,
    pub note: String,
}

/// Samples `|f_n(z)|/|z|` on quasi-random ball points for every n <= n_max.
/// Points on the two coordinate axes are probed as well.
pub fn verify_uniform_attraction(seq: &mut MapSequence, n_max: usize, samples: usize) -> AttractionReport {
    let samples = samples.max(1);
    let mut pts: Vec<Vec2> = (1..=samples).map(halton_ball_point).collect();
    for t in [1.0, 0.5, 0.1, 1e-3] {
        pts.push(Vec2::real(t, 0.0));
        pts.push(Vec2::real(0.0, t));
    }
    let tol = 1e-9;
    let bounds = seq.bounds();
    let germs = seq.germs(n_max + 1);
    let rows: Vec<AttractionRow> = {
        use rayon::prelude::*;
        germs
            .par_iter()
            .enumerate()
            .map(|(n, g)| {
                let mut lo = f64::INFINITY;
                let mut hi: f64 = 0.0;
                for p in &pts {
                    let nz = p.norm();
                    if nz == 0.0 {
                        continue;
                    }
                    let r = g.evaluate(p).norm() / nz;
                    lo = lo.min(r);
                    hi = hi.max(r);
                }
                let pass = match bounds {
                    Some(b) => lo >= b.c - tol && hi <= b.d + tol,
                    None => false,
                };
                AttractionRow { n, min_ratio: lo, max_ratio: hi, pass }
            })
            .collect()
    };
    let observed_min = rows.iter().map(|r| r.min_ratio).fold(f64::INFINITY, f64::min);
    let observed_max = rows.iter().map(|r| r.max_ratio).fold(0.0, f64::max);
    let pass = bounds.is_some() && rows.iter().all(|r| r.pass);
    let note = match (bounds, seq.spec.family) {
        (None, Family::FornaessShort) => "no uniform lower bound: the per-step lower ratio tends to 0".to_string(),
        (None, _) => "no declared bounds".to_string(),
        _ if pass => "sampled ratios within the declared bounds".to_string(),
        _ => "sampled ratios leave the declared bounds".to_string(),
    };
    AttractionReport { family: seq.spec.family, bounds, samples, rows, observed_min, observed_max, pass, note }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContactOrder {
    pub k: usize,
    /// True when every term up to the cutoff vanishes, so the order is only known to be >= k.
    pub at_least: bool,
}

/// Largest k with degrees 2..k-1 vanishing in all germs up to n_max.
pub fn order_of_contact(seq: &mut MapSequence, n_max: usize) -> ContactOrder {
    let germs = seq.germs(n_max + 1);
    let cutoff = germs.iter().map(|g| g.cutoff()).min().unwrap_or(1);
    let mut first = usize::MAX;
    for g in &germs {
        for (_, i, j, v) in g.terms() {
            let m = i + j;
            if m >= 2 && v != cr(0.0) {
                first = first.min(m);
            }
        }
    }
    if first == usize::MAX {
        ContactOrder { k: cutoff.max(2), at_least: true }
    } else {
        ContactOrder { k: first, at_least: false }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bounds(c_: f64, d: f64) -> Option<AttractionBounds> {
        Some(AttractionBounds::new(c_, d).unwrap())
    }

    #[test]
    fn constant_family_repeats() {
        let map = PolyMap2::linear(&Mat2::diag(cr(0.5), cr(0.3)), 2);
        let mut s = MapSequence::new(SequenceSpec::constant(&map, bounds(0.3, 0.5))).unwrap();
        assert_eq!(s.get(0), map);
        assert_eq!(s.get(17), map);
    }

    #[test]
    fn fornaess_second_germ() {
        let f1 = generate(&SequenceSpec::fornaess(0.5), 1).unwrap();
        assert_eq!(f1.get(0, 2, 0), cr(1.0));
        assert_eq!(f1.get(0, 0, 1), cr(0.25));
        assert_eq!(f1.get(1, 1, 0), cr(0.25));
        assert_eq!(f1.get(1, 0, 1), cr(0.0));
    }

    #[test]
    fn diagonal_random_is_deterministic() {
        let mut spec = SequenceSpec::new(Family::DiagonalRandom, 42, bounds(0.35, 0.5));
        spec.cutoff = 3;
        let a = generate(&spec, 7).unwrap();
        let b = generate(&spec, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate(&spec, 8).unwrap());
        let lin = a.linear_part();
        assert_eq!(lin.a12, cr(0.0));
        assert_eq!(lin.a21, cr(0.0));
    }

    #[test]
    fn constant_linear_ratios_are_moduli() {
        let map = PolyMap2::linear(&Mat2::diag(cr(0.5), cr(0.3)), 2);
        let mut s = MapSequence::new(SequenceSpec::constant(&map, bounds(0.3, 0.5))).unwrap();
        let r = verify_uniform_attraction(&mut s, 3, 2000);
        assert!(r.pass);
        assert!(r.observed_min >= 0.3 - 1e-12 && r.observed_max <= 0.5 + 1e-12);
    }

    #[test]
    fn fornaess_fails_with_vanishing_lower_ratio() {
        let mut s = MapSequence::new(SequenceSpec::fornaess(0.5)).unwrap();
        let r = verify_uniform_attraction(&mut s, 5, 2000);
        assert!(!r.pass);
        assert!(r.rows[5].min_ratio < 1e-6);
        assert!(r.rows[5].min_ratio < r.rows[1].min_ratio);
    }

    #[test]
    fn contact_order_cases() {
        let lin = PolyMap2::linear(&Mat2::diag(cr(0.5), cr(0.3)), 4);
        let mut s = MapSequence::new(SequenceSpec::constant(&lin, bounds(0.3, 0.5))).unwrap();
        assert_eq!(order_of_contact(&mut s, 3), ContactOrder { k: 4, at_least: true });
        let mut f = MapSequence::new(SequenceSpec::fornaess(0.5)).unwrap();
        assert_eq!(order_of_contact(&mut f, 3).k, 2);
        let mut spec = SequenceSpec::new(Family::DiagonalRandom, 3, bounds(0.35, 0.5));
        spec.cutoff = 3;
        spec.contact_order = 3;
        let mut s3 = MapSequence::new(spec).unwrap();
        assert_eq!(order_of_contact(&mut s3, 5), ContactOrder { k: 3, at_least: false });
    }

    #[test]
    fn alternating_blocks_swap_dominance() {
        let mut spec = SequenceSpec::new(Family::DiagonalRandom, 5, bounds(0.35, 0.5));
        spec.alternating = Some(Alternating { first_block: 4, growth: 2.0, jitter: 0.0, separation: 0.0 });
        let mut s = MapSequence::new(spec).unwrap();
        for n in 0..4 {
            let l = s.get(n).linear_part();
            assert!(l.a22.norm() >= l.a11.norm());
        }
        for n in 4..12 {
            let l = s.get(n).linear_part();
            assert!(l.a11.norm() >= l.a22.norm());
        }
    }

    #[test]
    fn unknown_family_is_config_error() {
        assert!(matches!("spiral".parse::<Family>(), Err(Error::Config(_))));
    }
}
