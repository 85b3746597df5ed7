//! End-to-end runs: configuration, orchestration and the machine-readable summary.

use crate::autonomous::{autonomous_basin_map, iterate_degrees};
use crate::basin::{
    basin_membership, basin_slice, surjectivity_witness, verify_dphi_identity, verify_g_basin_full, verify_injectivity_coverage, write_ppm, CoverageOptions,
    SlicePlane, Verdict,
};
use crate::conj_diagonal::{build_conjugation_diagonal, verify_commutation};
use crate::direct::{direct_trains, verify_directing};
use crate::error::{Error, Result};
use crate::jet::PolyMap2;
use crate::ledger::ConstantsLedger;
use crate::limit::{diagonal_system, general_system, radii_schedule, LimitSystem, PhiOptions, PhiTrace};
use crate::linalg::{cr, Vec2};
use crate::quad_general::{empirical_j0, observed_z, select_global_chain, verify_quad_chain, verify_wagon_max_bounds};
use crate::report::{Check, CheckSuite, Status};
use crate::sequence::{halton_ball_point, order_of_contact, verify_uniform_attraction, AttractionBounds, Family, MapSequence, SequenceSpec};
use crate::train_diagonal::{build_from_logs, verify_diagonal_train_inequalities, DiagonalLogs};
use crate::train_general::{build_general_from_linear, triangularize_frames, verify_general_train_inequalities, LinearData};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Exponent in the hypothesis `D^{11/5} < C` of the general pipeline.
pub const GENERAL_EXPONENT: f64 = 11.0 / 5.0;
/// Slack added to the contraction rate when judging observed Cauchy ratios.
pub const RATIO_SLACK: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pipeline {
    Diagonal,
    General,
    Autonomous,
}

impl std::str::FromStr for Pipeline {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diagonal" => Ok(Pipeline::Diagonal),
            "general" => Ok(Pipeline::General),
            "autonomous" => Ok(Pipeline::Autonomous),
            o => Err(Error::Config(format!("unknown pipeline '{o}'"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LedgerOverrides {
    pub k: Option<f64>,
    pub x: Option<f64>,
    pub eps: Option<f64>,
    pub delta: Option<f64>,
    pub lambda: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleCounts {
    pub attraction: usize,
    /// Ball on which the autonomous germ is checked against `(C, D)`.
    pub attraction_radius: f64,
    pub phi_points: usize,
    pub phi_radius: f64,
    pub basin_points: usize,
    pub basin_radius: f64,
    pub coverage_per_level: usize,
    pub coverage_stride: usize,
    pub sphere: usize,
    pub round_trip: usize,
    pub witnesses: usize,
    pub witness_radius: f64,
    pub membership: usize,
    pub membership_radius: f64,
    pub membership_threshold: f64,
    pub conjugacy: usize,
    pub conjugacy_radius: f64,
}

impl Default for SampleCounts {
    fn default() -> Self {
        SampleCounts {
            attraction: 200,
            attraction_radius: 1.0,
            phi_points: 50,
            phi_radius: 0.8,
            basin_points: 100,
            basin_radius: 10.0,
            coverage_per_level: 1000,
            coverage_stride: 1,
            sphere: 64,
            round_trip: 50,
            witnesses: 10,
            witness_radius: 5.0,
            membership: 20,
            membership_radius: 2.0,
            membership_threshold: 0.5,
            conjugacy: 500,
            conjugacy_radius: 0.05,
        }
    }
}

fn default_trains() -> usize {
    3
}
fn default_phi_tol() -> f64 {
    1e-14
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub pipeline: Pipeline,
    /// Overrides the sequence seed when present.
    #[serde(default)]
    pub seed: Option<u64>,
    pub horizon: usize,
    #[serde(default = "default_trains")]
    pub trains_to_cover: usize,
    /// Bounds used by the pipeline; taken from the sequence when absent.
    #[serde(default, rename = "C")]
    pub c: Option<f64>,
    #[serde(default, rename = "D")]
    pub d: Option<f64>,
    pub sequence: SequenceSpec,
    #[serde(default)]
    pub ledger: LedgerOverrides,
    #[serde(default)]
    pub samples: SampleCounts,
    #[serde(default = "default_phi_tol")]
    pub phi_tol: f64,
    #[serde(default)]
    pub out: Option<String>,
    #[serde(default)]
    pub slice: Option<String>,
}

impl RunConfig {
    pub fn new(pipeline: Pipeline, sequence: SequenceSpec, horizon: usize) -> Self {
        RunConfig {
            pipeline,
            seed: None,
            horizon,
            trains_to_cover: default_trains(),
            c: None,
            d: None,
            sequence,
            ledger: LedgerOverrides::default(),
            samples: SampleCounts::default(),
            phi_tol: default_phi_tol(),
            out: None,
            slice: None,
        }
    }

    /// Parses and validates a TOML configuration.
    pub fn from_toml(s: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.normalize();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Folds the seed override and the pipeline bounds into the sequence spec.
    pub fn normalize(&mut self) {
        if let Some(s) = self.seed {
            self.sequence.seed = s;
        }
        let random = matches!(self.sequence.family, Family::DiagonalRandom | Family::TriangularRandom | Family::FullRandom);
        if self.sequence.bounds.is_none() && (random || self.sequence.family == Family::Constant) {
            if let (Some(c_), Some(d)) = (self.c, self.d) {
                self.sequence.bounds = Some(AttractionBounds { c: c_, d });
            }
        }
    }

    /// `(C, D)` of the run.
    pub fn bounds(&self) -> Result<(f64, f64)> {
        let b = self.sequence.bounds;
        let c_ = self.c.or(b.map(|b| b.c));
        let d = self.d.or(b.map(|b| b.d));
        match (c_, d) {
            (Some(c_), Some(d)) => {
                AttractionBounds::new(c_, d)?;
                Ok((c_, d))
            }
            _ => Err(Error::Config("the pipeline needs C and D (top level or sequence bounds)".into())),
        }
    }

    pub fn k(&self) -> f64 {
        self.ledger.k.unwrap_or(match self.pipeline {
            Pipeline::General => 2.1,
            _ => 2.0,
        })
    }

    pub fn x(&self) -> f64 {
        self.ledger.x.unwrap_or(1.5)
    }

    fn integer_k(&self) -> Result<usize> {
        let k = self.k();
        if k.fract() != 0.0 || k < 2.0 {
            return Err(Error::Config(format!("{:?} pipeline needs an integer k >= 2, got {k}", self.pipeline)));
        }
        Ok(k as usize)
    }

    /// Pipeline hypotheses checked at load time.
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be positive".into()));
        }
        let (c_, d) = self.bounds()?;
        match self.pipeline {
            Pipeline::Diagonal | Pipeline::Autonomous => {
                let k = self.integer_k()?;
                let lhs = d.powi(k as i32 + 1);
                if lhs >= c_ {
                    return Err(Error::Config(format!("D^(k+1) < C fails: D^{} = {lhs} >= C = {c_}", k + 1)));
                }
                if self.pipeline == Pipeline::Autonomous && self.sequence.family != Family::Constant {
                    return Err(Error::Config("the autonomous pipeline needs the constant family".into()));
                }
            }
            Pipeline::General => {
                let lhs = d.powf(GENERAL_EXPONENT);
                if lhs >= c_ {
                    return Err(Error::Config(format!("D^(11/5) < C fails: D^(11/5) = {lhs} >= C = {c_}")));
                }
                let k = self.k();
                if k >= GENERAL_EXPONENT {
                    return Err(Error::Config(format!("k < 11/5 fails: k = {k}")));
                }
                ConstantsLedger::new(c_, d, k, self.x(), self.ledger.eps, self.ledger.delta, self.ledger.lambda)?;
            }
        }
        if let Some(s) = &self.slice {
            SlicePlane::parse(s)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    #[default]
    Pass,
    Warning,
    Fail,
}

impl RunStatus {
    pub fn exit_code(self) -> i32 {
        match self {
            RunStatus::Fail => 1,
            _ => 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainRow {
    pub j: usize,
    pub p: usize,
    pub q: usize,
    pub p_next: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSummary {
    pub pipeline: Option<Pipeline>,
    pub seed: u64,
    pub status: RunStatus,
    pub exit_code: i32,
    pub warnings: Vec<String>,
    pub config: Option<RunConfig>,
    /// Hypotheses on the input sequence; a failure is a warning.
    pub hypotheses: Vec<Check>,
    pub trains: Vec<TrainRow>,
    pub truncated: bool,
    pub complete_trains: usize,
    pub covered_trains: usize,
    pub ledger: Option<ConstantsLedger>,
    pub checks: Vec<Check>,
    pub stats: BTreeMap<String, f64>,
    pub membership: BTreeMap<String, usize>,
}

impl RunSummary {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    fn finish(&mut self) {
        let failed = self.checks.iter().any(|c| c.status == Status::Fail);
        if self.checks.iter().any(|c| c.status == Status::Undecided) {
            let names: Vec<&str> = self.checks.iter().filter(|c| c.status == Status::Undecided).map(|c| c.name.as_str()).collect();
            self.warnings.push(format!("undecided checks: {}", names.join(", ")));
        }
        for h in self.hypotheses.iter().filter(|h| !h.passed()) {
            self.warnings.push(format!("hypothesis not met: {} ({})", h.name, h.note));
        }
        self.status = if failed {
            RunStatus::Fail
        } else if self.warnings.is_empty() {
            RunStatus::Pass
        } else {
            RunStatus::Warning
        };
        self.exit_code = self.status.exit_code();
    }
}

/// Everything a run produces; files are written by the caller.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub summary: RunSummary,
    /// `(file name, contents)` of CSV traces.
    pub traces: Vec<(String, String)>,
    pub slice: Option<Vec<u8>>,
}

impl RunOutcome {
    /// Writes `summary.json`, the traces and `slice.ppm` into `dir`.
    pub fn write(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("summary.json"), self.summary.to_json())?;
        for (name, body) in &self.traces {
            std::fs::write(dir.join(name), body)?;
        }
        if let Some(ppm) = &self.slice {
            std::fs::write(dir.join("slice.ppm"), ppm)?;
        }
        Ok(())
    }
}

/// Runs the configured pipeline. With `verify_only` the sampling stages
/// (limit map, membership, witnesses, slices) are skipped.
pub fn run(config: &RunConfig, verify_only: bool) -> Result<RunOutcome> {
    let mut cfg = config.clone();
    cfg.normalize();
    cfg.validate()?;
    let mut out = RunOutcome { summary: RunSummary::default(), traces: Vec::new(), slice: None };
    out.summary.pipeline = Some(cfg.pipeline);
    out.summary.seed = cfg.sequence.seed;
    out.summary.config = Some(cfg.clone());
    match cfg.pipeline {
        Pipeline::Diagonal => run_diagonal(&cfg, verify_only, &mut out)?,
        Pipeline::General => run_general(&cfg, verify_only, &mut out)?,
        Pipeline::Autonomous => run_autonomous(&cfg, verify_only, &mut out)?,
    }
    if !verify_only {
        if let Some(spec) = &cfg.slice {
            let plane = SlicePlane::parse(spec)?;
            let mut seq = MapSequence::new(cfg.sequence.clone())?;
            let germs = seq.germs(cfg.horizon);
            let d = seq.bounds().map(|b| b.d);
            let verdicts = basin_slice(&germs, d, &plane, cfg.samples.membership_threshold, cfg.horizon);
            out.slice = Some(write_ppm(plane.size, &verdicts));
        }
    }
    out.summary.finish();
    Ok(out)
}

fn attraction_hypothesis(seq: &mut MapSequence, n_max: usize, samples: usize, c_: f64, d: f64, stats: &mut BTreeMap<String, f64>) -> Check {
    let rep = verify_uniform_attraction(seq, n_max, samples);
    let mut ch = Check::new("hypothesis.uniform_attraction", format!("n <= {n_max}, {samples} points"));
    for r in &rep.rows {
        ch.record(r.min_ratio - c_);
        ch.record(d - r.max_ratio);
    }
    if !rep.pass && ch.passed() {
        ch.fail(rep.note.clone());
    } else {
        ch.note = rep.note.clone();
    }
    stats.insert("attraction.observed_min".into(), rep.observed_min);
    stats.insert("attraction.observed_max".into(), rep.observed_max);
    if let Some(last) = rep.rows.last() {
        stats.insert("attraction.last_min_ratio".into(), last.min_ratio);
    }
    ch
}

/// `C|z| <= |F z| <= D|z|` for a single germ on `B(0, radius)`.
fn germ_attraction(f: &PolyMap2, radius: f64, samples: usize, c_: f64, d: f64, stats: &mut BTreeMap<String, f64>) -> Check {
    let mut ch = Check::new("hypothesis.uniform_attraction", format!("B(0,{radius}), {samples} points"));
    let mut pts: Vec<Vec2> = sample_points(samples.max(1), radius, 0);
    for t in [1.0, 0.5, 0.1, 1e-3] {
        pts.push(Vec2::real(t * radius, 0.0));
        pts.push(Vec2::real(0.0, t * radius));
    }
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for p in pts.iter().filter(|p| p.norm() > 0.0) {
        let r = f.evaluate(p).norm() / p.norm();
        lo = lo.min(r);
        hi = hi.max(r);
        ch.record(r - c_);
        ch.record(d - r);
    }
    stats.insert("attraction.observed_min".into(), lo);
    stats.insert("attraction.observed_max".into(), hi);
    ch.note = format!("ratios in [{lo:.6}, {hi:.6}]");
    ch
}

fn contact_hypothesis(seq: &mut MapSequence, n_max: usize, k: usize) -> Check {
    let co = order_of_contact(seq, n_max);
    let mut ch = Check::new("hypothesis.contact_order", format!("n <= {n_max}"));
    ch.record(co.k as f64 - k as f64);
    ch.note = format!("order of contact {}{}", if co.at_least { ">= " } else { "" }, co.k);
    ch
}

/// Longest prefix of germs with diagonal linear part.
fn diagonal_prefix(seq: &mut MapSequence, horizon: usize) -> usize {
    (0..horizon)
        .find(|&n| {
            let l = seq.get(n).linear_part();
            let scale = l.frobenius().max(1e-300);
            l.a12.norm() > 1e-14 * scale || l.a21.norm() > 1e-14 * scale
        })
        .unwrap_or(horizon)
}

fn coverage_warning(summary: &mut RunSummary, want: usize) {
    if summary.complete_trains < want {
        summary.warnings.push(format!("partition truncated: {} complete trains within the horizon, {want} requested", summary.complete_trains));
    }
}

fn sample_points(count: usize, radius: f64, offset: usize) -> Vec<Vec2> {
    (1..=count).map(|i| halton_ball_point(i + offset).scale(cr(radius))).collect()
}

/// Phi on sample points; Cauchy ratio against `rate + RATIO_SLACK`.
fn phi_stage(
    sys: &LimitSystem,
    v_of: &(dyn Fn(usize) -> Option<usize> + Sync),
    cfg: &RunConfig,
    rate: f64,
    out: &mut RunOutcome,
) -> Vec<(Vec2, Option<PhiTrace>)> {
    let pts = sample_points(cfg.samples.phi_points, cfg.samples.phi_radius, 0);
    let opts = PhiOptions { tol: cfg.phi_tol, ..PhiOptions::default() };
    let traces: Vec<(Vec2, Option<PhiTrace>)> = pts.par_iter().map(|z| (*z, sys.phi_at(z, v_of, &opts).ok())).collect();
    let mut ratio = Check::new("phi.cauchy_ratio", format!("{} points, past v(u), bound {:.6}", pts.len(), rate + RATIO_SLACK));
    let mut cert = Check::new("phi.certified", format!("{} points", pts.len()));
    let mut worst: f64 = 0.0;
    let mut fallbacks = 0;
    let mut vanishing = 0;
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(["point", "u", "v", "n", "certified", "ratio", "ratio_fallback", "abs_phi_minus_z"]).expect("csv header");
    for (i, (z, t)) in traces.iter().enumerate() {
        match t {
            Some(t) => {
                match t.ratio {
                    None if t.deltas.iter().all(|&x| x == 0.0) => {
                        ratio.record(rate + RATIO_SLACK);
                        vanishing += 1;
                    }
                    Some(r) if !t.ratio_fallback || t.deltas.iter().any(|&x| x > 0.0) => {
                        ratio.record(rate + RATIO_SLACK - r);
                        worst = worst.max(r);
                    }
                    _ => ratio.status = Status::Undecided,
                }
                if t.ratio_fallback {
                    fallbacks += 1;
                }
                if !t.certified {
                    cert.status = Status::Undecided;
                }
                cert.record(0.0);
                wtr.write_record([
                    i.to_string(),
                    t.u.to_string(),
                    t.v.to_string(),
                    t.n.to_string(),
                    t.certified.to_string(),
                    t.ratio.map(|r| format!("{r:.12e}")).unwrap_or_default(),
                    t.ratio_fallback.to_string(),
                    format!("{:.12e}", t.value.sub(z).norm()),
                ])
                .expect("csv row");
            }
            None => {
                cert.status = Status::Undecided;
                ratio.status = Status::Undecided;
            }
        }
    }
    if ratio.status == Status::Undecided {
        ratio.note = "some points gave no ratio".into();
    }
    if fallbacks > 0 {
        ratio.note = format!("{fallbacks} ratios from the last differences (fewer than three past v(u))");
    }
    if vanishing > 0 {
        ratio.note = format!("{vanishing} points with Phi_n constant (all differences zero)");
    }
    out.summary.stats.insert("phi.max_ratio".into(), worst);
    out.summary.stats.insert("phi.rate".into(), rate);
    out.summary.checks.push(ratio);
    out.summary.checks.push(cert);
    out.traces.push(("phi_points.csv".into(), String::from_utf8(wtr.into_inner().expect("csv flush")).expect("utf8")));
    if let Some((_, Some(t))) = traces.first() {
        out.traces.push(("phi_trace.csv".into(), t.to_csv()));
    }
    traces
}

/// `Phi(z0)` inverted again; the preimage must return `z0`.
fn round_trip_stage(
    sys: &LimitSystem,
    v_of: &(dyn Fn(usize) -> Option<usize> + Sync),
    traces: &[(Vec2, Option<PhiTrace>)],
    count: usize,
    out: &mut RunOutcome,
) {
    let mut ch = Check::new("witness.round_trip", format!("{count} points, |z - z0| <= 1e-7"));
    let pairs: Vec<(Vec2, Vec2)> = traces.iter().filter_map(|(z, t)| t.as_ref().map(|t| (*z, t.value))).take(count).collect();
    let res: Vec<Result<f64>> = pairs.par_iter().map(|(z0, w)| surjectivity_witness(sys, v_of, w, 1e-10).map(|wit| wit.preimage.sub(z0).norm())).collect();
    let mut worst: f64 = 0.0;
    for r in res {
        match r {
            Ok(e) => {
                ch.record_tol(1e-7 - e, 0.0);
                worst = worst.max(e);
            }
            Err(e) => undecided_or_fail(&mut ch, e),
        }
    }
    if pairs.len() < count {
        ch.status = if ch.status == Status::Fail { Status::Fail } else { Status::Undecided };
        ch.note = format!("only {} of {count} points have a value", pairs.len());
    }
    out.summary.stats.insert("witness.round_trip_max_error".into(), worst);
    out.summary.checks.push(ch);
}

fn undecided_or_fail(ch: &mut Check, e: Error) {
    match e {
        Error::Undecided(msg) => {
            if ch.status != Status::Fail {
                ch.status = Status::Undecided;
            }
            ch.note = msg;
        }
        other => ch.fail(other.to_string()),
    }
}

fn membership_stage(seq: &mut MapSequence, cfg: &RunConfig, out: &mut RunOutcome) {
    let germs = seq.germs(cfg.horizon);
    let d = seq.bounds().map(|b| b.d);
    let pts = sample_points(cfg.samples.membership, cfg.samples.membership_radius, 100);
    let verdicts: Vec<Verdict> = pts.par_iter().map(|z| basin_membership(&germs, d, z, cfg.samples.membership_threshold, cfg.horizon).verdict).collect();
    for v in [Verdict::Converged, Verdict::Escaped, Verdict::Undecided] {
        let key = serde_json::to_value(v).expect("verdict").as_str().expect("string").to_string();
        out.summary.membership.insert(key, verdicts.iter().filter(|&&x| x == v).count());
    }
}

fn run_diagonal(cfg: &RunConfig, verify_only: bool, out: &mut RunOutcome) -> Result<()> {
    let (c_, d) = cfg.bounds()?;
    let k = cfg.integer_k()?;
    let s = &mut out.summary;
    let mut seq = MapSequence::new(cfg.sequence.clone())?;
    let h = cfg.horizon;
    s.hypotheses.push(attraction_hypothesis(&mut seq, h - 1, cfg.samples.attraction, c_, d, &mut s.stats));
    s.hypotheses.push(contact_hypothesis(&mut seq, h - 1, k));
    let eff = diagonal_prefix(&mut seq, h);
    if eff < h {
        s.warnings.push(format!("germ {eff} has a non-diagonal linear part; trains searched on the first {eff} steps"));
    }
    let logs = DiagonalLogs::from_sequence(&mut seq, eff)?;
    let part = build_from_logs(&logs, k, d);
    s.trains = part.trains.iter().map(|t| TrainRow { j: t.j, p: t.p, q: t.q, p_next: t.p_next }).collect();
    s.truncated = part.truncated;
    s.complete_trains = part.complete_count();
    s.covered_trains = s.complete_trains;
    coverage_warning(s, cfg.trains_to_cover);
    let rep = verify_diagonal_train_inequalities(&part, &logs, c_);
    s.checks.extend(rep.suite.checks);
    if s.complete_trains == 0 {
        s.checks.push(Check::undecided("pipeline.coverage", "trains", "no complete train; later stages skipped"));
        if !verify_only {
            membership_stage(&mut seq, cfg, out);
        }
        return Ok(());
    }
    let germs = seq.germs(eff);
    let (w, directed) = direct_trains(&germs, &logs, &part)?;
    s.checks.extend(verify_directing(&w, &logs, &part, &germs, &directed, c_).checks);
    let chain = build_conjugation_diagonal(&directed, &w.parity, k, d)?;
    s.checks.extend(verify_commutation(&chain, &directed, 1e-9).checks);
    let la: Vec<f64> = (0..eff).map(|n| logs.ln_a.range(n, n + 1)).collect();
    let lb: Vec<f64> = (0..eff).map(|n| logs.ln_b.range(n, n + 1)).collect();
    out.traces.push(("directing.csv".into(), w.to_csv(&la, &lb)));
    let sys = diagonal_system(&directed, &chain, &w, c_, d)?;
    dphi_checks(&sys, out);
    out.summary.stats.insert("defect.low_residual".into(), sys.low_residual);
    if verify_only {
        return Ok(());
    }
    let v_of = |u: usize| Some(u);
    let traces = phi_stage(&sys, &v_of, cfg, d.powi(k as i32 + 1) / c_, out);
    round_trip_stage(&sys, &v_of, &traces, cfg.samples.round_trip, out);
    membership_stage(&mut seq, cfg, out);
    Ok(())
}

fn dphi_checks(sys: &LimitSystem, out: &mut RunOutcome) {
    let n = sys.len();
    let mut levels = vec![n / 4, n / 2, n];
    levels.dedup();
    let mut merged = Check::new("phi.dphi_zero", format!("n in {levels:?}"));
    for m in levels {
        let ch = verify_dphi_identity(sys, m, 1e-12);
        merged.evaluated += ch.evaluated;
        merged.violations += ch.violations;
        merged.min_slack = merged.min_slack.min(ch.min_slack);
        if ch.status == Status::Fail {
            merged.status = Status::Fail;
            merged.note = ch.note;
        }
    }
    out.summary.stats.insert("phi.dphi_zero_analytic".into(), sys.dphi_zero().sub_identity_max());
    out.summary.checks.push(merged);
}

fn run_general(cfg: &RunConfig, verify_only: bool, out: &mut RunOutcome) -> Result<()> {
    let (c_, d) = cfg.bounds()?;
    let (k, x) = (cfg.k(), cfg.x());
    let mut ledger = ConstantsLedger::new(c_, d, k, x, cfg.ledger.eps, cfg.ledger.delta, cfg.ledger.lambda)?;
    let s = &mut out.summary;
    let mut seq = MapSequence::new(cfg.sequence.clone())?;
    let h = cfg.horizon;
    s.hypotheses.push(attraction_hypothesis(&mut seq, h - 1, cfg.samples.attraction, c_, d, &mut s.stats));
    s.hypotheses.push(contact_hypothesis(&mut seq, h - 1, 2));
    let lin = LinearData::from_sequence(&mut seq, h)?;
    let part = build_general_from_linear(&lin, k, x)?;
    s.trains = part.trains.iter().map(|t| TrainRow { j: t.j, p: t.p, q: t.q, p_next: t.p_next }).collect();
    s.truncated = part.truncated;
    s.complete_trains = part.complete_count();
    coverage_warning(s, cfg.trains_to_cover);
    let (tri, engines) = triangularize_frames(&lin, &part)?;
    s.checks.extend(verify_general_train_inequalities(&lin, &part, &tri, &engines, &ledger).checks);
    out.traces.push(("triangularized.csv".into(), tri.to_csv()));
    let cover = s.complete_trains;
    s.covered_trains = cover;
    if cover == 0 {
        s.checks.push(Check::undecided("pipeline.coverage", "trains", "no complete train; later stages skipped"));
        s.ledger = Some(ledger);
        if !verify_only {
            membership_stage(&mut seq, cfg, out);
        }
        return Ok(());
    }
    let germs = seq.germs(h);
    let chain = select_global_chain(&germs, &part, &tri, cover, None)?;
    let e = ledger.envelope_exponent();
    let z_obs = observed_z(&chain, d, e);
    let z = z_obs.max(1.0);
    ledger.z = Some(z);
    ledger.j0 = empirical_j0(&chain, ledger.x_bound);
    ledger.j1 = Some(ledger.compute_j1(z));
    s.stats.insert("z.observed".into(), z_obs);
    s.checks.extend(verify_quad_chain(&chain, &part, &ledger).checks);
    s.checks.extend(verify_wagon_max_bounds(&chain, &ledger).0.checks);
    out.traces.push(("quad_chain.csv".into(), chain.to_csv(d, e)));
    let sys = general_system(&chain, &tri, &ledger)?;
    let sched = radii_schedule(&ledger, sys.len())?;
    ledger.m = Some(sched.m);
    let s = &mut out.summary;
    s.stats.insert("defect.low_residual".into(), sys.low_residual);
    s.stats.insert("schedule.monotone_slack".into(), sched.monotone_slack);
    let starts: Vec<usize> = chain.trains.iter().map(|t| t.0).chain(std::iter::once(chain.end)).collect();
    let gb = verify_g_basin_full(&sys, &starts, &ledger, z, cfg.samples.basin_points, cfg.samples.basin_radius);
    let full = gb.full;
    s.checks.extend(gb.suite.checks);
    let opts = CoverageOptions {
        samples_per_level: cfg.samples.coverage_per_level,
        level_stride: cfg.samples.coverage_stride,
        sphere_samples: cfg.samples.sphere,
        ..CoverageOptions::default()
    };
    s.checks.extend(verify_injectivity_coverage(&sys, &sched, &ledger, &opts).checks);
    s.ledger = Some(ledger.clone());
    dphi_checks(&sys, out);
    if verify_only {
        return Ok(());
    }
    let v_of = |u: usize| sched.v_of(u);
    let traces = phi_stage(&sys, &v_of, cfg, ledger.rho(), out);
    round_trip_stage(&sys, &v_of, &traces, cfg.samples.round_trip, out);
    far_witness_stage(&sys, &v_of, cfg, full, out);
    membership_stage(&mut seq, cfg, out);
    Ok(())
}

/// Witnesses for targets of norm up to `witness_radius`; undecided without fullness.
fn far_witness_stage(sys: &LimitSystem, v_of: &(dyn Fn(usize) -> Option<usize> + Sync), cfg: &RunConfig, full: bool, out: &mut RunOutcome) {
    let n = cfg.samples.witnesses;
    let scope = format!("{n} targets, |w| <= {}, residual < 1e-6", cfg.samples.witness_radius);
    if !full {
        out.summary.checks.push(Check::undecided("witness.surjectivity", scope, "g-basin fullness not established"));
        return;
    }
    let targets = sample_points(n, cfg.samples.witness_radius, 20);
    let res: Vec<Result<f64>> = targets.par_iter().map(|w| surjectivity_witness(sys, v_of, w, 1e-6).map(|wit| wit.residual)).collect();
    let mut ch = Check::new("witness.surjectivity", scope);
    let mut worst: f64 = 0.0;
    for r in res {
        match r {
            Ok(r) => {
                ch.record_tol(1e-6 - r, 0.0);
                worst = worst.max(r);
            }
            Err(e) => undecided_or_fail(&mut ch, e),
        }
    }
    out.summary.stats.insert("witness.max_residual".into(), worst);
    out.summary.checks.push(ch);
}

fn run_autonomous(cfg: &RunConfig, verify_only: bool, out: &mut RunOutcome) -> Result<()> {
    let (c_, d) = cfg.bounds()?;
    let k = cfg.integer_k()?;
    let mut seq = MapSequence::new(cfg.sequence.clone())?;
    let f: PolyMap2 = seq.get(0);
    let s = &mut out.summary;
    s.hypotheses.push(germ_attraction(&f, cfg.samples.attraction_radius, cfg.samples.attraction, c_, d, &mut s.stats));
    let m = autonomous_basin_map(&f, k, c_, d, cfg.horizon)?;
    s.stats.insert("autonomous.min_divisor".into(), m.form.min_divisor);
    let degs = iterate_degrees(&m.form.g_poly, 20)?;
    let mut deg = Check::new("autonomous.degrees_bounded", "n <= 20");
    for &dg in &degs {
        deg.record(degs[0] as f64 - dg as f64);
    }
    deg.note = format!("deg G^n = {}", degs[0]);
    s.checks.push(deg);
    let mut dphi = verify_dphi_identity(&m.system, cfg.horizon.min(50), 1e-12);
    dphi.name = "phi.dphi_zero".into();
    s.checks.push(dphi);
    if verify_only {
        return Ok(());
    }
    let n = cfg.samples.conjugacy;
    let r = cfg.samples.conjugacy_radius;
    let chunks: Vec<Check> = (0..n.div_ceil(50))
        .into_par_iter()
        .map(|b| {
            let lo = b * 50;
            let hi = (lo + 50).min(n);
            conjugacy_range(&m, &f, lo, hi, r)
        })
        .collect();
    let mut conj = Check::new("autonomous.conjugacy", format!("{n} points in B(0,{r}), residual < 1e-8"));
    for ch in chunks {
        conj.evaluated += ch.evaluated;
        conj.violations += ch.violations;
        conj.min_slack = conj.min_slack.min(ch.min_slack);
        if ch.status == Status::Fail {
            conj.status = Status::Fail;
            conj.note = ch.note;
        }
    }
    out.summary.checks.push(conj);
    let v_of = |u: usize| Some(u);
    let rate = d.powi(k as i32 + 1) / c_;
    let mut small = cfg.clone();
    small.samples.phi_radius = small.samples.phi_radius.min(r);
    phi_stage(&m.system, &v_of, &small, rate, out);
    membership_stage(&mut seq, cfg, out);
    Ok(())
}

fn conjugacy_range(m: &crate::autonomous::AutonomousBasinMap, f: &PolyMap2, lo: usize, hi: usize, radius: f64) -> Check {
    let mut ch = Check::new("autonomous.conjugacy", "");
    for i in lo + 1..=hi {
        let z = halton_ball_point(i).scale(cr(radius));
        match (m.phi(&f.evaluate(&z)), m.phi(&z)) {
            (Ok(a), Ok(b)) => {
                let r = a.value.sub(&m.form.g.eval(&b.value)).norm();
                ch.record_tol(1e-8 - r, 0.0);
            }
            (Err(e), _) | (_, Err(e)) => ch.fail(e.to_string()),
        }
    }
    ch
}

/// Plain-text table of a summary.
pub fn render_summary(s: &CheckSuite, hypotheses: &[Check]) -> String {
    let mut out = String::new();
    out.push_str(&format!("{:<44} {:<9} {:>9} {:>10} {:>14}  {}\n", "check", "status", "evaluated", "violations", "min_slack", "note"));
    for c in hypotheses.iter().chain(s.checks.iter()) {
        let status = serde_json::to_value(c.status).expect("status").as_str().expect("string").to_string();
        out.push_str(&format!("{:<44} {:<9} {:>9} {:>10} {:>14.6e}  {}\n", c.name, status, c.evaluated, c.violations, c.finite_slack(), c.note));
    }
    out
}

impl RunSummary {
    /// Header line, train list, then the check table.
    pub fn render(&self) -> String {
        let mut out = String::new();
        if let Some(p) = self.pipeline {
            let status = serde_json::to_value(self.status).expect("status").as_str().expect("string").to_string();
            out.push_str(&format!("pipeline {:?}, seed {}, status {status}, exit {}\n", p, self.seed, self.exit_code));
            out.push_str(&format!("trains: {} complete, {} covered, truncated {}\n", self.complete_trains, self.covered_trains, self.truncated));
            for w in &self.warnings {
                out.push_str(&format!("warning: {w}\n"));
            }
        }
        out.push_str(&render_summary(&CheckSuite { checks: self.checks.clone() }, &self.hypotheses));
        out
    }
}

/// Built-in configurations used when no file is given.
pub fn preset(pipeline: Pipeline) -> RunConfig {
    use crate::sequence::Alternating;
    match pipeline {
        Pipeline::Diagonal => {
            let mut spec = SequenceSpec::new(Family::DiagonalRandom, 0, Some(AttractionBounds { c: 0.35, d: 0.5 }));
            spec.alternating = Some(Alternating { first_block: 4, growth: 2.0, jitter: 0.0, separation: 0.0 });
            let mut cfg = RunConfig::new(Pipeline::Diagonal, spec, 400);
            cfg.c = Some(0.35);
            cfg.d = Some(0.5);
            cfg
        }
        Pipeline::General => {
            let mut spec = SequenceSpec::new(Family::FullRandom, 7, Some(AttractionBounds { c: 0.3, d: 0.5 }));
            spec.nonlinear_budget = 0.02;
            spec.cutoff = 3;
            spec.alternating = Some(Alternating { first_block: 16, growth: 2.0, jitter: 0.05, separation: 0.95 });
            let mut cfg = RunConfig::new(Pipeline::General, spec, 1500);
            cfg.c = Some(0.3);
            cfg.d = Some(0.5);
            cfg.ledger = LedgerOverrides { k: Some(2.1), x: Some(1.5), eps: Some(0.1), delta: Some(0.05), lambda: None };
            cfg
        }
        Pipeline::Autonomous => {
            let mut f = PolyMap2::linear(&crate::linalg::Mat2::diag(cr(0.5), cr(0.3)), 2);
            f.set(0, 0, 2, cr(1.0));
            let spec = SequenceSpec::constant(&f, Some(AttractionBounds { c: 0.29, d: 0.5 }));
            let mut cfg = RunConfig::new(Pipeline::Autonomous, spec, 300);
            cfg.c = Some(0.29);
            cfg.d = Some(0.5);
            cfg.samples.attraction_radius = 0.1;
            cfg
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_bounds(p: Pipeline, c_: f64, d: f64) -> RunConfig {
        let mut cfg = preset(p);
        cfg.c = Some(c_);
        cfg.d = Some(d);
        cfg.sequence.bounds = Some(AttractionBounds { c: c_, d });
        cfg
    }

    #[test]
    fn diagonal_constraint_at_load() {
        // 0.5^3 = 0.125 < 0.35
        assert!(with_bounds(Pipeline::Diagonal, 0.35, 0.5).validate().is_ok());
        let err = with_bounds(Pipeline::Diagonal, 0.12, 0.5).validate().unwrap_err();
        assert!(err.to_string().contains("D^(k+1) < C"), "{err}");
    }

    #[test]
    fn general_constraint_at_load() {
        // 0.5^2.2 = 0.2176
        assert!(with_bounds(Pipeline::General, 0.3, 0.5).validate().is_ok());
        let err = with_bounds(Pipeline::General, 0.2, 0.5).validate().unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("D^(11/5) < C"), "{err}");
        let mut cfg = with_bounds(Pipeline::General, 0.3, 0.5);
        cfg.ledger.k = Some(2.2);
        assert!(cfg.validate().unwrap_err().to_string().contains("k < 11/5"));
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        for p in [Pipeline::Diagonal, Pipeline::General, Pipeline::Autonomous] {
            let cfg = preset(p);
            let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
            assert_eq!(back, cfg);
        }
        let bad = "pipeline = \"diagonal\"\nhorizon = 10\nC = 0.35\nD = 0.5\ncolour = 1\n[sequence]\nfamily = \"diagonal-random\"\n";
        assert!(matches!(RunConfig::from_toml(bad), Err(Error::Config(_))));
    }

    #[test]
    fn seed_override_reaches_the_sequence() {
        let mut cfg = preset(Pipeline::Diagonal);
        cfg.seed = Some(99);
        cfg.normalize();
        assert_eq!(cfg.sequence.seed, 99);
    }

    #[test]
    fn exit_status_contract() {
        let mut s = RunSummary::default();
        s.checks.push(Check::new("a", "all"));
        s.finish();
        assert_eq!((s.status, s.exit_code), (RunStatus::Pass, 0));

        let mut s = RunSummary::default();
        s.checks.push(Check::undecided("b", "all", "horizon"));
        s.finish();
        assert_eq!((s.status, s.exit_code), (RunStatus::Warning, 0));
        assert!(s.warnings[0].contains("b"));

        let mut s = RunSummary::default();
        let mut bad = Check::new("c", "all");
        bad.record(-1.0);
        s.checks.push(bad);
        s.checks.push(Check::undecided("b", "all", "horizon"));
        s.finish();
        assert_eq!((s.status, s.exit_code), (RunStatus::Fail, 1));
    }

    #[test]
    fn failed_hypothesis_is_a_warning() {
        let mut s = RunSummary::default();
        let mut h = Check::new("hypothesis.uniform_attraction", "n");
        h.record(-0.5);
        s.hypotheses.push(h);
        s.finish();
        assert_eq!(s.status, RunStatus::Warning);
    }

    #[test]
    fn empty_summary_renders_header_only() {
        let s = RunSummary::from_json("{\"checks\": []}").unwrap();
        let text = s.render();
        assert_eq!(text.lines().count(), 1);
        assert!(matches!(RunSummary::from_json("{\"checks\": 3}"), Err(Error::Parse(_))));
    }

    #[test]
    fn summary_json_round_trip() {
        let mut cfg = preset(Pipeline::Diagonal);
        cfg.horizon = 120;
        let out = run(&cfg, true).unwrap();
        let back = RunSummary::from_json(&out.summary.to_json()).unwrap();
        assert_eq!(back.to_json(), out.summary.to_json());
        assert_eq!(back.checks.len(), out.summary.checks.len());
    }

    #[test]
    fn autonomous_needs_constant_family() {
        let mut cfg = preset(Pipeline::Autonomous);
        cfg.sequence.family = Family::DiagonalRandom;
        assert!(cfg.validate().is_err());
    }
}
