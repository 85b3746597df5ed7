use basinforge::conj_diagonal::build_conjugation_diagonal;
use basinforge::direct::{direct_trains, direct_weights};
use basinforge::jet::{compose, invert_formal, PolyMap2};
use basinforge::linalg::{Vec2, C64};
use basinforge::pipeline::{preset, run, Pipeline, RunConfig, RunStatus};
use basinforge::report::Status;
use basinforge::sequence::{generate, verify_uniform_attraction, AttractionBounds, Family, MapSequence, SequenceSpec};
use basinforge::train_diagonal::{brute_force_next, build_from_logs, verify_diagonal_train_inequalities, DiagonalLogs};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn unit_disc(rng: &mut ChaCha20Rng) -> C64 {
    C64::from_polar(rng.gen::<f64>().sqrt(), std::f64::consts::TAU * rng.gen::<f64>())
}

fn random_jet(rng: &mut ChaCha20Rng, k: usize, min_det: f64) -> PolyMap2 {
    let mut p = PolyMap2::zero(k);
    for comp in 0..2 {
        for m in 1..=k {
            for i in 0..=m {
                p.set(comp, i, m - i, unit_disc(rng));
            }
        }
    }
    while p.linear_part().det().norm() < min_det {
        for comp in 0..2 {
            p.set(comp, 1, 0, unit_disc(rng));
            p.set(comp, 0, 1, unit_disc(rng));
        }
    }
    p
}

/// Alternating log blocks: the dominant entry sits near ln D, the other near ln C.
fn block_logs(seed: u64, len: usize, c_: f64, d: f64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let (lc, ld) = (c_.ln(), d.ln());
    let (mut la, mut lb) = (Vec::new(), Vec::new());
    let mut top_a = true;
    while la.len() < len {
        let block = rng.gen_range(1..40);
        for _ in 0..block {
            let hi = ld - 0.1 * (ld - lc) * rng.gen::<f64>();
            let lo = lc + 0.1 * (ld - lc) * rng.gen::<f64>();
            let (a, b) = if top_a { (hi, lo) } else { (lo, hi) };
            la.push(a);
            lb.push(b);
        }
        top_a = !top_a;
    }
    la.truncate(len);
    lb.truncate(len);
    (la, lb)
}

fn diagonal_config(seed: u64) -> RunConfig {
    let mut cfg = preset(Pipeline::Diagonal);
    cfg.seed = Some(seed);
    cfg.samples.phi_points = 10;
    cfg.samples.round_trip = 10;
    cfg.samples.membership = 5;
    cfg
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn composition_is_associative(seed in any::<u64>(), k in 1usize..=6) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let p = random_jet(&mut rng, k, 0.0);
        let q = random_jet(&mut rng, k, 0.0);
        let r = random_jet(&mut rng, k, 0.0);
        let left = compose(&compose(&p, &q, k).unwrap(), &r, k).unwrap();
        let right = compose(&p, &compose(&q, &r, k).unwrap(), k).unwrap();
        let scale = left.max_abs().max(right.max_abs()).max(1.0);
        prop_assert!(left.max_diff(&right) <= 1e-11 * scale);
    }

    #[test]
    fn inverse_round_trip_to_rounding(seed in any::<u64>(), k in 1usize..=6) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let p = random_jet(&mut rng, k, 0.1);
        let q = invert_formal(&p, k).unwrap();
        let err = compose(&p, &q, k).unwrap().max_diff_identity();
        prop_assert!(err <= 1e-10 * q.max_abs().max(1.0), "error {err:e}, |q| {:e}", q.max_abs());
    }

    #[test]
    fn well_conditioned_inverse_round_trip(seed in any::<u64>(), k in 1usize..=6) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut p = random_jet(&mut rng, k, 0.0);
        for comp in 0..2 {
            for m in 2..=k {
                for i in 0..=m {
                    p.set(comp, i, m - i, p.get(comp, i, m - i) * 0.25);
                }
            }
        }
        p.set(0, 1, 0, C64::new(1.0, 0.0) + p.get(0, 1, 0) * 0.25);
        p.set(0, 0, 1, p.get(0, 0, 1) * 0.25);
        p.set(1, 1, 0, p.get(1, 1, 0) * 0.25);
        p.set(1, 0, 1, C64::new(1.0, 0.0) + p.get(1, 0, 1) * 0.25);
        let q = invert_formal(&p, k).unwrap();
        prop_assert!(compose(&p, &q, k).unwrap().max_diff_identity() <= 1e-10);
        prop_assert!(compose(&q, &p, k).unwrap().max_diff_identity() <= 1e-10);
    }

    #[test]
    fn evaluation_consistent_up_to_truncation(seed in any::<u64>(), k in 1usize..=6, r in 0.0f64..=0.1) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let p = random_jet(&mut rng, k, 0.0);
        let q = random_jet(&mut rng, k, 0.0);
        let u = unit_disc(&mut rng);
        let w = unit_disc(&mut rng);
        let v = Vec2::new(u, w);
        let v = if v.norm() > 0.0 { v.scale(C64::new(r / v.norm(), 0.0)) } else { v };
        let direct = compose(&p, &q, k).unwrap().evaluate(&v);
        let nested = p.evaluate(&q.evaluate(&v));
        let sup = p.max_abs().max(q.max_abs());
        let bound = k as f64 * sup * v.norm().powi(k as i32 + 1) * 2f64.powi(k as i32);
        prop_assert!(direct.sub(&nested).norm() <= bound + 1e-15, "{:e} > {bound:e}", direct.sub(&nested).norm());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generation_is_deterministic(seed in any::<u64>(), n in 0usize..200, full in any::<bool>()) {
        let family = if full { Family::FullRandom } else { Family::DiagonalRandom };
        let spec = SequenceSpec::new(family, seed, Some(AttractionBounds { c: 0.3, d: 0.5 }));
        let a = generate(&spec, n).unwrap();
        let b = generate(&spec, n).unwrap();
        prop_assert_eq!(a.max_diff(&b), 0.0);
        let mut seq = MapSequence::new(spec).unwrap();
        prop_assert_eq!(seq.get(n).max_diff(&a), 0.0);
    }

    #[test]
    fn declared_bounds_hold(seed in any::<u64>(), full in any::<bool>(), c_ in 0.2f64..0.45) {
        let family = if full { Family::FullRandom } else { Family::DiagonalRandom };
        let mut spec = SequenceSpec::new(family, seed, Some(AttractionBounds { c: c_, d: 0.5 }));
        spec.cutoff = 3;
        let mut seq = MapSequence::new(spec).unwrap();
        let rep = verify_uniform_attraction(&mut seq, 30, 200);
        prop_assert!(rep.pass, "{}: [{}, {}]", rep.note, rep.observed_min, rep.observed_max);
    }

    #[test]
    fn trains_are_minimal_and_satisfy_inequalities(seed in any::<u64>()) {
        let (c_, d) = (0.35, 0.5);
        let (la, lb) = block_logs(seed, 600, c_, d);
        let logs = DiagonalLogs::from_logs(&la, &lb);
        let part = build_from_logs(&logs, 2, d);
        for pair in part.trains.windows(2) {
            let next = brute_force_next(&logs, 2, d, pair[0].j, pair[0].q);
            prop_assert_eq!(next, Some((pair[1].p, pair[1].q)));
        }
        if let Some(last) = part.trains.last() {
            if last.q < logs.len() {
                prop_assert_eq!(brute_force_next(&logs, 2, d, last.j, last.q), None);
            }
        }
        let rep = verify_diagonal_train_inequalities(&part, &logs, c_);
        prop_assert!(rep.pass, "{:?}", rep.suite.failures());
    }

    #[test]
    fn directing_weights_monotone_and_at_least_one(seed in any::<u64>()) {
        let (la, lb) = block_logs(seed, 400, 0.35, 0.5);
        let logs = DiagonalLogs::from_logs(&la, &lb);
        let part = build_from_logs(&logs, 2, 0.5);
        let w = direct_weights(&logs, &part);
        for n in 0..w.ln_theta.len() {
            prop_assert!(w.ln_theta[n] >= 0.0 && w.ln_tau[n] >= 0.0);
            if n + 1 < w.ln_theta.len() {
                prop_assert!(w.ln_theta[n + 1] >= w.ln_theta[n]);
                prop_assert!(w.ln_tau[n + 1] >= w.ln_tau[n]);
            }
        }
    }

    #[test]
    fn conjugations_tangent_to_identity_and_bounded(seed in 0u64..1000) {
        let mut spec = preset(Pipeline::Diagonal).sequence;
        spec.seed = seed;
        let mut seq = MapSequence::new(spec).unwrap();
        let logs = DiagonalLogs::from_sequence(&mut seq, 400).unwrap();
        let part = build_from_logs(&logs, 2, 0.5);
        let germs = seq.germs(400);
        let (w, directed) = direct_trains(&germs, &logs, &part).unwrap();
        let chain = build_conjugation_diagonal(&directed, &w.parity, 2, 0.5).unwrap();
        for h in chain.h.iter().chain(&chain.full_h) {
            prop_assert!(PolyMap2::linear(&h.linear_part(), 1).max_diff_identity() < 1e-12);
            prop_assert!(h.is_finite());
        }
        for h in &chain.h {
            prop_assert!(h.degree_band(2, 2).max_abs() <= chain.sup_h);
        }
        prop_assert!(chain.sup_h.is_finite());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn diagonal_pipeline_passes_with_identity_derivative(seed in 0u64..10_000) {
        let s = run(&diagonal_config(seed), false).unwrap().summary;
        prop_assume!(s.complete_trains >= 1);
        prop_assert!(s.checks.iter().all(|c| c.passed()), "{:?}", s.checks.iter().filter(|c| !c.passed()).collect::<Vec<_>>());
        prop_assert!(s.check("phi.dphi_zero").unwrap().passed());
        prop_assert!(s.stats["phi.dphi_zero_analytic"] < 1e-12);
    }

    #[test]
    fn exit_status_follows_checks(seed in 0u64..10_000, fornaess in any::<bool>()) {
        let mut cfg = diagonal_config(seed);
        if fornaess {
            cfg.sequence = SequenceSpec::fornaess(0.5);
            cfg.horizon = 40;
        }
        let s = run(&cfg, false).unwrap().summary;
        let failed = s.checks.iter().any(|c| c.status == Status::Fail);
        prop_assert_eq!(s.exit_code, i32::from(failed));
        let expected = if failed {
            RunStatus::Fail
        } else if s.warnings.is_empty() {
            RunStatus::Pass
        } else {
            RunStatus::Warning
        };
        prop_assert_eq!(s.status, expected);
    }

    #[test]
    fn same_seed_same_summary(seed in 0u64..10_000) {
        let cfg = diagonal_config(seed);
        let a = run(&cfg, false).unwrap().summary.to_json();
        let b = run(&cfg, false).unwrap().summary.to_json();
        prop_assert_eq!(a, b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(3))]

    #[test]
    fn general_suites_pass(seed in 10u64..10_000) {
        let mut cfg = preset(Pipeline::General);
        cfg.seed = Some(seed);
        let s = run(&cfg, true).unwrap().summary;
        prop_assume!(s.complete_trains >= 3);
        let bad: Vec<_> = s.checks.iter().filter(|c| !c.passed()).collect();
        prop_assert!(bad.is_empty(), "{:?}", bad);
        for name in ["quad.beta20_interior", "quad.commutation", "h.derivative", "h.norm_lower", "h.separation", "phi.dphi_zero"] {
            prop_assert_eq!(s.check(name).map(|c| c.status), Some(Status::Pass), "{}", name);
        }
    }
}
