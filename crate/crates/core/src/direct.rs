//! Rescaling of diagonal trains by `l_n(z,w) = (theta_n z, tau_n w)` so that one
//! coordinate dominates on each train.

use crate::error::{Error, Result};
use crate::jet::PolyMap2;
use crate::linalg::cr;
use crate::report::{Check, CheckSuite};
use crate::train_diagonal::{DiagonalLogs, TrainPartition};
use serde::{Deserialize, Serialize};

/// Which coordinate is meant to dominate on a train.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parity {
    /// Odd trains: `|a| >= |b|`, lower-triangular normal forms.
    Odd,
    /// Even trains: `|b| >= |a|`, upper-triangular normal forms.
    Even,
}

impl Parity {
    pub fn of_train(j: usize) -> Parity {
        if j % 2 == 1 {
            Parity::Odd
        } else {
            Parity::Even
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DirectingWeights {
    pub k: usize,
    pub d: f64,
    /// `ln theta_n` and `ln tau_n` for `n = 0..=N`.
    pub ln_theta: Vec<f64>,
    pub ln_tau: Vec<f64>,
    /// Train parity of step n for `n < N`.
    pub parity: Vec<Parity>,
    /// Train index of step n.
    pub train: Vec<usize>,
}

impl DirectingWeights {
    pub fn len(&self) -> usize {
        self.parity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parity.is_empty()
    }

    /// Log-moduli of the directed diagonal entries at step n.
    pub fn directed_logs(&self, n: usize, ln_a: f64, ln_b: f64) -> (f64, f64) {
        (self.ln_theta[n + 1] - self.ln_theta[n] + ln_a, self.ln_tau[n + 1] - self.ln_tau[n] + ln_b)
    }

    /// `l_n^{-1}` applied to the output of `l_n`: the scaling itself.
    pub fn scale_at(&self, n: usize) -> (f64, f64) {
        (self.ln_theta[n].exp(), self.ln_tau[n].exp())
    }

    /// CSV rows `n, ln theta_n, ln tau_n, ln|a~_n|, ln|b~_n|`.
    pub fn to_csv(&self, la: &[f64], lb: &[f64]) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["n", "ln_theta", "ln_tau", "ln_abs_a_directed", "ln_abs_b_directed"]).expect("csv header");
        for n in 0..self.len() {
            let (da, db) = self.directed_logs(n, la[n], lb[n]);
            w.write_record([
                n.to_string(),
                format!("{:.12e}", self.ln_theta[n]),
                format!("{:.12e}", self.ln_tau[n]),
                format!("{da:.12e}"),
                format!("{db:.12e}"),
            ])
            .expect("csv row");
        }
        String::from_utf8(w.into_inner().expect("csv flush")).expect("utf8")
    }
}

/// Starting log-weights `(ln theta, ln tau)` required at the start of train j.
pub fn start_bounds(j: usize, k: f64, d: f64) -> (f64, f64) {
    let base = k.powi(j as i32) * (1.0 / d).ln() / (k * k - 1.0);
    match Parity::of_train(j) {
        Parity::Odd => (k * base, base),
        Parity::Even => (base, k * base),
    }
}

/// Step of the weight recursion; returns `(ln theta_{n+1}, ln tau_{n+1})`.
pub fn weight_step(parity: Parity, k: f64, lt: f64, lu: f64, ln_a: f64, ln_b: f64) -> (f64, f64) {
    match parity {
        Parity::Odd => {
            let lt1 = if ln_a >= ln_b { lt } else { lt + (ln_b - ln_a) };
            let lu1 = if ln_b >= ln_a { lu } else { (lu + (ln_a - ln_b)).min(k * lt1) };
            (lt1, lu1)
        }
        Parity::Even => {
            let lu1 = if ln_b >= ln_a { lu } else { lu + (ln_a - ln_b) };
            let lt1 = if ln_a >= ln_b { lt } else { (lt + (ln_b - ln_a)).min(k * lu1) };
            (lt1, lu1)
        }
    }
}

/// Runs the weight recursion across all recorded trains.
pub fn direct_weights(logs: &DiagonalLogs, partition: &TrainPartition) -> DirectingWeights {
    let k = partition.k as f64;
    let d = partition.d;
    let n_total = logs.len();
    let step = |n: usize| (logs.ln_a.range(n, n + 1), logs.ln_b.range(n, n + 1));
    let mut parity = Vec::with_capacity(n_total);
    let mut train = Vec::with_capacity(n_total);
    for n in 0..n_total {
        let j = partition.train_of(n).unwrap_or(partition.trains.last().map(|t| t.j).unwrap_or(0));
        parity.push(Parity::of_train(j));
        train.push(j);
    }
    // Train 0 has no selected engine, so it starts from equal weights large enough
    // to absorb the growth of the non-dominant weight over that train.
    let end0 = partition.trains.first().and_then(|t| t.p_next).unwrap_or(n_total);
    let mut growth = 0.0;
    for n in 0..end0 {
        let (la, lb) = step(n);
        growth += (la - lb).max(0.0);
    }
    let (b_theta, b_tau) = start_bounds(0, k, d);
    let l0 = b_theta.max(b_tau).max(growth / (k - 1.0));
    let mut ln_theta = vec![l0];
    let mut ln_tau = vec![l0];
    for n in 0..n_total {
        let (la, lb) = step(n);
        let (lt1, lu1) = weight_step(parity[n], k, ln_theta[n], ln_tau[n], la, lb);
        ln_theta.push(lt1);
        ln_tau.push(lu1);
    }
    DirectingWeights { k: partition.k, d, ln_theta, ln_tau, parity, train }
}

/// Directed germ `l_{n+1} o f_n o l_n^{-1}`.
pub fn directed_germ(f: &PolyMap2, w: &DirectingWeights, n: usize) -> PolyMap2 {
    let mut out = PolyMap2::zero(f.cutoff());
    let out_ln = [w.ln_theta[n + 1], w.ln_tau[n + 1]];
    for (comp, i, j, v) in f.terms() {
        let s = out_ln[comp] - i as f64 * w.ln_theta[n] - j as f64 * w.ln_tau[n];
        out.set(comp, i, j, v * cr(s.exp()));
    }
    out
}

pub fn direct_trains(germs: &[PolyMap2], logs: &DiagonalLogs, partition: &TrainPartition) -> Result<(DirectingWeights, Vec<PolyMap2>)> {
    if germs.len() < logs.len() {
        return Err(Error::Contract("fewer germs than logged steps".into()));
    }
    let w = direct_weights(logs, partition);
    let directed: Vec<PolyMap2> = (0..w.len()).map(|n| directed_germ(&germs[n], &w, n)).collect();
    for (n, g) in directed.iter().enumerate() {
        if !g.is_finite() {
            return Err(Error::Invariant(format!("directed germ {n} is not finite")));
        }
    }
    Ok((w, directed))
}

/// Checks bounded distortion, parity domination, train start bounds,
/// weight monotonicity and coefficient inflation.
pub fn verify_directing(
    w: &DirectingWeights,
    logs: &DiagonalLogs,
    partition: &TrainPartition,
    germs: &[PolyMap2],
    directed: &[PolyMap2],
    c_bound: f64,
) -> CheckSuite {
    let k = w.k as f64;
    let mut distortion = Check::new("directing.bounded_distortion", "all n");
    let mut domination = Check::new("directing.parity_domination", "all n");
    let mut start = Check::new("directing.train_start_bounds", "trains j>=1");
    let mut mono = Check::new("directing.weights_nondecreasing", "all n");
    let mut at_least_one = Check::new("directing.weights_at_least_one", "all n");
    let mut inflation = Check::new("directing.coefficient_inflation", "all n, degree>=2");
    let budget = (w.d / c_bound).ln();
    for n in 0..=w.len() {
        let (lt, lu) = (w.ln_theta[n], w.ln_tau[n]);
        distortion.record(k * lt - lu);
        distortion.record(k * lu - lt);
        at_least_one.record(lt.min(lu));
        if n < w.len() {
            mono.record(w.ln_theta[n + 1] - lt);
            mono.record(w.ln_tau[n + 1] - lu);
            let (da, db) = w.directed_logs(n, logs.ln_a.range(n, n + 1), logs.ln_b.range(n, n + 1));
            match w.parity[n] {
                Parity::Odd => domination.record(da - db),
                Parity::Even => domination.record(db - da),
            }
            if n < germs.len() && n < directed.len() {
                for (comp, i, j, v) in germs[n].terms() {
                    if i + j < 2 || v.norm() == 0.0 {
                        continue;
                    }
                    let ratio = directed[n].get(comp, i, j).norm() / v.norm();
                    inflation.record(budget - ratio.ln());
                }
            }
        }
    }
    for t in partition.trains.iter().skip(1) {
        if t.p > w.len() {
            continue;
        }
        let (bt, bu) = start_bounds(t.j, k, w.d);
        start.record(w.ln_theta[t.p] - bt);
        start.record(w.ln_tau[t.p] - bu);
    }
    let mut s = CheckSuite::new();
    for c in [distortion, domination, start, mono, at_least_one, inflation] {
        s.push(c);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train_diagonal::build_from_logs;

    #[test]
    fn equal_moduli_keep_weights_constant() {
        let (lt, lu) = weight_step(Parity::Odd, 2.0, 1.0, 0.7, (0.4f64).ln(), (0.4f64).ln());
        assert_eq!((lt, lu), (1.0, 0.7));
        let (lt, lu) = weight_step(Parity::Even, 2.0, 1.0, 0.7, (0.4f64).ln(), (0.4f64).ln());
        assert_eq!((lt, lu), (1.0, 0.7));
    }

    #[test]
    fn dominant_a_on_odd_train_keeps_theta() {
        let (lt, _) = weight_step(Parity::Odd, 2.0, 1.0, 0.7, (0.5f64).ln(), (0.3f64).ln());
        assert_eq!(lt, 1.0);
    }

    #[test]
    fn start_bounds_for_train_zero() {
        let (bt, bu) = start_bounds(0, 2.0, 0.5);
        assert!((bt - (2f64).ln() / 3.0).abs() < 1e-15);
        assert!((bu - 2.0 * (2f64).ln() / 3.0).abs() < 1e-15);
    }

    #[test]
    fn corrupted_tau_fails_distortion() {
        let la: Vec<f64> = (0..40).map(|n| if n < 10 { 0.3f64.ln() } else { 0.5f64.ln() }).collect();
        let lb: Vec<f64> = (0..40).map(|n| if n < 10 { 0.5f64.ln() } else { 0.3f64.ln() }).collect();
        let logs = DiagonalLogs::from_logs(&la, &lb);
        let part = build_from_logs(&logs, 2, 0.5);
        let mut w = direct_weights(&logs, &part);
        let ok = verify_directing(&w, &logs, &part, &[], &[], 0.3);
        assert!(ok.get("directing.bounded_distortion").unwrap().passed());
        // tau multiplied by D^{-1} many times over breaks theta^k >= tau somewhere
        for v in w.ln_tau.iter_mut() {
            *v += 40.0 * (2f64).ln();
        }
        let bad = verify_directing(&w, &logs, &part, &[], &[], 0.3);
        assert!(!bad.get("directing.bounded_distortion").unwrap().passed());
    }
}
