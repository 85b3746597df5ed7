//! Uniform pass/fail records shared by every checker.

use serde::{Deserialize, Serialize};

pub const SLACK_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
    /// Not applicable on this index range (documented per check).
    Exempt,
    /// Could not be decided within the horizon; never counted as a pass.
    Undecided,
}

/// One named inequality family evaluated over some index range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub scope: String,
    pub evaluated: usize,
    pub violations: usize,
    /// Smallest observed slack (log domain unless the note says otherwise).
    /// Written as `null` before any evaluation and `"-inf"` after a NaN.
    #[serde(with = "slack_serde")]
    pub min_slack: f64,
    pub status: Status,
    #[serde(default)]
    pub note: String,
}

impl Check {
    pub fn new(name: impl Into<String>, scope: impl Into<String>) -> Self {
        Check { name: name.into(), scope: scope.into(), evaluated: 0, violations: 0, min_slack: f64::INFINITY, status: Status::Pass, note: String::new() }
    }

    pub fn exempt(name: impl Into<String>, scope: impl Into<String>, note: impl Into<String>) -> Self {
        let mut c = Check::new(name, scope);
        c.status = Status::Exempt;
        c.note = note.into();
        c
    }

    pub fn undecided(name: impl Into<String>, scope: impl Into<String>, note: impl Into<String>) -> Self {
        let mut c = Check::new(name, scope);
        c.status = Status::Undecided;
        c.note = note.into();
        c
    }

    /// Records one evaluation; the inequality holds when `slack >= -SLACK_TOL`.
    pub fn record(&mut self, slack: f64) {
        self.record_tol(slack, SLACK_TOL);
    }

    pub fn record_tol(&mut self, slack: f64, tol: f64) {
        self.evaluated += 1;
        if slack.is_nan() || slack < -tol {
            self.violations += 1;
            self.status = Status::Fail;
        }
        if slack.is_nan() {
            self.min_slack = f64::NEG_INFINITY;
        } else {
            self.min_slack = self.min_slack.min(slack);
        }
    }

    /// Strict inequality: `slack > 0` up to the tolerance.
    pub fn record_strict(&mut self, slack: f64) {
        self.record(slack);
    }

    pub fn fail(&mut self, note: impl Into<String>) {
        self.violations += 1;
        self.status = Status::Fail;
        self.note = note.into();
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = note.into();
        self
    }

    pub fn passed(&self) -> bool {
        matches!(self.status, Status::Pass | Status::Exempt)
    }

    /// Slack as a finite JSON-friendly number (no evaluations maps to 0).
    pub fn finite_slack(&self) -> f64 {
        if self.min_slack.is_finite() {
            self.min_slack
        } else if self.min_slack == f64::INFINITY {
            0.0
        } else {
            f64::MIN
        }
    }
}

mod slack_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v == f64::INFINITY {
            s.serialize_none()
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Option::<Repr>::deserialize(d)? {
            None => Ok(f64::INFINITY),
            Some(Repr::Num(x)) => Ok(x),
            Some(Repr::Text(t)) if t == "-inf" => Ok(f64::NEG_INFINITY),
            Some(Repr::Text(t)) => Err(serde::de::Error::custom(format!("bad slack '{t}'"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckSuite {
    pub checks: Vec<Check>,
}

impl CheckSuite {
    pub fn new() -> Self {
        CheckSuite::default()
    }

    pub fn push(&mut self, c: Check) {
        self.checks.push(c);
    }

    pub fn extend(&mut self, other: CheckSuite) {
        self.checks.extend(other.checks);
    }

    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.passed())
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| c.status == Status::Fail).collect()
    }

    pub fn any_undecided(&self) -> bool {
        self.checks.iter().any(|c| c.status == Status::Undecided)
    }

    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// All checks whose name starts with `prefix`.
    pub fn family(&self, prefix: &str) -> Vec<&Check> {
        self.checks.iter().filter(|c| c.name.starts_with(prefix)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slack_tolerance() {
        let mut c = Check::new("x", "all");
        c.record(0.5);
        c.record(-5e-10);
        assert!(c.passed());
        c.record(-1e-6);
        assert!(!c.passed());
        assert_eq!(c.violations, 1);
        assert_eq!(c.evaluated, 3);
        assert_eq!(c.min_slack, -1e-6);
    }

    #[test]
    fn nan_is_a_violation() {
        let mut c = Check::new("x", "all");
        c.record(f64::NAN);
        assert_eq!(c.status, Status::Fail);
    }

    #[test]
    fn slack_survives_json() {
        let mut c = Check::new("x", "all");
        let back: Check = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back.min_slack, f64::INFINITY);
        c.record(f64::NAN);
        let back: Check = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back.min_slack, f64::NEG_INFINITY);
        c.min_slack = -0.25;
        let back: Check = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn undecided_is_not_a_pass() {
        let mut s = CheckSuite::new();
        s.push(Check::undecided("y", "all", "horizon"));
        assert!(!s.all_pass());
        assert!(s.any_undecided());
        assert!(s.failures().is_empty());
    }
}
