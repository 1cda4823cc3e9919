//! Run records: the config snapshot, every produced number, and checks whose
//! pass/fail can be recomputed from the stored values.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::ExperimentConfig;

pub const ARTIFACT_VERSION: &str = concat!("bdlab ", env!("CARGO_PKG_VERSION"));

/// Non-finite numbers are stored as the strings `"NaN"`, `"inf"`, `"-inf"`.
mod float {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("NaN")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) => match s.as_str() {
                "NaN" => Ok(f64::NAN),
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(serde::de::Error::custom(format!("not a number: {other:?}"))),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Bound {
    AtLeast {
        #[serde(with = "float")]
        bound: f64,
    },
    AtMost {
        #[serde(with = "float")]
        bound: f64,
    },
    Within {
        #[serde(with = "float")]
        target: f64,
        #[serde(with = "float")]
        tol: f64,
    },
}

impl Bound {
    pub fn holds(&self, value: f64) -> bool {
        match *self {
            Bound::AtLeast { bound } => value >= bound,
            Bound::AtMost { bound } => value <= bound,
            Bound::Within { target, tol } => (value - target).abs() <= tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    #[serde(with = "float")]
    pub value: f64,
    pub bound: Bound,
    pub passed: bool,
}

impl Check {
    pub fn new(name: impl Into<String>, value: f64, bound: Bound) -> Self {
        Check {
            name: name.into(),
            value,
            passed: bound.holds(value),
            bound,
        }
    }

    pub fn at_least(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self::new(name, value, Bound::AtLeast { bound })
    }

    pub fn at_most(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self::new(name, value, Bound::AtMost { bound })
    }

    pub fn within(name: impl Into<String>, value: f64, target: f64, tol: f64) -> Self {
        Self::new(name, value, Bound::Within { target, tol })
    }

    /// A boolean property recorded as `1 ≥ 1` or `0 ≥ 1`.
    pub fn holds(name: impl Into<String>, ok: bool) -> Self {
        Self::at_least(name, if ok { 1.0 } else { 0.0 }, 1.0)
    }

    pub fn recompute(&self) -> bool {
        self.bound.holds(self.value)
    }
}

/// A table written as CSV next to the record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(name: impl Into<String>, header: &[&str]) -> Self {
        Table {
            name: name.into(),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub version: String,
    pub experiment: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub started_at: String,
    pub wall_clock_secs: f64,
    pub threads: usize,
    pub results: Value,
    pub tables: Vec<Table>,
    pub checks: Vec<Check>,
    pub passed: bool,
    pub error: Option<String>,
}

impl RunRecord {
    /// Pass/fail from the stored numbers alone.
    pub fn recompute_passed(&self) -> bool {
        self.error.is_none() && self.checks.iter().all(Check::recompute)
    }

    /// Everything that must replay bitwise: results, tables and checks.
    pub fn stochastic_outputs(&self) -> Value {
        serde_json::json!({
            "results": self.results,
            "tables": self.tables,
            "checks": self.checks,
        })
    }
}
