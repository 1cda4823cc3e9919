//! Parser for catalog spec strings such as `quadratic:c=0.25,t=1`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SpecString {
    pub name: String,
    pub positional: Vec<f64>,
    pub named: BTreeMap<String, f64>,
    pub flags: BTreeMap<String, String>,
}

impl SpecString {
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, rest) = match s.split_once(':') {
            Some((n, r)) => (n.trim(), r.trim()),
            None => (s, ""),
        };
        if name.is_empty() {
            return Err(Error::invalid(format!("empty name in spec {s:?}")));
        }
        let mut spec = SpecString {
            name: name.to_string(),
            positional: Vec::new(),
            named: BTreeMap::new(),
            flags: BTreeMap::new(),
        };
        for item in rest.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match item.split_once('=') {
                Some((k, v)) => {
                    let (k, v) = (k.trim(), v.trim());
                    match parse_number(v) {
                        Some(x) => {
                            spec.named.insert(k.to_string(), x);
                        }
                        None => {
                            spec.flags.insert(k.to_string(), v.to_string());
                        }
                    }
                }
                None => spec
                    .positional
                    .push(parse_number(item).ok_or_else(|| {
                        Error::invalid(format!("cannot parse {item:?} in {s:?}"))
                    })?),
            }
        }
        Ok(spec)
    }

    pub fn get(&self, key: &str, default: f64) -> f64 {
        self.named.get(key).copied().unwrap_or(default)
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize> {
        match self.named.get(key) {
            None => Ok(default),
            Some(&v) if v >= 0.0 && v.fract() == 0.0 => Ok(v as usize),
            Some(v) => Err(Error::invalid(format!(
                "{key} must be a non-negative integer, got {v}"
            ))),
        }
    }

    /// Rejects keys outside `allowed`, so typos do not silently fall back to defaults.
    pub fn expect_keys(&self, allowed: &[&str]) -> Result<()> {
        for k in self.named.keys().chain(self.flags.keys()) {
            if !allowed.contains(&k.as_str()) {
                return Err(Error::invalid(format!(
                    "unknown parameter {k:?} for {}; expected one of {allowed:?}",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

/// Numbers accept `inf`, `-inf` and scientific notation.
pub fn parse_number(s: &str) -> Option<f64> {
    match s {
        "inf" | "+inf" | "∞" => Some(f64::INFINITY),
        "-inf" => Some(f64::NEG_INFINITY),
        _ => s.parse::<f64>().ok(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_named_and_positional() {
        let s = SpecString::parse("quadratic:c=0.25,t=1").unwrap();
        assert_eq!(s.name, "quadratic");
        assert_eq!(s.get("c", 0.0), 0.25);
        let s = SpecString::parse("constant:1,-0.5").unwrap();
        assert_eq!(s.positional, vec![1.0, -0.5]);
        let s = SpecString::parse("zero").unwrap();
        assert!(s.named.is_empty() && s.positional.is_empty());
        let s = SpecString::parse("follmer:form=score").unwrap();
        assert_eq!(s.flags["form"], "score");
    }

    #[test]
    fn unknown_keys_are_reported() {
        let s = SpecString::parse("linear:b=2").unwrap();
        assert!(s.expect_keys(&["a", "t"]).is_err());
        assert!(SpecString::parse("linear:abc").is_err());
    }
}
