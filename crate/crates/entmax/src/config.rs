//! Flat `key = value` text configuration.
//!
//! One pair per line; blank lines and lines starting with `#` are ignored.
//! Keys are unique. Values are taken verbatim after trimming.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Ordered key/value pairs as read from a config file.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FlatConfig {
    pairs: Vec<(String, String)>,
}

impl FlatConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::ConfigSyntax {
                line: i + 1,
                message: format!("expected `key = value`, found `{line}`"),
            })?;
            let key = key.trim();
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(Error::ConfigSyntax {
                    line: i + 1,
                    message: format!("bad key `{key}`"),
                });
            }
            if cfg.get(key).is_some() {
                return Err(Error::ConfigSyntax {
                    line: i + 1,
                    message: format!("duplicate key `{key}`"),
                });
            }
            cfg.pairs.push((key.to_string(), value.trim().to_string()));
        }
        Ok(cfg)
    }

    /// Parses a single `key=value` override as given on the command line.
    pub fn parse_override(s: &str) -> Result<(String, String)> {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::InvalidInput(format!("expected key=value, found `{s}`")))?;
        Ok((k.trim().to_string(), v.trim().to_string()))
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Inserts or replaces a value, keeping the original position.
    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        let (key, value) = (key.into(), value.into());
        match self.pairs.iter_mut().find(|(k, _)| *k == key) {
            Some(slot) => slot.1 = value,
            None => self.pairs.push((key, value)),
        }
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|(k, _)| k.as_str())
    }

    /// Parses the value under `key` when present.
    pub fn parsed<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: std::str::FromStr,
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|v| {
                v.parse::<T>().map_err(|e| Error::ConfigValue {
                    key: key.to_string(),
                    message: format!("`{v}`: {e}"),
                })
            })
            .transpose()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_render_round_trip() {
        let text = "# run\nsteps = 10\n\nlearning_rate=0.05\n";
        let cfg = FlatConfig::parse(text).unwrap();
        assert_eq!(cfg.get("steps"), Some("10"));
        assert_eq!(cfg.parsed::<f64>("learning_rate").unwrap(), Some(0.05));
        assert_eq!(FlatConfig::parse(&cfg.render()).unwrap(), cfg);
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(matches!(
            FlatConfig::parse("a = 1\nnope"),
            Err(Error::ConfigSyntax { line: 2, .. })
        ));
        assert!(FlatConfig::parse("a = 1\na = 2").is_err());
        assert!(FlatConfig::parse("a b = 1").is_err());
    }

    #[test]
    fn bad_values_name_the_key() {
        let cfg = FlatConfig::parse("steps = ten").unwrap();
        let err = cfg.parsed::<u64>("steps").unwrap_err();
        assert!(err.to_string().contains("steps"));
    }

    #[test]
    fn set_replaces_in_place() {
        let mut cfg = FlatConfig::parse("a = 1\nb = 2").unwrap();
        cfg.set("a", "3");
        cfg.set("c", "4");
        assert_eq!(cfg.render(), "a = 3\nb = 2\nc = 4\n");
    }
}
