//! `key=value` run files and flag resolution.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::CliError;

/// Every key a run file may set, across all commands.
pub const KNOWN_KEYS: &[&str] = &[
    "attention",
    "batch",
    "beta1",
    "beta2",
    "channels",
    "checkpoint",
    "count",
    "data",
    "delta",
    "digits-max",
    "digits-min",
    "epochs",
    "eps",
    "epsilon",
    "force",
    "glyph-images",
    "glyph-labels",
    "hidden",
    "index",
    "init-seed",
    "log",
    "lr",
    "m",
    "model",
    "n",
    "out",
    "query-dim",
    "report",
    "san-embed",
    "scale-max",
    "scale-min",
    "seed",
    "size",
    "split",
    "stacks",
    "task",
    "test",
    "train",
    "val",
    "variant",
];

#[derive(Debug, PartialEq, Eq, thiserror::Error)]
#[error("line {line}: {message}")]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

/// Parses `key=value` lines. Blank lines and lines starting with `#` are
/// skipped; keys may use `_` or `-`.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut out = BTreeMap::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| ConfigError { line: k + 1, message };
        let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected key=value, got {line:?}")))?;
        let key = key.trim().replace('_', "-");
        if !KNOWN_KEYS.contains(&key.as_str()) {
            return Err(err(format!("unknown key {key:?}")));
        }
        if out.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(err(format!("{key:?} set twice")));
        }
    }
    Ok(out)
}

/// Resolves each setting as flag, then run file, then default, and records
/// what was used.
#[derive(Debug, Default)]
pub struct Settings {
    file: BTreeMap<String, String>,
    used: BTreeMap<String, String>,
}

impl Settings {
    pub fn new(file: BTreeMap<String, String>) -> Self {
        Self { file, used: BTreeMap::new() }
    }

    fn from_file<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        self.file
            .get(key)
            .map(|v| v.parse::<T>().map_err(|e| CliError::Usage(format!("config key {key}={v}: {e}"))))
            .transpose()
    }

    pub fn get<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        let v = match flag {
            Some(v) => v,
            None => self.from_file(key)?.unwrap_or(default),
        };
        self.used.insert(key.into(), v.to_string());
        Ok(v)
    }

    pub fn opt<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        let v = match flag {
            Some(v) => Some(v),
            None => self.from_file(key)?,
        };
        if let Some(v) = &v {
            self.used.insert(key.into(), v.to_string());
        }
        Ok(v)
    }

    /// A switch is on when given on the command line or set true in the file.
    pub fn switch(&mut self, key: &str, flag: bool) -> Result<bool, CliError> {
        let on = flag || self.from_file::<bool>(key)?.unwrap_or(false);
        self.used.insert(key.into(), on.to_string());
        Ok(on)
    }

    pub fn used(&self) -> &BTreeMap<String, String> {
        &self.used
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_underscores() {
        let m = parse_config("# run\n\nvariant = bg\ndigits_min=3\n").unwrap();
        assert_eq!(m["variant"], "bg");
        assert_eq!(m["digits-min"], "3");
    }

    #[test]
    fn rejects_bad_lines() {
        assert_eq!(parse_config("a\n").unwrap_err().line, 1);
        assert!(parse_config("colour=red").is_err());
        assert!(parse_config("seed=1\nseed=2").is_err());
    }

    #[test]
    fn flag_beats_file_beats_default() {
        let mut s = Settings::new(parse_config("seed=5\nepochs=2").unwrap());
        assert_eq!(s.get("seed", Some(9u64), 0).unwrap(), 9);
        assert_eq!(s.get("epochs", None, 15usize).unwrap(), 2);
        assert_eq!(s.get("batch", None, 32usize).unwrap(), 32);
        assert_eq!(s.used()["seed"], "9");
        assert!(Settings::new(parse_config("seed=x").unwrap()).get("seed", None, 0u64).is_err());
    }
}
