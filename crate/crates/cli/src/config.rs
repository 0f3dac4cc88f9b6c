//! `key = value` configuration files merged with command-line flags.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{Context, Result};

/// A configuration problem: exits with status 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Parses `key = value` lines. `#` starts a comment; blank lines are skipped.
pub fn parse(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| usage(format!("config line {}: expected key = value, got '{raw}'", i + 1)))?;
        let key = k.trim().replace('-', "_");
        if key.is_empty() {
            return Err(usage(format!("config line {}: empty key", i + 1)));
        }
        if out.insert(key.clone(), v.trim().to_owned()).is_some() {
            return Err(usage(format!("config line {}: duplicate key '{key}'", i + 1)));
        }
    }
    Ok(out)
}

/// Resolves each setting as flag, then config file, then default, and
/// records the result so the effective configuration can be echoed.
pub struct Settings {
    file: BTreeMap<String, String>,
    used: BTreeSet<String>,
    effective: BTreeMap<String, String>,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let file = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| usage(format!("cannot read config file {}: {e}", p.display())))?;
                parse(&text)?
            }
            None => BTreeMap::new(),
        };
        Ok(Settings {
            file,
            used: BTreeSet::new(),
            effective: BTreeMap::new(),
        })
    }

    fn take_file_value<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        self.used.insert(key.to_owned());
        match self.file.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|e| usage(format!("config key '{key}': cannot parse '{raw}': {e}"))),
        }
    }

    pub fn get<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        let from_file = self.take_file_value(key)?;
        let v = flag.or(from_file).unwrap_or(default);
        self.effective.insert(key.to_owned(), v.to_string());
        Ok(v)
    }

    pub fn required<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<T>
    where
        T::Err: Display,
    {
        let from_file = self.take_file_value(key)?;
        let v = flag.or(from_file).ok_or_else(|| {
            usage(format!(
                "missing required setting '{key}' (flag --{})",
                key.replace('_', "-")
            ))
        })?;
        self.effective.insert(key.to_owned(), v.to_string());
        Ok(v)
    }

    pub fn optional<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        let from_file = self.take_file_value(key)?;
        let v = flag.or(from_file);
        if let Some(v) = &v {
            self.effective.insert(key.to_owned(), v.to_string());
        }
        Ok(v)
    }

    pub fn path(&mut self, key: &str, flag: Option<PathBuf>) -> Result<PathBuf> {
        let s = self.required(key, flag.map(|p| p.to_string_lossy().into_owned()))?;
        Ok(PathBuf::from(s))
    }

    pub fn optional_path(&mut self, key: &str, flag: Option<PathBuf>) -> Result<Option<PathBuf>> {
        let s = self.optional(key, flag.map(|p| p.to_string_lossy().into_owned()))?;
        Ok(s.map(PathBuf::from))
    }

    /// Rejects config-file keys the command never asked for.
    pub fn finish(&self) -> Result<()> {
        let unknown: Vec<_> = self.file.keys().filter(|k| !self.used.contains(*k)).cloned().collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(usage(format!("unknown config key(s): {}", unknown.join(", "))))
        }
    }

    pub fn render(&self) -> String {
        self.effective.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Prints the effective configuration and writes it to
    /// `dir/effective_config.txt`.
    pub fn echo(&self, command: &str, dir: &Path) -> Result<()> {
        let text = self.render();
        println!("# effective config ({command})");
        print!("{text}");
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join("effective_config.txt");
        std::fs::write(&path, format!("# renetd {command}\n{text}"))
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_dashes() {
        let m = parse("# header\nalpha = 0.5\nlog-every=10 # inline\n\n").unwrap();
        assert_eq!(m["alpha"], "0.5");
        assert_eq!(m["log_every"], "10");
        assert!(parse("novalue").is_err());
        assert!(parse("a=1\na=2").is_err());
    }

    #[test]
    fn flag_beats_file_beats_default() {
        let mut s = Settings {
            file: parse("alpha = 0.5\nseed = 3").unwrap(),
            used: BTreeSet::new(),
            effective: BTreeMap::new(),
        };
        assert_eq!(s.get("alpha", Some(0.25), 0.15).unwrap(), 0.25);
        assert_eq!(s.get("seed", None, 0u64).unwrap(), 3);
        assert_eq!(s.get("iterations", None, 1000usize).unwrap(), 1000);
        assert!(s.finish().is_ok());
        assert_eq!(s.render(), "alpha = 0.25\niterations = 1000\nseed = 3\n");
    }

    #[test]
    fn unknown_and_malformed_keys() {
        let mut s = Settings {
            file: parse("alpah = 0.5\nseed = x").unwrap(),
            used: BTreeSet::new(),
            effective: BTreeMap::new(),
        };
        assert!(s.get("seed", None, 0u64).is_err());
        let err = s.finish().unwrap_err();
        assert!(err.to_string().contains("alpah"));
    }
}
