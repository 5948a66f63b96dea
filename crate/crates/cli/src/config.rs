//! `key = value` run configuration files.
//!
//! Keys are long flag names without the leading dashes. Blank lines and
//! lines starting with `#` are ignored. A value of `true` enables a switch,
//! `false` leaves it off. Entries are expanded into flags placed before the
//! command-line flags, so flags given explicitly win.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use anyhow::{bail, Context, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RunConfig {
    pub entries: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!("line {}: expected key = value, found {raw:?}", n + 1);
            };
            let key = key.trim().trim_start_matches("--");
            if key.is_empty() || key.contains(char::is_whitespace) {
                bail!("line {}: invalid key {key:?}", n + 1);
            }
            if key == "config" {
                bail!("line {}: config files cannot include other config files", n + 1);
            }
            entries.insert(key.to_string(), value.trim().to_string());
        }
        Ok(RunConfig { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Flags equivalent to the entries.
    pub fn to_args(&self) -> Vec<String> {
        let mut args = Vec::new();
        for (k, v) in &self.entries {
            match v.as_str() {
                "true" => args.push(format!("--{k}")),
                "false" => {}
                _ => {
                    args.push(format!("--{k}"));
                    args.push(v.clone());
                }
            }
        }
        args
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

/// Splices the entries of a `--config FILE` option into `args` directly
/// after the subcommand name and removes the option itself.
pub fn expand_config_args(args: Vec<String>) -> Result<Vec<String>> {
    let mut rest = Vec::with_capacity(args.len());
    let mut config = None;
    let mut iter = args.into_iter();
    while let Some(a) = iter.next() {
        if a == "--config" {
            config = Some(iter.next().context("--config needs a file argument")?);
        } else if let Some(path) = a.strip_prefix("--config=") {
            config = Some(path.to_string());
        } else {
            rest.push(a);
        }
    }
    let Some(path) = config else {
        return Ok(rest);
    };
    let extra = RunConfig::load(Path::new(&path))?.to_args();
    // rest[0] is the program name; the subcommand is the first bare word.
    let at = rest
        .iter()
        .skip(1)
        .position(|a| !a.starts_with('-'))
        .map_or(rest.len(), |p| p + 2);
    rest.splice(at..at, extra);
    Ok(rest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let text = "# comment\nepochs = 3\n\nlr=0.01\nno-augment = true\n";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.entries.len(), 3);
        assert_eq!(RunConfig::parse(&c.to_string()).unwrap(), c);
        assert_eq!(c.to_args(), ["--epochs", "3", "--lr", "0.01", "--no-augment"]);
    }

    #[test]
    fn rejects_bad_lines() {
        assert!(RunConfig::parse("epochs 3").is_err());
        assert!(RunConfig::parse("= 3").is_err());
        assert!(RunConfig::parse("config = x").is_err());
    }

    #[test]
    fn expansion_goes_after_subcommand() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "seed = 4\n").unwrap();
        let args: Vec<String> = ["backmap", "--config", path.to_str().unwrap(), "train", "--seed", "5"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(
            expand_config_args(args).unwrap(),
            ["backmap", "train", "--seed", "4", "--seed", "5"]
        );
    }
}
