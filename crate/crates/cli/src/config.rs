//! `key = value` config files merged under command-line flags.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

/// Resolves each setting from, in order of precedence, its flag, the config
/// file and the built-in default, and records what was chosen.
pub struct Resolver {
    file: BTreeMap<String, String>,
    used: BTreeSet<String>,
    resolved: Vec<(String, String)>,
}

pub fn parse_file(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::usage(format!(
                "config line {}: expected key = value",
                n + 1
            )));
        };
        let key = k.trim().trim_start_matches("--").to_string();
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(CliError::usage(format!(
                "config line {}: duplicate key {key:?}",
                n + 1
            )));
        }
    }
    Ok(out)
}

impl Resolver {
    pub fn new(path: Option<&Path>) -> Result<Self, CliError> {
        let file = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::new("io", format!("{}: {e}", p.display())))?;
                parse_file(&text)?
            }
            None => BTreeMap::new(),
        };
        Ok(Resolver {
            file,
            used: BTreeSet::new(),
            resolved: Vec::new(),
        })
    }

    fn from_file<T: FromStr>(&mut self, key: &str) -> Result<Option<T>, CliError> {
        match self.file.get(key) {
            Some(v) => v.parse().map(Some).map_err(|_| {
                CliError::usage(format!("bad value {v:?} for {key:?} in config file"))
            }),
            None => Ok(None),
        }
    }

    pub fn get<T: FromStr + Display>(
        &mut self,
        key: &str,
        flag: Option<T>,
        default: T,
    ) -> Result<T, CliError> {
        self.used.insert(key.to_string());
        let v = match flag {
            Some(v) => v,
            None => self.from_file(key)?.unwrap_or(default),
        };
        self.resolved.push((key.to_string(), v.to_string()));
        Ok(v)
    }

    /// A setting without a default; absent flag and file give `None`.
    pub fn optional<T: FromStr + Display>(
        &mut self,
        key: &str,
        flag: Option<T>,
    ) -> Result<Option<T>, CliError> {
        self.used.insert(key.to_string());
        let v = match flag {
            Some(v) => Some(v),
            None => self.from_file(key)?,
        };
        let shown = v.as_ref().map_or_else(|| "none".to_string(), T::to_string);
        self.resolved.push((key.to_string(), shown));
        Ok(v)
    }

    pub fn required<T: FromStr + Display>(
        &mut self,
        key: &str,
        flag: Option<T>,
    ) -> Result<T, CliError> {
        self.optional(key, flag)?
            .ok_or_else(|| CliError::usage(format!("missing required setting --{key}")))
    }

    pub fn switch(&mut self, key: &str, flag: bool) -> Result<bool, CliError> {
        self.used.insert(key.to_string());
        let v = flag || self.from_file(key)?.unwrap_or(false);
        self.resolved.push((key.to_string(), v.to_string()));
        Ok(v)
    }

    /// Rejects keys nobody asked for and prints the resolved settings.
    pub fn finish(self, command: &str) -> Result<(), CliError> {
        if let Some(k) = self.file.keys().find(|k| !self.used.contains(*k)) {
            return Err(CliError::usage(format!(
                "unknown config key {k:?} for {command}"
            )));
        }
        println!("# {command} configuration");
        for (k, v) in &self.resolved {
            println!("{k} = {v}");
        }
        Ok(())
    }
}
