//! Plain-text `key = value` run configuration and run manifests.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::formats::write_atomic;

/// Ordered `key = value` pairs. Lines starting with `#` and blank lines are
/// ignored.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Config {
    entries: BTreeMap<String, String>,
}

impl Config {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Config::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            c.apply_override(line).map_err(|_| Error::Parse {
                line: i + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
        }
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies one `key=value` assignment.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("override `{assignment}` has an empty key")));
        }
        self.entries.insert(k.to_string(), v.trim().to_string());
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    /// Inserts `value` only when `key` is absent.
    pub fn set_default(&mut self, key: &str, value: impl Display) {
        self.entries
            .entry(key.to_string())
            .or_insert_with(|| value.to_string());
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        let raw = self
            .raw(key)
            .ok_or_else(|| Error::Config(format!("missing config key `{key}`")))?;
        raw.parse()
            .map_err(|e| Error::Config(format!("bad value `{raw}` for `{key}`: {e}")))
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        if self.contains(key) {
            self.get(key)
        } else {
            Ok(default)
        }
    }

    /// Comma-separated list.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: Display,
    {
        let raw = self
            .raw(key)
            .ok_or_else(|| Error::Config(format!("missing config key `{key}`")))?;
        raw.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|e| Error::Config(format!("bad list item `{s}` for `{key}`: {e}")))
            })
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Canonical text: sorted `key = value` lines.
    pub fn to_text(&self) -> String {
        self.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Hex SHA-256 of [`Config::to_text`].
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

/// Provenance written next to every output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub command: String,
    pub config: Config,
    /// SHA-256 of each output file keyed by file name.
    pub outputs: BTreeMap<String, String>,
}

pub const MANIFEST_FILE: &str = "manifest.txt";

impl Manifest {
    pub fn new(command: &str, config: &Config) -> Self {
        Manifest {
            command: command.to_string(),
            config: config.clone(),
            outputs: BTreeMap::new(),
        }
    }

    /// Records the digest of a written file.
    pub fn add_output(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        self.outputs.insert(name, hex::encode(Sha256::digest(&bytes)));
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "# vvnet {}\ncommand: {}\nconfig_sha256: {}\nseed: {}\n",
            env!("CARGO_PKG_VERSION"),
            self.command,
            self.config.digest(),
            self.config.raw("seed").unwrap_or("none"),
        );
        for (name, digest) in &self.outputs {
            s.push_str(&format!("output: {name} {digest}\n"));
        }
        s.push_str("[config]\n");
        s.push_str(&self.config.to_text());
        s
    }

    /// Reads back a manifest written by [`Manifest::write`].
    pub fn parse(text: &str) -> Result<Self> {
        let (head, cfg) = text
            .split_once("[config]\n")
            .ok_or_else(|| Error::Format("manifest has no [config] section".into()))?;
        let mut command = None;
        let mut outputs = BTreeMap::new();
        for line in head.lines() {
            if let Some(c) = line.strip_prefix("command: ") {
                command = Some(c.to_string());
            } else if let Some(o) = line.strip_prefix("output: ") {
                if let Some((n, d)) = o.split_once(' ') {
                    outputs.insert(n.to_string(), d.to_string());
                }
            }
        }
        Ok(Manifest {
            command: command.ok_or_else(|| Error::Format("manifest has no command".into()))?,
            config: Config::parse(cfg)?,
            outputs,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join(MANIFEST_FILE), self.to_text().as_bytes())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let mut c = Config::parse("# run\nepochs = 3\n\nlr=0.01\nwidths = 2, 4\n").unwrap();
        assert_eq!(c.get::<usize>("epochs").unwrap(), 3);
        assert_eq!(c.get::<f64>("lr").unwrap(), 0.01);
        assert_eq!(c.get_list::<usize>("widths").unwrap(), [2, 4]);
        c.apply_override("epochs=5").unwrap();
        assert_eq!(c.get::<usize>("epochs").unwrap(), 5);
        assert_eq!(c.get_or("missing", 7u32).unwrap(), 7);
        assert!(c.apply_override("nonsense").is_err());
    }

    #[test]
    fn reports_bad_lines_and_keys() {
        assert!(matches!(Config::parse("a = 1\noops\n"), Err(Error::Parse { line: 2, .. })));
        let c = Config::parse("a = x\n").unwrap();
        let e = c.get::<u32>("b").unwrap_err();
        assert!(e.to_string().contains("missing config key `b`"));
        assert!(matches!(c.get::<u32>("a"), Err(Error::Config(_))));
    }

    #[test]
    fn digest_is_order_independent() {
        let a = Config::parse("x = 1\ny = 2\n").unwrap();
        let b = Config::parse("y = 2\nx = 1\n").unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 64);
        let c = Config::parse("y = 2\nx = 3\n").unwrap();
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("grid.bin");
        std::fs::write(&out, b"abc").unwrap();
        let cfg = Config::parse("seed = 4\nk = 2\n").unwrap();
        let mut m = Manifest::new("voxelize", &cfg);
        m.add_output(&out).unwrap();
        m.write(dir.path()).unwrap();
        let back = Manifest::read(dir.path()).unwrap();
        assert_eq!(back, m);
        assert!(m.to_text().contains("seed: 4\n"));
        assert_eq!(
            back.outputs["grid.bin"],
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
