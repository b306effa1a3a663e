//! Flat `key = value` run files.
//!
//! One entry per line; `#` starts a comment; blank lines are ignored. Keys may
//! appear once. Every key must be consumed by the command, so typos are caught
//! with their line number instead of being silently ignored.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Bad invocation or configuration (exit code 1).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage<T>(msg: String) -> anyhow::Result<T> {
    Err(UsageError(msg).into())
}

#[derive(Debug)]
struct Entry {
    value: String,
    line: usize,
}

#[derive(Debug)]
pub struct Config {
    origin: String,
    base: PathBuf,
    entries: BTreeMap<String, Entry>,
    used: RefCell<BTreeSet<String>>,
}

impl Config {
    /// Parses `text`. Relative paths read from it resolve against `base`.
    pub fn parse(text: &str, origin: &str, base: &Path) -> anyhow::Result<Self> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let Some((key, value)) = body.split_once('=') else {
                return usage(format!(
                    "{origin}:{line}: expected `key = value`, got {body:?}"
                ));
            };
            let key = key.trim();
            if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return usage(format!("{origin}:{line}: invalid key {key:?}"));
            }
            if let Some(prev) = entries.get(key) {
                let Entry { line: first, .. } = prev;
                return usage(format!(
                    "{origin}:{line}: duplicate key `{key}` (first set on line {first})"
                ));
            }
            entries.insert(
                key.to_string(),
                Entry {
                    value: value.trim().to_string(),
                    line,
                },
            );
        }
        Ok(Self {
            origin: origin.to_string(),
            base: base.to_path_buf(),
            entries,
            used: RefCell::new(BTreeSet::new()),
        })
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Self::parse(&text, &path.display().to_string(), &base)
    }

    pub fn has(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    fn raw(&self, key: &str) -> Option<&Entry> {
        self.used.borrow_mut().insert(key.to_string());
        self.entries.get(key)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> anyhow::Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(e) => e.value.parse().map(Some).or_else(|err| {
                usage(format!(
                    "{}:{}: cannot parse `{key}` = {:?}: {err}",
                    self.origin, e.line, e.value
                ))
            }),
        }
    }

    pub fn or<T: FromStr>(&self, key: &str, default: T) -> anyhow::Result<T>
    where
        T::Err: fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> anyhow::Result<T>
    where
        T::Err: fmt::Display,
    {
        match self.get(key)? {
            Some(v) => Ok(v),
            None => usage(format!("{}: missing required key `{key}`", self.origin)),
        }
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&self, key: &str) -> anyhow::Result<Option<Vec<T>>>
    where
        T::Err: fmt::Display,
    {
        let Some(e) = self.raw(key) else {
            return Ok(None);
        };
        e.value
            .split(',')
            .map(|item| {
                item.trim().parse().or_else(|err| {
                    usage(format!(
                        "{}:{}: cannot parse item {:?} of `{key}`: {err}",
                        self.origin,
                        e.line,
                        item.trim()
                    ))
                })
            })
            .collect::<anyhow::Result<Vec<T>>>()
            .map(Some)
    }

    /// A path value, resolved against the config file's directory.
    pub fn path(&self, key: &str) -> anyhow::Result<Option<PathBuf>> {
        Ok(self.get::<PathBuf>(key)?.map(|p| self.base.join(p)))
    }

    pub fn require_path(&self, key: &str) -> anyhow::Result<PathBuf> {
        match self.path(key)? {
            Some(p) => Ok(p),
            None => usage(format!("{}: missing required key `{key}`", self.origin)),
        }
    }

    /// A path that must already exist.
    pub fn existing_path(&self, key: &str) -> anyhow::Result<PathBuf> {
        let p = self.require_path(key)?;
        if !p.exists() {
            let line = self.entries[key].line;
            return usage(format!(
                "{}:{line}: `{key}` points to missing file {}",
                self.origin,
                p.display()
            ));
        }
        Ok(p)
    }

    /// Rejects keys the command never looked at.
    pub fn finish(&self) -> anyhow::Result<()> {
        let used = self.used.borrow();
        match self.entries.iter().find(|(k, _)| !used.contains(*k)) {
            Some((k, e)) => usage(format!("{}:{}: unknown key `{k}`", self.origin, e.line)),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> anyhow::Result<Config> {
        Config::parse(text, "run.cfg", Path::new("/base"))
    }

    #[test]
    fn parses_values_and_comments() {
        let c = parse("# header\nepochs = 5  # trailing\n\nepsilons = 0, 0.1,0.3\nout_dir = out\n")
            .unwrap();
        assert_eq!(c.require::<usize>("epochs").unwrap(), 5);
        assert_eq!(
            c.list::<f64>("epsilons").unwrap().unwrap(),
            vec![0.0, 0.1, 0.3]
        );
        assert_eq!(c.path("out_dir").unwrap().unwrap(), Path::new("/base/out"));
        assert_eq!(c.or("seed", 7u64).unwrap(), 7);
        c.finish().unwrap();
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = parse("a = 1\nbroken line\n").unwrap_err().to_string();
        assert!(e.contains("run.cfg:2"), "{e}");
        let e = parse("a = 1\na = 2\n").unwrap_err().to_string();
        assert!(e.contains(":2") && e.contains("line 1"), "{e}");
        let c = parse("epochs = many\n").unwrap();
        let e = c.require::<usize>("epochs").unwrap_err().to_string();
        assert!(e.contains("run.cfg:1"), "{e}");
        let c = parse("epochs = 1\n\ntypo = 2\n").unwrap();
        c.require::<usize>("epochs").unwrap();
        let e = c.finish().unwrap_err().to_string();
        assert!(e.contains("run.cfg:3") && e.contains("typo"), "{e}");
    }
}
