//! Flat `key = value` files: one pair per line, `#` starts a comment.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{CliError, Result};

#[derive(Debug)]
pub struct KvFile {
    pub path: PathBuf,
    entries: BTreeMap<String, (usize, String)>,
    used: std::cell::RefCell<Vec<String>>,
}

impl KvFile {
    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(CliError::file(path, i + 1, format!("expected `key = value`, got `{line}`")));
            };
            let k = k.trim().to_string();
            if k.is_empty() {
                return Err(CliError::file(path, i + 1, "empty key"));
            }
            if entries.insert(k.clone(), (i + 1, v.trim().to_string())).is_some() {
                return Err(CliError::file(path, i + 1, format!("duplicate key `{k}`")));
            }
        }
        Ok(KvFile {
            path: path.to_path_buf(),
            entries,
            used: Default::default(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(path.to_path_buf(), e))?;
        Self::parse(path, &text)
    }

    fn raw(&self, key: &str) -> Option<&(usize, String)> {
        self.used.borrow_mut().push(key.to_string());
        self.entries.get(key)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse()
                .map(Some)
                .map_err(|e| CliError::file(&self.path, *line, format!("`{key}`: {e}"))),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        let Some((line, v)) = self.raw(key) else {
            return Ok(None);
        };
        let items = v
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e| CliError::file(&self.path, *line, format!("`{key}`: {e}"))))
            .collect::<Result<Vec<T>>>()?;
        if items.is_empty() {
            return Err(CliError::file(&self.path, *line, format!("`{key}` is empty")));
        }
        Ok(Some(items))
    }

    /// A path, resolved against the file's directory.
    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let (_, v) = self.raw(key)?;
        let p = PathBuf::from(v);
        Some(if p.is_absolute() {
            p
        } else {
            self.path.parent().unwrap_or(Path::new(".")).join(p)
        })
    }

    /// Fails on keys never asked for.
    pub fn finish(&self) -> Result<()> {
        let used = self.used.borrow();
        for (k, (line, _)) in &self.entries {
            if !used.contains(k) {
                return Err(CliError::file(&self.path, *line, format!("unknown key `{k}`")));
            }
        }
        Ok(())
    }
}
