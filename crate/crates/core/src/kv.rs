//! Line-oriented `key = value` files. `#` starts a comment; keys are unique
//! and keep their insertion order when written back.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum KvError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("missing key `{0}`")]
    Missing(String),
    #[error("key `{key}`: cannot parse `{value}`: {reason}")]
    Value { key: String, value: String, reason: String },
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvFile {
    entries: Vec<(String, String)>,
}

impl KvFile {
    pub fn parse(text: &str) -> Result<Self, KvError> {
        let mut kv = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(KvError::Syntax {
                    line: i + 1,
                    text: raw.to_string(),
                });
            };
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(KvError::Syntax {
                    line: i + 1,
                    text: raw.to_string(),
                });
            }
            if kv.raw(k).is_some() {
                return Err(KvError::Duplicate {
                    line: i + 1,
                    key: k.to_string(),
                });
            }
            kv.entries.push((k.to_string(), v.to_string()));
        }
        Ok(kv)
    }

    pub fn read(path: &Path) -> Result<Self, KvError> {
        let text = std::fs::read_to_string(path).map_err(|source| KvError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn write(&self, path: &Path) -> Result<(), KvError> {
        std::fs::write(path, self.to_string()).map_err(|source| KvError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    /// Inserts or replaces `key`, keeping its original position.
    pub fn set(&mut self, key: &str, value: impl Display) {
        let v = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = v,
            None => self.entries.push((key.to_string(), v)),
        }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, KvError>
    where
        T::Err: Display,
    {
        let v = self.raw(key).ok_or_else(|| KvError::Missing(key.to_string()))?;
        v.parse().map_err(|e: T::Err| KvError::Value {
            key: key.to_string(),
            value: v.to_string(),
            reason: e.to_string(),
        })
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, KvError>
    where
        T::Err: Display,
    {
        if self.raw(key).is_some() {
            self.get(key)
        } else {
            Ok(default)
        }
    }

    /// Overlays `other` onto `self`; keys in `other` win.
    pub fn merge(&mut self, other: &KvFile) {
        for (k, v) in &other.entries {
            self.set(k, v);
        }
    }
}

impl Display for KvFile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}
