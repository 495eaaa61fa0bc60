//! Flat `key = value` configuration files.
//!
//! ```text
//! # dataset
//! root = /data/kitti
//! epochs = 40
//! ```
//!
//! Keys are matched against command-line flag names; `_` and `-` are
//! interchangeable. Later lines win over earlier ones.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Config {
    pub entries: Vec<(String, String)>,
}

impl Config {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut entries: Vec<(String, String)> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    msg: "expected `key = value`".into(),
                });
            };
            let key = key.trim().replace('_', "-");
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    msg: format!("invalid key {key:?}"),
                });
            }
            let value = value.trim().to_string();
            entries.retain(|(k, _)| *k != key);
            entries.push((key, value));
        }
        Ok(Self { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        let key = key.replace('_', "-");
        self.entries.iter().find(|(k, _)| *k == key).map(|(_, v)| v.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_and_overrides() {
        let c = Config::parse("# x\nroot = /a # trailing\n\nepochs=3\nroot=/b\n", Path::new("c")).unwrap();
        assert_eq!(c.get("root"), Some("/b"));
        assert_eq!(c.get("epochs"), Some("3"));
        assert_eq!(c.entries.len(), 2);
    }

    #[test]
    fn underscores_match_flags() {
        let c = Config::parse("ray_depth = 12.5", Path::new("c")).unwrap();
        assert_eq!(c.get("ray-depth"), Some("12.5"));
    }

    #[test]
    fn missing_equals_is_a_parse_error() {
        let err = Config::parse("a = 1\nbogus\n", Path::new("c")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }
}
