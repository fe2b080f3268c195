//! Flat `key = value` text with optional `[section]` headers.
//!
//! Used for run configs, dataset headers, checkpoint manifests and run
//! manifests. Lines starting with `#` are comments. Lists are
//! comma-separated; booleans are `true`/`false`.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{MceError, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Document {
    entries: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub section: String,
    pub key: String,
    pub value: String,
}

impl Entry {
    /// `section.key`, or just `key` at top level.
    pub fn path(&self) -> String {
        if self.section.is_empty() {
            self.key.clone()
        } else {
            format!("{}.{}", self.section, self.key)
        }
    }
}

impl Document {
    pub fn new() -> Self {
        Document::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut doc = Document::new();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| {
                    MceError::Parse(format!("line {}: unterminated section header", lineno + 1))
                })?;
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                MceError::Parse(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(MceError::Parse(format!("line {}: empty key", lineno + 1)));
            }
            doc.entries.push(Entry {
                section: section.clone(),
                key: key.to_string(),
                value: value.trim().to_string(),
            });
        }
        Ok(doc)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Document::parse(&std::fs::read_to_string(path)?)
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn push(&mut self, section: &str, key: &str, value: impl ToString) {
        self.entries.push(Entry {
            section: section.to_string(),
            key: key.to_string(),
            value: value.to_string(),
        });
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .rev()
            .find(|e| e.section == section && e.key == key)
            .map(|e| e.value.as_str())
    }

    pub fn require(&self, section: &str, key: &str) -> Result<&str> {
        self.get(section, key).ok_or_else(|| {
            let path = if section.is_empty() {
                key.to_string()
            } else {
                format!("{section}.{key}")
            };
            MceError::Parse(format!("missing key `{path}`"))
        })
    }

    pub fn parse_value<T: FromStr>(&self, section: &str, key: &str) -> Result<T> {
        let raw = self.require(section, key)?;
        raw.parse()
            .map_err(|_| MceError::Parse(format!("cannot parse `{section}.{key}` from `{raw}`")))
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut current: Option<&str> = None;
        for e in &self.entries {
            if current != Some(e.section.as_str()) {
                if !e.section.is_empty() {
                    if !out.is_empty() {
                        out.push('\n');
                    }
                    let _ = writeln!(out, "[{}]", e.section);
                }
                current = Some(e.section.as_str());
            }
            let _ = writeln!(out, "{} = {}", e.key, e.value);
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render())?;
        Ok(())
    }
}

pub fn parse_list<T: FromStr>(raw: &str) -> Option<Vec<T>> {
    if raw.trim().is_empty() {
        return Some(Vec::new());
    }
    raw.split(',').map(|s| s.trim().parse().ok()).collect()
}

pub fn format_list<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

pub fn parse_bool(raw: &str) -> Option<bool> {
    match raw {
        "true" => Some(true),
        "false" => Some(false),
        _ => None,
    }
}
