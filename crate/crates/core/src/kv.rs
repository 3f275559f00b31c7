//! Line-oriented `key = value` text with `#` comments and `[section]` headers.

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub section: Option<String>,
    pub key: String,
    pub value: String,
    pub line: usize,
}

/// Parses `text`. `origin` names the source in error messages.
pub fn parse(text: &str, origin: &str) -> Result<Vec<Entry>> {
    let mut section = None;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let name = name.trim();
            if name.is_empty() {
                return Err(Error::Config(format!("{origin}:{}: empty section name", i + 1)));
            }
            section = Some(name.to_string());
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("{origin}:{}: expected `key = value`, got `{line}`", i + 1)));
        };
        let key = k.trim();
        if key.is_empty() {
            return Err(Error::Config(format!("{origin}:{}: missing key", i + 1)));
        }
        out.push(Entry {
            section: section.clone(),
            key: key.to_string(),
            value: v.trim().to_string(),
            line: i + 1,
        });
    }
    Ok(out)
}

/// Renders pairs as `key = value` lines.
pub fn render<'a>(pairs: impl IntoIterator<Item = (&'a str, String)>) -> String {
    let mut s = String::new();
    for (k, v) in pairs {
        let _ = writeln!(s, "{k} = {v}");
    }
    s
}
