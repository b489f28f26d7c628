//! Line-oriented `key = value` text format used by volume sidecars and
//! configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are unique;
//! values run to the end of the line with surrounding whitespace trimmed.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

pub fn parse(text: &str, origin: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::format(
                origin,
                format!("line {}: expected `key = value`", lineno + 1),
            ));
        };
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::format(origin, format!("line {}: empty key", lineno + 1)));
        }
        if out.insert(key.to_string(), value.trim().to_string()).is_some() {
            return Err(Error::format(
                origin,
                format!("line {}: duplicate key `{key}`", lineno + 1),
            ));
        }
    }
    Ok(out)
}

pub fn render<'a>(entries: impl IntoIterator<Item = (&'a str, String)>) -> String {
    let mut s = String::new();
    for (k, v) in entries {
        s.push_str(k);
        s.push_str(" = ");
        s.push_str(&v);
        s.push('\n');
    }
    s
}

pub(crate) fn take<T: std::str::FromStr>(
    map: &BTreeMap<String, String>,
    key: &str,
    origin: &Path,
) -> Result<T> {
    let raw = map
        .get(key)
        .ok_or_else(|| Error::format(origin, format!("missing key `{key}`")))?;
    raw.parse()
        .map_err(|_| Error::format(origin, format!("bad value for `{key}`: {raw:?}")))
}
