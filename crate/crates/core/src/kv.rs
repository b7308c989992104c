//! `key=value` text used for model metadata, manifests and config files.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Parses one pair per line. Blank lines and lines starting with `#` are
/// skipped; whitespace around keys and values is trimmed.
pub fn parse_kv(text: &str, source: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: source.to_path_buf(),
            line: i as u64 + 1,
            message: format!("expected key=value, got '{line}'"),
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Parse {
                path: source.to_path_buf(),
                line: i as u64 + 1,
                message: "empty key".into(),
            });
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn format_kv<K: AsRef<str>, V: AsRef<str>>(pairs: impl IntoIterator<Item = (K, V)>) -> String {
    let mut s = String::new();
    for (k, v) in pairs {
        writeln!(s, "{}={}", k.as_ref(), v.as_ref()).expect("writing to a String");
    }
    s
}

/// Looks up `key`, failing with a message naming it.
pub fn require<'a>(pairs: &'a [(String, String)], key: &str) -> Result<&'a str> {
    pairs
        .iter()
        .rev()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::Format(format!("missing key '{key}'")))
}

pub fn require_parsed<T: std::str::FromStr>(pairs: &[(String, String)], key: &str) -> Result<T> {
    let v = require(pairs, key)?;
    v.parse()
        .map_err(|_| Error::Format(format!("bad value '{v}' for key '{key}'")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_comments() {
        let text = format_kv([("a", "1"), ("b", "x y")]);
        assert_eq!(text, "a=1\nb=x y\n");
        let parsed = parse_kv(&format!("# header\n\n{text}"), Path::new("m")).unwrap();
        assert_eq!(parsed, vec![("a".into(), "1".into()), ("b".into(), "x y".into())]);
        assert_eq!(require_parsed::<u32>(&parsed, "a").unwrap(), 1);
        assert!(require(&parsed, "c").is_err());
    }

    #[test]
    fn missing_equals_names_line() {
        let err = parse_kv("a=1\nnonsense\n", Path::new("cfg")).unwrap_err();
        assert!(err.to_string().starts_with("cfg:2:"), "{err}");
    }
}
