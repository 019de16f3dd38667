//! Flat `key = value` configuration text.
//!
//! Blank lines and `#` comments are ignored. Later keys override earlier
//! ones when applied in order.

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Something that can be configured one key at a time.
pub trait Configurable {
    fn set(&mut self, key: &str, value: &str) -> Result<()>;

    fn apply_text(&mut self, text: &str) -> Result<()> {
        for (key, value) in parse_key_values(text)? {
            self.set(&key, &value)?;
        }
        Ok(())
    }

    fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        self.apply_text(&text)
    }
}

pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got '{value}'"))),
    }
}

pub fn unknown_key(key: &str) -> Error {
    Error::Config(format!("unknown key '{key}'"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blanks() {
        let kv = parse_key_values("# header\n\na = 1\n b=two # trailing\n").unwrap();
        assert_eq!(kv, vec![("a".into(), "1".into()), ("b".into(), "two".into())]);
        assert!(parse_key_values("novalue\n").is_err());
        assert!(parse_key_values(" = 3\n").is_err());
    }

    #[test]
    fn values() {
        assert_eq!(parse_value::<f64>("x", "0.25").unwrap(), 0.25);
        assert!(parse_value::<usize>("x", "-1").is_err());
        assert!(parse_bool("x", "Yes").unwrap());
        assert!(parse_bool("x", "maybe").is_err());
    }
}
