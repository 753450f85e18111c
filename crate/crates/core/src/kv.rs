//! Flat `key = value` documents with `#` comments, used for run configs and
//! adapter manifests.

use crate::error::{Error, Result};

/// Parses a document into ordered `(key, value)` pairs. Duplicate keys are
/// rejected.
pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse(format!("line {}: expected `key = value`, got {raw:?}", lineno + 1)));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Parse(format!("line {}: empty key", lineno + 1)));
        }
        if out.iter().any(|(existing, _)| existing == k) {
            return Err(Error::Parse(format!("line {}: duplicate key `{k}`", lineno + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blank_lines() {
        let doc = "# header\n\na = 1\n b.c= two words # trailing\n";
        let kv = parse(doc).unwrap();
        assert_eq!(kv, vec![("a".into(), "1".into()), ("b.c".into(), "two words".into())]);
    }

    #[test]
    fn rejects_duplicates_and_garbage() {
        assert!(parse("a = 1\na = 2").is_err());
        assert!(parse("just words").is_err());
        assert!(parse("= 3").is_err());
    }
}
