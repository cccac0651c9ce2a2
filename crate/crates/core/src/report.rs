//! Line-oriented `key=value` records.
//!
//! Each record is one line of space-separated `key=value` pairs, the first of
//! which is `record=<kind>`. Whitespace, `=`, `%` and control characters inside
//! values are percent-escaped, so any string round-trips.

use std::fmt::{self, Write as _};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Record {
    fields: Vec<(String, String)>,
}

impl Record {
    pub fn new(kind: &str) -> Self {
        Self { fields: vec![("record".into(), kind.into())] }
    }

    pub fn kind(&self) -> &str {
        self.get("record").unwrap_or("")
    }

    /// Appends a field; keys must be non-empty and free of spaces and `=`.
    pub fn with(mut self, key: &str, value: impl fmt::Display) -> Self {
        self.push(key, value);
        self
    }

    pub fn push(&mut self, key: &str, value: impl fmt::Display) {
        assert!(valid_key(key), "invalid record key {key:?}");
        self.fields.push((key.into(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn fields(&self) -> &[(String, String)] {
        &self.fields
    }

    pub fn parse(line: &str) -> Result<Self> {
        let mut fields = Vec::new();
        for token in line.split(' ').filter(|t| !t.is_empty()) {
            let (k, v) = token
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("record field without '=': {token:?}")))?;
            if !valid_key(k) {
                return Err(Error::InvalidArgument(format!("invalid record key {k:?}")));
            }
            fields.push((k.to_string(), unescape(v)?));
        }
        if fields.first().map(|(k, _)| k.as_str()) != Some("record") {
            return Err(Error::InvalidArgument(format!("line does not start with record=<kind>: {line:?}")));
        }
        Ok(Self { fields })
    }
}

impl fmt::Display for Record {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (k, v)) in self.fields.iter().enumerate() {
            if i > 0 {
                f.write_char(' ')?;
            }
            write!(f, "{k}={}", escape(v))?;
        }
        Ok(())
    }
}

fn valid_key(k: &str) -> bool {
    !k.is_empty() && k.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

fn escape(v: &str) -> String {
    let mut out = String::with_capacity(v.len());
    for c in v.chars() {
        if c == '=' || c == '%' || c.is_whitespace() || c.is_control() {
            let mut buf = [0u8; 4];
            for b in c.encode_utf8(&mut buf).bytes() {
                write!(out, "%{b:02X}").unwrap();
            }
        } else {
            out.push(c);
        }
    }
    out
}

fn unescape(v: &str) -> Result<String> {
    let bytes = v.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%' {
            let hex = v
                .get(i + 1..i + 3)
                .and_then(|h| u8::from_str_radix(h, 16).ok())
                .ok_or_else(|| Error::InvalidArgument(format!("bad escape in {v:?}")))?;
            out.push(hex);
            i += 3;
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    String::from_utf8(out).map_err(|_| Error::InvalidArgument(format!("escape in {v:?} is not UTF-8")))
}

/// An ordered list of records with a pass/fail verdict.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Report {
    pub records: Vec<Record>,
}

impl Report {
    pub fn push(&mut self, r: Record) {
        self.records.push(r);
    }

    /// True unless some record carries `status=FAIL`.
    pub fn passed(&self) -> bool {
        self.records.iter().all(|r| r.get("status") != Some("FAIL"))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            writeln!(s, "{r}").unwrap();
        }
        s
    }

    /// Parses record lines, skipping blank lines and `#` comments.
    pub fn parse(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(Record::parse)
            .collect::<Result<_>>()?;
        Ok(Self { records })
    }

    /// Aligned table of the records of one kind, columns in first-seen order.
    pub fn table(&self, kind: &str) -> String {
        let rows: Vec<&Record> = self.records.iter().filter(|r| r.kind() == kind).collect();
        let mut cols: Vec<&str> = Vec::new();
        for r in &rows {
            for (k, _) in r.fields().iter().skip(1) {
                if !cols.contains(&k.as_str()) {
                    cols.push(k);
                }
            }
        }
        let cell = |r: &Record, c: &str| r.get(c).unwrap_or("-").to_string();
        let widths: Vec<usize> =
            cols.iter().map(|c| rows.iter().map(|r| cell(r, c).len()).fold(c.len(), usize::max)).collect();
        let mut s = String::new();
        let line = |s: &mut String, vals: Vec<String>| {
            let parts: Vec<String> = vals.iter().zip(&widths).map(|(v, w)| format!("{v:<w$}")).collect();
            writeln!(s, "{}", parts.join("  ").trim_end()).unwrap();
        };
        line(&mut s, cols.iter().map(|c| c.to_string()).collect());
        for r in rows {
            line(&mut s, cols.iter().map(|c| cell(r, c)).collect());
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn format() {
        let r = Record::new("gemm").with("m", 8).with("kernel", "ImplB").with("median_us", 12.5);
        assert_eq!(r.to_string(), "record=gemm m=8 kernel=ImplB median_us=12.5");
        assert_eq!(Record::parse(&r.to_string()).unwrap(), r);
        assert_eq!(r.kind(), "gemm");
    }

    #[test]
    fn escaping() {
        let r = Record::new("note").with("msg", "a b=c 100%\nnext");
        let line = r.to_string();
        assert!(!line.contains('\n'));
        assert_eq!(line, "record=note msg=a%20b%3Dc%20100%25%0Anext");
        assert_eq!(Record::parse(&line).unwrap(), r);
    }

    #[test]
    fn parse_errors() {
        assert!(Record::parse("kind=x").is_err());
        assert!(Record::parse("record=x novalue").is_err());
        assert!(Record::parse("record=x k=%4").is_err());
        assert!(Record::parse("record=x k=%ZZ").is_err());
    }

    #[test]
    fn report_status_and_text() {
        let mut rep = Report::default();
        rep.push(Record::new("suite").with("name", "a").with("status", "PASS"));
        assert!(rep.passed());
        rep.push(Record::new("suite").with("name", "b").with("status", "FAIL"));
        assert!(!rep.passed());
        let text = format!("# header\n\n{}", rep.to_text());
        assert_eq!(Report::parse(&text).unwrap(), rep);
        let table = rep.table("suite");
        assert_eq!(table.lines().count(), 3);
        assert!(table.starts_with("name  status"));
    }

    proptest! {
        #[test]
        fn any_value_round_trips(v in "\\PC*", w in any::<String>()) {
            let r = Record::new("p").with("v", &v).with("w", &w);
            let back = Record::parse(&r.to_string()).unwrap();
            prop_assert_eq!(back.get("v"), Some(v.as_str()));
            prop_assert_eq!(back.get("w"), Some(w.as_str()));
        }
    }
}
