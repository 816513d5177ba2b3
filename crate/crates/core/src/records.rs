//! Metric records (`key=value` lines) and plain-text tables.

use std::fmt::Display;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// One metric line: an `event` name followed by ordered fields.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub event: String,
    pub fields: Vec<(String, String)>,
}

impl Record {
    pub fn new(event: &str) -> Self {
        Record { event: event.to_string(), fields: Vec::new() }
    }

    pub fn with(mut self, key: &str, value: impl Display) -> Self {
        self.fields.push((key.to_string(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn line(&self) -> String {
        let mut s = format!("event={}", self.event);
        for (k, v) in &self.fields {
            s.push(' ');
            s.push_str(k);
            s.push('=');
            s.push_str(v);
        }
        s
    }

    pub fn parse(line: &str) -> Result<Self> {
        let mut parts = line.split_whitespace();
        let first = parts.next().ok_or_else(|| Error::Format("empty record".into()))?;
        let event = first.strip_prefix("event=").ok_or_else(|| Error::Format(format!("record must start with event=: {line:?}")))?;
        let mut r = Record::new(event);
        for p in parts {
            let (k, v) = p.split_once('=').ok_or_else(|| Error::Format(format!("field {p:?} is not key=value")))?;
            r.fields.push((k.to_string(), v.to_string()));
        }
        Ok(r)
    }
}

/// Append-only metric stream, flushed after every record.
pub struct RecordLog {
    out: BufWriter<File>,
}

impl RecordLog {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(RecordLog { out: BufWriter::new(File::create(path)?) })
    }

    pub fn append(path: &Path) -> Result<Self> {
        Ok(RecordLog { out: BufWriter::new(File::options().create(true).append(true).open(path)?) })
    }

    pub fn write(&mut self, r: &Record) -> Result<()> {
        writeln!(self.out, "{}", r.line())?;
        self.out.flush()?;
        Ok(())
    }
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    std::fs::read_to_string(path)?.lines().filter(|l| !l.trim().is_empty()).map(Record::parse).collect()
}

/// Left-aligned columns separated by two spaces, with a dashed rule under the header.
pub fn render_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut width: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (i, c) in r.iter().enumerate() {
            if i < width.len() {
                width[i] = width[i].max(c.chars().count());
            }
        }
    }
    let fmt = |cells: Vec<&str>| {
        let line: Vec<String> = cells.iter().zip(&width).map(|(c, &w)| format!("{c:<w$}")).collect();
        line.join("  ").trim_end().to_string()
    };
    let mut s = fmt(header.to_vec());
    s.push('\n');
    s.push_str(&fmt(width.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().iter().map(String::as_str).collect()));
    s.push('\n');
    for r in rows {
        s.push_str(&fmt(r.iter().map(String::as_str).collect()));
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_round_trip() {
        let r = Record::new("step").with("step", 3).with("loss", -0.25f64);
        assert_eq!(r.line(), "event=step step=3 loss=-0.25");
        assert_eq!(Record::parse(&r.line()).unwrap(), r);
        assert_eq!(r.get("loss"), Some("-0.25"));
        assert!(Record::parse("step=3").is_err());
    }

    #[test]
    fn table_layout() {
        let t = render_table(&["mode", "top1"], &[vec!["regress-masked".into(), "0.5".into()], vec!["x".into(), "0.25".into()]]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "mode            top1");
        assert_eq!(lines[1], "--------------  ----");
        assert_eq!(lines[3], "x               0.25");
    }
}
