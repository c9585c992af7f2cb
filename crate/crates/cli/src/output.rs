//! CSV tables with a leading `#` manifest row.

use std::fmt::Write as _;
use std::time::{SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Float(f64),
    Int(u64),
    Text(String),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            // 17 significant digits round-trip every f64
            Cell::Float(x) => format!("{x:.16e}"),
            Cell::Int(n) => n.to_string(),
            Cell::Text(s) => s.clone(),
        }
    }
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Float(x)
    }
}

impl From<usize> for Cell {
    fn from(n: usize) -> Self {
        Cell::Int(n as u64)
    }
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Text(s.to_string())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(header: &[&'static str]) -> Self {
        Table {
            header: header.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.header.len(), "row width must match the header");
        self.rows.push(row);
    }

    /// Header plus rows; no manifest.
    pub fn body(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            let line: Vec<String> = row.iter().map(Cell::render).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

/// SHA-256 over a git-style blob framing: `"blob <len>\0<content>"`.
pub fn content_hash(content: &str) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content.as_bytes());
    hex::encode(h.finalize())
}

pub struct Manifest<'a> {
    pub kind: &'a str,
    pub echo: &'a str,
    pub seed: u64,
    pub overrides: &'a [String],
}

impl Manifest<'_> {
    /// One `#` line: spec echo, seed, input hash, overridden keys, timestamp.
    pub fn line(&self) -> String {
        let spec = format!("kind={}\n{}", self.kind, self.echo);
        let hash = content_hash(&spec);
        let ts = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        let mut line = String::from("# ");
        for (i, kv) in spec.lines().enumerate() {
            if i > 0 {
                line.push(';');
            }
            line.push_str(kv);
        }
        let overrides = if self.overrides.is_empty() {
            "none".to_string()
        } else {
            self.overrides.join("|")
        };
        let _ = write!(line, " seed={} hash={hash} flag_overrides={overrides} timestamp={ts}", self.seed);
        line.push('\n');
        line
    }
}
