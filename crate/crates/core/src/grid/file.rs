//! Grid files (TOML or JSON).
//!
//! ```toml
//! nodes = 3
//! types = 1
//! w00 = 1.0
//! v_lo = 0.81            # scalar broadcast or one value per load node
//! v_hi = 1.0
//! m = 1e6
//! k = 10                 # integer, "inf", or a list
//! c_max = 1e6            # scalar or one value per type
//! edges = [
//!   { from = 0, to = 1, r = 0.1, x = 0.1 },
//!   { from = 1, to = 2, r = 0.1, x = 0.1 },
//!   { from = 1, to = 3, r = 0.1, x = 0.1 },
//! ]
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Capacity, GridParams, GridSpec, Line};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany {
    One(f64),
    Many(Vec<f64>),
}

impl OneOrMany {
    fn expand(&self, len: usize, name: &str) -> Result<Vec<f64>> {
        match self {
            OneOrMany::One(v) => Ok(vec![*v; len]),
            OneOrMany::Many(vs) if vs.len() == len => Ok(vs.clone()),
            OneOrMany::Many(vs) => {
                Err(Error::config(format!("`{name}` has {} entries, expected {len}", vs.len())))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CapacityEntry {
    Count(u64),
    /// Only `"inf"` is accepted.
    Word(String),
}

impl CapacityEntry {
    fn parse(&self) -> Result<Capacity> {
        match self {
            CapacityEntry::Count(k) => Ok(Capacity::Finite(*k)),
            CapacityEntry::Word(w) if w == "inf" => Ok(Capacity::Unlimited),
            CapacityEntry::Word(w) => Err(Error::config(format!("bad capacity `{w}` (use an integer or \"inf\")"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CapacitySpec {
    One(CapacityEntry),
    Many(Vec<CapacityEntry>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeFile {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
}

/// On-disk grid schema, also embedded as the `[grid]` table of run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridFile {
    pub nodes: usize,
    #[serde(default = "one")]
    pub types: usize,
    pub edges: Vec<EdgeFile>,
    pub w00: f64,
    pub v_lo: OneOrMany,
    pub v_hi: OneOrMany,
    pub m: OneOrMany,
    pub k: CapacitySpec,
    pub c_max: OneOrMany,
}

fn one() -> usize {
    1
}

impl GridFile {
    pub fn to_params(&self) -> Result<GridParams<f64>> {
        let n = self.nodes;
        let capacity = match &self.k {
            CapacitySpec::One(e) => vec![e.parse()?; n],
            CapacitySpec::Many(es) if es.len() == n => es.iter().map(CapacityEntry::parse).collect::<Result<_>>()?,
            CapacitySpec::Many(es) => {
                return Err(Error::config(format!("`k` has {} entries, expected {n}", es.len())))
            }
        };
        Ok(GridParams {
            nodes: n,
            types: self.types,
            lines: self.edges.iter().map(|e| Line { from: e.from, to: e.to, r: e.r, x: e.x }).collect(),
            w00: self.w00,
            v_lo: self.v_lo.expand(n, "v_lo")?,
            v_hi: self.v_hi.expand(n, "v_hi")?,
            m: self.m.expand(n, "m")?,
            capacity,
            c_max: self.c_max.expand(self.types, "c_max")?,
        })
    }

    pub fn from_grid(g: &GridSpec<f64>) -> Self {
        let p = g.params();
        GridFile {
            nodes: p.nodes,
            types: p.types,
            edges: p.lines.iter().map(|l| EdgeFile { from: l.from, to: l.to, r: l.r, x: l.x }).collect(),
            w00: p.w00,
            v_lo: OneOrMany::Many(p.v_lo),
            v_hi: OneOrMany::Many(p.v_hi),
            m: OneOrMany::Many(p.m),
            k: CapacitySpec::Many(
                p.capacity
                    .iter()
                    .map(|c| match c {
                        Capacity::Finite(k) => CapacityEntry::Count(*k),
                        Capacity::Unlimited => CapacityEntry::Word("inf".into()),
                    })
                    .collect(),
            ),
            c_max: OneOrMany::Many(p.c_max),
        }
    }

    /// Validates the file contents; `source` is used to attach line numbers
    /// to edge diagnostics.
    pub fn build(&self, source: Option<(&str, &str)>) -> Result<GridSpec<f64>> {
        GridSpec::new(self.to_params()?).map_err(|e| match (e, source) {
            (Error::InvalidGrid { edge: Some(idx), msg }, Some((name, text))) => {
                let line = edge_line(text, idx).map_or_else(String::new, |l| format!(":{l}"));
                Error::config(format!("{name}{line}: {msg}"))
            }
            (e, _) => e,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridFormat {
    Toml,
    Json,
}

impl GridFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => GridFormat::Json,
            _ => GridFormat::Toml,
        }
    }
}

pub fn parse_grid(text: &str, format: GridFormat, name: &str) -> Result<GridSpec<f64>> {
    let file: GridFile = match format {
        GridFormat::Toml => toml::from_str(text).map_err(|e| Error::config(format!("{name}: {e}")))?,
        GridFormat::Json => serde_json::from_str(text)
            .map_err(|e| Error::config(format!("{name}:{}: {e}", e.line())))?,
    };
    file.build(Some((name, text)))
}

pub fn load_grid(path: &Path) -> Result<GridSpec<f64>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    parse_grid(&text, GridFormat::from_path(path), &path.display().to_string())
}

/// 1-based line of the `idx`-th edge entry, either a `[[edges]]` header or
/// the opening brace of an inline/JSON object inside the `edges` array.
fn edge_line(text: &str, idx: usize) -> Option<usize> {
    let line_of = |offset: usize| text[..offset].matches('\n').count() + 1;

    let headers: Vec<usize> = text.match_indices("[[edges]]").map(|(o, _)| o).collect();
    if !headers.is_empty() {
        return headers.get(idx).map(|&o| line_of(o));
    }

    let key = text.find("\"edges\"").or_else(|| {
        text.match_indices("edges").map(|(o, _)| o).find(|&o| {
            text[o + 5..].trim_start().starts_with('=')
        })
    })?;
    let open = key + text[key..].find('[')?;
    let mut depth = 0i32;
    let mut in_string = false;
    let mut escaped = false;
    let mut seen = 0usize;
    for (off, ch) in text[open..].char_indices() {
        if in_string {
            match ch {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match ch {
            '"' => in_string = true,
            '[' => depth += 1,
            ']' => {
                depth -= 1;
                if depth == 0 {
                    return None;
                }
            }
            '{' => {
                if depth == 1 {
                    if seen == idx {
                        return Some(line_of(open + off));
                    }
                    seen += 1;
                }
                depth += 1;
            }
            '}' => depth -= 1,
            _ => {}
        }
    }
    None
}
