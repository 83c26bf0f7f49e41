//! Panel files, manifests and table output.
//!
//! Panels are comma-separated with the header `area,source,estimate,se`, one
//! row per cell; `#` starts a comment line. Areas and sources keep their
//! order of first appearance.
//!
//! Every table written by the pipeline starts with a `# manifest=<sha256>`
//! line naming the manifest that produced it.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::{validate_panel, SourcePanel};
use crate::{Error, Result};

#[derive(Debug, Deserialize)]
struct PanelRow {
    area: String,
    source: String,
    estimate: String,
    se: String,
}

pub fn load_panel(path: &Path) -> Result<SourcePanel> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_panel(&text, path)
}

/// Parses panel text; `origin` is only used in error messages.
pub fn parse_panel(text: &str, origin: &Path) -> Result<SourcePanel> {
    let err = |line: u64, message: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| err(1, e.to_string()))?.clone();
    for need in ["area", "source", "estimate", "se"] {
        if !headers.iter().any(|h| h == need) {
            return Err(err(1, format!("missing column {need:?} (header must be area,source,estimate,se)")));
        }
    }

    let mut areas: Vec<String> = Vec::new();
    let mut sources: Vec<String> = Vec::new();
    let mut area_ix: HashMap<String, usize> = HashMap::new();
    let mut source_ix: HashMap<String, usize> = HashMap::new();
    let mut cells: HashMap<(usize, usize), (f64, f64, u64)> = HashMap::new();

    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let row: PanelRow = rec.deserialize(Some(&headers)).map_err(|e| err(line, e.to_string()))?;
        let estimate: f64 = row
            .estimate
            .parse()
            .map_err(|_| err(line, format!("estimate {:?} is not a number", row.estimate)))?;
        let se: f64 = row.se.parse().map_err(|_| err(line, format!("se {:?} is not a number", row.se)))?;
        if !estimate.is_finite() {
            return Err(err(line, "estimate is not finite".into()));
        }
        if !(se > 0.0) || !se.is_finite() {
            return Err(err(line, format!("standard error {se} must be positive")));
        }
        let i = *area_ix.entry(row.area.clone()).or_insert_with(|| {
            areas.push(row.area.clone());
            areas.len() - 1
        });
        let j = *source_ix.entry(row.source.clone()).or_insert_with(|| {
            sources.push(row.source.clone());
            sources.len() - 1
        });
        if let Some((_, _, first)) = cells.insert((i, j), (estimate, se, line)) {
            return Err(err(
                line,
                format!("duplicate cell (area {}, source {}), first given on line {first}", row.area, row.source),
            ));
        }
    }

    let (n_i, n_j) = (areas.len(), sources.len());
    let mut y = Vec::with_capacity(n_i * n_j);
    let mut se = Vec::with_capacity(n_i * n_j);
    for (i, a) in areas.iter().enumerate() {
        for (j, s) in sources.iter().enumerate() {
            let Some(&(e, s_e, _)) = cells.get(&(i, j)) else {
                return Err(err(0, format!("panel is not rectangular: no row for area {a}, source {s}")));
            };
            y.push(e);
            se.push(s_e);
        }
    }
    let panel = SourcePanel::from_standard_errors(areas, sources, y, se)?;
    debug_assert!(validate_panel(&panel).is_ok());
    Ok(panel)
}

/// Panel as file text (no manifest line).
pub fn panel_to_csv(panel: &SourcePanel) -> String {
    let mut out = String::from("area,source,estimate,se\n");
    for (i, a) in panel.areas().iter().enumerate() {
        for (j, s) in panel.sources().iter().enumerate() {
            let _ = writeln!(out, "{},{},{},{}", csv_field(a), csv_field(s), panel.y(i, j), panel.se(i, j));
        }
    }
    out
}

pub fn save_panel(panel: &SourcePanel, path: &Path) -> Result<()> {
    fs::write(path, panel_to_csv(panel)).map_err(|e| Error::io(path, e))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

/// An input file pinned by content hash.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputFile {
    pub path: PathBuf,
    pub sha256: String,
}

impl InputFile {
    pub fn new(path: &Path) -> Result<Self> {
        Ok(Self {
            path: path.to_path_buf(),
            sha256: file_sha256(path)?,
        })
    }

    /// Fails when the file changed since it was pinned.
    pub fn verify(&self) -> Result<()> {
        let now = file_sha256(&self.path)?;
        if now != self.sha256 {
            return Err(Error::Config(format!(
                "{} changed since the manifest was written (sha256 {now}, expected {})",
                self.path.display(),
                self.sha256
            )));
        }
        Ok(())
    }
}

/// A run description: everything that determines the outputs, and nothing
/// that does not (no output directory, worker count or clock).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub hash: String,
    pub manifest: Manifest,
}

impl Manifest {
    pub fn new<C: Serialize>(command: &str, config: &C) -> Result<Self> {
        Ok(Self {
            tool: "glshrink".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config: serde_json::to_value(config)?,
        })
    }

    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("manifest serializes").as_bytes())
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.json");
        let file = ManifestFile {
            hash: self.hash(),
            manifest: self.clone(),
        };
        let mut text = serde_json::to_string_pretty(&file)?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ManifestFile = serde_json::from_str(&text)?;
        if file.manifest.hash() != file.hash {
            return Err(Error::Config(format!("{}: manifest hash does not match its content", path.display())));
        }
        Ok(file.manifest)
    }
}

/// Builds a comma-separated table with a manifest line.
#[derive(Debug, Clone)]
pub struct Table {
    text: String,
}

impl Table {
    pub fn new(manifest_hash: &str, header: &[&str]) -> Self {
        let mut text = format!("# manifest={manifest_hash}\n");
        text.push_str(&header.join(","));
        text.push('\n');
        Self { text }
    }

    pub fn row<I, S>(&mut self, fields: I)
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut first = true;
        for f in fields {
            if !first {
                self.text.push(',');
            }
            first = false;
            self.text.push_str(&csv_field(f.as_ref()));
        }
        self.text.push('\n');
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, &self.text).map_err(|e| Error::io(path, e))
    }
}

/// Shortest round-trip representation.
pub fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

/// Reads a `name,value`-style column pair keyed by `key_col` from a table
/// written by this tool or by hand.
pub fn read_keyed_column(path: &Path, key_col: &str, value_cols: &[&str]) -> Result<Vec<(String, f64)>> {
    let err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let key = headers
        .iter()
        .position(|h| h == key_col)
        .ok_or_else(|| err(1, format!("missing column {key_col:?}")))?;
    let val = value_cols
        .iter()
        .find_map(|c| headers.iter().position(|h| h == *c))
        .ok_or_else(|| err(1, format!("none of the columns {value_cols:?} present")))?;
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let k = rec.get(key).ok_or_else(|| err(line, "short row".into()))?.to_string();
        let v: f64 = rec
            .get(val)
            .ok_or_else(|| err(line, "short row".into()))?
            .parse()
            .map_err(|_| err(line, "value is not a number".into()))?;
        out.push((k, v));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<SourcePanel> {
        parse_panel(text, Path::new("test.csv"))
    }

    #[test]
    fn parses_and_orders_by_first_appearance() {
        let p = parse("area,source,estimate,se\nb,BR,0.2,0.03\nb,SA,0.25,0.01\na,BR,0.3,0.04\na,SA,0.28,0.01\n").unwrap();
        assert_eq!(p.areas(), ["b", "a"]);
        assert_eq!(p.sources(), ["BR", "SA"]);
        assert_eq!(p.v(1, 0), 0.04 * 0.04);
    }

    #[test]
    fn zero_se_reports_line() {
        match parse("area,source,estimate,se\n1,BR,0.2,0.03\n1,SA,0.2,0\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicates_and_holes_are_rejected() {
        let dup = parse("area,source,estimate,se\n3,SAHIE,0.2,0.03\n3,SAHIE,0.2,0.03\n");
        assert!(matches!(dup, Err(Error::Parse { line: 3, .. })), "{dup:?}");
        let hole = parse("area,source,estimate,se\n1,A,0.2,0.03\n1,B,0.2,0.03\n2,A,0.2,0.03\n");
        assert!(matches!(hole, Err(Error::Parse { .. })));
        let bad = parse("area,source,estimate,se\n1,A,abc,0.03\n");
        assert!(matches!(bad, Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn manifest_hash_is_stable_and_checked() {
        let m = Manifest::new("fit", &serde_json::json!({"seed": 1})).unwrap();
        assert_eq!(m.hash(), m.clone().hash());
        let dir = tempfile::tempdir().unwrap();
        let path = m.write(dir.path()).unwrap();
        assert_eq!(Manifest::read(&path).unwrap(), m);
        let tampered = fs::read_to_string(&path).unwrap().replace("\"seed\": 1", "\"seed\": 2");
        fs::write(&path, tampered).unwrap();
        assert!(Manifest::read(&path).is_err());
    }
}
