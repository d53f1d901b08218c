//! Structured diagnostics and CSV emission.
//!
//! All CSV produced by this crate starts with a `#` comment line carrying a
//! generation stamp, followed by a header row. Everything after the first
//! line is a deterministic function of the inputs.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticEntry {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub std_error: Option<f64>,
    pub witness: Option<Vec<f64>>,
    pub detail: String,
}

impl DiagnosticEntry {
    pub fn check(name: impl Into<String>, passed: bool, value: f64) -> Self {
        Self {
            name: name.into(),
            passed,
            value,
            std_error: None,
            witness: None,
            detail: String::new(),
        }
    }

    /// An entry that only reports a number.
    pub fn info(name: impl Into<String>, value: f64) -> Self {
        Self::check(name, true, value)
    }

    pub fn with_std_error(mut self, se: f64) -> Self {
        self.std_error = Some(se);
        self
    }

    pub fn with_witness(mut self, w: Option<Vec<f64>>) -> Self {
        self.witness = w;
        self
    }

    pub fn with_detail(mut self, d: impl Into<String>) -> Self {
        self.detail = d.into();
        self
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DiagnosticsReport {
    pub title: String,
    pub entries: Vec<DiagnosticEntry>,
}

impl DiagnosticsReport {
    pub fn new(title: impl Into<String>) -> Self {
        Self {
            title: title.into(),
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, entry: DiagnosticEntry) {
        self.entries.push(entry);
    }

    /// Appends another report's entries, prefixing their names.
    pub fn absorb(&mut self, prefix: &str, other: DiagnosticsReport) {
        for mut e in other.entries {
            e.name = format!("{prefix}: {}", e.name);
            self.entries.push(e);
        }
    }

    pub fn all_passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &DiagnosticEntry> {
        self.entries.iter().filter(|e| !e.passed)
    }

    pub fn entry(&self, name: &str) -> Option<&DiagnosticEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn to_csv(&self) -> Csv {
        let mut csv = Csv::new(&["check", "passed", "value", "std_error", "witness", "detail"]);
        for e in &self.entries {
            csv.row(&[
                quote(&e.name),
                e.passed.to_string(),
                fmt_f64(e.value),
                e.std_error.map(fmt_f64).unwrap_or_default(),
                e.witness
                    .as_ref()
                    .map(|w| w.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(";"))
                    .unwrap_or_default(),
                quote(&e.detail),
            ]);
        }
        csv
    }
}

impl std::fmt::Display for DiagnosticsReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{}", self.title)?;
        for e in &self.entries {
            write!(
                f,
                "  [{}] {}: {:.6e}",
                if e.passed { "pass" } else { "FAIL" },
                e.name,
                e.value
            )?;
            if let Some(se) = e.std_error {
                write!(f, " ± {se:.3e}")?;
            }
            if let Some(w) = &e.witness {
                write!(f, " witness {w:?}")?;
            }
            if !e.detail.is_empty() {
                write!(f, " ({})", e.detail)?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Fixed-precision float formatting so CSV bytes are reproducible.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.12e}")
    }
}

fn quote(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// In-memory CSV table.
#[derive(Debug, Clone, PartialEq)]
pub struct Csv {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn row(&mut self, cells: &[String]) {
        assert_eq!(cells.len(), self.header.len(), "CSV row width");
        self.rows.push(cells.to_vec());
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Header plus rows, without the stamp line.
    pub fn body(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(s, "{}", r.join(","));
        }
        s
    }

    /// Full file contents: a `#` stamp line, then the body.
    pub fn render(&self, stamp: &str) -> String {
        format!("# {stamp}\n{}", self.body())
    }

    /// Writes atomically (temp file in the same directory, then rename).
    pub fn write(&self, path: &Path, stamp: &str) -> Result<()> {
        write_atomic(path, self.render(stamp).as_bytes())
    }
}

/// Strips the leading `#` stamp line of a rendered CSV.
pub fn strip_stamp(contents: &str) -> &str {
    match contents.strip_prefix('#') {
        Some(rest) => rest.split_once('\n').map_or("", |(_, body)| body),
        None => contents,
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}
