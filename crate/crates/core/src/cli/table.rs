//! CSV tables with a schema-version comment row.
//!
//! Layout: `# kernel-newton <kind> schema <version>`, then a header row,
//! then data. LF line endings, '.' decimals, floats in shortest round-trip
//! form. gnuplot and the `csv` crate (with `comment(Some(b'#'))`) both skip
//! the first line.

use std::fs;
use std::path::Path;

use crate::error::Result;

/// Version of every table layout written by this crate.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub kind: &'static str,
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(kind: &'static str, header: &[&'static str]) -> Self {
        Self {
            kind,
            header: header.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn render(&self) -> Result<String> {
        let mut out = format!("# kernel-newton {} schema {}\n", self.kind, SCHEMA_VERSION);
        let mut writer = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        writer.write_record(&self.header)?;
        for row in &self.rows {
            writer.write_record(row)?;
        }
        let bytes = writer.into_inner().map_err(|e| e.into_error())?;
        out.push_str(&String::from_utf8(bytes).expect("csv output of UTF-8 fields is UTF-8"));
        Ok(out)
    }

    /// Writes via a temporary sibling and a rename, so readers never see a
    /// partial file.
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = self.render()?;
        let tmp = path.with_extension("csv.partial");
        fs::write(&tmp, text)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }
}

/// Shortest round-trip form; scientific outside `[1e-4, 1e15)` in magnitude.
pub fn num(v: f64) -> String {
    let a = v.abs();
    if a == 0.0 || (1e-4..1e15).contains(&a) || !a.is_finite() {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

pub fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_layout() {
        let mut t = Table::new("demo", &["a", "b"]);
        t.push(vec![num(0.1), opt::<usize>(None)]);
        t.push(vec![num(1e-300), "x,y".into()]);
        let text = t.render().unwrap();
        assert_eq!(text, "# kernel-newton demo schema 1\na,b\n0.1,\n1e-300,\"x,y\"\n");
    }

    #[test]
    fn floats_roundtrip() {
        for v in [0.1, 1.0 / 3.0, 6.02e23, -2.5e-17, 0.0, 123456.789, f64::MIN_POSITIVE] {
            assert_eq!(num(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
    }
}
