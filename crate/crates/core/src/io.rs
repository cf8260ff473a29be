//! CSV tables and trace files.

use std::fs;
use std::path::Path;

use crate::diagnostics::Trace;
use crate::error::{ensure, Error, Result};

/// Header plus string cells; floats are written in shortest round-trip form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: AsRef<str>>(header: &[S]) -> Self {
        Self {
            header: header.iter().map(|h| h.as_ref().to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn header(&self) -> &[String] {
        &self.header
    }

    pub fn rows(&self) -> &[Vec<String>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn push(&mut self, row: Vec<String>) -> Result<()> {
        ensure!(
            row.len() == self.header.len(),
            Dimension,
            "row has {} fields, header has {}",
            row.len(),
            self.header.len()
        );
        self.rows.push(row);
        Ok(())
    }

    pub fn push_f64(&mut self, row: &[f64]) -> Result<()> {
        self.push(row.iter().map(|&v| fmt_f64(v)).collect())
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("no column named {name:?}")))
    }

    pub fn column_f64(&self, name: &str) -> Result<Vec<f64>> {
        let j = self.column_index(name)?;
        self.rows.iter().map(|r| parse_f64(&r[j])).collect()
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        let mut t = Table { header, rows: Vec::new() };
        for rec in r.records() {
            t.push(rec?.iter().map(str::to_string).collect())?;
        }
        Ok(t)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv_string()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_csv_str(&fs::read_to_string(path)?)
    }
}

pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v}")
    }
}

pub fn parse_f64(s: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::Data(format!("not a number: {s:?}")))
}

pub fn trace_table(trace: &Trace) -> Result<Table> {
    let mut t = Table::new(trace.names());
    for i in 0..trace.len() {
        t.push_f64(trace.row(i))?;
    }
    Ok(t)
}

pub fn trace_from_table(table: &Table, seed: u64) -> Result<Trace> {
    let mut data = Vec::with_capacity(table.len() * table.header.len());
    for r in &table.rows {
        for v in r {
            data.push(parse_f64(v)?);
        }
    }
    Trace::new(table.header.clone(), data, seed)
}

/// Numeric design and response read from a CSV whose last column is the
/// response.
pub fn read_xy(text: &str) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let t = Table::from_csv_str(text)?;
    let p = t.header.len();
    ensure!(p >= 2, Data, "need at least one feature column and a response column");
    ensure!(!t.is_empty(), Data, "no data rows");
    let mut xs = Vec::with_capacity(t.len());
    let mut ys = Vec::with_capacity(t.len());
    for r in &t.rows {
        let vals = r.iter().map(|v| parse_f64(v)).collect::<Result<Vec<_>>>()?;
        ys.push(vals[p - 1]);
        xs.push(vals[..p - 1].to_vec());
    }
    Ok((xs, ys))
}
