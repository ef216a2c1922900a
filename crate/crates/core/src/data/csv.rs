//! Reader for the seizure-recognition CSV layout: an optional header row,
//! an optional leading id column, `T_in` numeric feature columns and a
//! trailing class label in `1..=5`.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RawRecord {
    pub id: Option<String>,
    pub features: Vec<f64>,
    pub label5: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CsvOptions {
    pub has_header: bool,
    pub id_column: bool,
}

impl Default for CsvOptions {
    /// Matches the public file: header row plus an id column.
    fn default() -> Self {
        CsvOptions {
            has_header: true,
            id_column: true,
        }
    }
}

pub fn parse_csv(path: &Path, opts: CsvOptions) -> Result<Vec<RawRecord>> {
    let file = File::open(path)?;
    parse_reader(file, path, opts)
}

pub fn parse_reader(reader: impl Read, path: &Path, opts: CsvOptions) -> Result<Vec<RawRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let err = |line: u64, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };

    let mut records = Vec::new();
    let mut width: Option<usize> = None;
    let lead = usize::from(opts.id_column);
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(i as u64 + 1, |p| p.line());
            err(line, e.to_string())
        })?;
        let line = row.position().map_or(i as u64 + 1, |p| p.line());
        if i == 0 && opts.has_header {
            continue;
        }
        if row.len() == 1 && row.get(0) == Some("") {
            continue;
        }
        let expected = *width.get_or_insert(row.len());
        if row.len() != expected {
            return Err(err(
                line,
                format!("expected {expected} columns, found {}", row.len()),
            ));
        }
        if row.len() < lead + 2 {
            return Err(err(line, "row needs at least one feature and a label".into()));
        }
        let id = opts.id_column.then(|| row[0].to_string());
        let last = row.len() - 1;
        let features = (lead..last)
            .map(|c| {
                row[c].parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                    err(line, format!("column {}: non-numeric feature `{}`", c + 1, &row[c]))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        let label5 = row[last]
            .parse::<f64>()
            .ok()
            .filter(|v| v.fract() == 0.0 && (1.0..=5.0).contains(v))
            .map(|v| v as u8)
            .ok_or_else(|| err(line, format!("label `{}` not in 1..=5", &row[last])))?;
        records.push(RawRecord {
            id,
            features,
            label5,
        });
    }
    if records.is_empty() {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    Ok(records)
}

/// Class 1 (seizure activity) becomes 1; classes 2 to 5 become 0.
pub fn binarize_labels(records: &[RawRecord]) -> Vec<u8> {
    records.iter().map(|r| u8::from(r.label5 == 1)).collect()
}
