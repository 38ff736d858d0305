//! CSV tables of the form `id,<class>,<class>,...` for labels and scores.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use super::FormatError;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Rows of a label or score table keyed by sample id.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelTable {
    pub ids: Vec<String>,
    pub class_names: Vec<String>,
    pub values: Matrix,
}

impl LabelTable {
    pub fn new(ids: Vec<String>, class_names: Vec<String>, values: Matrix) -> Result<Self> {
        if ids.len() != values.rows() {
            return Err(Error::shape("LabelTable ids", values.rows(), ids.len()));
        }
        if class_names.len() != values.cols() {
            return Err(Error::shape("LabelTable classes", values.cols(), class_names.len()));
        }
        Ok(Self { ids, class_names, values })
    }

    /// Ids `0..n` as strings.
    pub fn with_index_ids(class_names: Vec<String>, values: Matrix) -> Result<Self> {
        let ids = (0..values.rows()).map(|i| i.to_string()).collect();
        Self::new(ids, class_names, values)
    }
}

fn parse_table<R: Read>(reader: R, binary: bool) -> Result<LabelTable> {
    let mut rdr = ::csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut records = rdr.records();
    let header = match records.next() {
        None => return Err(FormatError::Header("file is empty".into()).into()),
        Some(r) => r.map_err(|e| csv_error(e, 1))?,
    };
    if header.len() < 2 || &header[0] != "id" {
        return Err(FormatError::Header("expected `id` followed by at least one class column".into()).into());
    }
    let class_names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let k = class_names.len();
    let mut seen = HashSet::new();
    let mut ids = Vec::new();
    let mut data = Vec::new();
    for (i, rec) in records.enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| csv_error(e, line))?;
        if rec.len() != k + 1 {
            return Err(FormatError::RaggedRow { line, expected: k + 1, found: rec.len() }.into());
        }
        let id = rec[0].to_string();
        if !seen.insert(id.clone()) {
            return Err(FormatError::DuplicateId { line, id }.into());
        }
        for (j, field) in rec.iter().skip(1).enumerate() {
            let field = field.trim();
            let v = if binary {
                match field {
                    "0" | "0.0" => 0.0,
                    "1" | "1.0" => 1.0,
                    _ => {
                        return Err(FormatError::NonBinaryLabel {
                            line,
                            column: class_names[j].clone(),
                            value: field.to_string(),
                        }
                        .into())
                    }
                }
            } else {
                let v: f64 = field.parse().map_err(|_| FormatError::Parse {
                    line,
                    message: format!("column {:?}: {field:?} is not a number", class_names[j]),
                })?;
                if !v.is_finite() {
                    return Err(FormatError::Parse {
                        line,
                        message: format!("column {:?}: {field:?} is not finite", class_names[j]),
                    }
                    .into());
                }
                v
            };
            data.push(v);
        }
        ids.push(id);
    }
    let values = Matrix::new(ids.len(), k, data)?;
    LabelTable::new(ids, class_names, values)
}

fn csv_error(e: ::csv::Error, line: u64) -> Error {
    let line = e.position().map_or(line, |p| p.line());
    FormatError::Parse { line, message: e.to_string() }.into()
}

/// Reads a binary label table; every value must be 0 or 1.
pub fn read_labels_csv(path: impl AsRef<Path>) -> Result<LabelTable> {
    parse_table(std::fs::File::open(path)?, true)
}

/// Reads a real-valued score or logit table.
pub fn read_scores_csv(path: impl AsRef<Path>) -> Result<LabelTable> {
    parse_table(std::fs::File::open(path)?, false)
}

/// Parses label CSV text.
pub fn parse_labels_csv(text: &str) -> Result<LabelTable> {
    parse_table(text.as_bytes(), true)
}

/// Parses score CSV text.
pub fn parse_scores_csv(text: &str) -> Result<LabelTable> {
    parse_table(text.as_bytes(), false)
}

/// Nine significant digits, printed in the shortest form that re-reads to
/// the rounded value.
pub fn format_score(v: f64) -> String {
    let rounded: f64 = format!("{v:.8e}").parse().expect("formatted float parses");
    if rounded == 0.0 {
        return "0".to_string();
    }
    format!("{rounded}")
}

fn write_table<W: Write>(writer: W, table: &LabelTable, fmt: impl Fn(f64) -> String) -> Result<()> {
    let mut w = ::csv::WriterBuilder::new().terminator(::csv::Terminator::Any(b'\n')).from_writer(writer);
    let header = std::iter::once("id").chain(table.class_names.iter().map(String::as_str));
    w.write_record(header).map_err(io_error)?;
    for (id, row) in table.ids.iter().zip(table.values.iter_rows()) {
        let fields = std::iter::once(id.clone()).chain(row.iter().map(|&v| fmt(v)));
        w.write_record(fields).map_err(io_error)?;
    }
    w.flush()?;
    Ok(())
}

fn io_error(e: ::csv::Error) -> Error {
    match e.into_kind() {
        ::csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::invalid("csv", format!("{other:?}")),
    }
}

pub fn scores_csv_string(table: &LabelTable) -> Result<String> {
    let mut buf = Vec::new();
    write_table(&mut buf, table, format_score)?;
    Ok(String::from_utf8(buf).expect("csv output is UTF-8"))
}

pub fn labels_csv_string(table: &LabelTable) -> Result<String> {
    crate::losses::check_binary_labels(&table.values)?;
    let mut buf = Vec::new();
    write_table(&mut buf, table, |v| if v == 1.0 { "1".into() } else { "0".into() })?;
    Ok(String::from_utf8(buf).expect("csv output is UTF-8"))
}

pub fn write_scores_csv(path: impl AsRef<Path>, table: &LabelTable) -> Result<()> {
    std::fs::write(path, scores_csv_string(table)?)?;
    Ok(())
}

pub fn write_labels_csv(path: impl AsRef<Path>, table: &LabelTable) -> Result<()> {
    std::fs::write(path, labels_csv_string(table)?)?;
    Ok(())
}
