//! CSV and JSON serialization of experiment results.
//!
//! Floats are written in Rust's shortest round-trip form, so identical
//! results give byte-identical files. Missing values are empty CSV fields.

use serde::Serialize;

use crate::error::{Error, Result};

/// A named output file and its bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifact {
    pub name: String,
    pub bytes: Vec<u8>,
}

/// Rows of string cells under a fixed header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn header(&self) -> &[String] {
        &self.header
    }

    pub fn rows(&self) -> &[Vec<String>] {
        &self.rows
    }

    pub fn push(&mut self, row: Vec<String>) -> Result<()> {
        if row.len() != self.header.len() {
            return Err(Error::shape(format!(
                "row of {} cells for {} columns",
                row.len(),
                self.header.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(&self.header).map_err(csv_error)?;
        for row in &self.rows {
            w.write_record(row).map_err(csv_error)?;
        }
        w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
    }

    pub fn artifact(&self, name: &str) -> Result<Artifact> {
        Ok(Artifact {
            name: name.to_string(),
            bytes: self.to_csv()?,
        })
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn json_artifact<T: Serialize + ?Sized>(name: &str, value: &T) -> Result<Artifact> {
    Ok(Artifact {
        name: name.to_string(),
        bytes: to_json(value)?,
    })
}

pub fn num(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v}")
    }
}

pub fn opt_num(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

pub fn opt_bool(v: Option<bool>) -> String {
    v.map(|b| b.to_string()).unwrap_or_default()
}

/// Indices joined with `;`.
pub fn index_list(v: &[usize]) -> String {
    v.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(";")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let mut t = Table::new(&["a", "b"]);
        t.push(vec![num(0.1), opt_num(None)]).unwrap();
        t.push(vec![index_list(&[1, 2]), "x,y".into()]).unwrap();
        assert_eq!(String::from_utf8(t.to_csv().unwrap()).unwrap(), "a,b\n0.1,\n1;2,\"x,y\"\n");
        assert!(t.push(vec!["1".into()]).is_err());
    }

    #[test]
    fn number_format() {
        assert_eq!(num(1.0), "1");
        assert_eq!(num(0.015000000000000001), "0.015000000000000001");
        assert_eq!(num(f64::INFINITY), "inf");
        assert_eq!(opt_bool(Some(true)), "true");
    }
}
