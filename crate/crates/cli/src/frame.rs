//! Small tidy tables written as CSV.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rakekit::table::fmt_num;

use crate::CliError;

/// A header plus string rows, in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Frame {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

/// One CSV cell.
pub enum Cell<'a> {
    Num(f64),
    Int(usize),
    Str(&'a str),
}

impl From<f64> for Cell<'_> {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<usize> for Cell<'_> {
    fn from(v: usize) -> Self {
        Cell::Int(v)
    }
}

impl<'a> From<&'a str> for Cell<'a> {
    fn from(v: &'a str) -> Self {
        Cell::Str(v)
    }
}

impl<'a> From<&'a String> for Cell<'a> {
    fn from(v: &'a String) -> Self {
        Cell::Str(v)
    }
}

impl Frame {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Frame { header: header.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    pub fn push<'a>(&mut self, row: impl IntoIterator<Item = Cell<'a>>) {
        let row: Vec<String> = row
            .into_iter()
            .map(|c| match c {
                Cell::Num(v) => fmt_num(v),
                Cell::Int(v) => v.to_string(),
                Cell::Str(s) => s.to_string(),
            })
            .collect();
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn write<W: Write>(&self, w: W) -> Result<(), CliError> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(&self.header)?;
        for r in &self.rows {
            wr.write_record(r)?;
        }
        wr.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn write_path(&self, path: &Path) -> Result<(), CliError> {
        let f = File::create(path).map_err(CliError::io(path))?;
        self.write(BufWriter::new(f))
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv output is utf-8")
    }
}

/// Shorthand for building a row of cells.
#[macro_export]
macro_rules! row {
    ($($x:expr),* $(,)?) => { [$($crate::frame::Cell::from($x)),*] };
}
