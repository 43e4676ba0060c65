//! Raw tables: a header and string cells, read from and written to CSV.
//!
//! Cells are kept verbatim; numeric interpretation happens against a schema.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: Vec<String>) -> Self {
        Self { header, rows: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn width(&self) -> usize {
        self.header.len()
    }

    pub fn push(&mut self, row: Vec<String>) -> Result<()> {
        if row.len() != self.header.len() {
            return Err(Error::Schema(format!("row has {} cells, header has {}", row.len(), self.header.len())));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("no column named {name:?}")))
    }

    /// Parses every cell of column `idx` as a finite number.
    pub fn numeric_column(&self, idx: usize) -> Result<Vec<f64>> {
        let name = &self.header[idx];
        self.rows.iter().map(|r| parse_number(name, &r[idx])).collect()
    }

    pub fn from_reader<R: Read>(reader: R, delimiter: u8) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().delimiter(delimiter).has_headers(true).from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
        let mut table = Table::new(header);
        for rec in rdr.records() {
            let rec = rec?;
            table.push(rec.iter().map(str::to_owned).collect())?;
        }
        Ok(table)
    }

    pub fn to_writer<W: Write>(&self, writer: W, delimiter: u8) -> Result<()> {
        let mut w = csv::WriterBuilder::new().delimiter(delimiter).from_writer(writer);
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path, delimiter: u8) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::from_reader(std::io::BufReader::new(file), delimiter)
    }

    pub fn write_csv(&self, path: &Path, delimiter: u8) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.to_writer(std::io::BufWriter::new(file), delimiter)
    }

    pub fn to_csv_string(&self, delimiter: u8) -> Result<String> {
        let mut buf = Vec::new();
        self.to_writer(&mut buf, delimiter)?;
        String::from_utf8(buf).map_err(|e| Error::InvalidArgument(e.to_string()))
    }
}

pub fn parse_number(column: &str, cell: &str) -> Result<f64> {
    match cell.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::Parse { column: column.to_owned(), value: cell.to_owned() }),
    }
}

/// Shortest representation that parses back to the same bits.
pub fn format_number(v: f64) -> String {
    format!("{v}")
}
