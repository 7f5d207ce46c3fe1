//! Delimited-text helpers. Every table the pipeline reads or writes starts
//! with a `# format_version: N` line followed by a header row.

use std::io::{Read, Write};

use thiserror::Error;

pub const TABLE_FORMAT_VERSION: u32 = 1;
const VERSION_PREFIX: &str = "# format_version:";

#[derive(Debug, Error)]
pub enum TableError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("unsupported table format_version `{0}`")]
    Version(String),
}

/// Reads the whole source, checks an optional version line and returns a CSV
/// reader over the remaining content. Lines starting with `#` are comments.
pub fn versioned_reader<R: Read>(mut source: R) -> Result<csv::Reader<std::io::Cursor<Vec<u8>>>, TableError> {
    let mut buf = Vec::new();
    source.read_to_end(&mut buf)?;
    let text = String::from_utf8_lossy(&buf);
    if let Some(first) = text.lines().next() {
        if let Some(v) = first.trim().strip_prefix(VERSION_PREFIX) {
            let v = v.trim();
            if v.parse::<u32>().ok() != Some(TABLE_FORMAT_VERSION) {
                return Err(TableError::Version(v.to_string()));
            }
        }
    }
    Ok(csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::None)
        .from_reader(std::io::Cursor::new(buf)))
}

/// A CSV writer that has already emitted the version line and header.
pub fn versioned_writer<W: Write>(mut sink: W, header: &[&str]) -> Result<csv::Writer<W>, TableError> {
    writeln!(sink, "{VERSION_PREFIX} {TABLE_FORMAT_VERSION}")?;
    let mut w = csv::WriterBuilder::new().from_writer(sink);
    w.write_record(header)?;
    Ok(w)
}

/// Renders an optional float; missing values are empty cells.
pub fn opt_f64(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}
