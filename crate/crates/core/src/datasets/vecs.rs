//! `.fvecs` / `.ivecs` containers: each record is a little-endian `i32`
//! dimension followed by that many little-endian `f32` (or `i32`) values.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};

pub fn read_fvecs(path: impl AsRef<Path>) -> Result<Dataset> {
    let file = File::open(path)?;
    read_fvecs_from(BufReader::new(file))
}

pub fn read_fvecs_from<R: Read>(reader: R) -> Result<Dataset> {
    let (d, raw) = read_records(reader, "fvecs")?;
    let values = raw.into_iter().map(|bits| f32::from_bits(bits) as f64).collect();
    Dataset::new(d, values)
}

pub fn write_fvecs(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_fvecs_to(&mut w, dataset)?;
    w.flush()?;
    Ok(())
}

/// Values are stored as `f32`; rows that came from an fvecs file round-trip
/// byte-for-byte.
pub fn write_fvecs_to<W: Write>(mut writer: W, dataset: &Dataset) -> Result<()> {
    let d = dim_header(dataset.dim())?;
    for row in dataset.rows() {
        writer.write_all(&d.to_le_bytes())?;
        for &v in row {
            writer.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_ivecs(path: impl AsRef<Path>) -> Result<Vec<Vec<i32>>> {
    let file = File::open(path)?;
    read_ivecs_from(BufReader::new(file))
}

pub fn read_ivecs_from<R: Read>(reader: R) -> Result<Vec<Vec<i32>>> {
    let (d, raw) = read_records(reader, "ivecs")?;
    if d == 0 {
        return Ok(Vec::new());
    }
    Ok(raw
        .chunks_exact(d)
        .map(|r| r.iter().map(|&b| b as i32).collect())
        .collect())
}

pub fn write_ivecs(path: impl AsRef<Path>, rows: &[Vec<i32>]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_ivecs_to(&mut w, rows)?;
    w.flush()?;
    Ok(())
}

pub fn write_ivecs_to<W: Write>(mut writer: W, rows: &[Vec<i32>]) -> Result<()> {
    if let Some(first) = rows.first() {
        if rows.iter().any(|r| r.len() != first.len()) {
            return Err(Error::InvalidArgument("ivecs rows must share one length".into()));
        }
    }
    for row in rows {
        writer.write_all(&dim_header(row.len())?.to_le_bytes())?;
        for &v in row {
            writer.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn dim_header(d: usize) -> Result<i32> {
    i32::try_from(d).map_err(|_| Error::InvalidArgument(format!("dimension {d} exceeds i32")))
}

/// Reads all records as raw 32-bit words; returns `(d, words)`.
fn read_records<R: Read>(mut reader: R, what: &str) -> Result<(usize, Vec<u32>)> {
    let mut d: Option<usize> = None;
    let mut words = Vec::new();
    let mut record = 0usize;
    loop {
        let mut header = [0u8; 4];
        match read_exact_or_eof(&mut reader, &mut header)? {
            ReadOutcome::Eof => break,
            ReadOutcome::Partial => {
                return Err(Error::MalformedFile(format!(
                    "{what}: truncated header in record {record}"
                )))
            }
            ReadOutcome::Full => {}
        }
        let dim = i32::from_le_bytes(header);
        if dim <= 0 {
            return Err(Error::MalformedFile(format!(
                "{what}: record {record} has dimension {dim}"
            )));
        }
        let dim = dim as usize;
        match d {
            None => d = Some(dim),
            Some(prev) if prev != dim => {
                return Err(Error::MalformedFile(format!(
                    "{what}: record {record} has dimension {dim}, expected {prev}"
                )))
            }
            Some(_) => {}
        }
        let mut body = vec![0u8; dim * 4];
        if !matches!(read_exact_or_eof(&mut reader, &mut body)?, ReadOutcome::Full) {
            return Err(Error::MalformedFile(format!(
                "{what}: truncated body in record {record}"
            )));
        }
        words.extend(
            body.chunks_exact(4)
                .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]])),
        );
        record += 1;
    }
    Ok((d.unwrap_or(0), words))
}

enum ReadOutcome {
    Full,
    Partial,
    Eof,
}

fn read_exact_or_eof<R: Read>(reader: &mut R, buf: &mut [u8]) -> Result<ReadOutcome> {
    let mut filled = 0;
    while filled < buf.len() {
        match reader.read(&mut buf[filled..]) {
            Ok(0) => {
                return Ok(if filled == 0 {
                    ReadOutcome::Eof
                } else {
                    ReadOutcome::Partial
                })
            }
            Ok(k) => filled += k,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(ReadOutcome::Full)
}
