//! Binary artifacts for trained codebooks and encoded datasets.
//!
//! Every artifact opens with a four-byte magic and a little-endian `u32`
//! format version, followed by little-endian `u32` shape fields and the
//! payload. Codeword values are stored as `f32`; codes as `u8` when
//! `k <= 256` and `u16` otherwise.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::pq::{CodeMatrix, ProductCodebook};
use crate::vq::Codebook;

pub const FORMAT_VERSION: u32 = 1;
pub const CODEBOOK_MAGIC: [u8; 4] = *b"AVQC";
pub const PRODUCT_CODEBOOK_MAGIC: [u8; 4] = *b"APQC";
pub const CODES_MAGIC: [u8; 4] = *b"ACOD";

/// Largest `k` that fits the `u16` code width.
pub const MAX_CODEBOOK_SIZE: usize = 1 << 16;

/// A codebook artifact of either kind.
#[derive(Debug, Clone, PartialEq)]
pub enum CodebookArtifact {
    Vq(Codebook),
    Pq(ProductCodebook),
}

impl CodebookArtifact {
    /// Views the artifact as a product codebook (`M = 1` for VQ).
    pub fn to_product(&self) -> ProductCodebook {
        match self {
            Self::Vq(cb) => ProductCodebook::from_codebook(cb),
            Self::Pq(cb) => cb.clone(),
        }
    }
}

fn put_u32<W: Write>(w: &mut W, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{what} {v} exceeds u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<usize> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(truncated)?;
    Ok(u32::from_le_bytes(buf) as usize)
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::MalformedFile("artifact is truncated".into())
    } else {
        Error::Io(e)
    }
}

fn put_values<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    for &v in values {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn get_values<R: Read>(r: &mut R, count: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; count * 4];
    r.read_exact(&mut bytes).map_err(truncated)?;
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::MalformedFile("non-finite codeword value".into()));
    }
    Ok(values)
}

fn expect_end<R: Read>(r: &mut R) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(()),
        _ => Err(Error::MalformedFile("trailing bytes after artifact".into())),
    }
}

fn read_header<R: Read>(r: &mut R) -> Result<[u8; 4]> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    let version = get_u32(r)?;
    if version != FORMAT_VERSION as usize {
        return Err(Error::MalformedFile(format!(
            "unsupported format version {version}"
        )));
    }
    Ok(magic)
}

fn checked_product(factors: &[usize]) -> Result<usize> {
    factors
        .iter()
        .try_fold(1usize, |acc, &f| acc.checked_mul(f))
        .filter(|&p| p <= (1 << 34))
        .ok_or_else(|| Error::MalformedFile("artifact shape is implausibly large".into()))
}

pub fn write_codebook_to<W: Write>(mut w: W, cb: &Codebook) -> Result<()> {
    w.write_all(&CODEBOOK_MAGIC)?;
    put_u32(&mut w, FORMAT_VERSION as usize, "version")?;
    put_u32(&mut w, cb.k(), "k")?;
    put_u32(&mut w, cb.dim(), "d")?;
    put_values(&mut w, cb.as_slice())
}

pub fn write_product_codebook_to<W: Write>(mut w: W, cb: &ProductCodebook) -> Result<()> {
    w.write_all(&PRODUCT_CODEBOOK_MAGIC)?;
    put_u32(&mut w, FORMAT_VERSION as usize, "version")?;
    put_u32(&mut w, cb.num_subspaces(), "M")?;
    put_u32(&mut w, cb.k(), "k")?;
    put_u32(&mut w, cb.dim(), "d")?;
    put_values(&mut w, cb.as_slice())
}

pub fn write_artifact_to<W: Write>(w: W, artifact: &CodebookArtifact) -> Result<()> {
    match artifact {
        CodebookArtifact::Vq(cb) => write_codebook_to(w, cb),
        CodebookArtifact::Pq(cb) => write_product_codebook_to(w, cb),
    }
}

pub fn read_artifact_from<R: Read>(mut r: R) -> Result<CodebookArtifact> {
    let magic = read_header(&mut r)?;
    let artifact = match magic {
        CODEBOOK_MAGIC => {
            let k = get_u32(&mut r)?;
            let d = get_u32(&mut r)?;
            let values = get_values(&mut r, checked_product(&[k, d])?)?;
            CodebookArtifact::Vq(Codebook::new(k, d, values)?)
        }
        PRODUCT_CODEBOOK_MAGIC => {
            let m = get_u32(&mut r)?;
            let k = get_u32(&mut r)?;
            let d = get_u32(&mut r)?;
            if m == 0 || d % m != 0 {
                return Err(Error::MalformedFile(format!(
                    "dimension {d} is not divisible by M={m}"
                )));
            }
            let values = get_values(&mut r, checked_product(&[k, d])?)?;
            CodebookArtifact::Pq(ProductCodebook::new(m, k, d / m, values)?)
        }
        other => {
            return Err(Error::MalformedFile(format!(
                "unknown codebook magic {:?}",
                String::from_utf8_lossy(&other)
            )))
        }
    };
    expect_end(&mut r)?;
    Ok(artifact)
}

pub fn write_artifact(path: impl AsRef<Path>, artifact: &CodebookArtifact) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_artifact_to(&mut w, artifact)?;
    w.flush()?;
    Ok(())
}

pub fn read_artifact(path: impl AsRef<Path>) -> Result<CodebookArtifact> {
    read_artifact_from(BufReader::new(File::open(path)?))
}

pub fn write_codes_to<W: Write>(mut w: W, codes: &CodeMatrix) -> Result<()> {
    if codes.k() > MAX_CODEBOOK_SIZE {
        return Err(Error::InvalidArgument(format!(
            "k={} exceeds the largest storable codebook size {MAX_CODEBOOK_SIZE}",
            codes.k()
        )));
    }
    w.write_all(&CODES_MAGIC)?;
    put_u32(&mut w, FORMAT_VERSION as usize, "version")?;
    put_u32(&mut w, codes.len(), "n")?;
    put_u32(&mut w, codes.num_subspaces(), "M")?;
    put_u32(&mut w, codes.k(), "k")?;
    if codes.k() <= 256 {
        let bytes: Vec<u8> = codes.as_slice().iter().map(|&c| c as u8).collect();
        w.write_all(&bytes)?;
    } else {
        for &c in codes.as_slice() {
            w.write_all(&(c as u16).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_codes_from<R: Read>(mut r: R) -> Result<CodeMatrix> {
    if read_header(&mut r)? != CODES_MAGIC {
        return Err(Error::MalformedFile("not a code matrix artifact".into()));
    }
    let n = get_u32(&mut r)?;
    let m = get_u32(&mut r)?;
    let k = get_u32(&mut r)?;
    if k == 0 || k > MAX_CODEBOOK_SIZE {
        return Err(Error::MalformedFile(format!("invalid codebook size {k}")));
    }
    let count = checked_product(&[n, m])?;
    let width = if k <= 256 { 1 } else { 2 };
    let mut bytes = vec![0u8; count * width];
    r.read_exact(&mut bytes).map_err(truncated)?;
    let codes: Vec<u32> = if width == 1 {
        bytes.into_iter().map(u32::from).collect()
    } else {
        bytes
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]) as u32)
            .collect()
    };
    expect_end(&mut r)?;
    CodeMatrix::new(n, m, k, codes).map_err(|e| Error::MalformedFile(e.to_string()))
}

pub fn write_codes(path: impl AsRef<Path>, codes: &CodeMatrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_codes_to(&mut w, codes)?;
    w.flush()?;
    Ok(())
}

pub fn read_codes(path: impl AsRef<Path>) -> Result<CodeMatrix> {
    read_codes_from(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn codebook_layout() {
        let cb = Codebook::new(1, 2, vec![1.0, 2.0]).unwrap();
        let mut buf = Vec::new();
        write_codebook_to(&mut buf, &cb).unwrap();
        let mut expected = b"AVQC".to_vec();
        expected.extend([1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0]);
        expected.extend([0, 0, 0x80, 0x3F, 0, 0, 0, 0x40]);
        assert_eq!(buf, expected);
    }

    #[test]
    fn codes_use_narrow_width_for_small_k() {
        let narrow = CodeMatrix::new(2, 2, 256, vec![0, 255, 7, 1]).unwrap();
        let mut buf = Vec::new();
        write_codes_to(&mut buf, &narrow).unwrap();
        assert_eq!(buf.len(), 4 + 4 * 4 + 4);
        assert_eq!(read_codes_from(&buf[..]).unwrap(), narrow);

        let wide = CodeMatrix::new(2, 1, 257, vec![256, 3]).unwrap();
        let mut buf = Vec::new();
        write_codes_to(&mut buf, &wide).unwrap();
        assert_eq!(buf.len(), 4 + 4 * 4 + 4);
        assert_eq!(read_codes_from(&buf[..]).unwrap(), wide);
    }

    #[test]
    fn rejects_corrupt_artifacts() {
        let cb = Codebook::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut buf = Vec::new();
        write_codebook_to(&mut buf, &cb).unwrap();
        let short = &buf[..buf.len() - 1];
        assert!(matches!(read_artifact_from(short), Err(Error::MalformedFile(_))));
        let mut long = buf.clone();
        long.push(0);
        assert!(matches!(read_artifact_from(&long[..]), Err(Error::MalformedFile(_))));
        let mut bad_version = buf.clone();
        bad_version[4] = 9;
        assert!(matches!(read_artifact_from(&bad_version[..]), Err(Error::MalformedFile(_))));
        let mut bad_magic = buf;
        bad_magic[0] = b'X';
        assert!(matches!(read_artifact_from(&bad_magic[..]), Err(Error::MalformedFile(_))));
    }

    proptest! {
        #[test]
        fn product_codebook_round_trip(
            m in 1usize..4,
            k in 1usize..5,
            sub_dim in 1usize..4,
            seed in prop::collection::vec(-1e3f32..1e3, 48),
        ) {
            let data: Vec<f64> = (0..m * k * sub_dim).map(|i| seed[i % seed.len()] as f64).collect();
            let cb = ProductCodebook::new(m, k, sub_dim, data).unwrap();
            let artifact = CodebookArtifact::Pq(cb);
            let mut buf = Vec::new();
            write_artifact_to(&mut buf, &artifact).unwrap();
            let back = read_artifact_from(&buf[..]).unwrap();
            let mut again = Vec::new();
            write_artifact_to(&mut again, &back).unwrap();
            prop_assert_eq!(&back, &artifact);
            prop_assert_eq!(buf, again);
        }

        #[test]
        fn codes_round_trip(
            n in 0usize..20,
            m in 1usize..5,
            k in prop::sample::select(vec![1usize, 16, 256, 257, 4096]),
            raw in prop::collection::vec(any::<u32>(), 100),
        ) {
            let codes: Vec<u32> = (0..n * m).map(|i| raw[i] % k as u32).collect();
            let cm = CodeMatrix::new(n, m, k, codes).unwrap();
            let mut buf = Vec::new();
            write_codes_to(&mut buf, &cm).unwrap();
            prop_assert_eq!(read_codes_from(&buf[..]).unwrap(), cm);
        }
    }
}
