//! Byte-level corpus: token id stream (u16), reserved special ids, and
//! document boundaries, with a little-endian binary file format.

use std::io::{Read, Write};
use std::path::Path;

use crate::CliError;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const RESERVED: u32 = 2;
/// 256 byte values plus pad and bos.
pub const BYTE_VOCAB: usize = 258;

const MAGIC: &[u8; 4] = b"PHC1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub vocab_size: u32,
    pub reserved: u32,
    /// End offset of each document in the id stream, strictly increasing
    /// (an empty trailing document may repeat the final offset is not
    /// allowed; empty documents still get a boundary entry at their start).
    pub boundaries: Vec<u64>,
    pub ids: Vec<u16>,
}

impl Corpus {
    pub fn from_documents(docs: &[Vec<u8>]) -> Corpus {
        let mut ids = Vec::new();
        let mut boundaries = Vec::with_capacity(docs.len());
        for doc in docs {
            ids.extend(doc.iter().map(|&b| b as u16 + RESERVED as u16));
            boundaries.push(ids.len() as u64);
        }
        Corpus {
            vocab_size: BYTE_VOCAB as u32,
            reserved: RESERVED,
            boundaries,
            ids,
        }
    }

    pub fn tokens(&self) -> Vec<u32> {
        self.ids.iter().map(|&x| x as u32).collect()
    }

    /// Bytes back out; special ids are dropped.
    pub fn detokenize(ids: &[u32]) -> Vec<u8> {
        ids.iter()
            .filter(|&&x| x >= RESERVED && x < BYTE_VOCAB as u32)
            .map(|&x| (x - RESERVED) as u8)
            .collect()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        for &id in &self.ids {
            if id as u32 >= self.vocab_size {
                return Err(CliError::Config(format!(
                    "corpus id {id} out of range for vocab {}",
                    self.vocab_size
                )));
            }
        }
        let mut prev: Option<u64> = None;
        for &b in &self.boundaries {
            if b > self.ids.len() as u64 {
                return Err(CliError::Config(format!("boundary {b} past stream end")));
            }
            if let Some(p) = prev {
                if b < p {
                    return Err(CliError::Config("boundaries must be non-decreasing".into()));
                }
            }
            prev = Some(b);
        }
        Ok(())
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&1u16.to_le_bytes())?;
        w.write_all(&self.vocab_size.to_le_bytes())?;
        w.write_all(&self.reserved.to_le_bytes())?;
        w.write_all(&(self.boundaries.len() as u64).to_le_bytes())?;
        for &b in &self.boundaries {
            w.write_all(&b.to_le_bytes())?;
        }
        w.write_all(&(self.ids.len() as u64).to_le_bytes())?;
        for &id in &self.ids {
            w.write_all(&id.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Corpus, CliError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(CliError::Io)?;
        if &magic != MAGIC {
            return Err(CliError::Config("not a corpus file (bad magic)".into()));
        }
        let version = read_u16(&mut r)?;
        if version != 1 {
            return Err(CliError::Config(format!("unsupported corpus version {version}")));
        }
        let vocab_size = read_u32(&mut r)?;
        let reserved = read_u32(&mut r)?;
        let n_bounds = read_u64(&mut r)? as usize;
        let mut boundaries = Vec::with_capacity(n_bounds);
        for _ in 0..n_bounds {
            boundaries.push(read_u64(&mut r)?);
        }
        let n_tokens = read_u64(&mut r)? as usize;
        let mut ids = Vec::with_capacity(n_tokens);
        for _ in 0..n_tokens {
            ids.push(read_u16(&mut r)?);
        }
        let corpus = Corpus {
            vocab_size,
            reserved,
            boundaries,
            ids,
        };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let f = std::fs::File::create(path).map_err(CliError::Io)?;
        self.write_to(std::io::BufWriter::new(f)).map_err(CliError::Io)
    }

    pub fn load(path: &Path) -> Result<Corpus, CliError> {
        let f = std::fs::File::open(path)
            .map_err(|e| CliError::Config(format!("cannot open corpus {}: {e}", path.display())))?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

fn read_u16(r: &mut impl Read) -> Result<u16, CliError> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b).map_err(CliError::Io)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32, CliError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(CliError::Io)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, CliError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(CliError::Io)?;
    Ok(u64::from_le_bytes(b))
}

/// Read input files as raw bytes and tokenize; one document per file,
/// boundaries at file edges.
pub fn ingest_paths(paths: &[std::path::PathBuf]) -> Result<Corpus, CliError> {
    let mut docs = Vec::with_capacity(paths.len());
    for p in paths {
        let bytes = std::fs::read(p)
            .map_err(|e| CliError::Config(format!("cannot read input {}: {e}", p.display())))?;
        docs.push(bytes);
    }
    Ok(Corpus::from_documents(&docs))
}

/// FNV-1a over raw bytes, for run-manifest fingerprints.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_identity_with_reserved_offset() {
        let c = Corpus::from_documents(&[b"abc".to_vec()]);
        assert_eq!(c.ids, vec![99, 100, 101]);
        assert_eq!(c.boundaries, vec![3]);
    }

    #[test]
    fn empty_document_gets_a_boundary() {
        let c = Corpus::from_documents(&[Vec::new()]);
        assert!(c.ids.is_empty());
        assert_eq!(c.boundaries, vec![0]);
    }

    #[test]
    fn roundtrip_through_bytes_is_exact() {
        let docs = vec![b"hello \xff\x00 world".to_vec(), b"second doc".to_vec()];
        let c = Corpus::from_documents(&docs);
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        let c2 = Corpus::read_from(&buf[..]).unwrap();
        assert_eq!(c, c2);
        let bytes = Corpus::detokenize(&c2.tokens());
        let expected: Vec<u8> = docs.concat();
        assert_eq!(bytes, expected);
    }

    #[test]
    fn validation_rejects_garbage() {
        let mut c = Corpus::from_documents(&[b"ok".to_vec()]);
        c.ids.push(60_000);
        assert!(c.validate().is_err());
    }
}
