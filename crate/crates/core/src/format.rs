//! CCSE binary containers.
//!
//! Matrix layout (all integers little-endian):
//!
//! ```text
//! "CCSE" | u32 version = 1 | u32 dim | u64 count | count*dim f32 (row-major)
//! ```
//!
//! A tensor container is a plain sequence of named blocks, each a `u16` name
//! length, the UTF-8 name, then one matrix in the layout above. Embedding files
//! carry a sidecar `<stem>.ids` with one id per line.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CCSE";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 8;

pub fn encode_matrix(m: &Array2<f32>, out: &mut Vec<u8>) {
    let (count, dim) = m.dim();
    out.reserve(HEADER_LEN + count * dim * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(count as u64).to_le_bytes());
    for v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::TensorSizeMismatch(format!(
                "{field} (need {n} bytes at offset {}, file has {})",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, field: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().unwrap()))
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }

    fn matrix(&mut self) -> Result<Array2<f32>> {
        if self.buf.len() - self.pos < 4 || &self.buf[self.pos..self.pos + 4] != MAGIC {
            return Err(Error::UnrecognizedEmbeddingFile("bad magic".into()));
        }
        self.pos += 4;
        let version = self.u32("version")?;
        if version != VERSION {
            return Err(Error::UnrecognizedEmbeddingFile(format!(
                "unsupported version {version}"
            )));
        }
        let dim = self.u32("dim")? as usize;
        let count = self.u64("count")?;
        let values = usize::try_from(count)
            .ok()
            .and_then(|c| c.checked_mul(dim))
            .and_then(|v| v.checked_mul(4).map(|b| (v, b)));
        let (n_values, n_bytes) = values.ok_or_else(|| {
            Error::TensorSizeMismatch(format!("count ({count} rows of dim {dim} overflows)"))
        })?;
        let payload = self.take(n_bytes, "payload")?;
        let mut data = Vec::with_capacity(n_values);
        data.extend(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap())),
        );
        Ok(Array2::from_shape_vec((count as usize, dim), data).expect("shape checked"))
    }
}

pub fn decode_matrix(bytes: &[u8]) -> Result<Array2<f32>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let m = r.matrix()?;
    if !r.done() {
        return Err(Error::TensorSizeMismatch(format!(
            "payload ({} trailing bytes after {} rows)",
            bytes.len() - r.pos,
            m.nrows()
        )));
    }
    Ok(m)
}

pub fn ids_path(path: &Path) -> PathBuf {
    path.with_extension("ids")
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn write_matrix(path: impl AsRef<Path>, m: &Array2<f32>) -> Result<()> {
    let mut buf = Vec::new();
    encode_matrix(m, &mut buf);
    write_file(path.as_ref(), &buf)
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Array2<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_matrix(&bytes)
}

/// Writes an embedding matrix and its id sidecar.
pub fn write_embeddings(path: impl AsRef<Path>, m: &Array2<f32>, ids: &[String]) -> Result<()> {
    let path = path.as_ref();
    if ids.len() != m.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "{} ids for {} rows",
            ids.len(),
            m.nrows()
        )));
    }
    if let Some(bad) = ids.iter().find(|id| id.contains('\n')) {
        return Err(Error::InvalidConfig(format!("id contains a newline: {bad:?}")));
    }
    write_matrix(path, m)?;
    let mut sidecar = String::with_capacity(ids.iter().map(|s| s.len() + 1).sum());
    for id in ids {
        sidecar.push_str(id);
        sidecar.push('\n');
    }
    write_file(&ids_path(path), sidecar.as_bytes())
}

/// Reads an embedding matrix and its id sidecar, checking they agree in count.
pub fn read_embeddings(path: impl AsRef<Path>) -> Result<(Array2<f32>, Vec<String>)> {
    let path = path.as_ref();
    let m = read_matrix(path)?;
    let sidecar = ids_path(path);
    let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let ids: Vec<String> = text.lines().map(str::to_owned).collect();
    if ids.len() != m.nrows() {
        return Err(Error::TensorSizeMismatch(format!(
            "ids ({} ids in {} for {} rows)",
            ids.len(),
            sidecar.display(),
            m.nrows()
        )));
    }
    Ok((m, ids))
}

pub fn encode_blocks(blocks: &[(String, Array2<f32>)]) -> Vec<u8> {
    let mut buf = Vec::new();
    for (name, m) in blocks {
        let name_len = u16::try_from(name.len()).expect("block name longer than u16::MAX");
        buf.extend_from_slice(&name_len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        encode_matrix(m, &mut buf);
    }
    buf
}

pub fn decode_blocks(bytes: &[u8]) -> Result<Vec<(String, Array2<f32>)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let mut blocks = Vec::new();
    while !r.done() {
        let len = r.u16("block name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "block name")?)
            .map_err(|_| Error::UnrecognizedEmbeddingFile("block name is not UTF-8".into()))?
            .to_owned();
        let m = r.matrix().map_err(|e| match e {
            Error::TensorSizeMismatch(field) => Error::TensorSizeMismatch(format!("{name}: {field}")),
            Error::UnrecognizedEmbeddingFile(why) => {
                Error::UnrecognizedEmbeddingFile(format!("block {name}: {why}"))
            }
            other => other,
        })?;
        blocks.push((name, m));
    }
    Ok(blocks)
}

pub fn write_blocks(path: impl AsRef<Path>, blocks: &[(String, Array2<f32>)]) -> Result<()> {
    write_file(path.as_ref(), &encode_blocks(blocks))
}

pub fn read_blocks(path: impl AsRef<Path>) -> Result<Vec<(String, Array2<f32>)>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_blocks(&bytes)
}
