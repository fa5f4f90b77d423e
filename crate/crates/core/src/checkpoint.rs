//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MOCT" | version u32 | header_len u32 | header (UTF-8 JSON)
//! repeated, in lexicographic name order, until EOF:
//!   name_len u32 | name | frozen u8 | rank u32 | dims u32 x rank | f32 x prod(dims)
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MOCT";
pub const FORMAT_VERSION: u32 = 1;

/// Encodes a header string and parameter store.
pub fn encode(header: &str, params: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + header.len() + params.num_scalars() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for (name, p) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(p.frozen as u8);
        let shape = p.tensor.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for d in shape {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for x in p.tensor.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("truncated while reading {what} at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn decode(bytes: &[u8]) -> Result<(String, ParamStore)> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, not a MOCT checkpoint".into()));
    }
    let version = c.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let hlen = c.u32("header length")? as usize;
    let header = std::str::from_utf8(c.take(hlen, "header")?)
        .map_err(|e| Error::Format(format!("header is not UTF-8: {e}")))?
        .to_string();
    let mut params = ParamStore::new();
    let mut last: Option<String> = None;
    while !c.done() {
        let nlen = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(nlen, "name")?)
            .map_err(|e| Error::Format(format!("parameter name is not UTF-8: {e}")))?
            .to_string();
        if last.as_deref().is_some_and(|l| l >= name.as_str()) {
            return Err(Error::Format(format!("parameter {name} out of lexicographic order")));
        }
        let frozen = match c.take(1, "frozen flag")?[0] {
            0 => false,
            1 => true,
            f => return Err(Error::Format(format!("bad frozen flag {f} for {name}"))),
        };
        let rank = c.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32("dims")? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = c.take(n * 4, "tensor data")?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        params.insert(name.clone(), Tensor::new(shape, data)?, frozen)?;
        last = Some(name);
    }
    Ok((header, params))
}

/// Writes through a temporary sibling then renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let file_name = path.file_name().and_then(|s| s.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{file_name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save(path: &Path, header: &str, params: &ParamStore) -> Result<()> {
    write_atomic(path, &encode(header, params))
}

/// SHA-256 of a file's bytes, hex encoded.
pub fn file_hash(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    Ok(crate::params::hex(&Sha256::digest(fs::read(path)?)))
}

pub fn load(path: &Path) -> Result<(String, ParamStore)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}
