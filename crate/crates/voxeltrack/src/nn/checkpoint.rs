//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian, documented in docs/FORMATS.md):
//!
//! ```text
//! magic   8 bytes  "VXTCKPT\0"
//! version u32      currently 1
//! hlen    u32      header byte length
//! header  hlen     UTF-8 text, flat "key = value" lines
//! nblobs  u32
//! blob*   name_len u32, name UTF-8,
//!         ndim u32, dims u32 * ndim,
//!         values f32 * prod(dims)
//! ```
//!
//! Values are stored as 32-bit floats; loading widens back to f64.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"VXTCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    /// Ordered `key = value` pairs; serialized as plain text.
    pub header: Vec<(String, String)>,
    pub blobs: Vec<Blob>,
}

impl Checkpoint {
    pub fn header_get(&self, key: &str) -> Option<&str> {
        self.header
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn blob(&self, name: &str) -> Option<&Blob> {
        self.blobs.iter().find(|b| b.name == name)
    }

    fn header_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.header {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(v);
            s.push('\n');
        }
        s
    }

    fn parse_header(text: &str, path: &Path) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::data(
                    path,
                    Some(i + 1),
                    format!("checkpoint header line without `=`: {line:?}"),
                ));
            };
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);

    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    let header = ckpt.header_text();
    w.write_all(&(header.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(header.as_bytes()).map_err(io)?;
    w.write_all(&(ckpt.blobs.len() as u32).to_le_bytes()).map_err(io)?;
    for b in &ckpt.blobs {
        let n: usize = b.dims.iter().product();
        if n != b.values.len() {
            return Err(Error::shape(format!(
                "blob `{}`: dims {:?} disagree with {} values",
                b.name,
                b.dims,
                b.values.len()
            )));
        }
        w.write_all(&(b.name.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(b.name.as_bytes()).map_err(io)?;
        w.write_all(&(b.dims.len() as u32).to_le_bytes()).map_err(io)?;
        for &d in &b.dims {
            w.write_all(&(d as u32).to_le_bytes()).map_err(io)?;
        }
        for &v in &b.values {
            w.write_all(&(v as f32).to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);

    let read_exact = |r: &mut BufReader<File>, buf: &mut [u8], what: &str| -> Result<()> {
        r.read_exact(buf)
            .map_err(|_| Error::data(path, None, format!("checkpoint truncated in {what}")))
    };
    let read_u32 = |r: &mut BufReader<File>, what: &str| -> Result<u32> {
        let mut b = [0u8; 4];
        read_exact(r, &mut b, what)?;
        Ok(u32::from_le_bytes(b))
    };

    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::data(path, None, "not a checkpoint file (bad magic)"));
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(Error::data(
            path,
            None,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let hlen = read_u32(&mut r, "header length")? as usize;
    let mut hbuf = vec![0u8; hlen];
    read_exact(&mut r, &mut hbuf, "header")?;
    let htext = String::from_utf8(hbuf)
        .map_err(|_| Error::data(path, None, "checkpoint header is not UTF-8"))?;
    let header = Checkpoint::parse_header(&htext, path)?;

    let nblobs = read_u32(&mut r, "blob count")? as usize;
    let mut blobs = Vec::with_capacity(nblobs);
    for bi in 0..nblobs {
        let nlen = read_u32(&mut r, "blob name length")? as usize;
        let mut nbuf = vec![0u8; nlen];
        read_exact(&mut r, &mut nbuf, "blob name")?;
        let name = String::from_utf8(nbuf)
            .map_err(|_| Error::data(path, None, format!("blob {bi} name is not UTF-8")))?;
        let ndim = read_u32(&mut r, "blob rank")? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(read_u32(&mut r, "blob dims")? as usize);
        }
        let n: usize = dims.iter().product();
        let mut values = Vec::with_capacity(n);
        let mut vb = [0u8; 4];
        for _ in 0..n {
            read_exact(&mut r, &mut vb, &format!("values of blob `{name}`"))?;
            values.push(f32::from_le_bytes(vb) as f64);
        }
        blobs.push(Blob { name, dims, values });
    }
    Ok(Checkpoint { header, blobs })
}
