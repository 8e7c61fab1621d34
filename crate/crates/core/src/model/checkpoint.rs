//! Single-file weight container.
//!
//! Layout, little-endian:
//! `"RVIT"` · version `u32` · JSON length `u32` · JSON [`NetworkConfig`] ·
//! then for each tensor in declaration order: name length `u32`, UTF-8
//! name, rank `u32`, extents `u64 × rank`, values `f64 × numel`.

use std::io::{Read, Write};
use std::path::Path;

use crate::numkernel::Tensor;
use crate::{Error, Result};

use super::{Network, NetworkConfig};

const MAGIC: &[u8; 4] = b"RVIT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut out: W, net: &Network) -> Result<()> {
    let json = serde_json::to_vec(&net.config)?;
    out.write_all(MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u32).to_le_bytes())?;
    out.write_all(&json)?;
    let mut tensors: Vec<(String, &Tensor)> = Vec::new();
    net.encoder.visit(&mut |name, t| tensors.push((name, t)));
    net.head.visit(&mut |name, t| tensors.push((name, t)));
    for (name, t) in tensors {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    file: &'a str,
}

impl<'a> Cursor<'a> {
    fn fail<T>(&self, reason: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            file: self.file.to_string(),
            offset: self.pos as u64,
            reason: reason.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return self.fail(format!("truncated while reading {what}"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint(bytes: &[u8], file: &str) -> Result<Network> {
    let mut c = Cursor { buf: bytes, pos: 0, file };
    if c.take(4, "magic")? != MAGIC {
        c.pos = 0;
        return c.fail("missing RVIT magic");
    }
    let version = c.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return c.fail(format!("unsupported version {version}"));
    }
    let len = c.u32("config length")? as usize;
    let json = c.take(len, "config")?;
    let config: NetworkConfig = match serde_json::from_slice(json) {
        Ok(cfg) => cfg,
        Err(e) => return c.fail(format!("bad config JSON: {e}")),
    };
    let template = Network::new(config.clone(), 0)?;
    let mut expected: Vec<(String, Vec<usize>)> = Vec::new();
    template.encoder.visit(&mut |n, t| expected.push((n, t.shape().to_vec())));
    template.head.visit(&mut |n, t| expected.push((n, t.shape().to_vec())));

    let mut loaded = Vec::with_capacity(expected.len());
    for (name, shape) in &expected {
        let nlen = c.u32("tensor name length")? as usize;
        let got = c.take(nlen, "tensor name")?;
        if got != name.as_bytes() {
            return c.fail(format!(
                "expected tensor {name}, found {}",
                String::from_utf8_lossy(got)
            ));
        }
        let rank = c.u32("tensor rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(c.u64("tensor extent")? as usize);
        }
        if &dims != shape {
            return c.fail(format!("tensor {name} has shape {dims:?}, expected {shape:?}"));
        }
        let numel: usize = dims.iter().product();
        let raw = c.take(numel * 8, "tensor values")?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        loaded.push(Tensor::new(dims, data)?);
    }
    if c.pos != bytes.len() {
        return c.fail("trailing bytes after last tensor");
    }
    let mut it = loaded.into_iter();
    let mut encoder = template.encoder;
    encoder.visit_mut(&mut |t| *t = it.next().expect("counted"));
    let mut head = template.head;
    head.visit_mut(&mut |t| *t = it.next().expect("counted"));
    Network::from_parts(config, encoder, head)
}

pub fn save_checkpoint(path: impl AsRef<Path>, net: &Network) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, net)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    read_checkpoint(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HeadConfig, ModelConfig};

    fn net() -> Network {
        Network::new(
            NetworkConfig {
                encoder: ModelConfig::new(8, 4, 2, 2, 2, 1, 4, 4),
                head: HeadConfig::Segmentation { classes: 3, width: 4 },
            },
            7,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let n = net();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &n).unwrap();
        assert_eq!(&buf[..4], b"RVIT");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        let back = read_checkpoint(&buf, "mem").unwrap();
        assert_eq!(back, n);
    }

    #[test]
    fn truncation_reports_offset() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &net()).unwrap();
        buf.truncate(buf.len() - 3);
        match read_checkpoint(&buf, "mem") {
            Err(Error::Format { offset, .. }) => assert!(offset > 12),
            other => panic!("expected format error, got {other:?}"),
        }
        assert!(matches!(read_checkpoint(b"NOPE", "mem"), Err(Error::Format { offset: 0, .. })));
    }
}
