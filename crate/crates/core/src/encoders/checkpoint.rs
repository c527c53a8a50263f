//! Binary checkpoints: `MSCLCKPT`, a UTF-8 config echo, then named tensors.
//!
//! All integers are u32 little-endian; tensor data is f32 little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MSCLCKPT";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub config_echo: String,
    pub blobs: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.blobs.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Blobs named `prefix/...`, with the prefix stripped.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Tensor)> + 'a {
        self.blobs.iter().filter_map(move |(n, t)| {
            n.strip_prefix(prefix)
                .and_then(|r| r.strip_prefix('/'))
                .map(|r| (r, t))
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        let put = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
        put(&mut out, self.config_echo.len());
        out.extend_from_slice(self.config_echo.as_bytes());
        put(&mut out, self.blobs.len());
        for (name, t) in &self.blobs {
            put(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put(&mut out, t.ndim());
            for &d in t.shape() {
                put(&mut out, d);
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::format(path, "missing MSCLCKPT header"));
        }
        let n = r.u32()?;
        let config_echo = r.string(n)?;
        let count = r.u32()?;
        let mut blobs = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = r.u32()?;
            let name = r.string(n)?;
            let ndim = r.u32()?;
            let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(4 * numel)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            blobs.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after last tensor"));
        }
        Ok(Checkpoint { config_echo, blobs })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.path, "checkpoint truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn string(&mut self, n: usize) -> Result<String> {
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::format(self.path, "name is not UTF-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_f32_exact() {
        let ck = Checkpoint {
            config_echo: "tau=0.07\n".into(),
            blobs: vec![
                ("query/w".into(), Tensor::new(vec![2, 2], vec![0.5, -1.25, 3.0, 0.1]).unwrap()),
                ("bank/rgb".into(), Tensor::zeros(&[0, 4])),
            ],
        };
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..8], b"MSCLCKPT");
        let back = Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap();
        assert_eq!(back.config_echo, ck.config_echo);
        assert_eq!(back.blobs[0].1.data()[3], 0.1f32 as f64);
        assert_eq!(back.blobs[1].1.shape(), &[0, 4]);
        assert_eq!(back.with_prefix("query").count(), 1);
    }

    #[test]
    fn truncation_is_reported() {
        let ck = Checkpoint {
            config_echo: String::new(),
            blobs: vec![("w".into(), Tensor::zeros(&[3]))],
        };
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra, Path::new("x")).is_err());
    }
}
