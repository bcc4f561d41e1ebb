//! PSAR: the single binary container used for checkpoints and spectra.
//!
//! Layout (little-endian):
//!   magic "PSAR" | version u8 = 1 | record count u32
//!   per record: name-length u16 | UTF-8 name | dtype u8 (0 = f32)
//!               | ndim u8 | dims u32 x ndim | payload f32 x product(dims)
//!
//! Record order is preserved, names are unique, round trips are bitwise.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"PSAR";
const VERSION: u8 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PsarFile {
    records: Vec<(String, Tensor)>,
}

impl PsarFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|(n, _)| n.as_str())
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if name.len() > u16::MAX as usize {
            return Err(Error::format("psar", "record name too long"));
        }
        if self.get(&name).is_some() {
            return Err(Error::format("psar", format!("duplicate record name `{name}`")));
        }
        self.records.push((name, tensor));
        Ok(())
    }

    pub fn push_scalar(&mut self, name: impl Into<String>, value: f32) -> Result<()> {
        self.push(name, Tensor::new(vec![1], vec![value])?)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::format("psar", format!("missing record `{name}`")))
    }

    pub fn scalar(&self, name: &str) -> Result<f32> {
        let t = self.require(name)?;
        if t.len() != 1 {
            return Err(Error::format("psar", format!("record `{name}` is not a scalar")));
        }
        Ok(t.data()[0])
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&[VERSION])?;
        w.write_all(&(self.records.len() as u32).to_le_bytes())?;
        for (name, t) in &self.records {
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[DTYPE_F32, t.shape().len() as u8])?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::format("psar", "bad magic"));
        }
        let mut hdr = [0u8; 5];
        r.read_exact(&mut hdr)?;
        if hdr[0] != VERSION {
            return Err(Error::format("psar", format!("unsupported version {}", hdr[0])));
        }
        let count = u32::from_le_bytes([hdr[1], hdr[2], hdr[3], hdr[4]]) as usize;
        let mut out = PsarFile::new();
        for _ in 0..count {
            let mut nl = [0u8; 2];
            r.read_exact(&mut nl)?;
            let mut name = vec![0u8; u16::from_le_bytes(nl) as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::format("psar", "record name is not UTF-8"))?;
            let mut meta = [0u8; 2];
            r.read_exact(&mut meta)?;
            if meta[0] != DTYPE_F32 {
                return Err(Error::format("psar", format!("unsupported dtype {}", meta[0])));
            }
            let ndim = meta[1] as usize;
            if ndim == 0 {
                return Err(Error::format("psar", "zero-dimensional record"));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut db = [0u8; 4];
                r.read_exact(&mut db)?;
                shape.push(u32::from_le_bytes(db) as usize);
            }
            let n: usize = shape.iter().product();
            let mut payload = vec![0u8; n * 4];
            r.read_exact(&mut payload)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            out.push(name, Tensor::new(shape, data)?)?;
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let mut f = PsarFile::new();
        f.push("a", Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.0, 0.0, 5.5, -0.125]).unwrap())
            .unwrap();
        f.push_scalar("meta/T", 1000.0).unwrap();
        let mut buf = Vec::new();
        f.write_to(&mut buf).unwrap();
        let g = PsarFile::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(f, g);
        let mut buf2 = Vec::new();
        g.write_to(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut f = PsarFile::new();
        f.push_scalar("x", 1.0).unwrap();
        assert!(f.push_scalar("x", 2.0).is_err());
    }

    #[test]
    fn bad_magic_rejected() {
        let buf = b"NOPE\x01\x00\x00\x00\x00".to_vec();
        assert!(PsarFile::read_from(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn truncated_payload_rejected() {
        let mut f = PsarFile::new();
        f.push("a", Tensor::new(vec![4], vec![1.0; 4]).unwrap()).unwrap();
        let mut buf = Vec::new();
        f.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(PsarFile::read_from(&mut buf.as_slice()).is_err());
    }
}
