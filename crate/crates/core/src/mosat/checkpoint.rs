//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MSAT" u32:version
//! u32:n  { u32:len name  u32:rank u64:extent… f64:value… }×n
//! u32:n  { u32:len u32:slot… u32:row }×n
//! u32:n  { u32:len key  u32:len value }×n
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::morphology::TopoPath;
use crate::numcore::Tensor;

pub const MAGIC: &[u8; 4] = b"MSAT";
pub const VERSION: u32 = 1;

/// Named tensors, registry records and string metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub params: Vec<(String, Tensor)>,
    pub registry: Vec<(TopoPath, usize)>,
    pub meta: BTreeMap<String, String>,
}

fn put_u32<W: Write>(w: &mut W, x: usize) -> Result<()> {
    let x = u32::try_from(x).map_err(|_| Error::Checkpoint(format!("{x} does not fit in u32")))?;
    w.write_all(&x.to_le_bytes())?;
    Ok(())
}

fn put_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    put_u32(w, s.len())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        let b = self.bytes(8)?;
        usize::try_from(u64::from_le_bytes(b.try_into().expect("8 bytes")))
            .map_err(|_| Error::Checkpoint("extent overflows".into()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.bytes(n)?).map_err(|_| Error::Checkpoint("non-UTF-8 string".into()))
    }
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        put_u32(&mut w, self.params.len())?;
        for (name, t) in &self.params {
            put_str(&mut w, name)?;
            put_u32(&mut w, t.shape().len())?;
            for &e in t.shape() {
                w.write_all(&(e as u64).to_le_bytes())?;
            }
            for &x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        put_u32(&mut w, self.registry.len())?;
        for (path, row) in &self.registry {
            put_u32(&mut w, path.0.len())?;
            for &s in &path.0 {
                put_u32(&mut w, s as usize)?;
            }
            put_u32(&mut w, *row)?;
        }
        put_u32(&mut w, self.meta.len())?;
        for (k, v) in &self.meta {
            put_str(&mut w, k)?;
            put_str(&mut w, v)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = Reader { inner: r };
        if r.bytes(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION as usize {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version} (expected {VERSION})")));
        }
        let mut ck = Checkpoint::default();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.bytes(n * 8)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            ck.params.push((name, Tensor::new(shape, data)?));
        }
        for _ in 0..r.u32()? {
            let len = r.u32()?;
            let slots = (0..len).map(|_| r.u32().map(|s| s as u32)).collect::<Result<Vec<_>>>()?;
            let row = r.u32()?;
            ck.registry.push((TopoPath(slots), row));
        }
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            ck.meta.insert(k, v);
        }
        let mut rest = Vec::new();
        r.inner.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::read_from(bytes.as_slice())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata key {key:?}")))
    }
}
