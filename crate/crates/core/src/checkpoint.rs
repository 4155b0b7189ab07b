//! Binary tensor tables.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "KELB" | version u32 | count u32 | count × (name_len u16 | name utf-8 | rank u8 | dims u64 × rank | values f32 × numel)
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::TensorMap;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"KELB";
pub const VERSION: u32 = 1;

/// Serialises `tensors` with values narrowed to `f32`.
pub fn encode<T: Scalar>(tensors: &TensorMap<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(tensors.len()).map_err(|_| Error::invalid("too many tensors"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| Error::invalid(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.rank()).map_err(|_| Error::invalid(format!("rank of {name} exceeds 255")))?;
        out.push(rank);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!("truncated at byte {}", self.pos)),
        }
    }

    fn array<const N: usize>(&mut self) -> std::result::Result<[u8; N], String> {
        Ok(self.take(N)?.try_into().expect("slice of length N"))
    }
}

/// Inverse of [`encode`]; widens values to `T`.
pub fn decode<T: Scalar>(bytes: &[u8]) -> std::result::Result<TensorMap<T>, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(|_| "missing magic".to_string())? != MAGIC {
        return Err("bad magic".into());
    }
    let version = u32::from_le_bytes(r.array()?);
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let count = u32::from_le_bytes(r.array()?);
    let mut out = TensorMap::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(r.array()?) as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| format!("tensor name is not utf-8: {e}"))?
            .to_string();
        let rank = r.array::<1>()?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = u64::from_le_bytes(r.array()?);
            shape.push(usize::try_from(d).map_err(|_| format!("dimension {d} too large"))?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or("tensor size overflows")?;
        let raw = r.take(numel.checked_mul(4).ok_or("tensor size overflows")?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::of(f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes")))))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
        if out.insert(name.clone(), t).is_some() {
            return Err(format!("duplicate tensor {name}"));
        }
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(out)
}

pub fn save_checkpoint<T: Scalar>(path: &Path, tensors: &TensorMap<T>) -> Result<()> {
    let bytes = encode(tensors)?;
    let io = |source| Error::io(path, source);
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(&bytes).map_err(io)?;
    f.sync_all().map_err(io)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<TensorMap<T>> {
    let bytes = fs::read(path).map_err(|source| Error::io(path, source))?;
    decode(&bytes).map_err(|detail| Error::Checkpoint {
        path: path.to_path_buf(),
        detail,
    })
}
