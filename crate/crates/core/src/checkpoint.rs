//! `SEEDCKPT` parameter files.
//!
//! Layout (little-endian): magic `SEEDCKPT`, u32 version = 1, u32 entry count,
//! then per entry: u16 name length, UTF-8 name, u8 dtype tag (0 = f32),
//! u8 rank, rank × u64 dims, payload.

use std::fs;
use std::path::Path;

use crate::error::{input_err, Result, SeedError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SEEDCKPT";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

pub fn encode(store: &ParamStore<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, p) in store.iter() {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len()).map_err(|_| input_err("checkpoint", format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(bytes);
        out.push(DTYPE_F32);
        let shape = p.value.shape();
        out.push(u8::try_from(shape.len()).map_err(|_| input_err("checkpoint", "rank exceeds 255"))?);
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(SeedError::Truncated(format!("checkpoint ends inside {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Decodes a checkpoint; every entry comes back unfrozen.
pub fn decode(buf: &[u8]) -> Result<ParamStore<f32>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8, "magic").ok() != Some(MAGIC.as_slice()) {
        return Err(SeedError::BadMagic { expected: "SEEDCKPT" });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(SeedError::UnsupportedVersion(version));
    }
    let count = r.u32("entry count")? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| input_err("checkpoint", "entry name is not UTF-8"))?
            .to_string();
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(input_err("checkpoint", format!("unsupported dtype tag {dtype} for {name}")));
        }
        let rank = r.u8("rank")? as usize;
        let shape = (0..rank).map(|_| r.u64("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let payload = r.take(n * 4, &name)?;
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        store.insert(name, Tensor::new(shape, data)?);
    }
    if r.pos != buf.len() {
        return Err(SeedError::CountMismatch { declared: count, found: count + 1 });
    }
    Ok(store)
}

pub fn save(path: &Path, store: &ParamStore<f32>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode(store)?)?;
    Ok(())
}

/// Loads a checkpoint, mapping a missing file to [`SeedError::MissingCheckpoint`] named by `section`.
pub fn load(path: &Path, section: &str) -> Result<ParamStore<f32>> {
    match fs::read(path) {
        Ok(buf) => decode(&buf),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(SeedError::MissingCheckpoint(section.to_string())),
        Err(e) => Err(e.into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn sample_store() -> ParamStore<f32> {
        let mut rng = Rng::new(5);
        let mut s = ParamStore::new();
        s.init_normal("vit.patch.w", &[192, 16], 0.1, &mut rng);
        s.init_normal("qformer.queries", &[8, 4], 1.0, &mut rng);
        s.insert("scalar", Tensor::scalar(f32::MIN_POSITIVE));
        s
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&sample_store()).unwrap();
        assert_eq!(&bytes[..8], b"SEEDCKPT");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
        // first entry, sorted by name: "qformer.queries"
        assert_eq!(u16::from_le_bytes(bytes[16..18].try_into().unwrap()), 15);
        assert_eq!(&bytes[18..33], b"qformer.queries");
        assert_eq!(bytes[33], 0);
        assert_eq!(bytes[34], 2);
        assert_eq!(u64::from_le_bytes(bytes[35..43].try_into().unwrap()), 8);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = sample_store();
        let bytes = encode(&s).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(encode(&back).unwrap(), bytes);
        for (name, p) in s.iter() {
            let q = back.get(name).unwrap();
            assert_eq!(p.value.shape(), q.shape());
            assert!(p.value.data().iter().zip(q.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = encode(&sample_store()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(SeedError::BadMagic { .. })));
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(SeedError::Truncated(_))));
        let missing = load(Path::new("/nonexistent/x.ckpt"), "codebook.*").unwrap_err();
        assert_eq!(missing.to_string(), "missing checkpoint codebook.*");
    }
}
