//! Binary parameter files.
//!
//! Layout, little-endian throughout: the magic `HABNET01`, a `u32` format
//! version and a `u32` parameter count, then for each parameter a `u16` name
//! length, the UTF-8 name, a `u8` rank, one `u32` per extent and the values
//! as row-major `f64`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::model::ModelParams;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"HABNET01";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint format: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

pub fn encode(params: &ModelParams) -> Result<Vec<u8>> {
    let fail = |m: String| CheckpointError::Format(m);
    let mut out = Vec::with_capacity(16 + 8 * params.scalar_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(params.len()).map_err(|_| fail("too many parameters".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in &params.tensors {
        let len = u16::try_from(name.len()).map_err(|_| fail(format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.rank()).map_err(|_| fail(format!("{name}: rank too large")))?;
        out.push(rank);
        for &e in t.shape() {
            let e = u32::try_from(e).map_err(|_| fail(format!("{name}: extent too large")))?;
            out.extend_from_slice(&e.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            CheckpointError::Format(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }
}

/// Parses a whole checkpoint; nothing is returned unless every byte is accounted for.
pub fn decode(bytes: &[u8]) -> Result<ModelParams> {
    let fail = |m: String| CheckpointError::Format(m);
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(fail("bad magic".into()));
    }
    let version = u32::from_le_bytes(r.array("version")?);
    if version != VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(r.array("parameter count")?);
    let mut params = ModelParams::default();
    for _ in 0..count {
        let len = u16::from_le_bytes(r.array("name length")?) as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| fail("name is not UTF-8".into()))?
            .to_string();
        let rank = r.array::<1>("rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(r.array("extent")?) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| fail(format!("{name}: size overflow")))?, &name)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| fail(format!("{name}: {e}")))?;
        if params.get(&name).is_some() {
            return Err(fail(format!("duplicate parameter {name}")));
        }
        params.insert(name, t);
    }
    if r.pos != bytes.len() {
        return Err(fail(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(params)
}

/// Writes through a temporary sibling and renames it into place.
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let bytes = encode(params)?;
    write_atomic(path, &bytes).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Task, Variant};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params() -> ModelParams {
        let cfg = ModelConfig::new(3, Variant::Full, Task::Decision);
        ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    #[test]
    fn header_layout() {
        let mut p = ModelParams::default();
        p.insert("ab".into(), Tensor::matrix(1, 2, vec![1.0, -0.5]).unwrap());
        let bytes = encode(&p).unwrap();
        let mut want = b"HABNET01".to_vec();
        want.extend([1, 0, 0, 0, 1, 0, 0, 0, 2, 0, b'a', b'b', 2, 1, 0, 0, 0, 2, 0, 0, 0]);
        want.extend(1.0f64.to_le_bytes());
        want.extend((-0.5f64).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        let p = params();
        save_checkpoint(&p, &a).unwrap();
        let loaded = load_checkpoint(&a).unwrap();
        assert_eq!(loaded, p);
        save_checkpoint(&loaded, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn truncation_and_corruption_are_format_errors() {
        let bytes = encode(&params()).unwrap();
        for cut in [0, 5, 12, 15, 40, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(CheckpointError::Format(_))), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(CheckpointError::Format(m)) if m.contains("magic")));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(decode(&bad), Err(CheckpointError::Format(m)) if m.contains("version")));
        let mut long = bytes;
        long.push(0);
        assert!(decode(&long).is_err());
    }
}
