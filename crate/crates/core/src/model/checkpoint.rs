//! Binary checkpoint container.
//!
//! Layout (all integers u32 little-endian, payload f64 little-endian):
//!
//! ```text
//! "SRPL" | version | count | count × { name_len | name (UTF-8) | rank | dims[rank] | payload }
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Model;
use crate::error::{Result, SrplError};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SRPL";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_NAME_LEN: usize = 4096;
const MAX_RANK: usize = 8;

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| SrplError::format(format!("value {v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn truncated(e: std::io::Error) -> SrplError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        SrplError::format("checkpoint truncated")
    } else {
        SrplError::Io(e)
    }
}

pub fn write_tensors<W: Write>(w: &mut W, tensors: &[(String, Tensor)]) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    put_u32(w, tensors.len())?;
    for (name, t) in tensors {
        put_u32(w, name.len())?;
        w.write_all(name.as_bytes())?;
        put_u32(w, t.shape().len())?;
        for &d in t.shape() {
            put_u32(w, d)?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_tensors<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(SrplError::format(format!("bad magic bytes {magic:?}")));
    }
    let version = get_u32(r)?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(SrplError::format(format!("unsupported checkpoint version {version}")));
    }
    let count = get_u32(r)?;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = get_u32(r)?;
        if name_len > MAX_NAME_LEN {
            return Err(SrplError::format(format!("tensor name length {name_len} too large")));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name).map_err(|_| SrplError::format("tensor name is not UTF-8"))?;
        let rank = get_u32(r)?;
        if rank == 0 || rank > MAX_RANK {
            return Err(SrplError::format(format!("tensor `{name}` has unsupported rank {rank}")));
        }
        let dims = (0..rank).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| SrplError::format(format!("tensor `{name}` is too large")))?;
        let mut bytes = vec![0u8; n.checked_mul(8).ok_or_else(|| SrplError::format("tensor too large"))?];
        r.read_exact(&mut bytes).map_err(truncated)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| SrplError::format(e.to_string()))?;
        out.push((name, t));
    }
    Ok(out)
}

/// Writes a model plus any extra named tensors (e.g. run metadata).
pub fn write_checkpoint(path: &Path, model: &Model, extra: &[(String, Tensor)]) -> Result<()> {
    let mut tensors = model.to_named_tensors();
    tensors.extend_from_slice(extra);
    let mut w = BufWriter::new(File::create(path)?);
    write_tensors(&mut w, &tensors)?;
    w.flush()?;
    Ok(())
}

/// Reads a model and returns the remaining named tensors alongside it.
pub fn read_checkpoint(path: &Path) -> Result<(Model, Vec<(String, Tensor)>)> {
    let mut r = BufReader::new(File::open(path)?);
    let tensors = read_tensors(&mut r)?;
    let model = Model::from_named_tensors(&tensors)?;
    let known: Vec<String> = model.to_named_tensors().into_iter().map(|(n, _)| n).collect();
    let extra = tensors.into_iter().filter(|(n, _)| !known.contains(n)).collect();
    Ok((model, extra))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_layout_is_exact() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("ab".into(), t.clone())]).unwrap();
        let mut expect = b"SRPL".to_vec();
        expect.extend(1u32.to_le_bytes());
        expect.extend(1u32.to_le_bytes());
        expect.extend(2u32.to_le_bytes());
        expect.extend(b"ab");
        expect.extend(2u32.to_le_bytes());
        expect.extend(1u32.to_le_bytes());
        expect.extend(2u32.to_le_bytes());
        expect.extend(1.0f64.to_le_bytes());
        expect.extend((-2.5f64).to_le_bytes());
        assert_eq!(buf, expect);
        let back = read_tensors(&mut buf.as_slice()).unwrap();
        assert_eq!(back, vec![("ab".to_string(), t)]);
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("x".into(), Tensor::scalar(1.0))]).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_tensors(&mut bad.as_slice()), Err(SrplError::Format(_))));
        let short = &buf[..buf.len() - 3];
        assert!(matches!(read_tensors(&mut &short[..]), Err(SrplError::Format(_))));
        let mut ver = buf.clone();
        ver[4] = 9;
        assert!(matches!(read_tensors(&mut ver.as_slice()), Err(SrplError::Format(_))));
    }
}
