//! Named-tensor checkpoint files.
//!
//! Layout (all integers little-endian): magic `TPUT`, `u32` version, `u32`
//! tensor count, then per tensor `u32` name length, UTF-8 name, `u32` rank,
//! `rank × u64` dims and the raw `f64` payload.

use std::io::{self, Read, Write};

use super::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TPUT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, tensors: &[(String, Tensor)]) -> io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&u32_len(tensors.len())?.to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&u32_len(name.len())?.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&u32_len(t.rank())?.to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut payload = Vec::with_capacity(t.numel() * 8);
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&payload)?;
    }
    w.flush()
}

pub fn read_checkpoint<R: Read>(mut r: R) -> io::Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(invalid("bad checkpoint magic"));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(invalid(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| invalid("tensor name is not UTF-8"))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(
                usize::try_from(u64::from_le_bytes(b))
                    .map_err(|_| invalid("dimension overflow"))?,
            );
        }
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| invalid(e.to_string()))?;
        out.push((name, t));
    }
    Ok(out)
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn u32_len(n: usize) -> io::Result<u32> {
    u32::try_from(n).map_err(|_| invalid("length exceeds u32"))
}

fn invalid(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_layout_is_exact() {
        let t = Tensor::new([1, 2], vec![1.5, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[("w".to_string(), t.clone())]).unwrap();
        let mut want = b"TPUT".to_vec();
        want.extend(1u32.to_le_bytes());
        want.extend(1u32.to_le_bytes());
        want.extend(1u32.to_le_bytes());
        want.push(b'w');
        want.extend(2u32.to_le_bytes());
        want.extend(1u64.to_le_bytes());
        want.extend(2u64.to_le_bytes());
        want.extend(1.5f64.to_le_bytes());
        want.extend((-2.0f64).to_le_bytes());
        assert_eq!(buf, want);
        assert_eq!(
            read_checkpoint(&buf[..]).unwrap(),
            vec![("w".to_string(), t)]
        );
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(read_checkpoint(&b"NOPE\x01\0\0\0\0\0\0\0"[..]).is_err());
        let t = Tensor::zeros([3]);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[("x".into(), t)]).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(read_checkpoint(&buf[..]).is_err());
    }
}
