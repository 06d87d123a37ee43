//! Flat binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"VRI1" | version: u32
//! repeated until EOF:
//!   name_len: u32 | name: [u8; name_len] (UTF-8)
//!   rank: u32 | dims: [u64; rank]
//!   values: [f64; prod(dims)]
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::autodiff::{ParamSet, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VRI1";
pub const VERSION: u32 = 1;

pub fn write_params<W: Write>(mut w: W, params: &ParamSet) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, t) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => Error::Checkpoint("truncated record".into()),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

pub fn read_params<R: Read>(mut r: R) -> Result<ParamSet> {
    let magic: [u8; 4] = read_array(&mut r)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut params = ParamSet::new();
    loop {
        let mut first = [0u8; 4];
        match r.read(&mut first[..1])? {
            0 => break,
            _ => r
                .read_exact(&mut first[1..])
                .map_err(|_| Error::Checkpoint("truncated record".into()))?,
        }
        let name_len = u32::from_le_bytes(first) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|_| Error::Checkpoint("truncated name".into()))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = u32::from_le_bytes(read_array(&mut r)?) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(read_array(&mut r)?) as usize);
        }
        let n: usize = shape.iter().product();
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            values.push(f64::from_le_bytes(read_array(&mut r)?));
        }
        if params.contains(&name) {
            return Err(Error::Checkpoint(format!("duplicate parameter `{name}`")));
        }
        params.insert(name, Tensor::new(&shape, values)?);
    }
    Ok(params)
}

pub fn save(path: &Path, params: &ParamSet) -> Result<()> {
    write_params(BufWriter::new(File::create(path)?), params)
}

pub fn load(path: &Path) -> Result<ParamSet> {
    read_params(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let mut ps = ParamSet::new();
        ps.insert("b", Tensor::vector(vec![1.5]));
        let mut buf = Vec::new();
        write_params(&mut buf, &ps).unwrap();
        assert_eq!(&buf[..4], b"VRI1");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(buf[12], b'b');
        assert_eq!(&buf[13..17], &1u32.to_le_bytes());
        assert_eq!(&buf[17..25], &1u64.to_le_bytes());
        assert_eq!(&buf[25..33], &1.5f64.to_le_bytes());
        assert_eq!(buf.len(), 33);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(read_params(&b"VRI2\x01\0\0\0"[..]), Err(Error::Checkpoint(_))));
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::zeros(&[2, 2]));
        let mut buf = Vec::new();
        write_params(&mut buf, &ps).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_params(&buf[..]), Err(Error::Checkpoint(_))));
    }

    proptest! {
        #[test]
        fn round_trip(values in prop::collection::vec(-1e6f64..1e6, 1..24), split in 1usize..4) {
            let mut ps = ParamSet::new();
            let rows = split.min(values.len());
            let cols = values.len() / rows;
            ps.insert("m.weight", Tensor::new(&[rows, cols], values[..rows * cols].to_vec()).unwrap());
            ps.insert("s", Tensor::scalar(values[0]));
            let mut buf = Vec::new();
            write_params(&mut buf, &ps).unwrap();
            let back = read_params(&buf[..]).unwrap();
            prop_assert_eq!(back.len(), 2);
            for ((n1, t1), (n2, t2)) in ps.iter().zip(back.iter()) {
                prop_assert_eq!(n1, n2);
                prop_assert_eq!(t1.shape(), t2.shape());
                prop_assert_eq!(t1.data(), t2.data());
            }
        }
    }
}
