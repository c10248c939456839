//! Binary tensor files: `EMAD`, u8 rank, rank × u32 LE extents, then f32 LE data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"EMAD";

pub fn write_tensor_to<W: Write>(w: &mut W, t: &Tensor) -> std::io::Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&[t.rank() as u8])?;
    for &d in t.dims() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor_from<R: Read>(r: &mut R) -> std::result::Result<Tensor, String> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| e.to_string())?;
    if &magic != TENSOR_MAGIC {
        return Err(format!("bad magic {magic:?}"));
    }
    let mut rank = [0u8; 1];
    r.read_exact(&mut rank).map_err(|e| e.to_string())?;
    let mut dims = Vec::with_capacity(rank[0] as usize);
    let mut buf = [0u8; 4];
    for _ in 0..rank[0] {
        r.read_exact(&mut buf).map_err(|e| e.to_string())?;
        dims.push(u32::from_le_bytes(buf) as usize);
    }
    let n: usize = dims.iter().product();
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes).map_err(|e| format!("truncated data: {e}"))?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| e.to_string())? != 0 {
        return Err("trailing bytes after tensor data".into());
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(dims, data).map_err(|e| e.to_string())
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor_to(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    read_tensor_from(&mut r).map_err(|reason| Error::Format {
        path: path.to_path_buf(),
        reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(vec![2, 1, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.5]).unwrap();
        let mut buf = Vec::new();
        write_tensor_to(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], b"EMAD");
        assert_eq!(buf[4], 3);
        assert_eq!(&buf[5..9], &2u32.to_le_bytes());
        assert_eq!(&buf[9..13], &1u32.to_le_bytes());
        assert_eq!(&buf[13..17], &3u32.to_le_bytes());
        assert_eq!(&buf[17..21], &1.0f32.to_le_bytes());
        assert_eq!(&buf[buf.len() - 4..], &6.5f32.to_le_bytes());
        assert_eq!(buf.len(), 5 + 12 + 24);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut bad = b"EMAX\x01\x01\x00\x00\x00".to_vec();
        bad.extend_from_slice(&1f32.to_le_bytes());
        assert!(read_tensor_from(&mut bad.as_slice()).is_err());
        let short = b"EMAD\x01\x02\x00\x00\x00\x00\x00\x80\x3f".to_vec();
        assert!(read_tensor_from(&mut short.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_at_single_precision(
            dims in prop::collection::vec(1usize..4, 1..4),
            seed in any::<u64>(),
        ) {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n).map(|i| ((seed.wrapping_add(i as u64) % 1000) as f64 - 500.0) / 7.0).collect();
            let t = Tensor::new(dims.clone(), data).unwrap();
            let mut buf = Vec::new();
            write_tensor_to(&mut buf, &t).unwrap();
            let back = read_tensor_from(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(back.dims(), t.dims());
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert_eq!(*a, (*b as f32) as f64);
            }
        }
    }
}
