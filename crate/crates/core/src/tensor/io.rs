//! Flat binary tensor files: 8-byte magic, 1-byte rank, `rank` little-endian
//! u64 extents, then the row-major f64 payload (little-endian).

use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: [u8; 8] = *b"MVTNSR01";

pub fn write_tensor<W: Write>(mut w: W, t: &Tensor) -> Result<()> {
    let rank = u8::try_from(t.rank())
        .map_err(|_| Error::TensorFormat(format!("rank {} exceeds 255", t.rank())))?;
    w.write_all(&TENSOR_MAGIC)?;
    w.write_all(&[rank])?;
    for &e in t.shape() {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    let mut payload = Vec::with_capacity(t.numel() * 8);
    for v in t.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&payload)?;
    Ok(())
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<Tensor> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::TensorFormat("truncated header".into()))?;
    if magic != TENSOR_MAGIC {
        return Err(Error::TensorFormat(format!("bad magic {magic:?}")));
    }
    let mut rank = [0u8; 1];
    r.read_exact(&mut rank)
        .map_err(|_| Error::TensorFormat("missing rank".into()))?;
    let mut shape = Vec::with_capacity(rank[0] as usize);
    for _ in 0..rank[0] {
        let mut e = [0u8; 8];
        r.read_exact(&mut e)
            .map_err(|_| Error::TensorFormat("truncated extents".into()))?;
        shape.push(
            usize::try_from(u64::from_le_bytes(e))
                .map_err(|_| Error::TensorFormat("extent overflows usize".into()))?,
        );
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::TensorFormat("element count overflow".into()))?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != numel * 8 {
        return Err(Error::TensorFormat(format!(
            "payload has {} bytes, shape {shape:?} needs {}",
            payload.len(),
            numel * 8
        )));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(&shape, data)
}

pub fn write_tensor_file(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<Tensor> {
    let file = std::fs::File::open(path)?;
    read_tensor(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(&[1, 2], vec![1.5, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[..8], b"MVTNSR01");
        assert_eq!(buf[8], 2);
        assert_eq!(&buf[9..17], &1u64.to_le_bytes());
        assert_eq!(&buf[17..25], &2u64.to_le_bytes());
        assert_eq!(&buf[25..33], &1.5f64.to_le_bytes());
        assert_eq!(buf.len(), 8 + 1 + 16 + 16);
    }

    #[test]
    fn scalar_has_rank_zero() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &Tensor::scalar(4.0)).unwrap();
        assert_eq!(buf[8], 0);
        assert_eq!(read_tensor(&buf[..]).unwrap().item(), 4.0);
    }

    #[test]
    fn rejects_corruption() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &Tensor::zeros(&[3])).unwrap();
        assert!(read_tensor(&buf[..buf.len() - 1]).is_err());
        buf[0] = b'X';
        assert!(read_tensor(&buf[..]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(shape in proptest::collection::vec(0usize..4, 0..4), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|i| (seed.wrapping_add(i as u64) as f64).sin() * 1e3).collect();
            let t = Tensor::new(&shape, data).unwrap();
            let mut buf = Vec::new();
            write_tensor(&mut buf, &t).unwrap();
            let back = read_tensor(&buf[..]).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
