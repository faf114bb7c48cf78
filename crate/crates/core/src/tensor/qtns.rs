//! QTNS binary tensor files: `"QTNS"`, u8 version, u32 rank, u32 dims[rank],
//! then the f32 payload, all little-endian and row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const QTNS_MAGIC: &[u8; 4] = b"QTNS";
pub const QTNS_VERSION: u8 = 1;

const MAX_RANK: u32 = 8;

pub fn write_qtns_to<W: Write>(tensor: &Tensor<f32>, mut w: W) -> std::io::Result<()> {
    w.write_all(QTNS_MAGIC)?;
    w.write_all(&[QTNS_VERSION])?;
    w.write_all(&(tensor.rank() as u32).to_le_bytes())?;
    for &d in tensor.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in tensor.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()
}

pub fn write_qtns(tensor: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    let f = File::create(path.as_ref())?;
    write_qtns_to(tensor, BufWriter::new(f))?;
    Ok(())
}

/// Reads one tensor; `path` only labels errors.
pub fn read_qtns_from<R: Read>(mut r: R, path: &Path) -> Result<Tensor<f32>> {
    let mut offset = 0u64;
    let bad = |offset: u64, message: String| Error::Tensor {
        path: path.to_path_buf(),
        offset,
        message,
    };
    let mut read_exact = |buf: &mut [u8], offset: &mut u64, what: &str| -> Result<()> {
        r.read_exact(buf)
            .map_err(|e| bad(*offset, format!("truncated while reading {}: {}", what, e)))?;
        *offset += buf.len() as u64;
        Ok(())
    };

    let mut magic = [0u8; 4];
    read_exact(&mut magic, &mut offset, "magic")?;
    if &magic != QTNS_MAGIC {
        return Err(bad(0, format!("bad magic {:?}", magic)));
    }
    let mut version = [0u8; 1];
    read_exact(&mut version, &mut offset, "version")?;
    if version[0] != QTNS_VERSION {
        return Err(bad(4, format!("unsupported version {}", version[0])));
    }
    let mut word = [0u8; 4];
    read_exact(&mut word, &mut offset, "rank")?;
    let rank = u32::from_le_bytes(word);
    if rank == 0 || rank > MAX_RANK {
        return Err(bad(5, format!("rank {} outside 1..={}", rank, MAX_RANK)));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        let at = offset;
        read_exact(&mut word, &mut offset, "dimension")?;
        let d = u32::from_le_bytes(word);
        if d == 0 {
            return Err(bad(at, "zero dimension".into()));
        }
        shape.push(d as usize);
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n <= (1usize << 31))
        .ok_or_else(|| bad(offset, format!("shape {:?} is too large", shape)))?;
    let mut payload = vec![0u8; count * 4];
    read_exact(&mut payload, &mut offset, "payload")?;
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(bad(offset, "trailing bytes after payload".into()));
    }
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        let header = 9 + 4 * rank as u64;
        return Err(bad(header + 4 * i as u64, "non-finite value".into()));
    }
    Tensor::new(shape, data)
}

pub fn read_qtns(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::data(path, format!("cannot open: {}", e)))?;
    read_qtns_from(BufReader::new(f), path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2, 1], vec![1.5f32, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_qtns_to(&t, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"QTNS");
        assert_eq!(buf[4], 1);
        assert_eq!(&buf[5..9], &2u32.to_le_bytes());
        assert_eq!(&buf[9..13], &2u32.to_le_bytes());
        assert_eq!(&buf[13..17], &1u32.to_le_bytes());
        assert_eq!(&buf[17..21], &1.5f32.to_le_bytes());
        assert_eq!(buf.len(), 25);
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::new(vec![3], vec![1.0f32, 2.0, 3.0]).unwrap();
        let mut buf = Vec::new();
        write_qtns_to(&t, &mut buf).unwrap();
        let p = Path::new("mem");

        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(read_qtns_from(&bad_magic[..], p).is_err());

        let truncated = &buf[..buf.len() - 2];
        match read_qtns_from(truncated, p) {
            Err(Error::Tensor { offset, .. }) => assert_eq!(offset, 13),
            other => panic!("expected tensor error, got {:?}", other),
        }

        let mut nan = buf.clone();
        let at = nan.len() - 4;
        nan[at..].copy_from_slice(&f32::NAN.to_le_bytes());
        match read_qtns_from(&nan[..], p) {
            Err(Error::Tensor { offset, .. }) => assert_eq!(offset, at as u64),
            other => panic!("expected tensor error, got {:?}", other),
        }
    }

    proptest! {
        #[test]
        fn roundtrip(shape in proptest::collection::vec(1usize..5, 1..4), seed in any::<u32>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n).map(|i| ((i as u32).wrapping_mul(seed) % 1000) as f32 * 0.37 - 100.0).collect();
            let t = Tensor::new(shape, data).unwrap();
            let mut buf = Vec::new();
            write_qtns_to(&t, &mut buf).unwrap();
            prop_assert_eq!(read_qtns_from(&buf[..], Path::new("mem")).unwrap(), t);
        }
    }
}
