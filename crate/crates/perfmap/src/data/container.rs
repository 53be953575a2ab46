//! Binary array container used for every on-disk volume.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic  "PFSN1\0"          6 bytes
//! rank   u8
//! extent u32 × rank
//! dtype  u8                 0 = f32, 1 = f64
//! data   raw row-major payload
//! ```
//!
//! Case volumes always use dtype 0. Dtype 1 exists so model checkpoints
//! can round-trip f64 parameters exactly through the same container.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, ArrayViewD, IxDyn};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"PFSN1\0";
pub const DTYPE_F32: u8 = 0;
pub const DTYPE_F64: u8 = 1;

const MAX_RANK: usize = 8;

pub fn write_f32(path: &Path, array: ArrayViewD<'_, f32>) -> Result<()> {
    let mut w = open_writer(path, array.shape(), DTYPE_F32)?;
    for &v in array.iter() {
        w.write_f32::<LittleEndian>(v).map_err(Error::io(path))?;
    }
    w.flush().map_err(Error::io(path))
}

pub fn write_f64(path: &Path, array: ArrayViewD<'_, f64>) -> Result<()> {
    let mut w = open_writer(path, array.shape(), DTYPE_F64)?;
    for &v in array.iter() {
        w.write_f64::<LittleEndian>(v).map_err(Error::io(path))?;
    }
    w.flush().map_err(Error::io(path))
}

pub fn read_f32(path: &Path) -> Result<ArrayD<f32>> {
    let (mut r, shape, len) = open_reader(path, DTYPE_F32)?;
    let mut data = vec![0f32; len];
    r.read_f32_into::<LittleEndian>(&mut data)
        .map_err(|e| map_payload_err(e, path))?;
    expect_eof(&mut r, path)?;
    Ok(ArrayD::from_shape_vec(IxDyn(&shape), data).expect("shape/len consistent"))
}

pub fn read_f64(path: &Path) -> Result<ArrayD<f64>> {
    let (mut r, shape, len) = open_reader(path, DTYPE_F64)?;
    let mut data = vec![0f64; len];
    r.read_f64_into::<LittleEndian>(&mut data)
        .map_err(|e| map_payload_err(e, path))?;
    expect_eof(&mut r, path)?;
    Ok(ArrayD::from_shape_vec(IxDyn(&shape), data).expect("shape/len consistent"))
}

fn open_writer(path: &Path, shape: &[usize], dtype: u8) -> Result<BufWriter<File>> {
    if shape.len() > MAX_RANK {
        return Err(Error::Invalid(format!(
            "array rank {} exceeds container maximum {MAX_RANK}",
            shape.len()
        )));
    }
    let file = File::create(path).map_err(Error::io(path))?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC).map_err(Error::io(path))?;
    w.write_u8(shape.len() as u8).map_err(Error::io(path))?;
    for &extent in shape {
        let extent = u32::try_from(extent)
            .map_err(|_| Error::Invalid(format!("axis extent {extent} exceeds u32")))?;
        w.write_u32::<LittleEndian>(extent).map_err(Error::io(path))?;
    }
    w.write_u8(dtype).map_err(Error::io(path))?;
    Ok(w)
}

fn open_reader(path: &Path, want_dtype: u8) -> Result<(BufReader<File>, Vec<usize>, usize)> {
    let file = File::open(path).map_err(Error::io(path))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)
        .map_err(|e| map_header_err(e, path))?;
    if &magic != MAGIC {
        return Err(Error::BadContainer(format!("{}: bad magic", path.display())));
    }

    let rank = r.read_u8().map_err(|e| map_header_err(e, path))? as usize;
    if rank > MAX_RANK {
        return Err(Error::BadContainer(format!(
            "{}: rank {rank} exceeds maximum {MAX_RANK}",
            path.display()
        )));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut len: usize = 1;
    for _ in 0..rank {
        let extent = r
            .read_u32::<LittleEndian>()
            .map_err(|e| map_header_err(e, path))? as usize;
        len = len
            .checked_mul(extent)
            .ok_or_else(|| Error::BadContainer(format!("{}: extent overflow", path.display())))?;
        shape.push(extent);
    }

    let dtype = r.read_u8().map_err(|e| map_header_err(e, path))?;
    if dtype != want_dtype {
        return Err(Error::BadContainer(format!(
            "{}: dtype code {dtype}, expected {want_dtype}",
            path.display()
        )));
    }
    Ok((r, shape, len))
}

fn expect_eof(r: &mut BufReader<File>, path: &Path) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe) {
        Ok(0) => Ok(()),
        Ok(_) => Err(Error::BadContainer(format!(
            "{}: trailing bytes after payload",
            path.display()
        ))),
        Err(e) => Err(Error::io(path)(e)),
    }
}

fn map_header_err(e: std::io::Error, path: &Path) -> Error {
    if e.kind() == ErrorKind::UnexpectedEof {
        Error::BadContainer(format!("{}: header ends early", path.display()))
    } else {
        Error::io(path)(e)
    }
}

fn map_payload_err(e: std::io::Error, path: &Path) -> Error {
    if e.kind() == ErrorKind::UnexpectedEof {
        Error::Truncated(format!(
            "{}: payload shorter than header promises",
            path.display()
        ))
    } else {
        Error::io(path)(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use std::fs;

    #[test]
    fn round_trip_f32_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pfsn");
        let a = Array3::from_shape_fn((3, 4, 5), |(i, j, k)| {
            (i as f32 * 0.1 + j as f32 * 10.0 + k as f32).sin()
        });
        write_f32(&path, a.view().into_dyn()).unwrap();
        let b = read_f32(&path).unwrap();
        assert_eq!(b.shape(), &[3, 4, 5]);
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn round_trip_f64() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.pfsn");
        let a = ndarray::Array2::from_shape_fn((7, 3), |(i, j)| 1.0 / (1.0 + i as f64 + j as f64));
        write_f64(&path, a.view().into_dyn()).unwrap();
        let b = read_f64(&path).unwrap();
        assert_eq!(a.into_dyn(), b);
    }

    #[test]
    fn wrong_magic_is_unrecognized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pfsn");
        fs::write(&path, b"NOTPF\0rest").unwrap();
        let err = read_f32(&path).unwrap_err();
        assert!(
            err.to_string().contains("unrecognized container"),
            "got: {err}"
        );
    }

    #[test]
    fn short_payload_is_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pfsn");
        let a = ndarray::Array1::from_vec(vec![1.0f32; 80]);
        write_f32(&path, a.view().into_dyn()).unwrap();
        // Chop one frame's worth of bytes off the end.
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        let err = read_f32(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "got: {err}");
    }

    #[test]
    fn trailing_bytes_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pfsn");
        let a = ndarray::Array1::from_vec(vec![1.0f32, 2.0]);
        write_f32(&path, a.view().into_dyn()).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.push(0);
        fs::write(&path, &bytes).unwrap();
        assert!(read_f32(&path).is_err());
    }

    #[test]
    fn dtype_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.pfsn");
        let a = ndarray::Array1::from_vec(vec![1.0f64, 2.0]);
        write_f64(&path, a.view().into_dyn()).unwrap();
        assert!(read_f32(&path).is_err());
    }
}
