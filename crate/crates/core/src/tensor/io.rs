//! Raw tensor fixture format.
//!
//! Layout: magic `RBT1`, dimension count (u64 LE), each dimension (u64 LE),
//! then the values as little-endian `f32`.

use std::io::{Read, Write};
use std::path::Path;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RBT1";

pub fn write_tensor<T: Scalar, W: Write>(t: &Tensor<T>, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(t.shape().len() as u64).to_le_bytes())?;
    for d in t.shape() {
        w.write_all(&(*d as u64).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<T: Scalar, R: Read>(mut r: R) -> Result<Tensor<T>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad tensor magic {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            "RBT1"
        )));
    }
    let mut buf8 = [0u8; 8];
    r.read_exact(&mut buf8)?;
    let ndims = u64::from_le_bytes(buf8) as usize;
    if ndims > 16 {
        return Err(Error::Format(format!("implausible dimension count {ndims}")));
    }
    let mut shape = Vec::with_capacity(ndims);
    for _ in 0..ndims {
        r.read_exact(&mut buf8)?;
        shape.push(u64::from_le_bytes(buf8) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut raw = vec![0u8; numel * 4];
    r.read_exact(&mut raw)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Tensor::new(data, &shape)
}

pub fn save(t: &Tensor<impl Scalar>, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_tensor(t, std::io::BufWriter::new(f))
}

pub fn load<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let f = std::fs::File::open(path)?;
    read_tensor(std::io::BufReader::new(f))
}
