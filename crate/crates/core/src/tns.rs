//! `TNS1` binary tensor files.
//!
//! Layout: the ASCII magic `TNS1`, a little-endian `u32` rank, `rank`
//! little-endian `u32` extents, then every value as a little-endian IEEE-754
//! `f32` in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TNS1";

pub fn write<T: Scalar>(tensor: &Tensor<T>, mut w: impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    let rank = u32::try_from(tensor.rank()).map_err(|_| Error::Format("rank exceeds u32".into()))?;
    w.write_all(&rank.to_le_bytes())?;
    for &d in tensor.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format("extent exceeds u32".into()))?;
        w.write_all(&d.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(tensor.numel() * 4);
    for v in tensor.data() {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read<T: Scalar>(mut r: impl Read) -> Result<Tensor<T>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected TNS1")));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let rank = u32::from_le_bytes(word) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut word)?;
        shape.push(u32::from_le_bytes(word) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut raw = vec![0u8; numel * 4];
    r.read_exact(&mut raw)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Tensor::new(&shape, data)
}

pub fn save<T: Scalar>(tensor: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write(tensor, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    read(BufReader::new(File::open(path)?))
}
