//! BKT1 tensor files: `b"BKT1"`, `u32` rank, `rank × u32` dims, then
//! little-endian `f32` values in row-major order. Integers are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const BKT_MAGIC: &[u8; 4] = b"BKT1";

pub fn write_bkt_to<W: Write>(tensor: &Tensor, mut out: W) -> Result<()> {
    out.write_all(BKT_MAGIC)?;
    out.write_all(&(tensor.rank() as u32).to_le_bytes())?;
    for &d in tensor.shape() {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in tensor.data() {
        out.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_bkt_from<R: Read>(mut input: R, path: &Path) -> Result<Tensor> {
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut word = [0u8; 4];
    input
        .read_exact(&mut word)
        .map_err(|_| bad("truncated header"))?;
    if &word != BKT_MAGIC {
        return Err(bad("missing BKT1 magic"));
    }
    input
        .read_exact(&mut word)
        .map_err(|_| bad("truncated rank"))?;
    let rank = u32::from_le_bytes(word) as usize;
    if rank == 0 || rank > 16 {
        return Err(bad("unsupported rank"));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        input
            .read_exact(&mut word)
            .map_err(|_| bad("truncated dims"))?;
        shape.push(u32::from_le_bytes(word) as usize);
    }
    let n: usize = shape.iter().product();
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() != 4 * n {
        return Err(bad(&format!(
            "expected {} data bytes, found {}",
            4 * n,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(shape, data).map_err(|e| bad(&e.to_string()))
}

pub fn write_bkt(tensor: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_bkt_to(tensor, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn read_bkt(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    read_bkt_from(BufReader::new(File::open(path)?), path)
}
