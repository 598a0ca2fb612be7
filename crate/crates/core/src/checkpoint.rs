//! Flat binary parameter container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SLAG"            4-byte magic
//! version   u32     currently 1
//! kind      u32     1 = encoder, 2 = MIL aggregator
//! flags     u32     model-specific (encoder: activation code)
//! count     u32     number of tensors
//! dims      count × (rows u32, cols u32)
//! data      raw f64 values, tensors in declaration order, row-major
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const MAGIC: &[u8; 4] = b"SLAG";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum ModelKind {
    Encoder = 1,
    Aggregator = 2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: ModelKind,
    pub flags: u32,
    pub tensors: Vec<Matrix>,
}

pub fn write_container<W: Write>(mut w: W, container: &Container) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(container.kind as u32).to_le_bytes())?;
    w.write_all(&container.flags.to_le_bytes())?;
    w.write_all(&u32_len(container.tensors.len())?.to_le_bytes())?;
    for t in &container.tensors {
        w.write_all(&u32_len(t.rows())?.to_le_bytes())?;
        w.write_all(&u32_len(t.cols())?.to_le_bytes())?;
    }
    for t in &container.tensors {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_container<R: Read>(mut r: R) -> Result<Container> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let kind = match read_u32(&mut r)? {
        1 => ModelKind::Encoder,
        2 => ModelKind::Aggregator,
        other => return Err(Error::Checkpoint(format!("unknown model kind {other}"))),
    };
    let flags = read_u32(&mut r)?;
    let count = read_u32(&mut r)? as usize;
    let mut dims = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        dims.push((read_u32(&mut r)? as usize, read_u32(&mut r)? as usize));
    }
    let mut tensors = Vec::with_capacity(dims.len());
    let mut buf = [0u8; 8];
    for (rows, cols) in dims {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        tensors.push(Matrix::new(rows, cols, data)?);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after parameter data".into()));
    }
    Ok(Container {
        kind,
        flags,
        tensors,
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn u32_len(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("dimension {n} exceeds u32")))
}
