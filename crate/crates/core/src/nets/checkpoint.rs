//! Flat binary parameter checkpoints.
//!
//! Layout, all little-endian: `u64` tensor count; per tensor a `u64` rank
//! followed by `rank` `u64` dimensions; then every tensor's values as `f64`
//! in the same order, each row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{CirkdError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct StateTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl StateTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }
}

pub fn save_tensors(path: &Path, tensors: &[StateTensor]) -> Result<()> {
    let file = File::create(path).map_err(|e| CirkdError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| CirkdError::io(path, e));
    put(&(tensors.len() as u64).to_le_bytes())?;
    for t in tensors {
        put(&(t.shape.len() as u64).to_le_bytes())?;
        for &d in &t.shape {
            put(&(d as u64).to_le_bytes())?;
        }
    }
    for t in tensors {
        for v in &t.data {
            put(&v.to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| CirkdError::io(path, e))
}

pub fn load_tensors(path: &Path) -> Result<Vec<StateTensor>> {
    let file = File::open(path).map_err(|e| CirkdError::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut buf = [0u8; 8];
    let mut next = |r: &mut BufReader<File>| -> Result<[u8; 8]> {
        r.read_exact(&mut buf).map_err(|e| CirkdError::io(path, e))?;
        Ok(buf)
    };
    let bad = |detail: String| CirkdError::Format {
        path: path.into(),
        detail,
    };
    // guards against allocating from a corrupt header
    const MAX_ELEMS: u64 = 1 << 32;

    let count = u64::from_le_bytes(next(&mut r)?);
    if count > 1 << 20 {
        return Err(bad(format!("implausible tensor count {count}")));
    }
    let mut shapes = Vec::with_capacity(count as usize);
    for i in 0..count {
        let rank = u64::from_le_bytes(next(&mut r)?);
        if rank > 8 {
            return Err(bad(format!("tensor {i} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut elems: u64 = 1;
        for _ in 0..rank {
            let d = u64::from_le_bytes(next(&mut r)?);
            elems = elems.saturating_mul(d);
            shape.push(d as usize);
        }
        if elems > MAX_ELEMS {
            return Err(bad(format!("tensor {i} has {elems} elements")));
        }
        shapes.push(shape);
    }
    let mut out = Vec::with_capacity(shapes.len());
    for shape in shapes {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(next(&mut r)?));
        }
        out.push(StateTensor { shape, data });
    }
    if r.read(&mut buf).map_err(|e| CirkdError::io(path, e))? != 0 {
        return Err(bad("trailing bytes after tensor payload".into()));
    }
    Ok(out)
}
