//! Versioned binary checkpoints.
//!
//! Layout (little endian): magic `GDAK`, `u32` format version, `u32` kind
//! length + UTF-8 kind tag, `u32` metadata length + JSON metadata, `u32`
//! tensor count, then per tensor a `u64` element count followed by `f32`s.
//! Tensors are parameters then buffers in module visit order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::layers::Module;
use super::tensor::{Scalar, Tensor};
use crate::error::{GdaError, Result};

pub const MAGIC: &[u8; 4] = b"GDAK";
pub const FORMAT_VERSION: u32 = 1;

fn collect<T: Scalar>(module: &mut dyn Module<T>) -> Vec<Vec<f32>> {
    let mut out = Vec::new();
    module.visit_params(&mut |p| out.push(p.value.data().iter().map(|v| v.as_f64() as f32).collect()));
    module.visit_buffers(&mut |b| out.push(b.data().iter().map(|v| v.as_f64() as f32).collect()));
    out
}

pub fn write_checkpoint<T: Scalar, W: Write>(
    mut w: W,
    kind: &str,
    metadata: &serde_json::Value,
    module: &mut dyn Module<T>,
) -> Result<()> {
    let meta = serde_json::to_vec(metadata)?;
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    w.write_u32::<LittleEndian>(kind.len() as u32)?;
    w.write_all(kind.as_bytes())?;
    w.write_u32::<LittleEndian>(meta.len() as u32)?;
    w.write_all(&meta)?;
    let tensors = collect(module);
    w.write_u32::<LittleEndian>(tensors.len() as u32)?;
    for t in tensors {
        w.write_u64::<LittleEndian>(t.len() as u64)?;
        for v in t {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

pub fn save<T: Scalar>(
    path: &Path,
    kind: &str,
    metadata: &serde_json::Value,
    module: &mut dyn Module<T>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, kind, metadata, module)?;
    w.flush()?;
    Ok(())
}

/// Header of a checkpoint plus its raw tensors.
#[derive(Debug, Clone)]
pub struct RawCheckpoint {
    pub kind: String,
    pub metadata: serde_json::Value,
    pub tensors: Vec<Vec<f32>>,
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<RawCheckpoint> {
    let bad = |msg: &str| GdaError::Checkpoint(msg.to_string());
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != FORMAT_VERSION {
        return Err(GdaError::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let read_block = |r: &mut R| -> Result<Vec<u8>> {
        let len = r.read_u32::<LittleEndian>()? as usize;
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf)?;
        Ok(buf)
    };
    let kind = String::from_utf8(read_block(&mut r)?).map_err(|_| bad("kind is not UTF-8"))?;
    let metadata = serde_json::from_slice(&read_block(&mut r)?)?;
    let count = r.read_u32::<LittleEndian>()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.read_u64::<LittleEndian>()? as usize;
        let mut t = vec![0f32; len];
        r.read_f32_into::<LittleEndian>(&mut t)?;
        tensors.push(t);
    }
    Ok(RawCheckpoint {
        kind,
        metadata,
        tensors,
    })
}

pub fn load_raw(path: &Path) -> Result<RawCheckpoint> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

/// Copy checkpoint tensors into a module with the identical layout.
pub fn restore<T: Scalar>(raw: &RawCheckpoint, module: &mut dyn Module<T>) -> Result<()> {
    let mut shapes = Vec::new();
    module.visit_params(&mut |p| shapes.push(p.value.len()));
    module.visit_buffers(&mut |b| shapes.push(b.len()));
    let expected: Vec<usize> = raw.tensors.iter().map(Vec::len).collect();
    if shapes != expected {
        return Err(GdaError::Checkpoint(format!(
            "layout mismatch: module has {} tensors, checkpoint has {}",
            shapes.len(),
            expected.len()
        )));
    }
    let mut it = raw.tensors.iter();
    let mut fill = |dst: &mut Tensor<T>| {
        let src = it.next().expect("length checked");
        for (d, s) in dst.data_mut().iter_mut().zip(src) {
            *d = T::lit(f64::from(*s));
        }
    };
    module.visit_params(&mut |p| fill(&mut p.value));
    module.visit_buffers(&mut |b| fill(b));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::{snapshot, Linear, Sequential};
    use crate::nn::norm::BatchNorm;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(seed: u64) -> Sequential<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Sequential::new()
            .push(Linear::new(3, 4, &mut rng))
            .push(BatchNorm::new(4))
    }

    #[test]
    fn round_trip_restores_parameters() {
        let mut a = model(1);
        let meta = serde_json::json!({"widths": [3, 4]});
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, "test", &meta, &mut a).unwrap();
        let raw = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(raw.kind, "test");
        assert_eq!(raw.metadata, meta);
        let mut b = model(2);
        assert_ne!(snapshot(&mut a), snapshot(&mut b));
        restore(&raw, &mut b).unwrap();
        assert_eq!(snapshot(&mut a), snapshot(&mut b));
    }

    #[test]
    fn rejects_bad_magic_and_layout() {
        assert!(read_checkpoint(&b"NOPE\x01\x00\x00\x00"[..]).is_err());
        let mut a = model(1);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, "test", &serde_json::Value::Null, &mut a).unwrap();
        let raw = read_checkpoint(buf.as_slice()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut other: Sequential<f32> = Sequential::new().push(Linear::new(2, 2, &mut rng));
        assert!(restore(&raw, &mut other).is_err());
    }
}
