//! Binary checkpoint format.
//!
//! Layout (little-endian): magic `DM2W`, version `u32`, tensor count `u32`,
//! then per tensor: name length `u32`, name bytes (UTF-8), rank `u32`,
//! extents `u32[rank]`, and `f64` data in row-major order.

use std::io::{Read, Write};
use std::path::Path;

use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DM2W";
pub const VERSION: u32 = 1;

/// Tensor whose name carries the run's config hash; it holds no data of interest.
const HASH_PREFIX: &str = "meta.config_hash.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_params(params: &EncoderParams, config_hash: Option<&str>) -> Self {
        let mut tensors = params.named_tensors();
        if let Some(h) = config_hash {
            tensors.push((format!("{HASH_PREFIX}{h}"), Tensor::scalar(0.0)));
        }
        Self { tensors }
    }

    pub fn config_hash(&self) -> Option<&str> {
        self.tensors
            .iter()
            .find_map(|(n, _)| n.strip_prefix(HASH_PREFIX))
    }

    pub fn to_params(&self) -> Result<EncoderParams> {
        EncoderParams::from_named(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&to_u32(self.tensors.len(), "tensor count")?.to_le_bytes())?;
        for (name, t) in &self.tensors {
            out.write_all(&to_u32(name.len(), "name length")?.to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            out.write_all(&to_u32(t.rank(), "rank")?.to_le_bytes())?;
            for &e in t.shape() {
                out.write_all(&to_u32(e, "extent")?.to_le_bytes())?;
            }
            for v in t.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let version = read_u32(&mut input)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = read_u32(&mut input)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let len = read_u32(&mut input)? as usize;
            let mut name = vec![0u8; len];
            input.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = read_u32(&mut input)? as usize;
            let shape = (0..rank)
                .map(|_| read_u32(&mut input).map(|v| v as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let mut raw = vec![0u8; numel * 8];
            input.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read(bytes.as_slice())
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} exceeds u32")))
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
