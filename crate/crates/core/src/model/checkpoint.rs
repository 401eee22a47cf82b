//! The `SMC1` checkpoint: magic, version u32, tensor count u32, then per
//! tensor a u16 name length, UTF-8 name, u8 rank, u32 extents and f32 data,
//! all little-endian. The architecture travels as a `meta.config` tensor.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{MilModel, ModelConfig, ModelKind};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CKPT_MAGIC: &[u8; 4] = b"SMC1";
const CKPT_VERSION: u32 = 1;
const META: &str = "meta.config";

fn config_tensor(c: &ModelConfig) -> Tensor<f32> {
    let v = [
        c.kind.code(),
        c.input_dim as u32,
        c.reduce_dim.unwrap_or(0) as u32,
        c.slots as u32,
        c.heads as u32,
        c.dim as u32,
        c.num_classes as u32,
    ];
    Tensor::vector(v.iter().map(|&x| x as f32).collect())
}

fn config_from(t: &Tensor<f32>) -> Result<ModelConfig> {
    let v: Vec<u32> = t.data().iter().map(|&x| x as u32).collect();
    if v.len() != 7 {
        return Err(Error::Format(format!("{META} has {} entries, expected 7", v.len())));
    }
    Ok(ModelConfig {
        kind: ModelKind::from_code(v[0])?,
        input_dim: v[1] as usize,
        reduce_dim: (v[2] > 0).then_some(v[2] as usize),
        slots: v[3] as usize,
        heads: v[4] as usize,
        dim: v[5] as usize,
        num_classes: v[6] as usize,
    })
}

fn push_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) -> Result<()> {
    let len = u16::try_from(name.len())
        .map_err(|_| Error::Parameter(format!("tensor name too long: {name}")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.rank() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn encode_checkpoint<T: Scalar>(model: &MilModel<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(model.params().len() as u32 + 1).to_le_bytes());
    push_tensor(&mut out, META, &config_tensor(model.config()))?;
    for (name, t) in model.params().iter() {
        push_tensor(&mut out, name, &t.cast())?;
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Truncated {
                expected: end as u64,
                found: self.bytes.len() as u64,
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn tensor(&mut self) -> Result<(String, Tensor<f32>)> {
        let len = u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = self.take(1)?[0] as usize;
        let shape = (0..rank)
            .map(|_| self.u32().map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = self
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok((name, Tensor::new(shape, data)?))
    }
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<MilModel<T>> {
    if bytes.len() < 4 || &bytes[..4] != CKPT_MAGIC {
        return Err(Error::Format("bad checkpoint magic, expected SMC1".into()));
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()? as usize;
    let tensors = (0..count).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint tensors".into()));
    }
    let meta = tensors
        .iter()
        .find(|(n, _)| n == META)
        .ok_or_else(|| Error::Format(format!("checkpoint lacks {META}")))?;
    let mut model = MilModel::<T>::new(config_from(&meta.1)?, 0)?;
    let mut assigned = 0;
    for (name, t) in tensors.iter().filter(|(n, _)| n != META) {
        model.params_mut().assign(name, t.cast())?;
        assigned += 1;
    }
    if assigned != model.params().len() {
        return Err(Error::Format(format!(
            "checkpoint holds {assigned} parameters, model needs {}",
            model.params().len()
        )));
    }
    Ok(model)
}

pub fn save_checkpoint<T: Scalar>(model: &MilModel<T>, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<MilModel<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
