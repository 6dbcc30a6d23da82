//! Named-array checkpoint container.
//!
//! Binary layout, all integers little-endian:
//!
//! ```text
//! magic "NCKP" | u32 version | u32 count
//! repeated count times:
//!   u32 name_len | name (utf-8) | u8 dtype (1 = f32, 2 = f64)
//!   u32 rank | u64 dims[rank] | u64 payload_bytes | payload
//! ```
//!
//! The hyperparameter manifest is a separate plain-text file of sorted
//! `key = value` lines.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{NumError, Result};
use crate::tensor::{numel, Tensor};

const MAGIC: &[u8; 4] = b"NCKP";
const VERSION: u32 = 1;
pub const PARAMS_FILE: &str = "params.bin";
pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl ArrayData {
    fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl NamedArray {
    pub fn f32(name: impl Into<String>, t: &Tensor<f32>) -> Self {
        Self {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: ArrayData::F32(t.data().to_vec()),
        }
    }

    pub fn to_tensor_f32(&self) -> Result<Tensor<f32>> {
        match &self.data {
            ArrayData::F32(v) => Tensor::new(self.shape.clone(), v.clone()),
            ArrayData::F64(_) => Err(NumError::Format(format!("array {} is f64, expected f32", self.name))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub arrays: Vec<NamedArray>,
    pub manifest: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn push_f32(&mut self, name: impl Into<String>, t: &Tensor<f32>) {
        self.arrays.push(NamedArray::f32(name, t));
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.manifest.insert(key.into(), value.to_string());
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            out.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
            out.extend_from_slice(a.name.as_bytes());
            let tag = match a.data {
                ArrayData::F32(_) => 1u8,
                ArrayData::F64(_) => 2u8,
            };
            out.push(tag);
            out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
            for &d in &a.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &a.data {
                ArrayData::F32(v) => {
                    out.extend_from_slice(&((v.len() * 4) as u64).to_le_bytes());
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                ArrayData::F64(v) => {
                    out.extend_from_slice(&((v.len() * 8) as u64).to_le_bytes());
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(NumError::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(NumError::Format(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|e| NumError::Format(e.to_string()))?
                .to_string();
            let tag = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let nbytes = r.u64()? as usize;
            let payload = r.take(nbytes)?;
            let data = match tag {
                1 => ArrayData::F32(
                    payload
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                2 => ArrayData::F64(
                    payload
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                t => return Err(NumError::Format(format!("unknown dtype tag {t} for {name}"))),
            };
            if data.len() != numel(&shape) {
                return Err(NumError::Format(format!("payload of {name} does not match shape {shape:?}")));
            }
            arrays.push(NamedArray { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(NumError::Format("trailing bytes".into()));
        }
        Ok(Self {
            arrays,
            manifest: BTreeMap::new(),
        })
    }

    pub fn manifest_text(&self) -> String {
        self.manifest.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn parse_manifest(text: &str) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| NumError::Format(format!("manifest line {} is not `key = value`", lineno + 1)))?;
            out.insert(k.to_string(), v.to_string());
        }
        Ok(out)
    }

    /// Writes `params.bin` and `manifest.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(PARAMS_FILE), self.encode())?;
        fs::write(dir.join(MANIFEST_FILE), self.manifest_text())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mut ck = Self::decode(&fs::read(dir.join(PARAMS_FILE))?)?;
        ck.manifest = Self::parse_manifest(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        Ok(ck)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| NumError::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn encode_decode_is_bit_exact(
            a in proptest::collection::vec(proptest::num::f32::ANY, 0..40),
            b in proptest::collection::vec(proptest::num::f64::ANY, 1..10),
            name in "[a-z_.]{1,12}",
        ) {
            let ck = Checkpoint {
                arrays: vec![
                    NamedArray { name: name.clone(), shape: vec![a.len()], data: ArrayData::F32(a.clone()) },
                    NamedArray { name: format!("{name}2"), shape: vec![1, b.len()], data: ArrayData::F64(b.clone()) },
                ],
                manifest: BTreeMap::new(),
            };
            let back = Checkpoint::decode(&ck.encode()).unwrap();
            // compare bit patterns so NaN payloads count too
            let bits = |c: &Checkpoint| -> Vec<u64> {
                c.arrays.iter().flat_map(|x| match &x.data {
                    ArrayData::F32(v) => v.iter().map(|f| f.to_bits() as u64).collect::<Vec<_>>(),
                    ArrayData::F64(v) => v.iter().map(|f| f.to_bits()).collect(),
                }).collect()
            };
            prop_assert_eq!(bits(&ck), bits(&back));
            prop_assert_eq!(back.arrays[1].shape.clone(), vec![1, b.len()]);
        }
    }

    #[test]
    fn truncated_input_is_an_error() {
        let mut ck = Checkpoint::default();
        ck.push_f32("w", &Tensor::full([3], 1.5));
        let bytes = ck.encode();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn save_and_load_directory() {
        let dir = tempfile::tempdir().unwrap();
        let mut ck = Checkpoint::default();
        ck.push_f32("layer.w", &Tensor::from_fn([2, 2], |i| i as f32 * 0.1));
        ck.set("width", 16);
        ck.set("schedule", "cosine");
        ck.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back, ck);
    }
}
