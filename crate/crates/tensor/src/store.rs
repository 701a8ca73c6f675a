use std::collections::HashMap;
use std::io::{Read, Write};

use crate::{CheckpointError, Tensor};

const MAGIC: &[u8; 4] = b"PMTR";
const VERSION: u32 = 1;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors, in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    lookup: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Panics on a duplicate name.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        let id = ParamId(self.tensors.len());
        let prev = self.lookup.insert(name.clone(), id);
        assert!(prev.is_none(), "duplicate parameter name {name:?}");
        self.names.push(name);
        self.tensors.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn records(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Overwrites values from `(name, tensor)` records. Every stored name must
    /// be present with a matching shape; extra records are ignored.
    pub fn load_records(&mut self, records: &[(String, Tensor)]) -> Result<(), CheckpointError> {
        let by_name: HashMap<&str, &Tensor> =
            records.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (name, slot) in self.names.iter().zip(self.tensors.iter_mut()) {
            let t = by_name
                .get(name.as_str())
                .ok_or_else(|| CheckpointError::Missing(name.clone()))?;
            if t.shape() != slot.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.clone(),
                    expected: slot.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            *slot = (*t).clone();
        }
        Ok(())
    }
}

/// Writes `(name, tensor)` records in the versioned little-endian format:
///
/// ```text
/// magic "PMTR" | u32 version | u32 count
/// per record: u32 name_len | name utf-8 | u32 rank | u64 dims[rank] | f64 values[prod(dims)]
/// ```
pub fn write_records<'a, W: Write>(
    mut w: W,
    records: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<(), CheckpointError> {
    let records: Vec<_> = records.into_iter().collect();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for (name, t) in records {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads records written by [`write_records`].
pub fn read_records<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| CheckpointError::Malformed("name is not utf-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 8];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        out.push((name, t));
    }
    Ok(out)
}
