//! Flat parameter vectors with named blocks, plus their JSON checkpoint format.

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

impl Block {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len
    }
}

/// Maps named blocks onto disjoint index ranges that tile the vector.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Layout {
    blocks: Vec<Block>,
}

impl Layout {
    /// Builds a contiguous layout from `(name, len)` pairs in order.
    pub fn contiguous<S: Into<String>>(blocks: impl IntoIterator<Item = (S, usize)>) -> Self {
        let mut start = 0;
        let blocks = blocks
            .into_iter()
            .map(|(name, len)| {
                let b = Block { name: name.into(), start, len };
                start += len;
                b
            })
            .collect();
        Self { blocks }
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn total_len(&self) -> usize {
        self.blocks.iter().map(|b| b.len).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }

    /// Checks that blocks are disjoint, uniquely named and cover `0..len`.
    pub fn validate(&self, len: usize) -> Result<()> {
        let mut sorted: Vec<&Block> = self.blocks.iter().collect();
        sorted.sort_by_key(|b| b.start);
        let mut cursor = 0;
        for b in &sorted {
            if b.start != cursor {
                return Err(Error::InvalidParams(format!("layout gap or overlap at index {cursor} (block {} starts at {})", b.name, b.start)));
            }
            cursor += b.len;
        }
        if cursor != len {
            return Err(Error::InvalidParams(format!("layout covers {cursor} of {len} values")));
        }
        let mut names: Vec<&str> = self.blocks.iter().map(|b| b.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.blocks.len() {
            return Err(Error::InvalidParams("duplicate block names".into()));
        }
        Ok(())
    }
}

/// A finite real vector with a named-block layout. Houses model and
/// constraint parameters alike.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams")]
pub struct ParamVector {
    layout: Layout,
    values: Vec<f64>,
}

#[derive(Deserialize)]
struct RawParams {
    layout: Layout,
    values: Vec<f64>,
}

impl TryFrom<RawParams> for ParamVector {
    type Error = Error;

    fn try_from(raw: RawParams) -> Result<Self> {
        ParamVector::new(raw.layout, raw.values)
    }
}

impl ParamVector {
    pub fn new(layout: Layout, values: Vec<f64>) -> Result<Self> {
        layout.validate(values.len())?;
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParams(format!("value at index {i} is not finite")));
        }
        Ok(Self { layout, values })
    }

    pub fn zeros(layout: Layout) -> Self {
        let n = layout.total_len();
        Self { layout, values: vec![0.0; n] }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn block(&self, name: &str) -> Option<&[f64]> {
        self.layout.get(name).map(|b| &self.values[b.range()])
    }

    pub fn block_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.layout.get(name)?.range();
        Some(&mut self.values[range])
    }

    /// Replaces all values; rejects wrong lengths and non-finite entries.
    pub fn set_values(&mut self, values: Vec<f64>) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::DimensionMismatch { expected: self.values.len(), got: values.len() });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("parameter update produced a non-finite value at index {i}")));
        }
        self.values = values;
        Ok(())
    }

    /// Returns a copy with `values + step * direction`.
    pub fn stepped(&self, direction: &[f64], step: f64) -> Result<Self> {
        if direction.len() != self.values.len() {
            return Err(Error::DimensionMismatch { expected: self.values.len(), got: direction.len() });
        }
        let mut out = self.clone();
        let values = self.values.iter().zip(direction).map(|(v, d)| v + step * d).collect();
        out.set_values(values)?;
        Ok(out)
    }

    /// Hex SHA-256 of the little-endian value bytes.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.values {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
