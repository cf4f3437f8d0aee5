//! Primal weight matrix, prediction and model persistence.
//!
//! Model files are little-endian:
//!
//! ```text
//! "MCSVM1"                      6-byte magic (includes the format version)
//! u32 d, u32 num_classes
//! num_classes x (u32 byte length, UTF-8 label name)
//! num_classes x (u64 nnz, nnz x (u32 feature index (1-based), f64 value))
//! ```

use std::io::{Read, Write};

use crate::dataset::SparseVector;
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 6] = b"MCSVM1";

/// Dense per-class weight vectors `w_1..w_C`, each of length `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    dim: usize,
    weights: Vec<Vec<f64>>,
    label_names: Vec<String>,
}

impl WeightMatrix {
    pub fn zeros(dim: usize, label_names: Vec<String>) -> Self {
        Self {
            dim,
            weights: vec![vec![0.0; dim]; label_names.len()],
            label_names,
        }
    }

    pub fn from_vectors(weights: Vec<Vec<f64>>, label_names: Vec<String>) -> Result<Self> {
        if weights.len() != label_names.len() {
            return Err(Error::InvalidArgument(format!(
                "{} weight vectors for {} labels",
                weights.len(),
                label_names.len()
            )));
        }
        let dim = weights.first().map_or(0, Vec::len);
        if weights.iter().any(|w| w.len() != dim) {
            return Err(Error::InvalidArgument("weight vectors differ in length".into()));
        }
        if weights.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite weight".into()));
        }
        Ok(Self {
            dim,
            weights,
            label_names,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.weights.len()
    }

    pub fn label_names(&self) -> &[String] {
        &self.label_names
    }

    pub fn class_weights(&self, c: usize) -> &[f64] {
        &self.weights[c]
    }

    pub fn class_weights_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.weights[c]
    }

    pub fn score(&self, c: usize, x: &SparseVector) -> f64 {
        x.dot(&self.weights[c])
    }

    /// `argmax_c w_c^T x`; ties go to the smallest class id.
    pub fn predict(&self, x: &SparseVector) -> usize {
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for c in 0..self.weights.len() {
            let s = self.score(c, x);
            if s > best_score {
                best = c;
                best_score = s;
            }
        }
        best
    }

    /// Percentage of entries with `|W_jc| > threshold`.
    pub fn density(&self, threshold: f64) -> f64 {
        let total = self.dim * self.weights.len();
        if total == 0 {
            return 0.0;
        }
        let nz = self
            .weights
            .iter()
            .flatten()
            .filter(|v| v.abs() > threshold)
            .count();
        100.0 * nz as f64 / total as f64
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(MODEL_MAGIC)?;
        out.write_all(&(self.dim as u32).to_le_bytes())?;
        out.write_all(&(self.weights.len() as u32).to_le_bytes())?;
        for name in &self.label_names {
            out.write_all(&(name.len() as u32).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
        }
        for w in &self.weights {
            let nnz = w.iter().filter(|v| **v != 0.0).count();
            out.write_all(&(nnz as u64).to_le_bytes())?;
            for (j, v) in w.iter().enumerate().filter(|(_, v)| **v != 0.0) {
                out.write_all(&(j as u32 + 1).to_le_bytes())?;
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 6];
        match input.read_exact(&mut magic) {
            Ok(()) if &magic == MODEL_MAGIC => {}
            Ok(()) => return Err(Error::BadHeader),
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Err(Error::BadHeader),
            Err(e) => return Err(e.into()),
        }
        let dim = read_u32(&mut input)? as usize;
        let num_classes = read_u32(&mut input)? as usize;
        let mut label_names = Vec::with_capacity(num_classes.min(1 << 16));
        for _ in 0..num_classes {
            let len = read_u32(&mut input)? as usize;
            let mut bytes = Vec::new();
            (&mut input).take(len as u64).read_to_end(&mut bytes)?;
            if bytes.len() != len {
                return Err(Error::Truncated);
            }
            let name = String::from_utf8(bytes)
                .map_err(|_| Error::CorruptModel("label name is not UTF-8".into()))?;
            label_names.push(name);
        }
        let mut weights = Vec::with_capacity(num_classes.min(1 << 16));
        for c in 0..num_classes {
            let nnz = read_u64(&mut input)?;
            if nnz > dim as u64 {
                return Err(Error::CorruptModel(format!("class {c} claims {nnz} non-zeros")));
            }
            let mut w = vec![0.0; dim];
            let mut last = 0u32;
            for _ in 0..nnz {
                let j = read_u32(&mut input)?;
                let v = f64::from_le_bytes(read_array(&mut input)?);
                if j <= last || j as usize > dim {
                    return Err(Error::CorruptModel(format!("bad feature index {j} in class {c}")));
                }
                if !v.is_finite() {
                    return Err(Error::CorruptModel(format!("non-finite weight in class {c}")));
                }
                w[j as usize - 1] = v;
                last = j;
            }
            weights.push(w);
        }
        Ok(Self {
            dim,
            weights,
            label_names,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(bytes)
    }
}

fn read_array<R: Read, const N: usize>(input: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    input.read_exact(&mut buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated
        } else {
            e.into()
        }
    })?;
    Ok(buf)
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(input)?))
}

fn read_u64<R: Read>(input: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(input)?))
}
