//! Random sparse classification data for tests and benchmarks.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{SparseDataset, SparseVector};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub samples: usize,
    pub classes: usize,
    pub dim: usize,
    /// Non-zero features per sample (capped at `dim`).
    pub nnz: usize,
    /// Fraction of each sample's features drawn from its class prototype.
    pub signal: f64,
    pub seed: u64,
}

/// Each class gets a random set of prototype features; a sample mixes
/// features from its class prototype with uniformly random ones. Labels are
/// `c0, c1, ...` and every class has at least one sample when
/// `samples >= classes`.
pub fn synthetic(spec: &SynthSpec) -> Result<SparseDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let nnz = spec.nnz.clamp(1, spec.dim.max(1));
    let proto_len = (2 * nnz).min(spec.dim);
    let prototypes: Vec<Vec<usize>> = (0..spec.classes)
        .map(|_| sample(&mut rng, spec.dim, proto_len).into_vec())
        .collect();
    let mut samples = Vec::with_capacity(spec.samples);
    let mut labels = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let y = if i < spec.classes { i } else { rng.gen_range(0..spec.classes) };
        let mut feats: Vec<(u32, f64)> = Vec::with_capacity(nnz);
        for _ in 0..nnz {
            let j = if rng.gen_bool(spec.signal) {
                prototypes[y][rng.gen_range(0..proto_len)]
            } else {
                rng.gen_range(0..spec.dim)
            };
            feats.push((j as u32 + 1, rng.gen_range(0.1..1.0)));
        }
        feats.sort_unstable_by_key(|f| f.0);
        feats.dedup_by_key(|f| f.0);
        samples.push(SparseVector::new(feats)?);
        labels.push(y);
    }
    let names = (0..spec.classes).map(|c| format!("c{c}")).collect();
    SparseDataset::from_parts(samples, labels, names, spec.dim)
}
