#![allow(dead_code)]

use std::path::PathBuf;

use mcsvm::dataset::{parse_libsvm, SparseDataset};
use mcsvm::synth::{synthetic, SynthSpec};

pub fn data_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

pub fn load(name: &str) -> SparseDataset {
    let file = std::fs::File::open(data_path(name)).unwrap();
    parse_libsvm(std::io::BufReader::new(file)).unwrap()
}

/// Small random instance for oracle comparisons.
pub fn small_instance(seed: u64) -> SparseDataset {
    let classes = 2 + (seed % 4) as usize;
    let n = 12 + (seed * 7 % 19) as usize;
    synthetic(&SynthSpec {
        samples: n,
        classes,
        dim: 4 + (seed % 7) as usize,
        nnz: 3,
        signal: 0.6,
        seed: 1000 + seed,
    })
    .unwrap()
}

/// A box-constrained concave quadratic `max 1ᵀz − ½‖Az‖²` over `z ∈ [0, C]^m`,
/// with `A` stored densely by columns.
pub struct BoxQp {
    pub columns: Vec<Vec<f64>>,
    pub c: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl BoxQp {
    fn gram(&self) -> Vec<Vec<f64>> {
        let m = self.columns.len();
        let mut q = vec![vec![0.0; m]; m];
        for a in 0..m {
            for b in a..m {
                let v = dot(&self.columns[a], &self.columns[b]);
                q[a][b] = v;
                q[b][a] = v;
            }
        }
        q
    }

    pub fn objective(&self, z: &[f64]) -> f64 {
        let q = self.gram();
        let quad: f64 = (0..z.len()).map(|a| z[a] * dot(&q[a], z)).sum();
        z.iter().sum::<f64>() - 0.5 * quad
    }

    /// Accelerated projected gradient ascent with adaptive restart.
    pub fn solve(&self) -> (Vec<f64>, f64) {
        let m = self.columns.len();
        let q = self.gram();
        // largest eigenvalue of Q by power iteration, padded for safety
        // irrational-ish start so it is not orthogonal to the top eigenvector
        let mut v: Vec<f64> = (0..m).map(|a| 1.0 + (a as f64 * 0.618_033_988_7).fract()).collect();
        let mut lambda = 0.0;
        for _ in 0..500 {
            let w: Vec<f64> = q.iter().map(|row| dot(row, &v)).collect();
            let norm = dot(&w, &w).sqrt();
            if norm == 0.0 {
                break;
            }
            lambda = norm / dot(&v, &v).sqrt();
            v = w.iter().map(|x| x / norm).collect();
        }
        let step = 1.0 / (1.1 * lambda).max(1e-12);
        let obj = |z: &[f64]| -> f64 {
            let quad: f64 = (0..m).map(|a| z[a] * dot(&q[a], z)).sum();
            z.iter().sum::<f64>() - 0.5 * quad
        };
        let project = |x: f64| x.clamp(0.0, self.c);
        let mut z = vec![0.0; m];
        let mut y = z.clone();
        let mut t = 1.0f64;
        let mut f_prev = obj(&z);
        let mut restarted = false;
        // concavity bounds the optimum by f(z) + max_v ∇f(z)ᵀ(v − z) over the
        // box, so this gap certifies how far z is from optimal
        let certificate = |z: &[f64]| -> f64 {
            (0..m)
                .map(|a| {
                    let g = 1.0 - dot(&q[a], z);
                    self.c * g.max(0.0) - g * z[a]
                })
                .sum()
        };
        for iter in 0..2_000_000 {
            if iter % 25 == 0 && certificate(&z) < 1e-12 {
                break;
            }
            let grad: Vec<f64> = (0..m).map(|a| 1.0 - dot(&q[a], &y)).collect();
            let next: Vec<f64> = (0..m).map(|a| project(y[a] + step * grad[a])).collect();
            let f_next = obj(&next);
            if f_next < f_prev {
                if restarted {
                    // a plain gradient step from z no longer ascends: z is
                    // optimal up to rounding
                    break;
                }
                // restart the momentum
                restarted = true;
                t = 1.0;
                y = z.clone();
                continue;
            }
            restarted = false;
            let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
            y = (0..m)
                .map(|a| next[a] + (t - 1.0) / t_next * (next[a] - z[a]))
                .collect();
            z = next;
            t = t_next;
            f_prev = f_next;
        }
        (z.clone(), obj(&z))
    }
}

fn dense(ds: &SparseDataset, i: usize) -> Vec<f64> {
    let mut x = vec![0.0; ds.dim()];
    ds.sample(i).axpy(1.0, &mut x);
    x
}

/// LLW dual with the mean vector eliminated: block `c` of `A z` is
/// `Xα_c − (1/𝒞) Σ_c' Xα_c'`.
pub fn llw_qp(ds: &SparseDataset, c: f64) -> BoxQp {
    let k = ds.num_classes();
    let d = ds.dim();
    let mut columns = Vec::new();
    for i in 0..ds.len() {
        let x = dense(ds, i);
        for cls in 0..k {
            if cls == ds.label(i) {
                continue;
            }
            let mut col = vec![0.0; k * d];
            for blk in 0..k {
                let coef = if blk == cls { 1.0 } else { 0.0 } - 1.0 / k as f64;
                for j in 0..d {
                    col[blk * d + j] = coef * x[j];
                }
            }
            columns.push(col);
        }
    }
    BoxQp { columns, c }
}

/// WW dual after substituting the own-class variable: `α_{i,c}` moves `x_i`
/// into block `y_i` and out of block `c`.
pub fn ww_qp(ds: &SparseDataset, c: f64) -> BoxQp {
    let k = ds.num_classes();
    let d = ds.dim();
    let mut columns = Vec::new();
    for i in 0..ds.len() {
        let x = dense(ds, i);
        for cls in 0..k {
            if cls == ds.label(i) {
                continue;
            }
            let mut col = vec![0.0; k * d];
            for j in 0..d {
                col[ds.label(i) * d + j] += x[j];
                col[cls * d + j] -= x[j];
            }
            columns.push(col);
        }
    }
    BoxQp { columns, c }
}

/// Binary hinge SVM dual for class `cls` against the rest.
pub fn binary_qp(ds: &SparseDataset, cls: usize, c: f64) -> BoxQp {
    let columns = (0..ds.len())
        .map(|i| {
            let s = if ds.label(i) == cls { 1.0 } else { -1.0 };
            dense(ds, i).into_iter().map(|v| s * v).collect()
        })
        .collect();
    BoxQp { columns, c }
}

/// Checks that consecutive dual values never decrease beyond rounding.
pub fn is_monotone(duals: &[f64]) -> bool {
    duals
        .windows(2)
        .all(|w| w[1] >= w[0] - 1e-12 * w[0].abs().max(w[1].abs()))
}
