//! Lee–Lin–Wahba multi-class SVM by dual block coordinate ascent.
//!
//! The dual keeps an auxiliary mean vector `w̄`, which makes the objective a
//! sum of independent per-class terms while `w̄` is held fixed. Each class
//! column `α_c` is optimized one coordinate at a time, and `w̄` is refreshed a
//! few times per epoch by an exact maximization over that block.
//!
//! Sign convention: every class stores `u_c = Xα_c − w̄`. Coordinate steps
//! then read `u_c += δ x_i`, and the primal weights are `w_c = −u_c`.

use std::time::Instant;

use rayon::prelude::*;

use crate::dataset::{EpochShuffler, SparseDataset};
use crate::error::{Error, Result};
use crate::model::WeightMatrix;
use crate::sched::chunk_classes;
use crate::solver::{
    clipped_step, is_active, split_chunks_mut, EpochStats, LocalReducer, Reducer, SolverConfig,
    Termination, TrainStats,
};

const FEATURE_BLOCK: usize = 4096;

/// One class column: its vector `u_c` and dual variables `α_{·,c}`.
#[derive(Debug, Clone)]
pub(crate) struct LlwColumn {
    pub(crate) class: usize,
    pub(crate) u: Vec<f64>,
    /// Indexed by sample; entries of the class's own samples stay zero.
    pub(crate) alpha: Vec<f64>,
    pub(crate) last_update: Vec<u32>,
    order: Vec<u32>,
    optimal: bool,
}

impl LlwColumn {
    fn new(class: usize, n: usize, dim: usize) -> Self {
        Self {
            class,
            u: vec![0.0; dim],
            alpha: vec![0.0; n],
            last_update: vec![0; n],
            order: Vec::new(),
            optimal: true,
        }
    }

    #[inline]
    fn update(&mut self, ds: &SparseDataset, i: usize, c: f64, eps: f64, epoch: u32) -> f64 {
        let k = ds.norm_sq(i);
        if k <= 0.0 {
            return 0.0;
        }
        let x = ds.sample(i);
        let g = x.dot(&self.u) - 1.0;
        match clipped_step(g, self.alpha[i], c, eps, k) {
            Some((delta, alpha)) => {
                x.axpy(delta, &mut self.u);
                self.alpha[i] = alpha;
                self.last_update[i] = epoch;
                self.optimal = false;
                delta
            }
            None => 0.0,
        }
    }

    fn build_order(&mut self, ds: &SparseDataset, perm: &[usize], epoch: u32, full: bool, shrink_after: u32) {
        self.order.clear();
        self.optimal = true;
        let labels = ds.labels();
        let norms = ds.norms();
        for &i in perm {
            if labels[i] != self.class
                && norms[i] > 0.0
                && is_active(self.last_update[i], epoch, full, shrink_after)
            {
                self.order.push(i as u32);
            }
        }
    }

    fn sweep_segment(&mut self, ds: &SparseDataset, seg: usize, segments: usize, c: f64, eps: f64, epoch: u32) {
        let len = self.order.len();
        let (lo, hi) = (seg * len / segments, (seg + 1) * len / segments);
        for p in lo..hi {
            let i = self.order[p] as usize;
            self.update(ds, i, c, eps, epoch);
        }
    }

    fn dual_term(&self) -> f64 {
        let sq: f64 = self.u.iter().map(|v| v * v).sum();
        let lin: f64 = self.alpha.iter().sum();
        -0.5 * sq + lin
    }

    fn primal_term(&self, ds: &SparseDataset, c: f64) -> f64 {
        let sq: f64 = self.u.iter().map(|v| v * v).sum();
        let mut hinge = 0.0;
        for (i, x) in ds.samples().iter().enumerate() {
            if ds.label(i) != self.class {
                hinge += (1.0 - x.dot(&self.u)).max(0.0);
            }
        }
        0.5 * sq + c * hinge
    }
}

/// Solver state for LLW: the class columns held by this process.
///
/// A single-process run holds every class. A distributed node holds only the
/// classes it owns; methods that need the full model say so.
#[derive(Debug, Clone)]
pub struct LlwState {
    pub(crate) columns: Vec<LlwColumn>,
    num_classes: usize,
    dim: usize,
    c: f64,
    eps: f64,
    epoch: u32,
}

impl LlwState {
    /// Zero state over all classes of `ds`.
    pub fn new(ds: &SparseDataset, cfg: &SolverConfig) -> Self {
        Self::for_classes(ds, cfg, &(0..ds.num_classes()).collect::<Vec<_>>())
    }

    /// Zero state over a subset of classes (sorted ascending).
    pub fn for_classes(ds: &SparseDataset, cfg: &SolverConfig, classes: &[usize]) -> Self {
        let mut classes = classes.to_vec();
        classes.sort_unstable();
        Self {
            columns: classes
                .iter()
                .map(|&c| LlwColumn::new(c, ds.len(), ds.dim()))
                .collect(),
            num_classes: ds.num_classes(),
            dim: ds.dim(),
            c: cfg.c,
            eps: cfg.epsilon,
            epoch: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn owned_classes(&self) -> Vec<usize> {
        self.columns.iter().map(|col| col.class).collect()
    }

    fn is_complete(&self) -> bool {
        self.columns.len() == self.num_classes
    }

    fn column_index(&self, c: usize) -> Result<usize> {
        self.columns
            .binary_search_by_key(&c, |col| col.class)
            .map_err(|_| Error::InvalidArgument(format!("class {c} is not held by this state")))
    }

    /// `u_c = Xα_c − w̄` for class `c`.
    pub fn u(&self, c: usize) -> &[f64] {
        &self.columns[self.column_index(c).expect("unknown class")].u
    }

    pub fn alpha(&self, i: usize, c: usize) -> f64 {
        self.columns[self.column_index(c).expect("unknown class")].alpha[i]
    }

    /// Epoch counter used for shrinking bookkeeping.
    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn set_epoch(&mut self, epoch: u32) {
        self.epoch = epoch;
    }

    /// Optimizes the single dual variable `α_{i,c}` with `w̄` fixed and
    /// returns the step taken (zero inside the tolerance band or for a zero
    /// sample).
    pub fn update_coordinate(&mut self, ds: &SparseDataset, i: usize, c: usize) -> Result<f64> {
        if ds.label(i) == c {
            return Err(Error::InvalidArgument(format!(
                "sample {i} belongs to class {c}; its own-class variable is fixed at zero"
            )));
        }
        let (cr, eps, epoch) = (self.c, self.eps, self.epoch);
        let idx = self.column_index(c)?;
        Ok(self.columns[idx].update(ds, i, cr, eps, epoch))
    }

    /// Exact maximization over `w̄`: subtracts the class mean of `u_c`.
    pub fn sync(&mut self) {
        self.sync_with(&mut LocalReducer)
            .expect("local reduction cannot fail");
    }

    pub(crate) fn sync_with<R: Reducer>(&mut self, reducer: &mut R) -> Result<()> {
        let total = reducer.sum(self.partial_sum())?;
        self.subtract_mean(&total)
    }

    /// Per-feature `Σ_c u_c` over the held columns, summed in class order.
    pub(crate) fn partial_sum(&self) -> Vec<f64> {
        let mut partial = vec![0.0; self.dim];
        let columns = &self.columns;
        partial
            .par_chunks_mut(FEATURE_BLOCK)
            .enumerate()
            .for_each(|(b, out)| {
                let off = b * FEATURE_BLOCK;
                let len = out.len();
                for col in columns {
                    for (o, v) in out.iter_mut().zip(&col.u[off..off + len]) {
                        *o += v;
                    }
                }
            });
        partial
    }

    /// Subtracts `total / C` from every held `u_c`.
    pub(crate) fn subtract_mean(&mut self, total: &[f64]) -> Result<()> {
        if total.len() != self.dim {
            return Err(Error::Protocol(format!(
                "reduction returned {} entries, expected {}",
                total.len(),
                self.dim
            )));
        }
        let k = self.num_classes as f64;
        let delta: Vec<f64> = total.iter().map(|t| t / k).collect();
        self.columns.par_iter_mut().for_each(|col| {
            for (u, d) in col.u.iter_mut().zip(&delta) {
                *u -= d;
            }
        });
        Ok(())
    }

    /// Dual objective contribution of the held columns; the full dual for a
    /// complete state. Valid for any `w̄`, not only right after a sync.
    pub fn dual_objective(&self) -> f64 {
        let terms: Vec<f64> = self.columns.par_iter().map(LlwColumn::dual_term).collect();
        terms.iter().sum()
    }

    /// Norm of `Σ_c u_c` relative to `Σ_c ‖u_c‖`; zero right after a sync.
    pub fn sync_residual(&self) -> f64 {
        let mut sum = vec![0.0; self.dim];
        let mut scale = 0.0;
        for col in &self.columns {
            for (s, v) in sum.iter_mut().zip(&col.u) {
                *s += v;
            }
            scale += col.u.iter().map(|v| v * v).sum::<f64>().sqrt();
        }
        let res = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
        if scale > 0.0 {
            res / scale
        } else {
            res
        }
    }

    fn check_synced(&self) -> Result<()> {
        if !self.is_complete() {
            return Err(Error::InvalidArgument("primal objective needs every class".into()));
        }
        let residual = self.sync_residual();
        if residual > 1e-9 {
            return Err(Error::Unsynced { residual });
        }
        Ok(())
    }

    /// Primal objective at `w_c = −u_c`. The sum-to-zero constraint must hold,
    /// so this is only defined right after a sync.
    pub fn primal_objective(&self, ds: &SparseDataset) -> Result<f64> {
        self.check_synced()?;
        let c = self.c;
        let terms: Vec<f64> = self.columns.par_iter().map(|col| col.primal_term(ds, c)).collect();
        Ok(terms.iter().sum())
    }

    /// Primal terms of the held columns, assuming `w̄` is synced globally.
    pub(crate) fn primal_partial(&self, ds: &SparseDataset) -> f64 {
        let c = self.c;
        let terms: Vec<f64> = self.columns.par_iter().map(|col| col.primal_term(ds, c)).collect();
        terms.iter().sum()
    }

    pub fn duality_gap(&self, ds: &SparseDataset) -> Result<f64> {
        Ok(self.primal_objective(ds)? - self.dual_objective())
    }

    /// Primal weights `w_c = −u_c`.
    pub fn weights(&self, ds: &SparseDataset) -> WeightMatrix {
        let mut w = WeightMatrix::zeros(self.dim, ds.label_names().to_vec());
        for col in &self.columns {
            for (dst, u) in w.class_weights_mut(col.class).iter_mut().zip(&col.u) {
                *dst = 0.0 - u;
            }
        }
        w
    }

    /// Rebuilds every `u_c` from `α` alone: `Xα_c − (1/C)·X·Σ_c α_c`.
    pub fn reconstruct_u(&self, ds: &SparseDataset) -> Vec<Vec<f64>> {
        let xa: Vec<Vec<f64>> = self
            .columns
            .iter()
            .map(|col| {
                let mut v = vec![0.0; self.dim];
                for (i, &a) in col.alpha.iter().enumerate() {
                    if a != 0.0 {
                        ds.sample(i).axpy(a, &mut v);
                    }
                }
                v
            })
            .collect();
        let mut wbar = vec![0.0; self.dim];
        for v in &xa {
            for (b, x) in wbar.iter_mut().zip(v) {
                *b += x / self.num_classes as f64;
            }
        }
        xa.into_iter()
            .map(|v| v.iter().zip(&wbar).map(|(x, b)| x - b).collect())
            .collect()
    }

    /// Number of coordinates outside the ε-band optimality conditions.
    pub fn kkt_violations(&self, ds: &SparseDataset) -> usize {
        let (c, eps) = (self.c, self.eps);
        self.columns
            .par_iter()
            .map(|col| {
                (0..ds.len())
                    .filter(|&i| ds.label(i) != col.class && ds.norm_sq(i) > 0.0)
                    .filter(|&i| {
                        let g = ds.sample(i).dot(&col.u) - 1.0;
                        let a = col.alpha[i];
                        (g < -eps && a < c) || (g > eps && a > 0.0)
                    })
                    .count()
            })
            .sum()
    }

    /// Percentage of dual variables that are non-zero.
    pub fn alpha_density(&self, ds: &SparseDataset) -> f64 {
        let total = ds.len() * (self.num_classes - 1);
        let nz: usize = self
            .columns
            .iter()
            .map(|col| col.alpha.iter().filter(|&&a| a > 0.0).count())
            .sum();
        100.0 * nz as f64 / total as f64
    }

    pub fn alpha_in_box(&self) -> bool {
        self.columns
            .iter()
            .all(|col| col.alpha.iter().all(|&a| (0.0..=self.c).contains(&a)))
    }
}

/// Runs epochs on `state` until convergence or the epoch limit.
///
/// `reducer` sums the per-feature partial sums for `w̄` and the per-epoch
/// statistics; primal tracking requires a complete state.
pub(crate) fn run_epochs<R: Reducer>(
    state: &mut LlwState,
    ds: &SparseDataset,
    cfg: &SolverConfig,
    reducer: &mut R,
) -> Result<TrainStats> {
    let start = Instant::now();
    let pool = cfg.thread_pool();
    let mut stats = TrainStats::default();

    // every node contributes [dual, any update, active, primal] for its own
    // columns; the primal terms are separable once w̄ has just been synced
    let record = |state: &LlwState, reducer: &mut R, epoch: usize, active: usize, optimal: bool| -> Result<(EpochStats, bool)> {
        let primal_part = if !cfg.trace_objective {
            0.0
        } else if state.is_complete() {
            pool.install(|| state.primal_objective(ds))?
        } else {
            pool.install(|| state.primal_partial(ds))
        };
        let local = vec![
            state.dual_objective(),
            f64::from(u8::from(!optimal)),
            active as f64,
            primal_part,
        ];
        let global = reducer.sum(local)?;
        let dual = global[0];
        let primal = cfg.trace_objective.then_some(global[3]);
        let row = EpochStats {
            epoch,
            dual,
            primal,
            gap: primal.map(|p| p - dual),
            active: global[2] as usize,
            seconds: start.elapsed().as_secs_f64(),
        };
        Ok((row, global[1] == 0.0))
    };

    let (row0, _) = record(state, reducer, 0, 0, false)?;
    stats.epochs.push(row0);

    let owned = state.columns.len();
    let chunk_lens: Vec<usize> = chunk_classes(owned, cfg.num_workers, None)
        .iter()
        .map(Vec::len)
        .collect();
    let mut shuffler = EpochShuffler::new(ds.len(), cfg.seed);
    let mut term = Termination::default();
    let (c, eps, segments) = (cfg.c, cfg.epsilon, cfg.syncs_per_epoch);

    for epoch in 1..=cfg.max_epochs {
        let epoch32 = epoch as u32;
        state.epoch = epoch32;
        let full = term.next_epoch_full(cfg);
        let perm = shuffler.next_order();
        pool.install(|| {
            state
                .columns
                .par_iter_mut()
                .for_each(|col| col.build_order(ds, perm, epoch32, full, cfg.shrink_after));
        });
        let active: usize = state.columns.iter().map(|col| col.order.len()).sum();

        for seg in 0..segments {
            {
                let mut chunks = split_chunks_mut(&mut state.columns, &chunk_lens);
                pool.install(|| {
                    chunks.par_iter_mut().for_each(|chunk| {
                        for col in chunk.iter_mut() {
                            col.sweep_segment(ds, seg, segments, c, eps, epoch32);
                        }
                    });
                });
            }
            let partial = pool.install(|| state.partial_sum());
            let total = reducer.sum(partial)?;
            pool.install(|| state.subtract_mean(&total))?;
        }

        let optimal_local = state.columns.iter().all(|col| col.optimal);
        let (row, optimal) = record(state, reducer, epoch, active, optimal_local)?;
        log::debug!(
            "llw epoch {epoch}: dual {:.10e} gap {:?} active {}",
            row.dual,
            row.gap,
            row.active
        );
        stats.epochs.push(row);
        if term.observe(optimal, full) {
            stats.converged = true;
            break;
        }
    }
    Ok(stats)
}

/// Trains LLW on `ds`. Returns primal weights (`w_c = −u_c`), the final dual
/// state and the per-epoch trace. Hitting `max_epochs` is not an error; check
/// `stats.converged`.
pub fn train(ds: &SparseDataset, cfg: &SolverConfig) -> Result<(WeightMatrix, LlwState, TrainStats)> {
    cfg.validate()?;
    if ds.num_classes() < 2 {
        return Err(Error::InvalidArgument("LLW needs at least two classes".into()));
    }
    let mut state = LlwState::new(ds, cfg);
    let stats = run_epochs(&mut state, ds, cfg, &mut LocalReducer)?;
    Ok((state.weights(ds), state, stats))
}
