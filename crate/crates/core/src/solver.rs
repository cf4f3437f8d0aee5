//! Configuration, statistics and bookkeeping shared by the dual solvers.

use std::io::Write;

use crate::error::{Error, Result};

/// How the WW trainer orders class pairs within an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WwScheduleKind {
    /// One round-robin over all classes; the pairs of a round run in parallel.
    #[default]
    Flat,
    /// Classes are chunked into one bundle per worker; pairs inside bundles
    /// first, then bundle-against-bundle blocks.
    Bundled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    /// Regularization constant (upper bound of every dual variable).
    pub c: f64,
    /// Width of the tolerance band on the coordinate gradient.
    pub epsilon: f64,
    pub max_epochs: usize,
    pub seed: u64,
    pub num_workers: usize,
    /// Mean-vector synchronizations per LLW epoch.
    pub syncs_per_epoch: usize,
    /// A coordinate not updated for this many consecutive epochs is skipped.
    pub shrink_after: u32,
    pub shrinking: bool,
    /// Record dual, primal and gap after every epoch.
    pub trace_objective: bool,
    /// Record the class pairs visited by WW (instrumentation).
    pub record_pairs: bool,
    pub ww_schedule: WwScheduleKind,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            c: 1.0,
            epsilon: 1e-3,
            max_epochs: 1000,
            seed: 1,
            num_workers: 1,
            syncs_per_epoch: 10,
            shrink_after: 3,
            shrinking: true,
            trace_objective: true,
            record_pairs: false,
            ww_schedule: WwScheduleKind::Flat,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::InvalidArgument(format!("C must be positive, got {}", self.c)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.max_epochs == 0 || self.num_workers == 0 || self.syncs_per_epoch == 0 {
            return Err(Error::InvalidArgument(
                "max_epochs, num_workers and syncs_per_epoch must be at least 1".into(),
            ));
        }
        if self.shrink_after == 0 {
            return Err(Error::InvalidArgument("shrink_after must be at least 1".into()));
        }
        Ok(())
    }

    pub(crate) fn thread_pool(&self) -> rayon::ThreadPool {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.num_workers)
            .build()
            .expect("failed to start worker pool")
    }
}

/// One row of the training trace. Epoch 0 describes the all-zero start.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub dual: f64,
    pub primal: Option<f64>,
    pub gap: Option<f64>,
    /// Coordinates visited during the epoch.
    pub active: usize,
    /// Wall time since training started.
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainStats {
    pub epochs: Vec<EpochStats>,
    pub converged: bool,
    /// Class pairs visited per epoch (WW, when `record_pairs` is set).
    pub pair_log: Vec<Vec<(usize, usize)>>,
}

impl TrainStats {
    pub fn final_dual(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.dual)
    }

    pub fn initial_gap(&self) -> Option<f64> {
        self.epochs.first().and_then(|e| e.gap)
    }

    pub fn final_gap(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.gap)
    }

    /// Number of optimization epochs run (excluding the initial row).
    pub fn epochs_run(&self) -> usize {
        self.epochs.last().map_or(0, |e| e.epoch)
    }

    pub const CSV_HEADER: &'static str = "epoch,dual,primal,gap,active,seconds";

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{}", Self::CSV_HEADER)?;
        for e in &self.epochs {
            let opt = |v: Option<f64>| v.map(|v| format!("{v:.17e}")).unwrap_or_default();
            writeln!(
                out,
                "{},{:.17e},{},{},{},{:.6}",
                e.epoch,
                e.dual,
                opt(e.primal),
                opt(e.gap),
                e.active,
                e.seconds
            )?;
        }
        Ok(())
    }
}

/// Element-wise sum across everyone holding a part of the model. In a single
/// process this is the identity; distributed runs reduce over the transport.
pub trait Reducer {
    fn sum(&mut self, values: Vec<f64>) -> Result<Vec<f64>>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct LocalReducer;

impl Reducer for LocalReducer {
    fn sum(&mut self, values: Vec<f64>) -> Result<Vec<f64>> {
        Ok(values)
    }
}

/// Shrinking test: epoch `epoch` visits a coordinate last updated in epoch
/// `last_update` unless it has been idle for more than `shrink_after` epochs.
#[inline]
pub(crate) fn is_active(last_update: u32, epoch: u32, full: bool, shrink_after: u32) -> bool {
    full || epoch - last_update <= shrink_after
}

/// Stopping rule: an epoch without updates triggers one pass over every
/// coordinate; the solver stops when that pass makes no update either.
#[derive(Debug, Default, Clone)]
pub(crate) struct Termination {
    force_full: bool,
}

impl Termination {
    pub fn next_epoch_full(&self, cfg: &SolverConfig) -> bool {
        !cfg.shrinking || self.force_full
    }

    /// Returns true when training has converged.
    pub fn observe(&mut self, optimal: bool, was_full: bool) -> bool {
        if optimal && was_full {
            return true;
        }
        self.force_full = optimal;
        false
    }
}

/// Outcome of a single 1-D coordinate step.
#[inline]
pub(crate) fn clipped_step(g: f64, alpha: f64, c: f64, eps: f64, curvature: f64) -> Option<(f64, f64)> {
    // returns (delta, new alpha) with the bound hit exactly when clipped
    if g < -eps && alpha < c {
        let step = -g / curvature;
        if step >= c - alpha {
            Some((c - alpha, c))
        } else {
            Some((step, alpha + step))
        }
    } else if g > eps && alpha > 0.0 {
        let step = -g / curvature;
        if step <= -alpha {
            Some((-alpha, 0.0))
        } else {
            Some((step, alpha + step))
        }
    } else {
        None
    }
}

/// Splits `items` into consecutive mutable chunks of the given lengths.
pub(crate) fn split_chunks_mut<'a, T>(mut items: &'a mut [T], lens: &[usize]) -> Vec<&'a mut [T]> {
    let mut out = Vec::with_capacity(lens.len());
    for &len in lens {
        let (head, tail) = items.split_at_mut(len);
        out.push(head);
        items = tail;
    }
    out
}

/// Disjoint mutable references to two distinct elements.
pub(crate) fn pair_mut<T>(items: &mut [T], a: usize, b: usize) -> (&mut T, &mut T) {
    assert_ne!(a, b);
    if a < b {
        let (lo, hi) = items.split_at_mut(b);
        (&mut lo[a], &mut hi[0])
    } else {
        let (lo, hi) = items.split_at_mut(a);
        (&mut hi[0], &mut lo[b])
    }
}
