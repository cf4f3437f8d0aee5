//! Weston–Watkins multi-class SVM by dual coordinate ascent over class pairs.
//!
//! The variable `α_{i,c}` only touches `w_{y_i}` and `w_c`, so coordinate
//! blocks belonging to disjoint class pairs can be optimized concurrently.
//! Each epoch walks a round-robin schedule: in every round the matched pairs
//! are independent and run in parallel.
//!
//! Stored weights follow `w_c = −Xα_c` with the own-class entry
//! `α_{i,y_i} = −Σ_{c≠y_i} α_{i,c}` folded in, so a step `δ` on `α_{i,c}`
//! adds `δx_i` to `w_{y_i}` and subtracts it from `w_c`.

use std::time::Instant;

use rayon::prelude::*;

use crate::dataset::{EpochShuffler, SparseDataset};
use crate::error::{Error, Result};
use crate::model::WeightMatrix;
use crate::sched::{build_schedule, chunk_classes, two_level_schedule, Schedule, TwoLevelSchedule};
use crate::solver::{
    clipped_step, is_active, pair_mut, EpochStats, SolverConfig, Termination, TrainStats,
    WwScheduleKind,
};

#[derive(Debug, Clone)]
pub(crate) struct WwColumn {
    pub(crate) class: usize,
    pub(crate) w: Vec<f64>,
    /// `α_{i,class}` indexed by sample; own-class entries stay zero.
    pub(crate) alpha: Vec<f64>,
    pub(crate) last_update: Vec<u32>,
}

impl WwColumn {
    pub(crate) fn new(class: usize, n: usize, dim: usize) -> Self {
        Self {
            class,
            w: vec![0.0; dim],
            alpha: vec![0.0; n],
            last_update: vec![0; n],
        }
    }

    fn dual_term(&self) -> f64 {
        let sq: f64 = self.w.iter().map(|v| v * v).sum();
        let lin: f64 = self.alpha.iter().sum();
        -0.5 * sq + lin
    }
}

/// Per-epoch context shared by every pair task.
pub(crate) struct PairCtx<'a> {
    pub ds: &'a SparseDataset,
    /// Shuffled members of each class for this epoch (zero samples removed).
    pub members: &'a [Vec<u32>],
    pub c: f64,
    pub eps: f64,
    pub epoch: u32,
    pub full: bool,
    pub shrink_after: u32,
}

#[derive(Debug, Default, Clone)]
pub(crate) struct TaskResult {
    pub updates: usize,
    pub visits: usize,
    pub pairs: Vec<(usize, usize)>,
}

impl TaskResult {
    pub fn merge(&mut self, other: TaskResult) {
        self.updates += other.updates;
        self.visits += other.visits;
        self.pairs.extend(other.pairs);
    }
}

/// Single step on `α_{i,target}` for a sample `i` of class `owner.class`.
#[inline]
fn step(
    ds: &SparseDataset,
    i: usize,
    owner: &mut WwColumn,
    target: &mut WwColumn,
    c: f64,
    eps: f64,
    epoch: u32,
) -> f64 {
    let k = ds.norm_sq(i);
    if k <= 0.0 {
        return 0.0;
    }
    let x = ds.sample(i);
    let g = x.dot(&owner.w) - x.dot(&target.w) - 1.0;
    match clipped_step(g, target.alpha[i], c, eps, 2.0 * k) {
        Some((delta, alpha)) => {
            x.axpy(delta, &mut owner.w);
            x.axpy(-delta, &mut target.w);
            target.alpha[i] = alpha;
            target.last_update[i] = epoch;
            delta
        }
        None => 0.0,
    }
}

fn sweep(owner: &mut WwColumn, target: &mut WwColumn, ctx: &PairCtx<'_>, res: &mut TaskResult) {
    for &i in &ctx.members[owner.class] {
        let i = i as usize;
        if !is_active(target.last_update[i], ctx.epoch, ctx.full, ctx.shrink_after) {
            continue;
        }
        res.visits += 1;
        if step(ctx.ds, i, owner, target, ctx.c, ctx.eps, ctx.epoch) != 0.0 {
            res.updates += 1;
        }
    }
}

/// Optimizes the block of pair `(lo, hi)`: samples of `lo` against column
/// `hi`, then samples of `hi` against column `lo`.
pub(crate) fn process_pair(lo: &mut WwColumn, hi: &mut WwColumn, ctx: &PairCtx<'_>) -> TaskResult {
    let mut res = TaskResult::default();
    sweep(lo, hi, ctx, &mut res);
    sweep(hi, lo, ctx, &mut res);
    res
}

/// Runs class-disjoint tasks in parallel. Each task is a sequence of pairs
/// processed in order; results come back in task order.
pub(crate) fn run_tasks(
    columns: &mut [WwColumn],
    tasks: &[Vec<(usize, usize)>],
    ctx: &PairCtx<'_>,
    record_pairs: bool,
) -> TaskResult {
    let max_class = columns.iter().map(|c| c.class).max().unwrap_or(0);
    let mut pos = vec![usize::MAX; max_class + 1];
    for (p, col) in columns.iter().enumerate() {
        pos[col.class] = p;
    }
    let mut slots: Vec<Option<&mut WwColumn>> = columns.iter_mut().map(Some).collect();
    let mut work: Vec<(&Vec<(usize, usize)>, Vec<usize>, Vec<&mut WwColumn>)> = Vec::with_capacity(tasks.len());
    for task in tasks {
        let mut ids: Vec<usize> = task.iter().flat_map(|&(a, b)| [a, b]).collect();
        ids.sort_unstable();
        ids.dedup();
        let cols: Vec<&mut WwColumn> = ids
            .iter()
            .map(|&c| {
                slots[pos[c]]
                    .take()
                    .expect("tasks in one phase must not share a class")
            })
            .collect();
        work.push((task, ids, cols));
    }
    let results: Vec<TaskResult> = work
        .into_par_iter()
        .map(|(task, ids, mut cols)| {
            let mut res = TaskResult::default();
            for &(a, b) in task {
                let pa = ids.binary_search(&a).expect("class in task");
                let pb = ids.binary_search(&b).expect("class in task");
                let (ca, cb) = pair_mut(&mut cols, pa, pb);
                let (lo, hi) = if a < b { (&mut **ca, &mut **cb) } else { (&mut **cb, &mut **ca) };
                let mut r = process_pair(lo, hi, ctx);
                if record_pairs {
                    r.pairs.push((a.min(b), a.max(b)));
                }
                res.merge(r);
            }
            res
        })
        .collect();
    let mut total = TaskResult::default();
    for r in results {
        total.merge(r);
    }
    total
}

/// Shuffled class membership lists for one epoch.
pub(crate) fn shuffled_members(ds: &SparseDataset, perm: &[usize]) -> Vec<Vec<u32>> {
    let mut members: Vec<Vec<u32>> = ds.class_sizes().into_iter().map(Vec::with_capacity).collect();
    for &i in perm {
        if ds.norm_sq(i) > 0.0 {
            members[ds.label(i)].push(i as u32);
        }
    }
    members
}

/// Pair schedule for one epoch, as a list of phases. Tasks inside a phase are
/// class-disjoint; phases run one after another.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpochPlan {
    pub phases: Vec<Vec<Vec<(usize, usize)>>>,
}

impl EpochPlan {
    pub fn flat(schedule: &Schedule) -> Self {
        Self {
            phases: schedule
                .rounds
                .iter()
                .map(|r| r.pairs.iter().map(|&p| vec![p]).collect())
                .collect(),
        }
    }

    pub fn two_level(schedule: &TwoLevelSchedule) -> Self {
        let mut phases: Vec<Vec<Vec<(usize, usize)>>> = schedule
            .local_rounds
            .iter()
            .map(|r| r.pairs.iter().map(|&p| vec![p]).collect())
            .collect();
        for round in &schedule.bundle_rounds {
            phases.push(
                round
                    .pairs
                    .iter()
                    .map(|&(a, b)| schedule.cross_pairs(a, b))
                    .collect(),
            );
        }
        Self { phases }
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.phases.iter().flatten().flatten().copied()
    }
}

/// Solver state for WW: the class columns held by this process.
#[derive(Debug, Clone)]
pub struct WwState {
    pub(crate) columns: Vec<WwColumn>,
    num_classes: usize,
    dim: usize,
    c: f64,
    eps: f64,
    epoch: u32,
}

impl WwState {
    pub fn new(ds: &SparseDataset, cfg: &SolverConfig) -> Self {
        Self::for_classes(ds, cfg, &(0..ds.num_classes()).collect::<Vec<_>>())
    }

    pub fn for_classes(ds: &SparseDataset, cfg: &SolverConfig, classes: &[usize]) -> Self {
        let mut classes = classes.to_vec();
        classes.sort_unstable();
        Self {
            columns: classes
                .iter()
                .map(|&c| WwColumn::new(c, ds.len(), ds.dim()))
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

    pub fn w(&self, c: usize) -> &[f64] {
        &self.columns[self.column_index(c).expect("unknown class")].w
    }

    pub fn alpha(&self, i: usize, c: usize) -> f64 {
        self.columns[self.column_index(c).expect("unknown class")].alpha[i]
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn set_epoch(&mut self, epoch: u32) {
        self.epoch = epoch;
    }

    /// Optimizes the single variable `α_{i,c}` and returns the step taken.
    pub fn update_coordinate(&mut self, ds: &SparseDataset, i: usize, c: usize) -> Result<f64> {
        let y = ds.label(i);
        if y == c {
            return Err(Error::InvalidArgument(format!(
                "sample {i} belongs to class {c}; its own-class variable is implicit"
            )));
        }
        let (cr, eps, epoch) = (self.c, self.eps, self.epoch);
        let (py, pc) = (self.column_index(y)?, self.column_index(c)?);
        let (owner, target) = pair_mut(&mut self.columns, py, pc);
        Ok(step(ds, i, owner, target, cr, eps, epoch))
    }

    /// Dual objective contribution of the held columns.
    pub fn dual_objective(&self) -> f64 {
        let terms: Vec<f64> = self.columns.par_iter().map(WwColumn::dual_term).collect();
        terms.iter().sum()
    }

    /// `Σ_c ½‖w_c‖² + C Σ_i Σ_{c≠y_i} max(0, 1 − (w_{y_i} − w_c)^T x_i)`.
    pub fn primal_objective(&self, ds: &SparseDataset) -> Result<f64> {
        if !self.is_complete() {
            return Err(Error::InvalidArgument("primal objective needs every class".into()));
        }
        Ok(ww_primal(&self.weights(ds), ds, self.c))
    }

    pub fn duality_gap(&self, ds: &SparseDataset) -> Result<f64> {
        Ok(self.primal_objective(ds)? - self.dual_objective())
    }

    pub fn weights(&self, ds: &SparseDataset) -> WeightMatrix {
        let mut w = WeightMatrix::zeros(self.dim, ds.label_names().to_vec());
        for col in &self.columns {
            w.class_weights_mut(col.class).copy_from_slice(&col.w);
        }
        w
    }

    /// Rebuilds every `w_c` from `α` alone.
    pub fn reconstruct_w(&self, ds: &SparseDataset) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.dim]; self.num_classes];
        for col in &self.columns {
            for (i, &a) in col.alpha.iter().enumerate() {
                if a != 0.0 {
                    ds.sample(i).axpy(a, &mut out[ds.label(i)]);
                    ds.sample(i).axpy(-a, &mut out[col.class]);
                }
            }
        }
        out
    }

    pub fn kkt_violations(&self, ds: &SparseDataset) -> Result<usize> {
        if !self.is_complete() {
            return Err(Error::InvalidArgument("KKT check needs every class".into()));
        }
        let (c, eps) = (self.c, self.eps);
        let count = (0..ds.len())
            .into_par_iter()
            .filter(|&i| ds.norm_sq(i) > 0.0)
            .map(|i| {
                let x = ds.sample(i);
                let y = ds.label(i);
                let sy = x.dot(&self.columns[y].w);
                self.columns
                    .iter()
                    .filter(|col| col.class != y)
                    .filter(|col| {
                        let g = sy - x.dot(&col.w) - 1.0;
                        let a = col.alpha[i];
                        (g < -eps && a < c) || (g > eps && a > 0.0)
                    })
                    .count()
            })
            .sum();
        Ok(count)
    }

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

/// WW primal objective of an arbitrary weight matrix.
pub fn ww_primal(w: &WeightMatrix, ds: &SparseDataset, c: f64) -> f64 {
    let reg: f64 = (0..w.num_classes())
        .map(|k| 0.5 * w.class_weights(k).iter().map(|v| v * v).sum::<f64>())
        .sum();
    let per_sample: Vec<f64> = (0..ds.len())
        .into_par_iter()
        .map(|i| {
            let x = ds.sample(i);
            let y = ds.label(i);
            let sy = w.score(y, x);
            (0..w.num_classes())
                .filter(|&k| k != y)
                .map(|k| (1.0 - (sy - w.score(k, x))).max(0.0))
                .sum()
        })
        .collect();
    reg + c * per_sample.iter().sum::<f64>()
}

/// Runs WW epochs over `plan` until convergence or the epoch limit.
pub(crate) fn run_epochs(
    state: &mut WwState,
    ds: &SparseDataset,
    cfg: &SolverConfig,
    plan: &EpochPlan,
) -> Result<TrainStats> {
    let start = Instant::now();
    let pool = cfg.thread_pool();
    let mut stats = TrainStats::default();

    let record = |state: &WwState, epoch: usize, active: usize| -> Result<EpochStats> {
        let dual = state.dual_objective();
        let primal = if cfg.trace_objective {
            Some(pool.install(|| state.primal_objective(ds))?)
        } else {
            None
        };
        Ok(EpochStats {
            epoch,
            dual,
            primal,
            gap: primal.map(|p| p - dual),
            active,
            seconds: start.elapsed().as_secs_f64(),
        })
    };
    stats.epochs.push(record(state, 0, 0)?);

    let mut shuffler = EpochShuffler::new(ds.len(), cfg.seed);
    let mut term = Termination::default();
    for epoch in 1..=cfg.max_epochs {
        let epoch32 = epoch as u32;
        state.epoch = epoch32;
        let full = term.next_epoch_full(cfg);
        let members = shuffled_members(ds, shuffler.next_order());
        let ctx = PairCtx {
            ds,
            members: &members,
            c: cfg.c,
            eps: cfg.epsilon,
            epoch: epoch32,
            full,
            shrink_after: cfg.shrink_after,
        };
        let mut total = TaskResult::default();
        for phase in &plan.phases {
            let r = pool.install(|| run_tasks(&mut state.columns, phase, &ctx, cfg.record_pairs));
            total.merge(r);
        }
        let row = record(state, epoch, total.visits)?;
        log::debug!(
            "ww epoch {epoch}: dual {:.10e} gap {:?} active {} updates {}",
            row.dual,
            row.gap,
            row.active,
            total.updates
        );
        stats.epochs.push(row);
        if cfg.record_pairs {
            stats.pair_log.push(total.pairs);
        }
        if term.observe(total.updates == 0, full) {
            stats.converged = true;
            break;
        }
    }
    Ok(stats)
}

/// Epoch plan selected by `cfg.ww_schedule`.
pub fn plan_for(ds: &SparseDataset, cfg: &SolverConfig) -> Result<EpochPlan> {
    match cfg.ww_schedule {
        WwScheduleKind::Flat => Ok(EpochPlan::flat(&build_schedule(ds.num_classes())?)),
        WwScheduleKind::Bundled => {
            let sizes = ds.class_sizes();
            let bundles = chunk_classes(ds.num_classes(), cfg.num_workers, Some(&sizes));
            Ok(EpochPlan::two_level(&two_level_schedule(&bundles)?))
        }
    }
}

/// Trains WW on `ds` with the schedule chosen in `cfg`.
pub fn train(ds: &SparseDataset, cfg: &SolverConfig) -> Result<(WeightMatrix, WwState, TrainStats)> {
    cfg.validate()?;
    if ds.num_classes() < 2 {
        return Err(Error::InvalidArgument("WW needs at least two classes".into()));
    }
    let plan = plan_for(ds, cfg)?;
    train_with_plan(ds, cfg, &plan)
}

/// Trains WW following an explicit epoch plan.
pub fn train_with_plan(
    ds: &SparseDataset,
    cfg: &SolverConfig,
    plan: &EpochPlan,
) -> Result<(WeightMatrix, WwState, TrainStats)> {
    cfg.validate()?;
    if ds.num_classes() < 2 {
        return Err(Error::InvalidArgument("WW needs at least two classes".into()));
    }
    let mut state = WwState::new(ds, cfg);
    let stats = run_epochs(&mut state, ds, cfg, plan)?;
    Ok((state.weights(ds), state, stats))
}
