//! One-vs-rest baseline: an independent hinge-loss binary SVM per class,
//! each solved by dual coordinate ascent with the same tolerance band and
//! shrinking rules as the all-in-one solvers.

use std::time::Instant;

use rayon::prelude::*;

use crate::dataset::{EpochShuffler, SparseDataset};
use crate::error::{Error, Result};
use crate::model::WeightMatrix;
use crate::solver::{clipped_step, is_active, EpochStats, SolverConfig, Termination, TrainStats};

/// Binary problem of one class against the rest.
#[derive(Debug, Clone)]
pub struct OvrColumn {
    pub class: usize,
    pub w: Vec<f64>,
    pub beta: Vec<f64>,
    last_update: Vec<u32>,
}

#[inline]
fn sign(ds: &SparseDataset, i: usize, class: usize) -> f64 {
    if ds.label(i) == class {
        1.0
    } else {
        -1.0
    }
}

impl OvrColumn {
    fn new(class: usize, n: usize, dim: usize) -> Self {
        Self {
            class,
            w: vec![0.0; dim],
            beta: vec![0.0; n],
            last_update: vec![0; n],
        }
    }

    /// One coordinate step on `β_i`; returns the change.
    pub fn update_coordinate(&mut self, ds: &SparseDataset, i: usize, c: f64, eps: f64, epoch: u32) -> f64 {
        let k = ds.norm_sq(i);
        if k <= 0.0 {
            return 0.0;
        }
        let x = ds.sample(i);
        let s = sign(ds, i, self.class);
        let g = s * x.dot(&self.w) - 1.0;
        match clipped_step(g, self.beta[i], c, eps, k) {
            Some((delta, beta)) => {
                x.axpy(s * delta, &mut self.w);
                self.beta[i] = beta;
                self.last_update[i] = epoch;
                delta
            }
            None => 0.0,
        }
    }

    pub fn dual_objective(&self) -> f64 {
        let sq: f64 = self.w.iter().map(|v| v * v).sum();
        self.beta.iter().sum::<f64>() - 0.5 * sq
    }

    pub fn primal_objective(&self, ds: &SparseDataset, c: f64) -> f64 {
        let sq: f64 = self.w.iter().map(|v| v * v).sum();
        let loss: f64 = (0..ds.len())
            .map(|i| (1.0 - sign(ds, i, self.class) * ds.sample(i).dot(&self.w)).max(0.0))
            .sum();
        0.5 * sq + c * loss
    }

    /// Rebuilds `w` from `β`.
    pub fn reconstruct_w(&self, ds: &SparseDataset) -> Vec<f64> {
        let mut w = vec![0.0; self.w.len()];
        for (i, &b) in self.beta.iter().enumerate() {
            if b != 0.0 {
                ds.sample(i).axpy(sign(ds, i, self.class) * b, &mut w);
            }
        }
        w
    }
}

struct ClassRun {
    column: OvrColumn,
    /// (dual, primal, active) after each epoch, starting with the zero state.
    trace: Vec<(f64, Option<f64>, usize)>,
    converged: bool,
}

fn train_column(ds: &SparseDataset, class: usize, cfg: &SolverConfig) -> ClassRun {
    let mut col = OvrColumn::new(class, ds.len(), ds.dim());
    let primal = |col: &OvrColumn| cfg.trace_objective.then(|| col.primal_objective(ds, cfg.c));
    let mut trace = vec![(0.0, primal(&col), 0)];
    // every class draws its own copy of the order stream, so its result does
    // not depend on which other classes are trained
    let mut shuffler = EpochShuffler::new(ds.len(), cfg.seed);
    let mut term = Termination::default();
    let mut converged = false;
    for epoch in 1..=cfg.max_epochs as u32 {
        let full = term.next_epoch_full(cfg);
        let mut visits = 0;
        let mut updates = 0;
        for &i in shuffler.next_order() {
            if !is_active(col.last_update[i], epoch, full, cfg.shrink_after) {
                continue;
            }
            visits += 1;
            if col.update_coordinate(ds, i, cfg.c, cfg.epsilon, epoch) != 0.0 {
                updates += 1;
            }
        }
        trace.push((col.dual_objective(), primal(&col), visits));
        if term.observe(updates == 0, full) {
            converged = true;
            break;
        }
    }
    ClassRun {
        column: col,
        trace,
        converged,
    }
}

/// Trained one-vs-rest problems, one column per class.
#[derive(Debug, Clone)]
pub struct OvrState {
    pub columns: Vec<OvrColumn>,
}

impl OvrState {
    pub fn alpha_density(&self) -> f64 {
        let n: usize = self.columns.iter().map(|c| c.beta.len()).sum();
        let nz: usize = self
            .columns
            .iter()
            .map(|c| c.beta.iter().filter(|&&b| b > 0.0).count())
            .sum();
        if n == 0 {
            0.0
        } else {
            100.0 * nz as f64 / n as f64
        }
    }
}

/// Trains only the listed classes.
pub fn train_classes(ds: &SparseDataset, cfg: &SolverConfig, classes: &[usize]) -> Result<Vec<OvrColumn>> {
    cfg.validate()?;
    if let Some(&bad) = classes.iter().find(|&&c| c >= ds.num_classes()) {
        return Err(Error::InvalidArgument(format!("class {bad} out of range")));
    }
    let pool = cfg.thread_pool();
    Ok(pool.install(|| {
        classes
            .par_iter()
            .map(|&c| train_column(ds, c, cfg).column)
            .collect()
    }))
}

/// Trains all classes. The trace row for epoch `e` sums the per-class
/// objectives, holding classes that already stopped at their final value.
pub fn train(ds: &SparseDataset, cfg: &SolverConfig) -> Result<(WeightMatrix, OvrState, TrainStats)> {
    cfg.validate()?;
    if ds.num_classes() < 2 {
        return Err(Error::InvalidArgument("one-vs-rest needs at least two classes".into()));
    }
    let start = Instant::now();
    let pool = cfg.thread_pool();
    let runs: Vec<ClassRun> = pool.install(|| {
        (0..ds.num_classes())
            .into_par_iter()
            .map(|c| train_column(ds, c, cfg))
            .collect()
    });
    let seconds = start.elapsed().as_secs_f64();
    let longest = runs.iter().map(|r| r.trace.len()).max().unwrap_or(1);
    let mut stats = TrainStats {
        converged: runs.iter().all(|r| r.converged),
        ..Default::default()
    };
    for e in 0..longest {
        let mut dual = 0.0;
        let mut primal = Some(0.0);
        let mut active = 0;
        for r in &runs {
            let (d, p, a) = r.trace[e.min(r.trace.len() - 1)];
            dual += d;
            primal = primal.zip(p).map(|(x, y)| x + y);
            if e < r.trace.len() {
                active += a;
            }
        }
        stats.epochs.push(EpochStats {
            epoch: e,
            dual,
            primal,
            gap: primal.map(|p| p - dual),
            active,
            seconds: if e + 1 == longest { seconds } else { 0.0 },
        });
    }
    let mut w = WeightMatrix::zeros(ds.dim(), ds.label_names().to_vec());
    let columns: Vec<OvrColumn> = runs.into_iter().map(|r| r.column).collect();
    for col in &columns {
        w.class_weights_mut(col.class).copy_from_slice(&col.w);
    }
    Ok((w, OvrState { columns }, stats))
}
