//! Conflict-free class pairing schedules.
//!
//! Classes are placed on a regular polygon around a central vertex. In round
//! `r` the centre is joined to vertex `r` and every other vertex to its mirror
//! image across that line, giving a perfect matching of the complete graph per
//! round. With an odd number of classes the centre is a phantom: whoever would
//! meet it sits the round out.
//!
//! [`match_class`] uses 1-based class ids and rounds. [`Schedule`] and the
//! bundle helpers work with 0-based class ids.

use crate::error::{Error, Result};

/// Partner of class `c` in round `r` (all 1-based). Returns `c` itself when
/// `c` has a bye, which only happens for an odd number of classes.
pub fn match_class(num_classes: usize, c: usize, r: usize) -> Result<usize> {
    let even = num_classes % 2 == 0;
    let rounds = if even { num_classes.saturating_sub(1) } else { num_classes };
    if num_classes < 2 || c == 0 || c > num_classes || r == 0 || r > rounds {
        return Err(Error::InvalidArgument(format!(
            "no match for class {c} in round {r} of {num_classes} classes"
        )));
    }
    if even && c == num_classes {
        return Ok(r);
    }
    if c == r {
        return Ok(if even { num_classes } else { c });
    }
    // polygon size: the C-1 outer vertices (even) or all C classes (odd)
    let ring = if even { num_classes - 1 } else { num_classes } as i64;
    let m = (2 * r as i64 - c as i64).rem_euclid(ring);
    Ok(if m == 0 { ring as usize } else { m as usize })
}

/// One round: disjoint class pairs plus the classes left idle.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Round {
    /// Pairs `(a, b)` with `a < b`, sorted.
    pub pairs: Vec<(usize, usize)>,
    pub byes: Vec<usize>,
}

/// Rounds in which every unordered class pair meets exactly once.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Schedule {
    pub rounds: Vec<Round>,
}

impl Schedule {
    pub fn num_rounds(&self) -> usize {
        self.rounds.len()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.rounds.iter().flat_map(|r| r.pairs.iter().copied())
    }

    /// Rewrites class ids through `ids` (schedule position -> class id).
    fn relabel(&self, ids: &[usize]) -> Schedule {
        let rounds = self
            .rounds
            .iter()
            .map(|round| {
                let mut pairs: Vec<(usize, usize)> = round
                    .pairs
                    .iter()
                    .map(|&(a, b)| {
                        let (x, y) = (ids[a], ids[b]);
                        (x.min(y), x.max(y))
                    })
                    .collect();
                pairs.sort_unstable();
                let mut byes: Vec<usize> = round.byes.iter().map(|&c| ids[c]).collect();
                byes.sort_unstable();
                Round { pairs, byes }
            })
            .collect();
        Schedule { rounds }
    }
}

/// Complete round-robin schedule over `num_classes` classes (0-based ids).
pub fn build_schedule(num_classes: usize) -> Result<Schedule> {
    if num_classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "a schedule needs at least 2 classes, got {num_classes}"
        )));
    }
    let rounds = if num_classes % 2 == 0 { num_classes - 1 } else { num_classes };
    let mut out = Vec::with_capacity(rounds);
    for r in 1..=rounds {
        let mut round = Round::default();
        for c in 1..=num_classes {
            let partner = match_class(num_classes, c, r)?;
            if partner == c {
                round.byes.push(c - 1);
            } else if partner > c {
                round.pairs.push((c - 1, partner - 1));
            }
        }
        round.pairs.sort_unstable();
        out.push(round);
    }
    Ok(Schedule { rounds: out })
}

/// Schedule over an arbitrary class subset; one class yields no rounds.
fn schedule_over(classes: &[usize]) -> Schedule {
    match classes.len() {
        0 | 1 => Schedule::default(),
        n => build_schedule(n)
            .expect("n >= 2")
            .relabel(classes),
    }
}

/// Splits classes into at most `num_workers` bundles whose class counts differ
/// by at most one.
///
/// Without `class_sizes` bundles are contiguous id ranges. With sizes, classes
/// are taken largest first and each goes to the lightest bundle (by sample
/// count) that still has room, so big classes end up next to small ones.
/// Class ids inside each bundle are sorted.
pub fn chunk_classes(
    num_classes: usize,
    num_workers: usize,
    class_sizes: Option<&[usize]>,
) -> Vec<Vec<usize>> {
    let k = num_workers.max(1).min(num_classes.max(1));
    if num_classes == 0 {
        return Vec::new();
    }
    let base = num_classes / k;
    let extra = num_classes % k;
    let capacity: Vec<usize> = (0..k).map(|b| base + usize::from(b < extra)).collect();

    let mut bundles: Vec<Vec<usize>> = vec![Vec::new(); k];
    match class_sizes {
        None => {
            let mut next = 0;
            for (b, &cap) in capacity.iter().enumerate() {
                bundles[b].extend(next..next + cap);
                next += cap;
            }
        }
        Some(sizes) => {
            assert_eq!(sizes.len(), num_classes, "one size per class");
            let mut order: Vec<usize> = (0..num_classes).collect();
            order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));
            let mut load = vec![0usize; k];
            for c in order {
                let b = (0..k)
                    .filter(|&b| bundles[b].len() < capacity[b])
                    .min_by_key(|&b| (load[b], b))
                    .expect("total capacity equals num_classes");
                bundles[b].push(c);
                load[b] += sizes[c];
            }
            for bundle in &mut bundles {
                bundle.sort_unstable();
            }
        }
    }
    bundles
}

/// Two-level schedule over bundles of classes.
///
/// The local phase pairs classes inside each bundle; bundles are disjoint so
/// round `r` of every bundle can run at the same time and `local_rounds[r]`
/// is still a matching. The cross phase pairs whole bundles; a bundle pair
/// `(A, B)` with `A < B` then plays every class of `A` against every class of
/// `B` in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TwoLevelSchedule {
    pub bundles: Vec<Vec<usize>>,
    pub local_rounds: Vec<Round>,
    /// Rounds over bundle indices.
    pub bundle_rounds: Vec<Round>,
}

impl TwoLevelSchedule {
    /// Class pairs `(a, b)`, `a` from the lower bundle, in row-major order.
    pub fn cross_pairs(&self, bundle_a: usize, bundle_b: usize) -> Vec<(usize, usize)> {
        let (lo, hi) = (bundle_a.min(bundle_b), bundle_a.max(bundle_b));
        let mut out = Vec::with_capacity(self.bundles[lo].len() * self.bundles[hi].len());
        for &a in &self.bundles[lo] {
            for &b in &self.bundles[hi] {
                out.push((a, b));
            }
        }
        out
    }

    /// Every class pair the schedule visits, local phase first.
    pub fn all_pairs(&self) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = self
            .local_rounds
            .iter()
            .flat_map(|r| r.pairs.iter().copied())
            .collect();
        for round in &self.bundle_rounds {
            for &(a, b) in &round.pairs {
                out.extend(self.cross_pairs(a, b));
            }
        }
        out
    }
}

/// Builds the two-level schedule for the given bundles.
pub fn two_level_schedule(bundles: &[Vec<usize>]) -> Result<TwoLevelSchedule> {
    if bundles.is_empty() {
        return Err(Error::InvalidArgument("at least one bundle is required".into()));
    }
    let total: usize = bundles.iter().map(Vec::len).sum();
    let mut all: Vec<usize> = bundles.iter().flatten().copied().collect();
    all.sort_unstable();
    all.dedup();
    if all.len() != total {
        return Err(Error::InvalidArgument("bundles overlap".into()));
    }

    let per_bundle: Vec<Schedule> = bundles.iter().map(|b| schedule_over(b)).collect();
    let depth = per_bundle.iter().map(Schedule::num_rounds).max().unwrap_or(0);
    let mut local_rounds = Vec::with_capacity(depth);
    for r in 0..depth {
        let mut pairs: Vec<(usize, usize)> = per_bundle
            .iter()
            .filter_map(|s| s.rounds.get(r))
            .flat_map(|round| round.pairs.iter().copied())
            .collect();
        pairs.sort_unstable();
        let mut byes: Vec<usize> = all
            .iter()
            .copied()
            .filter(|c| !pairs.iter().any(|&(a, b)| a == *c || b == *c))
            .collect();
        byes.sort_unstable();
        local_rounds.push(Round { pairs, byes });
    }

    let bundle_rounds = if bundles.len() >= 2 {
        build_schedule(bundles.len())?.rounds
    } else {
        Vec::new()
    };

    Ok(TwoLevelSchedule {
        bundles: bundles.to_vec(),
        local_rounds,
        bundle_rounds,
    })
}
