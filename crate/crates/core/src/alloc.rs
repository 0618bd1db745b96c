//! Per-step task allocation for all training modes.
//!
//! Full Task supervises every example with all tasks. Stochastic allocation
//! gives each example an independent uniform k-subset per step. Interleaved
//! allocation runs ceil(T/k) sub-steps per batch, sampling from each
//! example's remaining set until it is empty, so one batch exhausts all
//! tasks. The gap variant revisits a batch with a fresh allocation a fixed
//! number of steps later.
//!
//! Subsets are drawn from per-(step, example) substreams, so plans are
//! reproducible regardless of the order sub-plans are evaluated in.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum AllocationMode {
    /// Every example gets all T tasks in one sub-step.
    Ft,
    /// Each example gets a uniform random k-subset; one sub-step.
    Sta { k: usize },
    /// ceil(T/k) sub-steps whose per-example subsets partition {0..T-1}.
    Ista { k: usize },
    /// STA, with each batch revisited `gap` steps later under a fresh
    /// allocation. `complement` reallocates the unused tasks instead of
    /// an independent redraw (with k = T/2 splits that is the gap>1
    /// analogue of the interleaved schedule).
    StaGap { k: usize, gap: usize, complement: bool },
}

impl AllocationMode {
    pub fn validate(&self, num_tasks: usize) -> Result<()> {
        if num_tasks < 2 {
            return Err(Error::Config(format!(
                "allocation needs T >= 2 tasks, got {num_tasks}"
            )));
        }
        let k = match self {
            AllocationMode::Ft => num_tasks,
            AllocationMode::Sta { k } | AllocationMode::Ista { k } => *k,
            AllocationMode::StaGap { k, gap, .. } => {
                if *gap < 2 {
                    return Err(Error::Config(format!(
                        "sta-gap needs gap >= 2 (gap 1 is the interleaved mode), got {gap}"
                    )));
                }
                *k
            }
        };
        if k == 0 || k > num_tasks {
            return Err(Error::Config(format!(
                "subset size k must satisfy 1 <= k <= T = {num_tasks}, got {k}"
            )));
        }
        Ok(())
    }

    /// Sub-steps (optimizer updates) per planned step.
    pub fn sub_steps(&self, num_tasks: usize) -> usize {
        match self {
            AllocationMode::Ista { k } => num_tasks.div_ceil(*k),
            _ => 1,
        }
    }
}

/// Task subsets for one optimizer update.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubStepAllocation {
    /// Per-example task subsets, all non-empty.
    pub subsets: Vec<BTreeSet<usize>>,
    /// groups[t]: indices of the examples whose subset contains t.
    pub groups: Vec<Vec<usize>>,
    /// counts[t] = groups[t].len().
    pub counts: Vec<usize>,
}

impl SubStepAllocation {
    /// Build from per-example subsets; every subset must be a non-empty
    /// subset of {0..num_tasks-1}.
    pub fn new(subsets: Vec<BTreeSet<usize>>, num_tasks: usize) -> Result<Self> {
        if subsets.iter().any(BTreeSet::is_empty) {
            return Err(Error::Contract("allocation subsets must be non-empty".into()));
        }
        if subsets.iter().flatten().any(|&t| t >= num_tasks) {
            return Err(Error::Contract(format!(
                "allocation references a task >= {num_tasks}"
            )));
        }
        Ok(Self::from_subsets(subsets, num_tasks))
    }

    fn from_subsets(subsets: Vec<BTreeSet<usize>>, num_tasks: usize) -> Self {
        let mut groups = vec![Vec::new(); num_tasks];
        for (i, st) in subsets.iter().enumerate() {
            debug_assert!(!st.is_empty());
            for &t in st {
                debug_assert!(t < num_tasks);
                groups[t].push(i);
            }
        }
        let counts = groups.iter().map(Vec::len).collect();
        SubStepAllocation {
            subsets,
            groups,
            counts,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.subsets.len()
    }
}

/// Uniform random subset of size `min(k, |candidates|)`.
///
/// Consumes exactly `min(k, |candidates|)` rng draws (a partial
/// Fisher-Yates over the sorted candidate list).
pub fn sample_subset(candidates: &BTreeSet<usize>, k: usize, rng: &mut Stream) -> Result<BTreeSet<usize>> {
    if candidates.is_empty() {
        return Err(Error::Contract(
            "sample_subset called with empty candidate set".into(),
        ));
    }
    let mut pool: Vec<usize> = candidates.iter().copied().collect();
    let take = k.min(pool.len());
    let mut picked = BTreeSet::new();
    for i in 0..take {
        let j = i + rng.next_below(pool.len() - i);
        pool.swap(i, j);
        picked.insert(pool[i]);
    }
    Ok(picked)
}

/// One planned step: the ordered sub-step allocations, plus a revisit
/// request for gap-mode scheduling.
#[derive(Clone, Debug, PartialEq)]
pub struct StepPlan {
    pub sub_steps: Vec<SubStepAllocation>,
    /// `Some(gap)`: the same batch must be re-planned `gap` steps later.
    pub revisit_after: Option<usize>,
}

/// Allocation plan for one fresh batch of `m` examples.
///
/// `rng` is the step-local stream; each example draws from its own
/// substream so plans do not depend on traversal order.
pub fn plan_step(
    mode: AllocationMode,
    m: usize,
    num_tasks: usize,
    rng: &Stream,
) -> Result<StepPlan> {
    mode.validate(num_tasks)?;
    if m == 0 {
        return Err(Error::Config("batch size m must be >= 1".into()));
    }
    let full: BTreeSet<usize> = (0..num_tasks).collect();
    let plan = match mode {
        AllocationMode::Ft => StepPlan {
            sub_steps: vec![SubStepAllocation::from_subsets(
                vec![full; m],
                num_tasks,
            )],
            revisit_after: None,
        },
        AllocationMode::Sta { k } => StepPlan {
            sub_steps: vec![sample_sub_step(&full, k, m, num_tasks, rng)?],
            revisit_after: None,
        },
        AllocationMode::StaGap { k, gap, .. } => StepPlan {
            sub_steps: vec![sample_sub_step(&full, k, m, num_tasks, rng)?],
            revisit_after: Some(gap),
        },
        AllocationMode::Ista { k } => {
            let rounds = num_tasks.div_ceil(k);
            let mut remaining: Vec<BTreeSet<usize>> = vec![full; m];
            let mut sub_steps = Vec::with_capacity(rounds);
            for _ in 0..rounds {
                let mut subsets = Vec::with_capacity(m);
                for (i, rs) in remaining.iter_mut().enumerate() {
                    let mut ex_rng = rng.derive(i as u64);
                    // Consume the draws of earlier rounds so each round
                    // continues this example's substream.
                    for _ in 0..(num_tasks - rs.len()) {
                        ex_rng.next_u64();
                    }
                    let st = sample_subset(rs, k, &mut ex_rng)?;
                    for t in &st {
                        rs.remove(t);
                    }
                    subsets.push(st);
                }
                sub_steps.push(SubStepAllocation::from_subsets(subsets, num_tasks));
            }
            debug_assert!(remaining.iter().all(BTreeSet::is_empty));
            StepPlan {
                sub_steps,
                revisit_after: None,
            }
        }
    };
    Ok(plan)
}

/// Fresh allocation for a revisited batch (gap mode). With `complement`
/// set, each example gets the tasks its first visit left out (all tasks
/// if the first visit covered everything).
pub fn plan_revisit(
    mode: AllocationMode,
    first_visit: &SubStepAllocation,
    num_tasks: usize,
    rng: &Stream,
) -> Result<SubStepAllocation> {
    let AllocationMode::StaGap { k, complement, .. } = mode else {
        return Err(Error::Contract(
            "plan_revisit is only defined for the gap mode".into(),
        ));
    };
    let m = first_visit.batch_size();
    let full: BTreeSet<usize> = (0..num_tasks).collect();
    if !complement {
        return Ok(sample_sub_step(&full, k, m, num_tasks, rng)?);
    }
    let subsets = first_visit
        .subsets
        .iter()
        .map(|st| {
            let rest: BTreeSet<usize> = full.difference(st).copied().collect();
            if rest.is_empty() {
                full.clone()
            } else {
                rest
            }
        })
        .collect();
    Ok(SubStepAllocation::from_subsets(subsets, num_tasks))
}

fn sample_sub_step(
    candidates: &BTreeSet<usize>,
    k: usize,
    m: usize,
    num_tasks: usize,
    rng: &Stream,
) -> Result<SubStepAllocation> {
    let subsets = (0..m)
        .map(|i| sample_subset(candidates, k, &mut rng.derive(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SubStepAllocation::from_subsets(subsets, num_tasks))
}

/// Example index lists per task; `group[t]` is empty when no example drew t.
pub fn group_by_task(allocation: &SubStepAllocation) -> &[Vec<usize>] {
    &allocation.groups
}

/// Deterministic epoch-shuffled batch order shared by training and
/// profiling; partial tail chunks are dropped.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut stream = Stream::new(seed, "batches").derive(epoch as u64);
    stream.shuffle(&mut order);
    order
        .chunks_exact(batch_size)
        .map(<[usize]>::to_vec)
        .collect()
}
