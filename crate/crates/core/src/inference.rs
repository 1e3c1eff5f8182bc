//! MAP search over superpixel labelings.
//!
//! Both searches update one superpixel at a time using its Markov-blanket
//! score: every factor of the joint that changes with that superpixel's
//! class (its own factors and those of its neighbors, whose SR1/SR2 split
//! depends on it). Maximizing the blanket score is exactly maximizing the
//! global score over that one class, so ICM never lowers the global score.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bn_model::{Labeling, PredicateConfig, Scorer};
use crate::class_model::ClassModel;
use crate::error::{Error, Result};
use crate::superpixel::SuperpixelMap;

pub const DEFAULT_STOP_FRACTION: f64 = 0.10;
pub const DEFAULT_MAX_SWEEPS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IcmConfig {
    pub stop_fraction: f64,
    pub max_sweeps: usize,
}

impl Default for IcmConfig {
    fn default() -> Self {
        Self {
            stop_fraction: DEFAULT_STOP_FRACTION,
            max_sweeps: DEFAULT_MAX_SWEEPS,
        }
    }
}

impl IcmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.stop_fraction > 0.0 && self.stop_fraction <= 1.0) {
            return Err(Error::Parameter(format!(
                "stop fraction must be in (0, 1], got {}",
                self.stop_fraction
            )));
        }
        if self.max_sweeps == 0 {
            return Err(Error::Parameter("max_sweeps must be at least 1".into()));
        }
        Ok(())
    }

    /// Change count a sweep must exceed for another sweep to run.
    pub fn change_threshold(&self, n: usize) -> usize {
        (self.stop_fraction * n as f64).ceil() as usize
    }

    /// Whether ICM runs another sweep after `sweeps` sweeps, the last of
    /// which changed `changed` labels.
    pub fn should_continue(&self, changed: usize, n: usize, sweeps: usize) -> bool {
        changed > self.change_threshold(n) && sweeps < self.max_sweeps
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Icm,
    Decomp,
    Combined,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Icm => "icm",
            Algorithm::Decomp => "decomp",
            Algorithm::Combined => "combined",
        }
    }

    pub const ALL: [Algorithm; 3] = [Algorithm::Icm, Algorithm::Decomp, Algorithm::Combined];
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "icm" => Ok(Algorithm::Icm),
            "decomp" => Ok(Algorithm::Decomp),
            "combined" => Ok(Algorithm::Combined),
            other => Err(Error::Configuration(format!(
                "unknown inference algorithm {other:?} (expected icm, decomp or combined)"
            ))),
        }
    }
}

/// One ICM sweep or one full decomposition pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub phase: Algorithm,
    pub changed: usize,
    pub log_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceTrace {
    pub algorithm: Algorithm,
    pub steps: Vec<TraceStep>,
    pub seconds: f64,
}

impl InferenceTrace {
    pub fn sweeps(&self) -> usize {
        self.steps
            .iter()
            .filter(|s| s.phase == Algorithm::Icm)
            .count()
    }

    pub fn final_score(&self) -> Option<f64> {
        self.steps.last().map(|s| s.log_score)
    }
}

/// Label every superpixel with its nearest class center.
pub fn init_threshold(sp: &SuperpixelMap, model: &ClassModel) -> Labeling {
    Labeling {
        labels: sp.means.iter().map(|&m| model.nearest(m)).collect(),
        fixed: vec![false; sp.n],
    }
}

/// Class maximizing `score`, ties to the lower class.
fn argmax_class(k: usize, mut score: impl FnMut(usize) -> f64) -> (usize, f64) {
    let mut best = (1, score(1));
    for c in 2..=k {
        let s = score(c);
        if s > best.1 {
            best = (c, s);
        }
    }
    best
}

/// ICM with a hook called after every label change as
/// `observer(superpixel, old_class, labels_after)`.
pub fn icm_observed(
    sp: &SuperpixelMap,
    init: &Labeling,
    model: &ClassModel,
    cfg: &PredicateConfig,
    icm_cfg: &IcmConfig,
    mut observer: impl FnMut(usize, usize, &[usize]),
) -> Result<(Labeling, InferenceTrace)> {
    icm_cfg.validate()?;
    check_labeling(sp, init, model)?;
    let start = Instant::now();
    let scorer = Scorer::new(sp, model, cfg);
    let mut labels = init.labels.clone();
    let mut steps = Vec::new();
    loop {
        let mut changed = 0;
        for i in 0..sp.n {
            let (best, _) = argmax_class(model.k(), |c| scorer.blanket(i, c, &labels));
            if best != labels[i] {
                let old = labels[i];
                labels[i] = best;
                changed += 1;
                observer(i, old, &labels);
            }
        }
        steps.push(TraceStep {
            phase: Algorithm::Icm,
            changed,
            log_score: scorer.global(&labels),
        });
        if !icm_cfg.should_continue(changed, sp.n, steps.len()) {
            break;
        }
    }
    let out = Labeling {
        labels,
        fixed: init.fixed.clone(),
    };
    Ok((
        out,
        InferenceTrace {
            algorithm: Algorithm::Icm,
            steps,
            seconds: start.elapsed().as_secs_f64(),
        },
    ))
}

/// Iterated conditional modes: sweep superpixels in id order, moving each to
/// its best class in place, until a sweep changes no more than
/// `ceil(stop_fraction * n)` labels or `max_sweeps` sweeps have run.
pub fn icm(
    sp: &SuperpixelMap,
    init: &Labeling,
    model: &ClassModel,
    cfg: &PredicateConfig,
    icm_cfg: &IcmConfig,
) -> Result<(Labeling, InferenceTrace)> {
    icm_observed(sp, init, model, cfg, icm_cfg, |_, _, _| {})
}

fn check_labeling(sp: &SuperpixelMap, labels: &Labeling, model: &ClassModel) -> Result<()> {
    if labels.len() != sp.n {
        return Err(Error::Parameter(format!(
            "labeling covers {} superpixels, map has {}",
            labels.len(),
            sp.n
        )));
    }
    if let Some(bad) = labels.labels.iter().find(|&&l| l == 0 || l > model.k()) {
        return Err(Error::Parameter(format!(
            "label {bad} outside 1..={}",
            model.k()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
struct Pending {
    confidence: f64,
    id: usize,
    version: u32,
}

impl PartialEq for Pending {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Pending {}

impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Pending {
    // Most confident first; ties to the lower id.
    fn cmp(&self, other: &Self) -> Ordering {
        self.confidence
            .total_cmp(&other.confidence)
            .then_with(|| other.id.cmp(&self.id))
    }
}

/// Best class of `i` by its own local score, and that score.
fn local_best(scorer: &Scorer, i: usize, labels: &[usize]) -> (usize, f64) {
    argmax_class(scorer.k(), |c| scorer.local(i, c, labels))
}

/// Model decomposition: fix superpixels one at a time, always the unfixed
/// one with the highest local score over its classes, computed from fixed
/// labels where available and provisional threshold labels elsewhere.
pub fn decompose(
    sp: &SuperpixelMap,
    model: &ClassModel,
    cfg: &PredicateConfig,
) -> Result<(Labeling, InferenceTrace)> {
    decompose_ordered(sp, model, cfg).map(|(l, t, _)| (l, t))
}

/// Same as [`decompose`], also returning the order in which superpixels
/// were fixed.
pub fn decompose_ordered(
    sp: &SuperpixelMap,
    model: &ClassModel,
    cfg: &PredicateConfig,
) -> Result<(Labeling, InferenceTrace, Vec<usize>)> {
    let start = Instant::now();
    let scorer = Scorer::new(sp, model, cfg);
    let init = init_threshold(sp, model);
    let mut labels = init.labels.clone();
    let mut fixed = vec![false; sp.n];
    let mut version = vec![0u32; sp.n];
    let mut best_class = vec![0usize; sp.n];
    let mut heap = BinaryHeap::with_capacity(sp.n);
    for i in 0..sp.n {
        let (c, confidence) = local_best(&scorer, i, &labels);
        best_class[i] = c;
        heap.push(Pending {
            confidence,
            id: i,
            version: 0,
        });
    }

    let mut order = Vec::with_capacity(sp.n);
    while let Some(top) = heap.pop() {
        let i = top.id;
        if fixed[i] || top.version != version[i] {
            continue;
        }
        fixed[i] = true;
        order.push(i);
        if best_class[i] == labels[i] {
            continue;
        }
        labels[i] = best_class[i];

        // Only the neighbors' local scores depend on the label of i.
        for &j in &sp.adjacency[i] {
            if fixed[j] {
                continue;
            }
            let (c, confidence) = local_best(&scorer, j, &labels);
            best_class[j] = c;
            version[j] += 1;
            heap.push(Pending {
                confidence,
                id: j,
                version: version[j],
            });
        }
    }

    let changed = labels
        .iter()
        .zip(&init.labels)
        .filter(|(a, b)| a != b)
        .count();
    let step = TraceStep {
        phase: Algorithm::Decomp,
        changed,
        log_score: scorer.global(&labels),
    };
    Ok((
        Labeling { labels, fixed },
        InferenceTrace {
            algorithm: Algorithm::Decomp,
            steps: vec![step],
            seconds: start.elapsed().as_secs_f64(),
        },
        order,
    ))
}

/// Decomposition followed by ICM started from its result.
pub fn combined(
    sp: &SuperpixelMap,
    model: &ClassModel,
    cfg: &PredicateConfig,
    icm_cfg: &IcmConfig,
) -> Result<(Labeling, InferenceTrace)> {
    icm_cfg.validate()?;
    let start = Instant::now();
    let (decomposed, first) = decompose(sp, model, cfg)?;
    let (refined, second) = icm(sp, &decomposed, model, cfg, icm_cfg)?;
    let mut steps = first.steps;
    steps.extend(second.steps);
    Ok((
        refined,
        InferenceTrace {
            algorithm: Algorithm::Combined,
            steps,
            seconds: start.elapsed().as_secs_f64(),
        },
    ))
}

/// Run `algorithm`; plain ICM starts from the threshold labeling.
pub fn infer(
    algorithm: Algorithm,
    sp: &SuperpixelMap,
    model: &ClassModel,
    cfg: &PredicateConfig,
    icm_cfg: &IcmConfig,
) -> Result<(Labeling, InferenceTrace)> {
    match algorithm {
        Algorithm::Icm => {
            let start = Instant::now();
            let init = init_threshold(sp, model);
            let (l, mut t) = icm(sp, &init, model, cfg, icm_cfg)?;
            t.seconds = start.elapsed().as_secs_f64();
            Ok((l, t))
        }
        Algorithm::Decomp => decompose(sp, model, cfg),
        Algorithm::Combined => combined(sp, model, cfg, icm_cfg),
    }
}
