//! Scoring of superpixel labelings under the layered network.
//!
//! Every superpixel `i` contributes three kinds of factors:
//!
//! * the normalized class posterior of its mean intensity,
//! * the Gaussian likelihood of its region mean (the pixel mean over the
//!   superpixel and its same-class neighbors) under its class, and
//! * one evidence factor per enabled predicate, `p_true` when the predicate
//!   holds on the region and `p_false` otherwise.
//!
//! A labeling's score is the sum of the logs of all factors. Neighbor labels
//! enter a superpixel's factors only through which neighbors count as
//! same-class (SR1) and which as different-class (SR2).

use serde::{Deserialize, Serialize};

use crate::class_model::{log_posterior_y, log_region_likelihood, ClassModel};
use crate::error::{Error, Result};
use crate::superpixel::SuperpixelMap;

pub const DEFAULT_T1: f64 = 15.0;
pub const DEFAULT_T2: f64 = 30.0;
pub const DEFAULT_P_TRUE: f64 = 0.8;
pub const DEFAULT_P_FALSE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Predicate {
    /// RMS deviation from the center: low over SR1, high over SR2.
    P1,
    /// Extreme deviations: every SR1 member close, every SR2 member far.
    P2,
}

impl std::str::FromStr for Predicate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "p1" => Ok(Predicate::P1),
            "p2" => Ok(Predicate::P2),
            other => Err(Error::Configuration(format!(
                "unknown predicate {other:?} (expected p1 or p2)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredicateConfig {
    pub t1: f64,
    pub t2: f64,
    pub enabled: Vec<Predicate>,
    pub p_true: f64,
    pub p_false: f64,
}

impl Default for PredicateConfig {
    fn default() -> Self {
        Self {
            t1: DEFAULT_T1,
            t2: DEFAULT_T2,
            enabled: vec![Predicate::P1, Predicate::P2],
            p_true: DEFAULT_P_TRUE,
            p_false: DEFAULT_P_FALSE,
        }
    }
}

impl PredicateConfig {
    pub fn none() -> Self {
        Self {
            enabled: Vec::new(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t1 >= 0.0) || !(self.t2 >= 0.0) {
            return Err(Error::Parameter(format!(
                "predicate thresholds must be nonnegative, got t1={} t2={}",
                self.t1, self.t2
            )));
        }
        if !(0.0 < self.p_false && self.p_false < self.p_true && self.p_true < 1.0) {
            return Err(Error::Parameter(format!(
                "need 0 < p_false < p_true < 1, got p_false={} p_true={}",
                self.p_false, self.p_true
            )));
        }
        Ok(())
    }
}

/// Class per superpixel (1-based) plus the fixed flags used by decomposition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labeling {
    pub labels: Vec<usize>,
    pub fixed: Vec<bool>,
}

impl Labeling {
    pub fn new(labels: Vec<usize>, k: usize) -> Result<Self> {
        if let Some(bad) = labels.iter().find(|&&l| l == 0 || l > k) {
            return Err(Error::Parameter(format!("label {bad} outside 1..={k}")));
        }
        let fixed = vec![false; labels.len()];
        Ok(Self { labels, fixed })
    }

    pub fn uniform(n: usize, class: usize) -> Self {
        Self {
            labels: vec![class; n],
            fixed: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Neighborhood split of one superpixel under a labeling.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionView {
    pub center_id: usize,
    pub sr1: Vec<usize>,
    pub sr2: Vec<usize>,
    /// Pixel mean over the center and its SR1 neighbors.
    pub r_value: f64,
}

fn view_with(sp: &SuperpixelMap, i: usize, class_of: impl Fn(usize) -> usize) -> RegionView {
    let own = class_of(i);
    let mut sr1 = Vec::new();
    let mut sr2 = Vec::new();
    let mut sum = sp.intensity_sum(i);
    let mut count = sp.sizes[i];
    for &j in &sp.adjacency[i] {
        if class_of(j) == own {
            sum += sp.intensity_sum(j);
            count += sp.sizes[j];
            sr1.push(j);
        } else {
            sr2.push(j);
        }
    }
    RegionView {
        center_id: i,
        sr1,
        sr2,
        r_value: sum / count as f64,
    }
}

pub fn region_view(sp: &SuperpixelMap, labels: &Labeling, i: usize) -> RegionView {
    view_with(sp, i, |j| labels.labels[j])
}

fn rms_deviation(members: &[usize], sp: &SuperpixelMap, s: f64) -> f64 {
    let ss: f64 = members.iter().map(|&j| (sp.means[j] - s).powi(2)).sum();
    (ss / members.len() as f64).sqrt()
}

pub fn eval_p1(view: &RegionView, sp: &SuperpixelMap, cfg: &PredicateConfig) -> bool {
    let s = sp.means[view.center_id];
    let homogeneous = view.sr1.is_empty() || rms_deviation(&view.sr1, sp, s) < cfg.t1;
    let contrasted = view.sr2.is_empty() || rms_deviation(&view.sr2, sp, s) > cfg.t2;
    homogeneous && contrasted
}

pub fn eval_p2(view: &RegionView, sp: &SuperpixelMap, cfg: &PredicateConfig) -> bool {
    let s = sp.means[view.center_id];
    let dev = |j: &usize| (sp.means[*j] - s).abs();
    let homogeneous = view.sr1.iter().map(dev).fold(0.0, f64::max) < cfg.t1 || view.sr1.is_empty();
    let contrasted =
        view.sr2.iter().map(dev).fold(f64::INFINITY, f64::min) > cfg.t2 || view.sr2.is_empty();
    homogeneous && contrasted
}

pub fn eval_predicate(
    p: Predicate,
    view: &RegionView,
    sp: &SuperpixelMap,
    cfg: &PredicateConfig,
) -> bool {
    match p {
        Predicate::P1 => eval_p1(view, sp, cfg),
        Predicate::P2 => eval_p2(view, sp, cfg),
    }
}

pub fn predicate_factor(holds: bool, cfg: &PredicateConfig) -> f64 {
    if holds {
        cfg.p_true
    } else {
        cfg.p_false
    }
}

/// Precomputed scoring context for one (map, model, predicates) triple.
///
/// All scores are in the log domain.
pub struct Scorer<'a> {
    pub sp: &'a SuperpixelMap,
    pub model: &'a ClassModel,
    pub cfg: &'a PredicateConfig,
    log_post: Vec<Vec<f64>>,
}

impl<'a> Scorer<'a> {
    pub fn new(sp: &'a SuperpixelMap, model: &'a ClassModel, cfg: &'a PredicateConfig) -> Self {
        let log_post = sp
            .means
            .iter()
            .map(|&m| log_posterior_y(m, model))
            .collect();
        Self {
            sp,
            model,
            cfg,
            log_post,
        }
    }

    pub fn k(&self) -> usize {
        self.model.k()
    }

    fn term_with(&self, i: usize, class_of: impl Fn(usize) -> usize) -> f64 {
        let c = class_of(i);
        let view = view_with(self.sp, i, class_of);
        let mut total =
            self.log_post[i][c - 1] + log_region_likelihood(view.r_value, c, self.model);
        for &p in &self.cfg.enabled {
            total += predicate_factor(eval_predicate(p, &view, self.sp, self.cfg), self.cfg).ln();
        }
        total
    }

    /// Log of superpixel `i`'s own factors with its class set to `c`.
    pub fn local(&self, i: usize, c: usize, labels: &[usize]) -> f64 {
        self.term_with(i, |j| if j == i { c } else { labels[j] })
    }

    /// Log of superpixel `i`'s own factors under `labels`.
    pub fn term(&self, i: usize, labels: &[usize]) -> f64 {
        self.term_with(i, |j| labels[j])
    }

    /// Every factor of the global score that depends on `i`'s class: the
    /// terms of `i` and of each neighbor, with `i` set to `c`. Differences of
    /// this value across `c` equal differences of the global score.
    pub fn blanket(&self, i: usize, c: usize, labels: &[usize]) -> f64 {
        let class_of = |j: usize| if j == i { c } else { labels[j] };
        let mut total = self.term_with(i, class_of);
        for &j in &self.sp.adjacency[i] {
            total += self.term_with(j, class_of);
        }
        total
    }

    pub fn terms(&self, labels: &[usize]) -> Vec<f64> {
        (0..self.sp.n).map(|i| self.term(i, labels)).collect()
    }

    /// Sum of all log factors; `-inf` when any factor is zero or undefined.
    pub fn global(&self, labels: &[usize]) -> f64 {
        let mut total = 0.0;
        for i in 0..self.sp.n {
            let t = self.term(i, labels);
            if !t.is_finite() {
                return f64::NEG_INFINITY;
            }
            total += t;
        }
        total
    }
}

/// Product of superpixel `i`'s factors with its class set to `c`.
pub fn local_score(
    i: usize,
    c: usize,
    sp: &SuperpixelMap,
    labels: &Labeling,
    model: &ClassModel,
    cfg: &PredicateConfig,
) -> f64 {
    Scorer::new(sp, model, cfg)
        .local(i, c, &labels.labels)
        .exp()
}

/// Log joint score of a complete labeling.
pub fn global_score(
    labels: &Labeling,
    sp: &SuperpixelMap,
    model: &ClassModel,
    cfg: &PredicateConfig,
) -> f64 {
    Scorer::new(sp, model, cfg).global(&labels.labels)
}
