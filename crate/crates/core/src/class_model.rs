//! Class centers and the Gaussian probabilities derived from them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SIGMA: f64 = 50.0;
const KMEANS_MAX_ITER: usize = 100;
const KMEANS_RESTARTS: usize = 8;
// Largest input that also gets the exact 1-D seed.
const EXACT_SEED_MAX: usize = 4096;

/// Sorted class centers with one standard deviation per class.
///
/// Class `c` (1-based) has mean `centers[c - 1]` and deviation `sigmas[c - 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawModel", into = "RawModel")]
pub struct ClassModel {
    centers: Vec<f64>,
    sigmas: Vec<f64>,
    region_sigmas: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct RawModel {
    centers: Vec<f64>,
    sigmas: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    region_sigmas: Option<Vec<f64>>,
}

impl TryFrom<RawModel> for ClassModel {
    type Error = Error;

    fn try_from(raw: RawModel) -> Result<Self> {
        let model = ClassModel::new(raw.centers, raw.sigmas)?;
        match raw.region_sigmas {
            Some(r) => model.with_region_sigmas(r),
            None => Ok(model),
        }
    }
}

impl From<ClassModel> for RawModel {
    fn from(m: ClassModel) -> Self {
        RawModel {
            centers: m.centers,
            sigmas: m.sigmas,
            region_sigmas: m.region_sigmas,
        }
    }
}

impl ClassModel {
    pub fn new(centers: Vec<f64>, sigmas: Vec<f64>) -> Result<Self> {
        if centers.is_empty() {
            return Err(Error::Parameter(
                "a class model needs at least one center".into(),
            ));
        }
        if centers.len() != sigmas.len() {
            return Err(Error::Parameter(format!(
                "{} centers but {} sigmas",
                centers.len(),
                sigmas.len()
            )));
        }
        if centers.iter().any(|c| !c.is_finite()) {
            return Err(Error::Parameter("class centers must be finite".into()));
        }
        if centers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Parameter(format!(
                "class centers must be strictly increasing, got {centers:?}"
            )));
        }
        check_sigmas(&sigmas)?;
        Ok(Self {
            centers,
            sigmas,
            region_sigmas: None,
        })
    }

    pub fn uniform(centers: Vec<f64>, sigma: f64) -> Result<Self> {
        let sigmas = vec![sigma; centers.len()];
        Self::new(centers, sigmas)
    }

    pub fn k(&self) -> usize {
        self.centers.len()
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn center(&self, class: usize) -> f64 {
        self.centers[class - 1]
    }

    pub fn sigma(&self, class: usize) -> f64 {
        self.sigmas[class - 1]
    }

    /// Same centers, new per-class deviations. A region override is kept.
    pub fn with_sigmas(&self, sigmas: Vec<f64>) -> Result<Self> {
        let mut m = Self::new(self.centers.clone(), sigmas)?;
        m.region_sigmas = self.region_sigmas.clone();
        Ok(m)
    }

    /// Use separate deviations for the region likelihood. Without an
    /// override the region likelihood shares the posterior's deviations.
    pub fn with_region_sigmas(mut self, sigmas: Vec<f64>) -> Result<Self> {
        if sigmas.len() != self.k() {
            return Err(Error::Parameter(format!(
                "{} region sigmas for {} classes",
                sigmas.len(),
                self.k()
            )));
        }
        check_sigmas(&sigmas)?;
        self.region_sigmas = Some(sigmas);
        Ok(self)
    }

    pub fn region_sigma(&self, class: usize) -> f64 {
        match &self.region_sigmas {
            Some(r) => r[class - 1],
            None => self.sigmas[class - 1],
        }
    }

    pub fn region_sigmas(&self) -> Option<&[f64]> {
        self.region_sigmas.as_deref()
    }

    /// Class whose center is closest to `v`; ties go to the lower class.
    pub fn nearest(&self, v: f64) -> usize {
        let mut best = 1;
        let mut best_d = f64::INFINITY;
        for (j, c) in self.centers.iter().enumerate() {
            let d = (v - c).abs();
            if d < best_d {
                best_d = d;
                best = j + 1;
            }
        }
        best
    }
}

fn check_sigmas(sigmas: &[f64]) -> Result<()> {
    if sigmas.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(Error::Parameter(format!(
            "every sigma must be positive and finite, got {sigmas:?}"
        )));
    }
    Ok(())
}

pub fn gaussian_density(v: f64, mu: f64, sigma: f64) -> f64 {
    let z = (v - mu) / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

pub fn log_gaussian_density(v: f64, mu: f64, sigma: f64) -> f64 {
    let z = (v - mu) / sigma;
    -0.5 * z * z - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// Log of the normalized class posterior for an observed mean intensity.
///
/// Normalization runs in the log domain, so the vector never underflows for
/// finite inputs; non-finite inputs fall back to a one-hot vector on the
/// nearest center.
pub fn log_posterior_y(v: f64, model: &ClassModel) -> Vec<f64> {
    let logs: Vec<f64> = model
        .centers
        .iter()
        .zip(&model.sigmas)
        .map(|(&mu, &s)| log_gaussian_density(v, mu, s))
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let norm = max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    if !norm.is_finite() {
        let hot = model.nearest(v);
        return (1..=model.k())
            .map(|c| if c == hot { 0.0 } else { f64::NEG_INFINITY })
            .collect();
    }
    logs.into_iter().map(|l| l - norm).collect()
}

/// Normalized class posterior `P(Y = c | X = v)` for `c = 1..=k`.
pub fn posterior_y(v: f64, model: &ClassModel) -> Vec<f64> {
    log_posterior_y(v, model)
        .into_iter()
        .map(f64::exp)
        .collect()
}

/// Unnormalized Gaussian likelihood of a region mean `r` under `class`.
pub fn region_likelihood(r: f64, class: usize, model: &ClassModel) -> f64 {
    gaussian_density(r, model.center(class), model.region_sigma(class))
}

pub fn log_region_likelihood(r: f64, class: usize, model: &ClassModel) -> f64 {
    log_gaussian_density(r, model.center(class), model.region_sigma(class))
}

/// k-means over scalar intensities: k-means++ seeding, Lloyd iterations to an
/// assignment fixpoint (at most 100), best of several seeded restarts by
/// within-cluster squared error. Inputs up to a few thousand values also try
/// Lloyd from the exact 1-D optimal partition. All classes get [`DEFAULT_SIGMA`].
pub fn kmeans_centers(values: &[f64], k: usize, seed: u64) -> Result<ClassModel> {
    if values.is_empty() {
        return Err(Error::Clustering("no values to cluster".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Clustering("values must be finite".into()));
    }
    let mut distinct = values.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if k < 2 || k > distinct.len() {
        return Err(Error::Clustering(format!(
            "k must be in 2..={} (distinct values), got {k}",
            distinct.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<f64>)> = None;
    for _ in 0..KMEANS_RESTARTS {
        let init = plus_plus_seeds(values, k, &mut rng);
        let (centers, sse) = lloyd(values, init);
        if best.as_ref().is_none_or(|(b, _)| sse < *b) {
            best = Some((sse, centers));
        }
    }
    if values.len() <= EXACT_SEED_MAX {
        let (centers, sse) = lloyd(values, optimal_1d_centers(values, k));
        if best.as_ref().is_none_or(|(b, _)| sse < *b) {
            best = Some((sse, centers));
        }
    }
    let (_, mut centers) = best.expect("at least one restart");
    centers.sort_by(f64::total_cmp);
    ClassModel::uniform(centers, DEFAULT_SIGMA).map_err(|e| Error::Clustering(e.to_string()))
}

/// Means of the SSE-optimal partition of the sorted values into k contiguous
/// runs (optimal 1-D clusterings are contiguous). O(k n^2).
fn optimal_1d_centers(values: &[f64], k: usize) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let mut s1 = vec![0.0; n + 1];
    let mut s2 = vec![0.0; n + 1];
    for (i, x) in v.iter().enumerate() {
        s1[i + 1] = s1[i] + x;
        s2[i + 1] = s2[i] + x * x;
    }
    // Squared error of v[a..b] around its mean.
    let cost = |a: usize, b: usize| {
        let s = s1[b] - s1[a];
        (s2[b] - s2[a] - s * s / (b - a) as f64).max(0.0)
    };
    // dp[j][b]: best error of v[..b] in j runs; cut[j][b]: start of the last run.
    let mut dp = vec![vec![f64::INFINITY; n + 1]; k + 1];
    let mut cut = vec![vec![0usize; n + 1]; k + 1];
    dp[0][0] = 0.0;
    for j in 1..=k {
        for b in j..=n {
            for a in j - 1..b {
                let c = dp[j - 1][a] + cost(a, b);
                if c < dp[j][b] {
                    dp[j][b] = c;
                    cut[j][b] = a;
                }
            }
        }
    }
    let mut centers = vec![0.0; k];
    let mut b = n;
    for j in (1..=k).rev() {
        let a = cut[j][b];
        centers[j - 1] = (s1[b] - s1[a]) / (b - a) as f64;
        b = a;
    }
    centers
}

fn plus_plus_seeds(values: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut centers = vec![values[rng.random_range(0..values.len())]];
    let mut d2: Vec<f64> = values.iter().map(|v| (v - centers[0]).powi(2)).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut pick = d2.iter().rposition(|&d| d > 0.0).unwrap_or(0);
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 && target < d {
                pick = i;
                break;
            }
            target -= d;
        }
        let c = values[pick];
        centers.push(c);
        for (d, v) in d2.iter_mut().zip(values) {
            *d = d.min((v - c).powi(2));
        }
    }
    centers
}

fn nearest_index(v: f64, centers: &[f64]) -> usize {
    let mut best = 0;
    for (j, c) in centers.iter().enumerate() {
        if (v - c).abs() < (v - centers[best]).abs() {
            best = j;
        }
    }
    best
}

fn lloyd(values: &[f64], mut centers: Vec<f64>) -> (Vec<f64>, f64) {
    let k = centers.len();
    let mut assign: Vec<usize> = vec![usize::MAX; values.len()];
    for _ in 0..KMEANS_MAX_ITER {
        let next: Vec<usize> = values.iter().map(|&v| nearest_index(v, &centers)).collect();
        if next == assign {
            break;
        }
        assign = next;
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (&v, &a) in values.iter().zip(&assign) {
            sums[a] += v;
            counts[a] += 1;
        }
        for j in 0..k {
            if counts[j] == 0 {
                // Move the point farthest from its current center into the
                // empty cluster.
                let (far, _) = values
                    .iter()
                    .zip(&assign)
                    .enumerate()
                    .filter(|(_, (_, &a))| counts[a] > 1)
                    .map(|(i, (&v, &a))| (i, (v - centers[a]).abs()))
                    .fold(
                        (usize::MAX, -1.0),
                        |acc, x| if x.1 > acc.1 { x } else { acc },
                    );
                if far != usize::MAX {
                    let old = assign[far];
                    sums[old] -= values[far];
                    counts[old] -= 1;
                    assign[far] = j;
                    sums[j] = values[far];
                    counts[j] = 1;
                }
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j] / counts[j] as f64;
            }
        }
    }
    let sse = values
        .iter()
        .map(|&v| {
            let c = centers[nearest_index(v, &centers)];
            (v - c) * (v - c)
        })
        .sum();
    (centers, sse)
}
