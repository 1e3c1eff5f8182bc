//! Ground-truth scoring, classical threshold baselines, synthetic test
//! images and the runtime-scaling benchmark.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{self, SegmentParams};
use crate::raster::{GrayImage, LabelImage};
use crate::superpixel;

pub const NIBLACK_WINDOW: usize = 15;
pub const NIBLACK_K: f64 = -0.2;
pub const SAUVOLA_WINDOW: usize = 15;
pub const SAUVOLA_K: f64 = 0.5;
pub const SAUVOLA_R: f64 = 128.0;

/// Largest label count for which the label matching is exhaustive.
const EXHAUSTIVE_MATCH_LIMIT: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Pixel accuracy under the best one-to-one label matching.
    pub accuracy: f64,
    /// Fraction of each truth class recovered under that matching.
    pub per_class_accuracy: Vec<f64>,
    /// `confusion[t - 1][p - 1]` counts pixels with truth `t`, prediction `p`.
    pub confusion: Vec<Vec<u64>>,
    /// Truth label matched to each predicted label (`None` when unmatched).
    pub mapping: Vec<Option<u16>>,
    pub runtime_seconds: f64,
}

/// Permutation-matched pixel accuracy of `pred` against `truth`.
pub fn consistency(pred: &LabelImage, truth: &LabelImage) -> Result<EvalReport> {
    if (pred.width(), pred.height()) != (truth.width(), truth.height()) {
        return Err(Error::Parameter(format!(
            "prediction is {}x{}, ground truth is {}x{}",
            pred.width(),
            pred.height(),
            truth.width(),
            truth.height()
        )));
    }
    let kp = pred.max_label() as usize;
    let kt = truth.max_label() as usize;
    let mut confusion = vec![vec![0u64; kp]; kt];
    for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
        confusion[t as usize - 1][p as usize - 1] += 1;
    }

    // pairs[p] = matched truth index for prediction index p
    let pairs = if kp.max(kt) <= EXHAUSTIVE_MATCH_LIMIT {
        best_matching(&confusion, kt, kp)
    } else {
        greedy_matching(&confusion, kt, kp)
    };

    let total = pred.labels().len() as f64;
    let mut matched = 0u64;
    let mut per_class = vec![0.0; kt];
    for (p, t) in pairs.iter().enumerate() {
        if let Some(t) = *t {
            matched += confusion[t][p];
            let row: u64 = confusion[t].iter().sum();
            if row > 0 {
                per_class[t] = confusion[t][p] as f64 / row as f64;
            }
        }
    }
    Ok(EvalReport {
        accuracy: matched as f64 / total,
        per_class_accuracy: per_class,
        confusion,
        mapping: pairs.iter().map(|t| t.map(|t| t as u16 + 1)).collect(),
        runtime_seconds: 0.0,
    })
}

/// Exhaustive search over one-to-one matchings of prediction labels to truth
/// labels, maximizing matched pixels. Ties keep the first matching found in
/// lexicographic order.
fn best_matching(confusion: &[Vec<u64>], kt: usize, kp: usize) -> Vec<Option<usize>> {
    fn search(
        p: usize,
        kp: usize,
        kt: usize,
        confusion: &[Vec<u64>],
        used: &mut Vec<bool>,
        current: &mut Vec<Option<usize>>,
        score: u64,
        best: &mut (u64, Vec<Option<usize>>),
    ) {
        if p == kp {
            if score > best.0 || best.1.is_empty() {
                *best = (score, current.clone());
            }
            return;
        }
        for t in 0..kt {
            if !used[t] {
                used[t] = true;
                current[p] = Some(t);
                search(
                    p + 1,
                    kp,
                    kt,
                    confusion,
                    used,
                    current,
                    score + confusion[t][p],
                    best,
                );
                used[t] = false;
            }
        }
        // Leave p unmatched only when there are more predictions than truths
        // left to pair.
        let free_truths = used.iter().filter(|u| !**u).count();
        if kp - p > free_truths {
            current[p] = None;
            search(p + 1, kp, kt, confusion, used, current, score, best);
        }
    }
    let mut best = (0, Vec::new());
    search(
        0,
        kp,
        kt,
        confusion,
        &mut vec![false; kt],
        &mut vec![None; kp],
        0,
        &mut best,
    );
    best.1
}

fn greedy_matching(confusion: &[Vec<u64>], kt: usize, kp: usize) -> Vec<Option<usize>> {
    let mut cells: Vec<(u64, usize, usize)> = (0..kt)
        .flat_map(|t| (0..kp).map(move |p| (t, p)))
        .map(|(t, p)| (confusion[t][p], t, p))
        .collect();
    cells.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut pairs = vec![None; kp];
    let mut used = vec![false; kt];
    for (_, t, p) in cells {
        if pairs[p].is_none() && !used[t] {
            pairs[p] = Some(t);
            used[t] = true;
        }
    }
    pairs
}

/// Otsu threshold of a 256-bin histogram: the `t` maximizing between-class
/// variance of `{v <= t}` versus `{v > t}`, lowest `t` on ties. `None` when
/// fewer than two bins are populated.
pub fn otsu_threshold(hist: &[u64; 256]) -> Option<u8> {
    let total: u64 = hist.iter().sum();
    let mass: u64 = hist.iter().enumerate().map(|(v, &h)| v as u64 * h).sum();
    let (mut n0, mut m0) = (0u64, 0u64);
    // Between-class variance is proportional to d^2 / (n0 n1) with
    // d = n1 m0 - n0 m1; kept as an exact fraction while it fits.
    let mut best: Option<(u8, u128, u128)> = None;
    for t in 0..255usize {
        n0 += hist[t];
        m0 += t as u64 * hist[t];
        let n1 = total - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let m1 = mass - m0;
        let d = (n1 as i128 * m0 as i128 - n0 as i128 * m1 as i128).unsigned_abs();
        let num = d * d;
        let den = n0 as u128 * n1 as u128;
        let better = match best {
            None => true,
            Some((_, bn, bd)) => match (num.checked_mul(bd), bn.checked_mul(den)) {
                (Some(a), Some(b)) => a > b,
                _ => num as f64 / den as f64 > bn as f64 / bd as f64,
            },
        };
        if better {
            best = Some((t as u8, num, den));
        }
    }
    best.map(|(t, _, _)| t)
}

pub fn histogram(img: &GrayImage) -> [u64; 256] {
    let mut hist = [0u64; 256];
    for &v in img.data() {
        hist[v as usize] += 1;
    }
    hist
}

fn binarize(img: &GrayImage, threshold_at: impl Fn(usize) -> f64) -> LabelImage {
    let labels = img
        .data()
        .iter()
        .enumerate()
        .map(|(p, &v)| {
            if f64::from(v) <= threshold_at(p) {
                1
            } else {
                2
            }
        })
        .collect();
    LabelImage::new(img.width(), img.height(), labels).expect("dimensions come from a valid image")
}

/// Global Otsu binarization; pixels at or below the threshold are class 1.
pub fn otsu(img: &GrayImage) -> Result<(u8, LabelImage)> {
    let t = otsu_threshold(&histogram(img))
        .ok_or_else(|| Error::Degenerate("Otsu needs at least two distinct intensities".into()))?;
    Ok((t, binarize(img, |_| f64::from(t))))
}

/// Mean and population standard deviation over a square window centred on
/// every pixel, with the border replicated.
pub fn window_stats(img: &GrayImage, window: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if window < 3 || window.is_multiple_of(2) {
        return Err(Error::Parameter(format!(
            "window must be odd and at least 3, got {window}"
        )));
    }
    let (w, h) = (img.width(), img.height());
    let r = window / 2;
    let (pw, ph) = (w + 2 * r, h + 2 * r);
    // Integral images over the replicated-border padding, one extra row and
    // column of zeros in front.
    let mut sum = vec![0u64; (pw + 1) * (ph + 1)];
    let mut sq = vec![0u64; (pw + 1) * (ph + 1)];
    for y in 0..ph {
        let sy = y.saturating_sub(r).min(h - 1);
        let mut row_sum = 0u64;
        let mut row_sq = 0u64;
        for x in 0..pw {
            let sx = x.saturating_sub(r).min(w - 1);
            let v = u64::from(img.get(sx, sy));
            row_sum += v;
            row_sq += v * v;
            let idx = (y + 1) * (pw + 1) + x + 1;
            sum[idx] = sum[idx - (pw + 1)] + row_sum;
            sq[idx] = sq[idx - (pw + 1)] + row_sq;
        }
    }
    let rect = |table: &[u64], x: usize, y: usize| {
        let (x1, y1) = (x + window, y + window);
        table[y1 * (pw + 1) + x1] + table[y * (pw + 1) + x]
            - table[y * (pw + 1) + x1]
            - table[y1 * (pw + 1) + x]
    };
    let count = (window * window) as u128;
    let mut means = Vec::with_capacity(w * h);
    let mut stds = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let s = u128::from(rect(&sum, x, y));
            let q = u128::from(rect(&sq, x, y));
            means.push(s as f64 / count as f64);
            let var_num = count * q - s * s;
            stds.push((var_num as f64).sqrt() / count as f64);
        }
    }
    Ok((means, stds))
}

/// Niblack local threshold `m + k s`.
pub fn niblack(img: &GrayImage, window: usize, k_param: f64) -> Result<LabelImage> {
    let (means, stds) = window_stats(img, window)?;
    Ok(binarize(img, |p| means[p] + k_param * stds[p]))
}

/// Sauvola local threshold `m (1 + k (s / R - 1))`.
pub fn sauvola(img: &GrayImage, window: usize, k_param: f64, r_param: f64) -> Result<LabelImage> {
    if !(r_param > 0.0) {
        return Err(Error::Parameter(format!(
            "Sauvola dynamic range must be positive, got {r_param}"
        )));
    }
    let (means, stds) = window_stats(img, window)?;
    Ok(binarize(img, |p| {
        means[p] * (1.0 + k_param * (stds[p] / r_param - 1.0))
    }))
}

/// Axis-aligned rectangle of constant base intensity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
    pub intensity: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub width: usize,
    pub height: usize,
    pub regions: Vec<Region>,
}

impl SynthSpec {
    /// Left half, upper right and lower right quarter, with the given
    /// intensities in that order.
    pub fn three_regions(width: usize, height: usize, intensities: [u8; 3]) -> Self {
        let (hw, hh) = (width / 2, height / 2);
        SynthSpec {
            width,
            height,
            regions: vec![
                Region {
                    x: 0,
                    y: 0,
                    width: hw,
                    height,
                    intensity: intensities[0],
                },
                Region {
                    x: hw,
                    y: 0,
                    width: width - hw,
                    height: hh,
                    intensity: intensities[1],
                },
                Region {
                    x: hw,
                    y: hh,
                    width: width - hw,
                    height: height - hh,
                    intensity: intensities[2],
                },
            ],
        }
    }

    /// Random guillotine split of the canvas into `intensities.len()`
    /// rectangles, each at least `width/8 x height/8`.
    pub fn random_blocks(width: usize, height: usize, intensities: &[u8], seed: u64) -> Self {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (min_w, min_h) = ((width / 8).max(1), (height / 8).max(1));
        let mut rects = vec![(0usize, 0usize, width, height)];
        while rects.len() < intensities.len() {
            // Split the largest rectangle along its longer side.
            let (idx, _) = rects
                .iter()
                .enumerate()
                .max_by_key(|(i, r)| (r.2 * r.3, usize::MAX - i))
                .unwrap();
            let (x, y, w, h) = rects.remove(idx);
            if w >= h && w >= 2 * min_w {
                let cut = rng.random_range(min_w..=w - min_w);
                rects.push((x, y, cut, h));
                rects.push((x + cut, y, w - cut, h));
            } else if h >= 2 * min_h {
                let cut = rng.random_range(min_h..=h - min_h);
                rects.push((x, y, w, cut));
                rects.push((x, y + cut, w, h - cut));
            } else {
                rects.push((x, y, w, h));
                break;
            }
        }
        let regions = rects
            .into_iter()
            .zip(intensities)
            .map(|((x, y, w, h), &intensity)| Region {
                x,
                y,
                width: w,
                height: h,
                intensity,
            })
            .collect();
        SynthSpec {
            width,
            height,
            regions,
        }
    }
}

/// Piecewise-constant image plus i.i.d. Gaussian noise, clamped to 0..=255,
/// together with its truth labels (distinct base intensities ranked
/// ascending).
pub fn synth_image(
    spec: &SynthSpec,
    noise_sigma: f64,
    seed: u64,
) -> Result<(GrayImage, LabelImage)> {
    let (w, h) = (spec.width, spec.height);
    if w == 0 || h == 0 {
        return Err(Error::RegionSpec("canvas must be non-empty".into()));
    }
    let noise = Normal::new(0.0, noise_sigma)
        .map_err(|_| Error::Parameter(format!("noise sigma must be >= 0, got {noise_sigma}")))?;
    let mut owner = vec![usize::MAX; w * h];
    for (ri, r) in spec.regions.iter().enumerate() {
        if r.x + r.width > w || r.y + r.height > h {
            return Err(Error::RegionSpec(format!(
                "region {ri} extends past the canvas"
            )));
        }
        for y in r.y..r.y + r.height {
            for x in r.x..r.x + r.width {
                let p = y * w + x;
                if owner[p] != usize::MAX {
                    return Err(Error::RegionSpec(format!(
                        "regions {} and {ri} overlap at ({x}, {y})",
                        owner[p]
                    )));
                }
                owner[p] = ri;
            }
        }
    }
    if let Some(p) = owner.iter().position(|&o| o == usize::MAX) {
        return Err(Error::RegionSpec(format!(
            "pixel ({}, {}) is not covered by any region",
            p % w,
            p / w
        )));
    }

    let mut levels: Vec<u8> = spec.regions.iter().map(|r| r.intensity).collect();
    levels.sort_unstable();
    levels.dedup();
    let rank = |v: u8| levels.binary_search(&v).expect("level present") as u16 + 1;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(w * h);
    let mut truth = Vec::with_capacity(w * h);
    for &o in &owner {
        let base = spec.regions[o].intensity;
        let v = if noise_sigma > 0.0 {
            (f64::from(base) + noise.sample(&mut rng))
                .round()
                .clamp(0.0, 255.0) as u8
        } else {
            base
        };
        data.push(v);
        truth.push(rank(base));
    }
    Ok((GrayImage::new(w, h, data)?, LabelImage::new(w, h, truth)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub n: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub rows: Vec<ScalingRow>,
    /// Coefficient of determination of the least-squares line through
    /// `(n, seconds)`; `None` with fewer than two rows.
    pub r_squared: Option<f64>,
}

/// R^2 of the ordinary least-squares line through the points.
pub fn linear_fit_r2(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len();
    if n < 2 || n != ys.len() {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return None;
    }
    if syy == 0.0 {
        return Some(1.0);
    }
    Some(sxy * sxy / (sxx * syy))
}

/// Minimum wall time a timed batch must cover.
const BENCH_BATCH_SECONDS: f64 = 0.05;
const BENCH_BATCHES: usize = 5;

/// Time clustering plus inference on superpixel maps of each requested size.
///
/// Over-segmentation runs once per count outside the timed section. Each
/// timed batch repeats the downstream pipeline until it covers at least
/// 50 ms; the reported time per run is the median over five batches.
pub fn scaling_benchmark(
    img: &GrayImage,
    counts: &[usize],
    params: &SegmentParams,
) -> Result<ScalingReport> {
    if counts.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Parameter(
            "superpixel counts must be strictly ascending".into(),
        ));
    }
    let mut rows = Vec::with_capacity(counts.len());
    for &n in counts {
        let sp = superpixel::oversegment(img, n, params.balance, params.bandwidth)?;
        let run_once = || -> Result<()> {
            let model = pipeline::class_model_for(&sp, params)?;
            pipeline::infer_labels(&sp, &model, params)?;
            Ok(())
        };
        run_once()?;
        let mut batch_times = Vec::with_capacity(BENCH_BATCHES);
        for _ in 0..BENCH_BATCHES {
            let start = Instant::now();
            let mut reps = 0u32;
            while reps == 0 || start.elapsed().as_secs_f64() < BENCH_BATCH_SECONDS {
                run_once()?;
                reps += 1;
            }
            batch_times.push(start.elapsed().as_secs_f64() / f64::from(reps));
        }
        batch_times.sort_by(f64::total_cmp);
        rows.push(ScalingRow {
            n: sp.n,
            seconds: batch_times[BENCH_BATCHES / 2],
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.seconds).collect();
    Ok(ScalingReport {
        r_squared: linear_fit_r2(&xs, &ys),
        rows,
    })
}
