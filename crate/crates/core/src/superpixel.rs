//! Over-segmentation of a grayscale image into connected superpixels.
//!
//! The default method is greedy agglomeration on the 4-connected pixel graph.
//! Starting from singleton components, it repeatedly adds the edge with the
//! largest gain of an objective made of two parts:
//!
//! * the entropy rate of a random walk on the graph whose unselected edge
//!   weight is folded into self loops (favors merging similar pixels), and
//! * a balancing term, the entropy of the component-size distribution minus
//!   the number of components (favors evenly sized components).
//!
//! Both gains shrink as the selected edge set grows, so a lazy priority
//! queue of stale upper bounds selects the exact maximizer at every step.
//! Edges whose endpoints already share a component are discarded, keeping
//! the selected set a forest.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, VecDeque};

use crate::error::{Error, Result};
use crate::raster::GrayImage;

pub const DEFAULT_BALANCE: f64 = 0.5;
pub const DEFAULT_BANDWIDTH: f64 = 30.0;

/// Undirected edge between pixel indices `a < b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub weight: f64,
}

/// 4-connected pixel graph with Gaussian intensity-similarity weights.
/// Edges are stored in lexicographic `(a, b)` order.
#[derive(Debug, Clone)]
pub struct PixelGraph {
    pub width: usize,
    pub height: usize,
    pub edges: Vec<Edge>,
}

impl PixelGraph {
    pub fn node_count(&self) -> usize {
        self.width * self.height
    }

    /// Sum of incident edge weights per node.
    pub fn node_weights(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.node_count()];
        for e in &self.edges {
            out[e.a] += e.weight;
            out[e.b] += e.weight;
        }
        out
    }
}

/// Similarity kernel `exp(-d^2 / (2 h^2))`, floored at the smallest normal
/// `f64` so every weight stays strictly positive.
pub fn similarity(i: u8, j: u8, bandwidth: f64) -> f64 {
    let d = f64::from(i) - f64::from(j);
    (-(d * d) / (2.0 * bandwidth * bandwidth))
        .exp()
        .max(f64::MIN_POSITIVE)
}

pub fn build_pixel_graph(img: &GrayImage, bandwidth: f64) -> Result<PixelGraph> {
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(Error::Parameter(format!(
            "bandwidth must be positive and finite, got {bandwidth}"
        )));
    }
    let (w, h) = (img.width(), img.height());
    let px = img.data();
    let mut edges = Vec::with_capacity(2 * w * h);
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if x + 1 < w {
                edges.push(Edge {
                    a: p,
                    b: p + 1,
                    weight: similarity(px[p], px[p + 1], bandwidth),
                });
            }
            if y + 1 < h {
                edges.push(Edge {
                    a: p,
                    b: p + w,
                    weight: similarity(px[p], px[p + w], bandwidth),
                });
            }
        }
    }
    Ok(PixelGraph {
        width: w,
        height: h,
        edges,
    })
}

/// Partition of the image into 4-connected superpixels.
///
/// Ids run `0..n` in raster order of each superpixel's first pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperpixelMap {
    pub width: usize,
    pub height: usize,
    pub assignment: Vec<usize>,
    pub n: usize,
    pub means: Vec<f64>,
    pub sizes: Vec<usize>,
    /// Sorted neighbor ids per superpixel.
    pub adjacency: Vec<Vec<usize>>,
}

impl SuperpixelMap {
    /// Build a map from arbitrary per-pixel component ids. Ids are renumbered
    /// in raster order; every component must be 4-connected.
    pub fn from_assignment(img: &GrayImage, raw: &[usize]) -> Result<Self> {
        let (w, h) = (img.width(), img.height());
        if raw.len() != w * h {
            return Err(Error::Parameter(format!(
                "assignment has {} entries, image has {} pixels",
                raw.len(),
                w * h
            )));
        }
        let mut remap: HashMap<usize, usize> = HashMap::new();
        let assignment: Vec<usize> = raw
            .iter()
            .map(|&r| {
                let next = remap.len();
                *remap.entry(r).or_insert(next)
            })
            .collect();
        let n = remap.len();

        let mut sums = vec![0u64; n];
        let mut sizes = vec![0usize; n];
        for (p, &id) in assignment.iter().enumerate() {
            sums[id] += u64::from(img.data()[p]);
            sizes[id] += 1;
        }
        let means = sums
            .iter()
            .zip(&sizes)
            .map(|(&s, &c)| s as f64 / c as f64)
            .collect();

        let mut adjacency = vec![Vec::new(); n];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let a = assignment[p];
                let mut link = |q: usize| {
                    let b = assignment[q];
                    if a != b {
                        adjacency[a].push(b);
                        adjacency[b].push(a);
                    }
                };
                if x + 1 < w {
                    link(p + 1);
                }
                if y + 1 < h {
                    link(p + w);
                }
            }
        }
        for list in &mut adjacency {
            list.sort_unstable();
            list.dedup();
        }

        let map = SuperpixelMap {
            width: w,
            height: h,
            assignment,
            n,
            means,
            sizes,
            adjacency,
        };
        if let Some(id) = map.first_disconnected() {
            return Err(Error::Parameter(format!(
                "superpixel {id} is not 4-connected"
            )));
        }
        Ok(map)
    }

    /// Id of the first component that is not 4-connected, if any.
    pub fn first_disconnected(&self) -> Option<usize> {
        let (w, h) = (self.width, self.height);
        let mut seen = vec![false; self.assignment.len()];
        let mut visited_components = vec![false; self.n];
        let mut queue = VecDeque::new();
        for start in 0..self.assignment.len() {
            let id = self.assignment[start];
            if visited_components[id] {
                if !seen[start] {
                    return Some(id);
                }
                continue;
            }
            visited_components[id] = true;
            seen[start] = true;
            queue.push_back(start);
            let mut reached = 0;
            while let Some(p) = queue.pop_front() {
                reached += 1;
                let (x, y) = (p % w, p / w);
                let mut visit = |q: usize| {
                    if !seen[q] && self.assignment[q] == id {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                };
                if x > 0 {
                    visit(p - 1);
                }
                if x + 1 < w {
                    visit(p + 1);
                }
                if y > 0 {
                    visit(p - w);
                }
                if y + 1 < h {
                    visit(p + w);
                }
            }
            if reached != self.sizes[id] {
                return Some(id);
            }
        }
        None
    }

    /// Sum of pixel intensities in superpixel `i`.
    #[inline]
    pub fn intensity_sum(&self, i: usize) -> f64 {
        self.means[i] * self.sizes[i] as f64
    }
}

/// Rectangular tiling that ignores intensities.
pub fn grid(img: &GrayImage, tiles_x: usize, tiles_y: usize) -> Result<SuperpixelMap> {
    let (w, h) = (img.width(), img.height());
    if tiles_x == 0 || tiles_y == 0 || tiles_x > w || tiles_y > h {
        return Err(Error::Parameter(format!(
            "cannot tile a {w}x{h} image into {tiles_x}x{tiles_y} cells"
        )));
    }
    let raw: Vec<usize> = (0..w * h)
        .map(|p| {
            let (x, y) = (p % w, p / w);
            (y * tiles_y / h) * tiles_x + x * tiles_x / w
        })
        .collect();
    SuperpixelMap::from_assignment(img, &raw)
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    gain: f64,
    edge: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    // Larger gain first; among equal gains the lower edge index wins.
    fn cmp(&self, other: &Self) -> Ordering {
        self.gain
            .total_cmp(&other.gain)
            .then_with(|| other.edge.cmp(&self.edge))
    }
}

struct DisjointSets {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl DisjointSets {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (mut a, mut b) = (self.find(a), self.find(b));
        if a == b {
            return;
        }
        if self.size[a] < self.size[b] {
            std::mem::swap(&mut a, &mut b);
        }
        self.parent[b] = a;
        self.size[a] += self.size[b];
    }
}

fn xlogx(x: f64) -> f64 {
    if x > 0.0 {
        x * x.ln()
    } else {
        0.0
    }
}

/// Entropy-rate objective state for the greedy merge.
struct Objective {
    node_weight: Vec<f64>,
    total_weight: f64,
    /// Selected incident weight per node.
    selected: Vec<f64>,
    pixel_count: f64,
    balance: f64,
}

impl Objective {
    /// Change of node `i`'s stationary-weighted transition entropy when an
    /// incident edge of weight `w` moves out of its self loop.
    fn node_gain(&self, i: usize, w: f64) -> f64 {
        let wi = self.node_weight[i];
        let stay = (1.0 - self.selected[i] / wi).max(0.0);
        let moved = w / wi;
        let rest = (stay - moved).max(0.0);
        let dh = -(xlogx(moved) + xlogx(rest) - xlogx(stay));
        wi / self.total_weight * dh
    }

    fn entropy_rate_gain(&self, e: &Edge) -> f64 {
        self.node_gain(e.a, e.weight) + self.node_gain(e.b, e.weight)
    }

    /// Change of the size-distribution entropy when components of sizes
    /// `sa` and `sb` merge. The accompanying drop in component count adds
    /// the same constant to every merge and is left out.
    fn balancing_gain(&self, sa: usize, sb: usize) -> f64 {
        let (a, b) = (sa as f64, sb as f64);
        -(xlogx(a + b) - xlogx(a) - xlogx(b)) / self.pixel_count
    }
}

/// Greedy entropy-rate over-segmentation into exactly `n` superpixels.
pub fn oversegment(
    img: &GrayImage,
    n: usize,
    balance: f64,
    bandwidth: f64,
) -> Result<SuperpixelMap> {
    oversegment_with_gains(img, n, balance, bandwidth).map(|(map, _)| map)
}

/// Same as [`oversegment`], also returning the objective gain of every
/// accepted merge in the order the merges were made.
pub fn oversegment_with_gains(
    img: &GrayImage,
    n: usize,
    balance: f64,
    bandwidth: f64,
) -> Result<(SuperpixelMap, Vec<f64>)> {
    let pixels = img.len();
    if n == 0 || n > pixels {
        return Err(Error::Parameter(format!(
            "superpixel count must be in 1..={pixels}, got {n}"
        )));
    }
    if !(balance >= 0.0) || !balance.is_finite() {
        return Err(Error::Parameter(format!(
            "balance must be a nonnegative finite number, got {balance}"
        )));
    }
    let graph = build_pixel_graph(img, bandwidth)?;
    let node_weight = graph.node_weights();
    let total_weight: f64 = node_weight.iter().sum();

    let mut objective = Objective {
        node_weight,
        total_weight,
        selected: vec![0.0; pixels],
        pixel_count: pixels as f64,
        balance: 0.0,
    };

    // Balancing weight: `balance * beta * n`, where beta is the ratio of the
    // largest initial entropy-rate gain to the initial balancing gain (which
    // includes the +1 from the component count).
    let max_er = graph
        .edges
        .iter()
        .map(|e| objective.entropy_rate_gain(e))
        .fold(0.0, f64::max);
    let first_b = 1.0 + objective.balancing_gain(1, 1);
    let beta = if first_b > 0.0 { max_er / first_b } else { 0.0 };
    objective.balance = balance * beta * n as f64;
    let gain_of = |obj: &Objective, e: &Edge, sa: usize, sb: usize| {
        obj.entropy_rate_gain(e) + obj.balance * obj.balancing_gain(sa, sb)
    };

    let mut heap: BinaryHeap<Candidate> = graph
        .edges
        .iter()
        .enumerate()
        .map(|(edge, e)| Candidate {
            gain: gain_of(&objective, e, 1, 1),
            edge,
        })
        .collect();

    let mut sets = DisjointSets::new(pixels);
    let mut components = pixels;
    let mut gains = Vec::with_capacity(pixels - n);

    while components > n {
        let Some(top) = heap.pop() else { break };
        let e = graph.edges[top.edge];
        let (ra, rb) = (sets.find(e.a), sets.find(e.b));
        if ra == rb {
            continue;
        }
        let fresh = Candidate {
            gain: gain_of(&objective, &e, sets.size[ra], sets.size[rb]),
            edge: top.edge,
        };
        match heap.peek() {
            Some(next) if *next > fresh => heap.push(fresh),
            _ => {
                sets.union(ra, rb);
                objective.selected[e.a] += e.weight;
                objective.selected[e.b] += e.weight;
                components -= 1;
                gains.push(fresh.gain);
            }
        }
    }

    let raw: Vec<usize> = (0..pixels).map(|p| sets.find(p)).collect();
    let map = SuperpixelMap::from_assignment(img, &raw)?;
    Ok((map, gains))
}
