//! Per-component velocity codebooks.
//!
//! Each of the four velocity components gets its own sorted list of `K`
//! centroids obtained by one-dimensional k-means. A velocity is tokenized by
//! snapping every component to its nearest centroid.
//!
//! File format (UTF-8 text, one record per line):
//!
//! ```text
//! TFCB 1
//! k <K>
//! x <c_0> <c_1> ... <c_{K-1}>
//! y ...
//! w ...
//! h ...
//! ```
//!
//! Centroids are written with Rust's shortest round-trip float formatting, so
//! a save/load cycle is lossless.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Axis, VelocityDelta};

const MAGIC: &str = "TFCB";
const VERSION: u32 = 1;
const DUPLICATE_EPS: f64 = 1e-12;
const LLOYD_TOL: f64 = 1e-9;

/// Above this many distinct values per component, fitting falls back from the
/// exact dynamic program to seeded Lloyd iterations.
pub const EXACT_FIT_LIMIT: usize = 4096;

/// Cluster index of each velocity component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct ClusterIndexQuad {
    pub ix: usize,
    pub iy: usize,
    pub iw: usize,
    pub ih: usize,
}

impl ClusterIndexQuad {
    pub fn new(ix: usize, iy: usize, iw: usize, ih: usize) -> Self {
        ClusterIndexQuad { ix, iy, iw, ih }
    }

    pub fn to_array(self) -> [usize; 4] {
        [self.ix, self.iy, self.iw, self.ih]
    }

    pub fn from_array(a: [usize; 4]) -> Self {
        ClusterIndexQuad::new(a[0], a[1], a[2], a[3])
    }

    pub fn component(&self, axis: Axis) -> usize {
        self.to_array()[axis.index()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    components: [Vec<f64>; 4],
}

impl Codebook {
    /// Builds a codebook from explicit centroid lists (x, y, w, h order).
    pub fn from_centroids(components: [Vec<f64>; 4]) -> Result<Self> {
        let k = components[0].len();
        if k == 0 {
            return Err(Error::EmptyInput("codebook centroids"));
        }
        for (axis, c) in Axis::ALL.iter().zip(components.iter()) {
            if c.len() != k {
                return Err(Error::Shape(format!(
                    "component {axis:?} has {} centroids, expected {k}",
                    c.len()
                )));
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::Input(format!("non-finite centroid on {axis:?}")));
            }
            if c.windows(2).any(|p| p[1] - p[0] <= DUPLICATE_EPS) {
                return Err(Error::Input(format!(
                    "centroids on {axis:?} must be strictly ascending"
                )));
            }
        }
        Ok(Codebook { components })
    }

    /// Fits four independent 1-D codebooks with at most `k` centroids each.
    ///
    /// When some component has fewer than `k` distinct values, every
    /// component is fitted with that smaller count so all four share one `K`.
    pub fn fit(samples: &[VelocityDelta], k: usize, seed: u64, max_iters: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyInput("codebook samples"));
        }
        if k == 0 || max_iters == 0 {
            return Err(Error::Config(
                "codebook k and max_iters must be positive".into(),
            ));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Input("non-finite velocity sample".into()));
        }
        let weighted: Vec<WeightedPoints> = Axis::ALL
            .iter()
            .map(|&a| WeightedPoints::from_values(samples.iter().map(|s| s.component(a))))
            .collect();
        let k = weighted.iter().map(|w| w.len()).min().unwrap_or(1).min(k);
        let mut components: [Vec<f64>; 4] = Default::default();
        for (i, points) in weighted.iter().enumerate() {
            let component_seed = seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(i as u64 + 1));
            components[i] = points.fit(k, component_seed, max_iters);
        }
        Codebook::from_centroids(components)
    }

    pub fn k(&self) -> usize {
        self.components[0].len()
    }

    pub fn centroids(&self, axis: Axis) -> &[f64] {
        &self.components[axis.index()]
    }

    pub fn centroid_value(&self, axis: Axis, index: usize) -> Result<f64> {
        self.components[axis.index()]
            .get(index)
            .copied()
            .ok_or(Error::IndexOutOfRange {
                index,
                len: self.k(),
            })
    }

    /// Nearest centroid per component; exact ties go to the lower index.
    pub fn quantize(&self, delta: &VelocityDelta) -> ClusterIndexQuad {
        let v = delta.to_array();
        let mut out = [0usize; 4];
        for (i, c) in self.components.iter().enumerate() {
            out[i] = nearest(c, v[i]);
        }
        ClusterIndexQuad::from_array(out)
    }

    /// Centroid velocity of a token.
    pub fn decode(&self, q: &ClusterIndexQuad) -> Result<VelocityDelta> {
        let idx = q.to_array();
        let mut out = [0.0; 4];
        for (i, &axis) in Axis::ALL.iter().enumerate() {
            out[i] = self.centroid_value(axis, idx[i])?;
        }
        Ok(VelocityDelta::from_array(out))
    }

    /// FNV-1a over `K` and the centroid bit patterns.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        eat(&(self.k() as u64).to_le_bytes());
        for c in &self.components {
            for v in c {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{MAGIC} {VERSION}\nk {}\n", self.k());
        for (name, c) in ["x", "y", "w", "h"].iter().zip(self.components.iter()) {
            s.push_str(name);
            for v in c {
                let _ = write!(s, " {v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or(Error::Format("empty codebook file".into()))?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(MAGIC) {
            return Err(Error::Format("missing codebook magic".into()));
        }
        match parts.next().and_then(|v| v.parse::<u32>().ok()) {
            Some(VERSION) => {}
            other => {
                return Err(Error::Format(format!(
                    "unsupported codebook version {other:?}"
                )))
            }
        }
        let k_line = lines.next().ok_or(Error::Format("missing k line".into()))?;
        let k = k_line
            .strip_prefix("k ")
            .and_then(|v| v.trim().parse::<usize>().ok())
            .ok_or_else(|| Error::Format(format!("bad k line {k_line:?}")))?;
        let mut components: [Vec<f64>; 4] = Default::default();
        for (i, name) in ["x", "y", "w", "h"].iter().enumerate() {
            let line = lines
                .next()
                .ok_or_else(|| Error::Format(format!("missing {name} centroids")))?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some(name) {
                return Err(Error::Format(format!("expected {name} centroid line")));
            }
            components[i] = parts
                .map(|p| {
                    p.parse::<f64>()
                        .map_err(|e| Error::Format(format!("bad centroid {p:?}: {e}")))
                })
                .collect::<Result<_>>()?;
            if components[i].len() != k {
                return Err(Error::Format(format!(
                    "{name} has {} centroids, header says {k}",
                    components[i].len()
                )));
            }
        }
        Codebook::from_centroids(components)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::mot_io::write_text(path, self.to_text())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Codebook::from_text(&text)
    }
}

fn nearest(sorted: &[f64], v: f64) -> usize {
    let pos = sorted.partition_point(|&c| c < v);
    if pos == 0 {
        return 0;
    }
    if pos == sorted.len() {
        return sorted.len() - 1;
    }
    if v - sorted[pos - 1] <= sorted[pos] - v {
        pos - 1
    } else {
        pos
    }
}

/// Sorted distinct values with multiplicities.
#[derive(Debug, Clone)]
struct WeightedPoints {
    values: Vec<f64>,
    weights: Vec<f64>,
}

impl WeightedPoints {
    fn from_values(it: impl Iterator<Item = f64>) -> Self {
        let mut all: Vec<f64> = it.collect();
        all.sort_by(f64::total_cmp);
        let mut values = Vec::new();
        let mut weights: Vec<f64> = Vec::new();
        for v in all {
            match values.last() {
                Some(&last) if last == v => *weights.last_mut().unwrap() += 1.0,
                _ => {
                    values.push(v);
                    weights.push(1.0);
                }
            }
        }
        WeightedPoints { values, weights }
    }

    fn len(&self) -> usize {
        self.values.len()
    }

    fn fit(&self, k: usize, seed: u64, max_iters: usize) -> Vec<f64> {
        if k >= self.len() {
            return self.values.clone();
        }
        if self.len() <= EXACT_FIT_LIMIT {
            optimal_partition(&self.values, &self.weights, k)
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let init = kmeans_pp(&self.values, &self.weights, k, &mut rng);
            lloyd(&self.values, &self.weights, init, max_iters)
        }
    }
}

/// Prefix sums for O(1) weighted within-segment SSE.
struct Prefix {
    w: Vec<f64>,
    s1: Vec<f64>,
    s2: Vec<f64>,
}

impl Prefix {
    fn new(values: &[f64], weights: &[f64]) -> Self {
        // centring keeps the s2 - s1^2/w subtraction well conditioned
        let total_w: f64 = weights.iter().sum();
        let mean = values.iter().zip(weights).map(|(v, w)| v * w).sum::<f64>() / total_w;
        let n = values.len();
        let (mut w, mut s1, mut s2) = (vec![0.0; n + 1], vec![0.0; n + 1], vec![0.0; n + 1]);
        for i in 0..n {
            let c = values[i] - mean;
            w[i + 1] = w[i] + weights[i];
            s1[i + 1] = s1[i] + weights[i] * c;
            s2[i + 1] = s2[i] + weights[i] * c * c;
        }
        Prefix { w, s1, s2 }
    }

    /// SSE of points `lo..hi` (half open) around their weighted mean.
    fn sse(&self, lo: usize, hi: usize) -> f64 {
        let w = self.w[hi] - self.w[lo];
        if w <= 0.0 {
            return 0.0;
        }
        let s1 = self.s1[hi] - self.s1[lo];
        let s2 = self.s2[hi] - self.s2[lo];
        (s2 - s1 * s1 / w).max(0.0)
    }
}

/// Globally optimal 1-D k-means over sorted weighted points.
///
/// Optimal clusters are contiguous runs of the sorted points; the dynamic
/// program over split positions uses divide-and-conquer on the monotone
/// optimal split, O(k n log n).
fn optimal_partition(values: &[f64], weights: &[f64], k: usize) -> Vec<f64> {
    let n = values.len();
    let prefix = Prefix::new(values, weights);
    // cost[j] = best SSE covering the first j points with the current cluster count
    let mut prev: Vec<f64> = (0..=n).map(|j| prefix.sse(0, j)).collect();
    let mut splits: Vec<Vec<u32>> = Vec::with_capacity(k);
    splits.push(vec![0; n + 1]);
    for m in 2..=k {
        let mut cur = vec![f64::INFINITY; n + 1];
        let mut arg = vec![0u32; n + 1];
        // with m clusters, j ranges over m..=n and the last cluster starts at i in (m-1)..j
        solve_layer(&prefix, &prev, &mut cur, &mut arg, m, n, m - 1, n - 1);
        prev = cur;
        splits.push(arg);
    }
    let mut bounds = Vec::with_capacity(k + 1);
    let mut j = n;
    for m in (1..=k).rev() {
        bounds.push(j);
        j = splits[m - 1][j] as usize;
    }
    bounds.push(0);
    bounds.reverse();
    bounds
        .windows(2)
        .map(|b| {
            let (lo, hi) = (b[0], b[1]);
            let w: f64 = weights[lo..hi].iter().sum();
            values[lo..hi]
                .iter()
                .zip(&weights[lo..hi])
                .map(|(v, wt)| v * wt)
                .sum::<f64>()
                / w
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn solve_layer(
    prefix: &Prefix,
    prev: &[f64],
    cur: &mut [f64],
    arg: &mut [u32],
    m: usize,
    n: usize,
    opt_lo: usize,
    opt_hi: usize,
) {
    // iterative divide and conquer over j in [m, n]
    let mut stack = vec![(m, n, opt_lo, opt_hi)];
    while let Some((jl, jr, ol, oh)) = stack.pop() {
        if jl > jr {
            continue;
        }
        let mid = (jl + jr) / 2;
        let mut best = f64::INFINITY;
        let mut best_i = ol;
        let hi = oh.min(mid - 1);
        for i in ol..=hi {
            let c = prev[i] + prefix.sse(i, mid);
            if c < best {
                best = c;
                best_i = i;
            }
        }
        cur[mid] = best;
        arg[mid] = best_i as u32;
        if mid > jl {
            stack.push((jl, mid - 1, ol, best_i));
        }
        stack.push((mid + 1, jr, best_i, oh));
    }
}

fn kmeans_pp(values: &[f64], weights: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let pick = |scores: &[f64], rng: &mut ChaCha8Rng| -> usize {
        let total: f64 = scores.iter().sum();
        if total <= 0.0 {
            return 0;
        }
        let mut r = rng.gen::<f64>() * total;
        for (i, s) in scores.iter().enumerate() {
            if r < *s {
                return i;
            }
            r -= s;
        }
        scores.len() - 1
    };
    let mut centers = vec![values[pick(weights, rng)]];
    let mut d2: Vec<f64> = values.iter().map(|v| (v - centers[0]).powi(2)).collect();
    while centers.len() < k {
        let scores: Vec<f64> = d2.iter().zip(weights).map(|(d, w)| d * w).collect();
        let c = values[pick(&scores, rng)];
        centers.push(c);
        for (d, v) in d2.iter_mut().zip(values) {
            *d = d.min((v - c).powi(2));
        }
    }
    centers.sort_by(f64::total_cmp);
    centers.dedup();
    centers
}

fn lloyd(values: &[f64], weights: &[f64], mut centers: Vec<f64>, max_iters: usize) -> Vec<f64> {
    let k = centers.len();
    let prefix_w: Vec<f64> = std::iter::once(0.0)
        .chain(weights.iter().scan(0.0, |s, w| {
            *s += w;
            Some(*s)
        }))
        .collect();
    let prefix_s: Vec<f64> = std::iter::once(0.0)
        .chain(values.iter().zip(weights).scan(0.0, |s, (v, w)| {
            *s += v * w;
            Some(*s)
        }))
        .collect();
    for _ in 0..max_iters {
        // contiguous segments split at centroid midpoints
        let mut bounds = Vec::with_capacity(k + 1);
        bounds.push(0);
        for c in centers.windows(2) {
            let mid = 0.5 * (c[0] + c[1]);
            bounds.push(values.partition_point(|&v| v <= mid));
        }
        bounds.push(values.len());
        let mut next = Vec::with_capacity(k);
        let mut empty = 0;
        for (i, b) in bounds.windows(2).enumerate() {
            let w = prefix_w[b[1]] - prefix_w[b[0]];
            if w > 0.0 {
                next.push((prefix_s[b[1]] - prefix_s[b[0]]) / w);
            } else {
                next.push(centers[i]);
                empty += 1;
            }
        }
        if empty > 0 {
            reseed_empty(values, weights, &mut next, empty);
        }
        next.sort_by(f64::total_cmp);
        let moved = next
            .iter()
            .zip(&centers)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        centers = next;
        if moved < LLOYD_TOL && empty == 0 {
            break;
        }
    }
    centers
}

/// Moves stale centroids onto the worst-fitted points.
fn reseed_empty(values: &[f64], weights: &[f64], centers: &mut Vec<f64>, count: usize) {
    centers.sort_by(f64::total_cmp);
    centers.dedup_by(|a, b| (*a - *b).abs() <= DUPLICATE_EPS);
    for _ in 0..count {
        let worst = values
            .iter()
            .zip(weights)
            .filter(|(v, _)| !centers.iter().any(|c| (*c - **v).abs() <= DUPLICATE_EPS))
            .map(|(v, w)| {
                let c = centers[nearest(centers, *v)];
                (*v, (v - c).powi(2) * w)
            })
            .max_by(|a, b| a.1.total_cmp(&b.1));
        match worst {
            Some((v, _)) => {
                centers.push(v);
                centers.sort_by(f64::total_cmp);
            }
            None => break,
        }
    }
}

/// Within-cluster sum of squared distances when every value is assigned to
/// its nearest centroid.
pub fn quantization_sse(values: &[f64], centroids: &[f64]) -> f64 {
    values
        .iter()
        .map(|v| (v - centroids[nearest(centroids, *v)]).powi(2))
        .sum()
}

/// Exposes the raw 1-D fitter for callers that cluster a single component.
pub fn fit_1d(values: &[f64], k: usize, seed: u64, max_iters: usize) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::EmptyInput("1-D k-means values"));
    }
    let points = WeightedPoints::from_values(values.iter().copied());
    Ok(points.fit(k.min(points.len()).max(1), seed, max_iters))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cb(c: &[f64]) -> Codebook {
        Codebook::from_centroids([c.to_vec(), c.to_vec(), c.to_vec(), c.to_vec()]).unwrap()
    }

    #[test]
    fn fit_two_point_masses() {
        let mut samples = vec![VelocityDelta::ZERO; 50];
        samples.extend(vec![VelocityDelta::new(0.1, 0.1, 0.1, 0.1); 50]);
        let book = Codebook::fit(&samples, 2, 7, 100).unwrap();
        assert_eq!(book.k(), 2);
        for a in Axis::ALL {
            assert_eq!(book.centroids(a), &[0.0, 0.1]);
        }
    }

    #[test]
    fn fit_degenerate_reduces_k() {
        let samples = vec![VelocityDelta::ZERO; 20];
        let book = Codebook::fit(&samples, 4, 1, 100).unwrap();
        assert_eq!(book.k(), 1);
        for a in Axis::ALL {
            assert_eq!(book.centroids(a), &[0.0]);
        }
    }

    #[test]
    fn fit_small_set_matches_brute_force() {
        let c = fit_1d(&[1.0, 2.0, 3.0, 10.0, 11.0, 12.0], 2, 3, 100).unwrap();
        assert_eq!(c, vec![2.0, 11.0]);
    }

    #[test]
    fn fit_empty_is_error() {
        assert!(matches!(
            Codebook::fit(&[], 4, 0, 10),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn lloyd_path_is_deterministic_and_sorted() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let samples: Vec<VelocityDelta> = (0..EXACT_FIT_LIMIT + 500)
            .map(|_| {
                VelocityDelta::new(
                    rng.gen_range(-0.01..0.01),
                    rng.gen_range(-0.02..0.02),
                    rng.gen_range(-0.001..0.001),
                    rng.gen::<f64>().powi(3) * 0.01,
                )
            })
            .collect();
        let a = Codebook::fit(&samples, 32, 5, 200).unwrap();
        let b = Codebook::fit(&samples, 32, 5, 200).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.k(), 32);
        for axis in Axis::ALL {
            assert!(a.centroids(axis).windows(2).all(|w| w[1] > w[0]));
        }
    }

    #[test]
    fn quantize_examples() {
        let book = cb(&[-0.1, 0.0, 0.1]);
        assert_eq!(
            book.quantize(&VelocityDelta::ZERO),
            ClusterIndexQuad::new(1, 1, 1, 1)
        );
        let book = cb(&[0.0, 0.1]);
        assert_eq!(book.quantize(&VelocityDelta::new(0.05, 0.0, 0.0, 0.0)).ix, 0);
        let book = cb(&[-0.3, 0.0, 0.3]);
        assert_eq!(
            book.quantize(&VelocityDelta::new(0.26, -0.26, 0.0, 0.0)),
            ClusterIndexQuad::new(2, 0, 1, 1)
        );
        // far outside the range snaps to the extremes
        assert_eq!(
            book.quantize(&VelocityDelta::new(9.0, -9.0, 0.0, 0.0)),
            ClusterIndexQuad::new(2, 0, 1, 1)
        );
    }

    #[test]
    fn centroid_lookup() {
        let book = cb(&[-0.1, 0.0, 0.1]);
        assert_eq!(book.centroid_value(Axis::X, 1).unwrap(), 0.0);
        let book = cb(&[-0.3, 0.0, 0.3]);
        assert_eq!(book.centroid_value(Axis::H, 0).unwrap(), -0.3);
        assert!(matches!(
            book.centroid_value(Axis::Y, 5),
            Err(Error::IndexOutOfRange { index: 5, len: 3 })
        ));
    }

    #[test]
    fn quantize_is_fixed_point_on_centroids() {
        let book = Codebook::from_centroids([
            vec![-0.2, -0.05, 0.0, 0.3],
            vec![-1.0, 0.0, 1.0, 2.0],
            vec![0.0, 1e-6, 2e-6, 1.0],
            vec![-3.0, -2.0, -1.0, 0.0],
        ])
        .unwrap();
        for axis in Axis::ALL {
            for i in 0..book.k() {
                let mut d = [0.0; 4];
                d[axis.index()] = book.centroid_value(axis, i).unwrap();
                let q = book.quantize(&VelocityDelta::from_array(d));
                assert_eq!(q.component(axis), i);
            }
        }
    }

    #[test]
    fn text_round_trip_and_checksum() {
        let book = Codebook::from_centroids([
            vec![-0.123456789012345, 0.1],
            vec![1e-9, 2e-9],
            vec![-1.0, 1.0 / 3.0],
            vec![0.0, 0.7],
        ])
        .unwrap();
        let back = Codebook::from_text(&book.to_text()).unwrap();
        assert_eq!(book, back);
        assert_eq!(book.checksum(), back.checksum());
        assert_ne!(book.checksum(), cb(&[0.0, 0.1]).checksum());
    }

    #[test]
    fn rejects_bad_files() {
        assert!(Codebook::from_text("").is_err());
        assert!(Codebook::from_text("XXXX 1\nk 1\nx 0\ny 0\nw 0\nh 0\n").is_err());
        assert!(Codebook::from_text("TFCB 2\nk 1\nx 0\ny 0\nw 0\nh 0\n").is_err());
        assert!(Codebook::from_text("TFCB 1\nk 2\nx 0\ny 0\nw 0\nh 0\n").is_err());
        assert!(Codebook::from_text("TFCB 1\nk 2\nx 1 0\ny 0 1\nw 0 1\nh 0 1\n").is_err());
    }
}
