//! Stratified paired-patch libraries.
//!
//! A library stores `(HR patch, registered upsampled-LR patch)` pairs grouped
//! into `k` categories. Categories come from k-means on the HR patches; each
//! category contributes at most `L / k` randomly chosen members, so texture
//! classes that are rare in the source images are not swamped by background.
//! Query routing compares against per-category means of the LR-side patches,
//! since queries are upsampled-LR patches.

mod format;
pub mod kmeans;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{check_side, Patch};
use crate::registration::{materialize_pair, PatchMatch, PatchPair};
use crate::GrayImage;

pub use kmeans::{kmeans, KMeansConfig, KMeansResult};

/// Anything that can hand out patch pairs by index.
pub trait PairSource {
    fn side(&self) -> usize;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// Returns `(hr, lr_up)` patch intensities for pair `idx`.
    fn pair(&self, idx: usize) -> Result<(Vec<f64>, Vec<f64>)>;
}

impl PairSource for [PatchPair] {
    fn side(&self) -> usize {
        self.first().map_or(0, |p| p.hr.side())
    }

    fn len(&self) -> usize {
        <[PatchPair]>::len(self)
    }

    fn pair(&self, idx: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let p = &self[idx];
        if p.hr.side() != self.side() || p.lr_up.side() != self.side() {
            return Err(Error::DimensionMismatch("patch pairs with mixed sides".into()));
        }
        Ok((p.hr.data().to_vec(), p.lr_up.data().to_vec()))
    }
}

/// Matched locations over one or more registered image regions; patches are
/// only extracted when a pair is requested.
#[derive(Debug, Clone)]
pub struct PairPool {
    n: usize,
    regions: Vec<(GrayImage, GrayImage, Vec<PatchMatch>)>,
    starts: Vec<usize>,
}

impl PairPool {
    pub fn new(n: usize) -> Result<Self> {
        check_side(n)?;
        Ok(Self {
            n,
            regions: Vec::new(),
            starts: vec![0],
        })
    }

    pub fn add_region(&mut self, hr: GrayImage, reg: GrayImage, matches: Vec<PatchMatch>) {
        let end = self.starts.last().copied().unwrap_or(0) + matches.len();
        self.regions.push((hr, reg, matches));
        self.starts.push(end);
    }

    pub fn matches(&self) -> impl Iterator<Item = &PatchMatch> {
        self.regions.iter().flat_map(|r| r.2.iter())
    }
}

impl PairSource for PairPool {
    fn side(&self) -> usize {
        self.n
    }

    fn len(&self) -> usize {
        *self.starts.last().unwrap_or(&0)
    }

    fn pair(&self, idx: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let region = self.starts.partition_point(|&s| s <= idx) - 1;
        let (hr, reg, matches) = &self.regions[region];
        let m = &matches[idx - self.starts[region]];
        let p = materialize_pair(hr, reg, m, self.n)?;
        Ok((p.hr.into_data(), p.lr_up.into_data()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LibraryConfig {
    /// Target library size `L`.
    pub size: usize,
    /// Category count `k`.
    pub categories: usize,
    /// Oversampling factor `K`: `K * L` pairs are clustered.
    pub oversample: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for LibraryConfig {
    fn default() -> Self {
        Self {
            size: 4000,
            categories: 50,
            oversample: 10,
            seed: 0,
            max_iter: 100,
            tol: 1e-4,
        }
    }
}

impl LibraryConfig {
    fn kmeans(&self, k: usize) -> KMeansConfig {
        KMeansConfig {
            k,
            // Decorrelate from the sampling stream.
            seed: self.seed ^ 0x9e37_79b9_7f4a_7c15,
            max_iter: self.max_iter,
            tol: self.tol,
        }
    }
}

/// Paired HR / upsampled-LR patches grouped into categories.
///
/// Entries are stored category by category; patch intensities are held at
/// `f32` precision, which is also the on-disk precision.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedLibrary {
    n: usize,
    k: usize,
    seed: u64,
    hr: Vec<f32>,
    lr: Vec<f32>,
    categories: Vec<u32>,
    /// `offsets[c]..offsets[c + 1]` indexes the entries of category `c`.
    offsets: Vec<usize>,
    means: Vec<f64>,
}

impl PairedLibrary {
    /// Builds from entries already grouped by ascending category.
    fn from_grouped(
        n: usize,
        k: usize,
        seed: u64,
        hr: Vec<f32>,
        lr: Vec<f32>,
        categories: Vec<u32>,
    ) -> Result<Self> {
        let d = n * n;
        let len = categories.len();
        if hr.len() != len * d || lr.len() != len * d {
            return Err(Error::DimensionMismatch("library entry data length".into()));
        }
        if categories.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::LibraryFormat("entries are not grouped by category".into()));
        }
        let mut offsets = vec![0usize; k + 1];
        for &c in &categories {
            if c as usize >= k {
                return Err(Error::LibraryFormat(format!("category {c} out of range for k = {k}")));
            }
            offsets[c as usize + 1] += 1;
        }
        if offsets[1..].iter().any(|&count| count == 0) {
            return Err(Error::LibraryFormat("every category needs at least one entry".into()));
        }
        for c in 0..k {
            offsets[c + 1] += offsets[c];
        }
        let mut means = vec![0.0; k * d];
        for c in 0..k {
            let mean = &mut means[c * d..(c + 1) * d];
            for l in offsets[c]..offsets[c + 1] {
                for (m, &v) in mean.iter_mut().zip(&lr[l * d..(l + 1) * d]) {
                    *m += f64::from(v);
                }
            }
            let inv = 1.0 / (offsets[c + 1] - offsets[c]) as f64;
            mean.iter_mut().for_each(|m| *m *= inv);
        }
        Ok(Self {
            n,
            k,
            seed,
            hr,
            lr,
            categories,
            offsets,
            means,
        })
    }

    /// Assembles a library from explicit `(hr, lr_up, category)` entries.
    /// Intensities are rounded to `f32`; entries are regrouped by category
    /// (stable within a category) and every category must be non-empty.
    pub fn from_entries(
        n: usize,
        k: usize,
        seed: u64,
        entries: &[(Vec<f64>, Vec<f64>, usize)],
    ) -> Result<Self> {
        check_side(n)?;
        if k == 0 {
            return Err(Error::param("k must be positive"));
        }
        let d = n * n;
        let mut order: Vec<usize> = (0..entries.len()).collect();
        order.sort_by_key(|&i| entries[i].2);
        let mut hr = Vec::with_capacity(entries.len() * d);
        let mut lr = Vec::with_capacity(entries.len() * d);
        let mut cats = Vec::with_capacity(entries.len());
        for i in order {
            let (h, l, c) = &entries[i];
            if h.len() != d || l.len() != d {
                return Err(Error::DimensionMismatch(format!("library entry {i} is not {n}x{n}")));
            }
            hr.extend(to_f32(h));
            lr.extend(to_f32(l));
            cats.push(u32::try_from(*c).map_err(|_| Error::param("category id too large"))?);
        }
        Self::from_grouped(n, k, seed, hr, lr, cats)
    }

    #[inline]
    pub fn side(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn categories(&self) -> usize {
        self.k
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    #[inline]
    pub fn hr_patch(&self, l: usize) -> &[f32] {
        let d = self.n * self.n;
        &self.hr[l * d..(l + 1) * d]
    }

    #[inline]
    pub fn lr_patch(&self, l: usize) -> &[f32] {
        let d = self.n * self.n;
        &self.lr[l * d..(l + 1) * d]
    }

    pub fn category_of(&self, l: usize) -> usize {
        self.categories[l] as usize
    }

    /// Entry index range of category `c`.
    pub fn members(&self, c: usize) -> std::ops::Range<usize> {
        self.offsets[c]..self.offsets[c + 1]
    }

    pub fn category_counts(&self) -> Vec<usize> {
        self.offsets.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Mean of the LR-side patches of category `c`.
    pub fn category_mean(&self, c: usize) -> &[f64] {
        let d = self.n * self.n;
        &self.means[c * d..(c + 1) * d]
    }

    /// `(hr, lr_up, category)` triples in storage order.
    pub fn entries(&self) -> impl Iterator<Item = (&[f32], &[f32], usize)> + '_ {
        (0..self.len()).map(|l| (self.hr_patch(l), self.lr_patch(l), self.category_of(l)))
    }

    /// Smallest and largest HR intensity over all entries.
    pub fn hr_range(&self) -> (f64, f64) {
        self.hr.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(f64::from(v)), hi.max(f64::from(v)))
        })
    }
}

fn to_f32(values: &[f64]) -> impl Iterator<Item = f32> + '_ {
    values.iter().map(|&v| v as f32)
}

/// Samples `K * L` pairs, clusters their HR patches into `k` categories and
/// keeps up to `L / k` random members per category.
pub fn build_library<S: PairSource + ?Sized>(pairs: &S, cfg: &LibraryConfig) -> Result<PairedLibrary> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("no patch pairs to build a library from".into()));
    }
    let n = pairs.side();
    check_side(n)?;
    let (size, k) = (cfg.size, cfg.categories);
    if k == 0 || size == 0 {
        return Err(Error::param("library size and category count must be positive"));
    }
    if k > size {
        return Err(Error::param(format!("k = {k} exceeds the library size L = {size}")));
    }
    let d = n * n;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let draw = size.saturating_mul(cfg.oversample.max(1)).min(pairs.len());
    let mut picked = sample(&mut rng, pairs.len(), draw).into_vec();
    picked.sort_unstable();

    // Quantize to storage precision before clustering so the stored entries
    // are exactly the clustered vectors.
    let mut hr = Vec::with_capacity(draw * d);
    let mut lr = Vec::with_capacity(draw * d);
    for &idx in &picked {
        let (h, l) = pairs.pair(idx)?;
        if h.len() != d || l.len() != d {
            return Err(Error::DimensionMismatch("pair source returned a wrong-sized patch".into()));
        }
        hr.extend(to_f32(&h));
        lr.extend(to_f32(&l));
    }
    let hr_f64: Vec<f64> = hr.iter().map(|&v| f64::from(v)).collect();
    let clusters = kmeans(&hr_f64, d, &cfg.kmeans(k))?;

    let per_category = size / k;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &c) in clusters.assignments.iter().enumerate() {
        members[c].push(i);
    }
    let mut out_hr = Vec::new();
    let mut out_lr = Vec::new();
    let mut out_cat = Vec::new();
    for (c, group) in members.iter().enumerate() {
        let chosen: Vec<usize> = if group.len() <= per_category {
            group.clone()
        } else {
            let mut idx = sample(&mut rng, group.len(), per_category).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| group[i]).collect()
        };
        for i in chosen {
            out_hr.extend_from_slice(&hr[i * d..(i + 1) * d]);
            out_lr.extend_from_slice(&lr[i * d..(i + 1) * d]);
            out_cat.push(c as u32);
        }
    }
    PairedLibrary::from_grouped(n, k, cfg.seed, out_hr, out_lr, out_cat)
}

/// Index of the category whose LR-side mean is closest to `query`; lowest id on ties.
pub fn nearest_category(lib: &PairedLibrary, query: &Patch) -> Result<usize> {
    if query.side() != lib.n {
        return Err(Error::DimensionMismatch(format!(
            "query side {} vs library side {}",
            query.side(),
            lib.n
        )));
    }
    Ok(nearest_category_raw(lib, query.data()))
}

pub(crate) fn nearest_category_raw(lib: &PairedLibrary, query: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for c in 0..lib.k {
        let d = kmeans::sq_dist(query, lib.category_mean(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergeConfig {
    pub categories: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
}

impl From<&LibraryConfig> for MergeConfig {
    fn from(cfg: &LibraryConfig) -> Self {
        Self {
            categories: cfg.categories,
            seed: cfg.seed,
            max_iter: cfg.max_iter,
            tol: cfg.tol,
        }
    }
}

/// Pools the entries of several libraries and re-clusters them into
/// `cfg.categories` categories. No entries are dropped.
pub fn merge_libraries(libs: &[PairedLibrary], cfg: &MergeConfig) -> Result<PairedLibrary> {
    let first = libs
        .first()
        .ok_or_else(|| Error::EmptyInput("no libraries to merge".into()))?;
    let n = first.n;
    if let Some(bad) = libs.iter().find(|l| l.n != n) {
        return Err(Error::DimensionMismatch(format!(
            "cannot merge libraries with patch sides {n} and {}",
            bad.n
        )));
    }
    let d = n * n;
    let hr: Vec<f32> = libs.iter().flat_map(|l| l.hr.iter().copied()).collect();
    let lr: Vec<f32> = libs.iter().flat_map(|l| l.lr.iter().copied()).collect();
    let total = hr.len() / d;
    let k = cfg.categories;
    if k == 0 || k > total {
        return Err(Error::param(format!(
            "cannot cluster {total} merged entries into {k} categories"
        )));
    }
    let lib_cfg = LibraryConfig {
        size: total,
        categories: k,
        oversample: 1,
        seed: cfg.seed,
        max_iter: cfg.max_iter,
        tol: cfg.tol,
    };
    let hr_f64: Vec<f64> = hr.iter().map(|&v| f64::from(v)).collect();
    let clusters = kmeans(&hr_f64, d, &lib_cfg.kmeans(k))?;

    let mut order: Vec<usize> = (0..total).collect();
    order.sort_by_key(|&i| clusters.assignments[i]);
    let mut out_hr = Vec::with_capacity(hr.len());
    let mut out_lr = Vec::with_capacity(lr.len());
    let mut out_cat = Vec::with_capacity(total);
    for i in order {
        out_hr.extend_from_slice(&hr[i * d..(i + 1) * d]);
        out_lr.extend_from_slice(&lr[i * d..(i + 1) * d]);
        out_cat.push(clusters.assignments[i] as u32);
    }
    PairedLibrary::from_grouped(n, k, cfg.seed, out_hr, out_lr, out_cat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Patch;
    use rand::Rng;

    /// Pairs whose HR and LR patches are constant at `level + small noise`.
    pub(crate) fn grouped_pairs(levels: &[(f64, usize)], n: usize, seed: u64) -> Vec<PatchPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for &(level, count) in levels {
            for _ in 0..count {
                let hr: Vec<f64> = (0..n * n).map(|_| level + rng.random_range(-1.0..1.0)).collect();
                let lr: Vec<f64> = hr.iter().map(|v| v * 0.9 + 3.0).collect();
                out.push(PatchPair {
                    hr: Patch::new(n, (0, 0), hr).unwrap(),
                    lr_up: Patch::new(n, (0, 0), lr).unwrap(),
                    displacement: (0, 0),
                });
            }
        }
        out
    }

    fn ten_levels(counts: [usize; 10]) -> Vec<(f64, usize)> {
        counts
            .iter()
            .enumerate()
            .map(|(i, &c)| (10.0 + 25.0 * i as f64, c))
            .collect()
    }

    fn cfg(size: usize, k: usize) -> LibraryConfig {
        LibraryConfig {
            size,
            categories: k,
            oversample: 10,
            seed: 7,
            ..LibraryConfig::default()
        }
    }

    #[test]
    fn stratified_counts() {
        let pairs = grouped_pairs(&ten_levels([200; 10]), 3, 1);
        let lib = build_library(pairs.as_slice(), &cfg(800, 10)).unwrap();
        assert_eq!(lib.category_counts(), vec![80; 10]);
        assert_eq!(lib.len(), 800);
    }

    #[test]
    fn starved_category_keeps_all_members() {
        let mut counts = [200; 10];
        counts[3] = 30;
        let pairs = grouped_pairs(&ten_levels(counts), 3, 2);
        let lib = build_library(pairs.as_slice(), &cfg(800, 10)).unwrap();
        let mut got = lib.category_counts();
        got.sort();
        assert_eq!(got[0], 30);
        assert!(got[1..].iter().all(|&c| c == 80));
        assert_eq!(lib.len(), 750);
    }

    #[test]
    fn means_are_member_averages() {
        let pairs = grouped_pairs(&ten_levels([50; 10]), 3, 3);
        let lib = build_library(pairs.as_slice(), &cfg(200, 10)).unwrap();
        for c in 0..lib.categories() {
            let members = lib.members(c);
            let count = members.len() as f64;
            for p in 0..9 {
                let avg: f64 = members.clone().map(|l| f64::from(lib.lr_patch(l)[p])).sum::<f64>() / count;
                assert!((avg - lib.category_mean(c)[p]).abs() < 1e-9);
            }
            assert!(members.clone().all(|l| lib.category_of(l) == c));
        }
    }

    #[test]
    fn build_errors() {
        let empty: Vec<PatchPair> = Vec::new();
        assert!(build_library(empty.as_slice(), &cfg(10, 2)).is_err());
        let pairs = grouped_pairs(&[(10.0, 20)], 3, 4);
        assert!(build_library(pairs.as_slice(), &cfg(5, 6)).is_err());
    }

    #[test]
    fn nearest_category_rules() {
        let pairs = grouped_pairs(&ten_levels([40; 10]), 3, 5);
        let lib = build_library(pairs.as_slice(), &cfg(100, 10)).unwrap();
        for c in 0..10 {
            let q = Patch::new(3, (1, 1), lib.category_mean(c).to_vec()).unwrap();
            assert_eq!(nearest_category(&lib, &q).unwrap(), c);
        }
        let bad = Patch::new(5, (2, 2), vec![0.0; 25]).unwrap();
        assert!(nearest_category(&lib, &bad).is_err());

        // Equidistant query between two constant-mean categories goes to the lower id.
        let make = |hr: Vec<f32>, cats: Vec<u32>| {
            PairedLibrary::from_grouped(3, 2, 0, hr.clone(), hr, cats).unwrap()
        };
        let lib = make(
            [vec![0.0f32; 9], vec![100.0f32; 9]].concat(),
            vec![0, 1],
        );
        let mid = Patch::new(3, (1, 1), vec![50.0; 9]).unwrap();
        assert_eq!(nearest_category(&lib, &mid).unwrap(), 0);
    }

    #[test]
    fn merge_preserves_entries() {
        let one = build_library(grouped_pairs(&[(20.0, 30)], 3, 6).as_slice(), &cfg(30, 1)).unwrap();
        let two = build_library(grouped_pairs(&[(200.0, 25)], 3, 7).as_slice(), &cfg(30, 1)).unwrap();
        let merged = merge_libraries(
            &[one.clone(), two.clone()],
            &MergeConfig {
                categories: 2,
                seed: 1,
                max_iter: 100,
                tol: 1e-4,
            },
        )
        .unwrap();
        assert_eq!(merged.len(), one.len() + two.len());
        let mut counts = merged.category_counts();
        counts.sort();
        assert_eq!(counts, vec![25, 30]);
        assert_eq!(sorted_entries(&merged), {
            let mut all = sorted_entries(&one);
            all.extend(sorted_entries(&two));
            all.sort();
            all
        });

        let bad = build_library(
            grouped_pairs(&[(1.0, 10)], 5, 8).as_slice(),
            &cfg(10, 1),
        )
        .unwrap();
        assert!(merge_libraries(&[one, bad], &MergeConfig::from(&cfg(10, 1))).is_err());
        assert!(merge_libraries(&[], &MergeConfig::from(&cfg(10, 1))).is_err());
    }

    pub(crate) fn sorted_entries(lib: &PairedLibrary) -> Vec<Vec<u32>> {
        let mut v: Vec<Vec<u32>> = lib
            .entries()
            .map(|(h, l, _)| h.iter().chain(l).map(|x| x.to_bits()).collect())
            .collect();
        v.sort();
        v
    }

    #[test]
    fn pool_matches_materialized_pairs() {
        let img = GrayImage::from_fn(24, 24, |r, c| ((r * 7 + c * 3) % 17) as f64 * 10.0);
        let cfg_m = crate::registration::MatchConfig {
            n: 5,
            radius: 1,
            stride: 3,
            ..Default::default()
        };
        let matches = crate::registration::match_locations(&img, &img, &cfg_m).unwrap();
        let pairs = crate::registration::match_patches(&img, &img, &cfg_m).unwrap();
        let mut pool = PairPool::new(5).unwrap();
        pool.add_region(img.clone(), img.clone(), matches.clone());
        pool.add_region(img.clone(), img, matches);
        assert_eq!(pool.len(), 2 * pairs.len());
        for (i, p) in pairs.iter().enumerate() {
            let (h, l) = pool.pair(i + pairs.len()).unwrap();
            assert_eq!(h, p.hr.data());
            assert_eq!(l, p.lr_up.data());
        }
        let lib_cfg = cfg(20, 2);
        let from_pool = build_library(&pool, &lib_cfg).unwrap();
        let doubled: Vec<PatchPair> = pairs.iter().chain(&pairs).cloned().collect();
        let from_pairs = build_library(doubled.as_slice(), &lib_cfg).unwrap();
        assert_eq!(from_pool, from_pairs);
    }
}
