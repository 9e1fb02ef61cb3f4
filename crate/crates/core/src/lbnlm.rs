//! Library-based non-local means reconstruction.
//!
//! Every pixel of the upsampled LR image contributes one query patch. Its
//! reconstruction is a convex combination of library HR patches, weighted by
//! `exp(-|q - P_r|² / (2 n² sigma_n²))` against the paired LR-side patches and
//! normalized to sum to one. Overlapping patch estimates are averaged
//! uniformly per pixel.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{bicubic_upsample, check_side, fill_patch_clamped, GrayImage, Patch};
use crate::library::{nearest_category_raw, PairedLibrary};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NlmConfig {
    /// Weight scale, in intensity units.
    pub sigma_n: f64,
    /// Restrict candidates to the query's nearest category.
    pub accelerate: bool,
    /// Patch side; must match the library.
    pub n: usize,
}

impl Default for NlmConfig {
    fn default() -> Self {
        Self {
            sigma_n: 1.0,
            accelerate: true,
            n: 9,
        }
    }
}

impl NlmConfig {
    pub fn validate(&self) -> Result<()> {
        check_side(self.n)?;
        if !(self.sigma_n.is_finite() && self.sigma_n > 0.0) {
            return Err(Error::param(format!("sigma_n must be positive, got {}", self.sigma_n)));
        }
        Ok(())
    }

    fn check_library(&self, lib: &PairedLibrary) -> Result<()> {
        self.validate()?;
        if lib.is_empty() {
            return Err(Error::EmptyInput("library has no entries".into()));
        }
        if lib.side() != self.n {
            return Err(Error::DimensionMismatch(format!(
                "config patch side {} vs library side {}",
                self.n,
                lib.side()
            )));
        }
        Ok(())
    }
}

/// Unnormalized weights `exp(-d / (2 n² sigma²))` with no rescaling.
pub fn raw_weights(q: &Patch, candidates: &[Patch], sigma_n: f64) -> Result<Vec<f64>> {
    let denom = weight_denominator(q.side(), sigma_n)?;
    candidates
        .iter()
        .map(|c| {
            same_side(q, c)?;
            Ok((-sq_dist(q.data(), c.data()) / denom).exp())
        })
        .collect()
}

/// Normalized weights; the minimum distance is subtracted before
/// exponentiation so the largest weight is exactly `exp(0)`.
pub fn compute_weights(q: &Patch, candidates: &[Patch], sigma_n: f64) -> Result<Vec<f64>> {
    if candidates.is_empty() {
        return Err(Error::EmptyInput("no candidate patches".into()));
    }
    let denom = weight_denominator(q.side(), sigma_n)?;
    let dists = candidates
        .iter()
        .map(|c| {
            same_side(q, c)?;
            Ok(sq_dist(q.data(), c.data()))
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut w = vec![0.0; dists.len()];
    normalize_weights(&dists, denom, &mut w);
    Ok(w)
}

fn weight_denominator(n: usize, sigma_n: f64) -> Result<f64> {
    if !(sigma_n.is_finite() && sigma_n > 0.0) {
        return Err(Error::param(format!("sigma_n must be positive, got {sigma_n}")));
    }
    let n2 = (n * n) as f64;
    Ok(2.0 * n2 * sigma_n * sigma_n)
}

fn same_side(q: &Patch, c: &Patch) -> Result<()> {
    if q.side() == c.side() {
        Ok(())
    } else {
        Err(Error::DimensionMismatch(format!(
            "candidate side {} vs query side {}",
            c.side(),
            q.side()
        )))
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[inline]
fn sq_dist_f32(a: &[f64], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, &y)| {
            let d = x - f64::from(y);
            d * d
        })
        .sum()
}

/// Fills `out` with normalized weights; returns the weight sum after normalization.
fn normalize_weights(dists: &[f64], denom: f64, out: &mut [f64]) -> f64 {
    let (argmin, dmin) = dists
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |best, (i, &d)| if d < best.1 { (i, d) } else { best });
    let mut sum = 0.0;
    for (w, &d) in out.iter_mut().zip(dists) {
        *w = (-(d - dmin) / denom).exp();
        sum += *w;
    }
    if sum > 0.0 && sum.is_finite() {
        let inv = 1.0 / sum;
        out.iter_mut().for_each(|w| *w *= inv);
    } else {
        // Nearest candidate takes all the weight.
        out.iter_mut().for_each(|w| *w = 0.0);
        out[argmin] = 1.0;
    }
    out.iter().sum()
}

/// Weighted average of HR patches.
pub fn reconstruct_patch(weights: &[f64], hr_patches: &[Patch]) -> Result<Patch> {
    if weights.len() != hr_patches.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} weights for {} patches",
            weights.len(),
            hr_patches.len()
        )));
    }
    let first = hr_patches
        .first()
        .ok_or_else(|| Error::EmptyInput("no HR patches".into()))?;
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 || weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
        return Err(Error::param(format!("weights must be non-negative and sum to 1, got {total}")));
    }
    let mut out = vec![0.0; first.data().len()];
    for (w, p) in weights.iter().zip(hr_patches) {
        if p.side() != first.side() {
            return Err(Error::DimensionMismatch("HR patches with mixed sides".into()));
        }
        for (o, v) in out.iter_mut().zip(p.data()) {
            *o += w * v;
        }
    }
    Patch::new(first.side(), first.center(), out)
}

/// Entry indices considered for a query under `cfg`.
fn candidate_range(lib: &PairedLibrary, query: &[f64], accelerate: bool) -> (std::ops::Range<usize>, usize) {
    if accelerate {
        let c = nearest_category_raw(lib, query);
        (lib.members(c), c)
    } else {
        (0..lib.len(), 0)
    }
}

/// Per-pixel scratch for one query.
struct Scratch {
    query: Vec<f64>,
    dists: Vec<f64>,
    weights: Vec<f64>,
}

impl Scratch {
    fn new(d: usize, len: usize) -> Self {
        Self {
            query: vec![0.0; d],
            dists: Vec::with_capacity(len),
            weights: Vec::with_capacity(len),
        }
    }
}

/// Reconstructs one HR patch estimate into `out`; returns `(weight sum, group id)`.
fn estimate(lib: &PairedLibrary, denom: f64, accelerate: bool, s: &mut Scratch, out: &mut [f64]) -> (f64, usize) {
    let (range, group) = candidate_range(lib, &s.query, accelerate);
    s.dists.clear();
    s.dists
        .extend(range.clone().map(|l| sq_dist_f32(&s.query, lib.lr_patch(l))));
    s.weights.clear();
    s.weights.resize(s.dists.len(), 0.0);
    let wsum = normalize_weights(&s.dists, denom, &mut s.weights);
    out.iter_mut().for_each(|v| *v = 0.0);
    for (l, &w) in range.zip(&s.weights) {
        if w == 0.0 {
            continue;
        }
        for (o, &v) in out.iter_mut().zip(lib.hr_patch(l)) {
            *o += w * f64::from(v);
        }
    }
    (wsum, group)
}

/// Per-position HR intensity bounds of one candidate group.
struct GroupBounds {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

fn group_bounds(lib: &PairedLibrary, range: std::ops::Range<usize>) -> GroupBounds {
    let d = lib.side() * lib.side();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for l in range {
        for (p, &v) in lib.hr_patch(l).iter().enumerate() {
            lo[p] = lo[p].min(f64::from(v));
            hi[p] = hi[p].max(f64::from(v));
        }
    }
    GroupBounds { lo, hi }
}

/// Weight-sum and convex-hull checks gathered during a filter run.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FilterDiagnostics {
    /// Number of patch estimates (one per pixel).
    pub estimates: usize,
    /// Largest `|sum(w) - 1|` over all estimates.
    pub max_weight_sum_error: f64,
    /// Output pixels outside the hull of their candidates' HR intensities.
    pub hull_violations: usize,
    /// Largest distance by which an output pixel left that hull.
    pub max_hull_excess: f64,
}

const ROW_CHUNK: usize = 16;

fn filter_impl(up: &GrayImage, lib: &PairedLibrary, cfg: &NlmConfig) -> Result<(GrayImage, FilterDiagnostics)> {
    cfg.check_library(lib)?;
    let n = cfg.n;
    let d = n * n;
    let half = n / 2;
    let (w, h) = up.dims();
    let denom = weight_denominator(n, cfg.sigma_n)?;
    let bounds: Vec<GroupBounds> = if cfg.accelerate {
        (0..lib.categories()).map(|c| group_bounds(lib, lib.members(c))).collect()
    } else {
        vec![group_bounds(lib, 0..lib.len())]
    };

    let mut acc = vec![0.0; w * h];
    let mut count = vec![0u32; w * h];
    let mut lo = vec![f64::INFINITY; w * h];
    let mut hi = vec![f64::NEG_INFINITY; w * h];
    let mut diag = FilterDiagnostics::default();

    for chunk_start in (0..h).step_by(ROW_CHUNK) {
        let chunk_end = (chunk_start + ROW_CHUNK).min(h);
        let rows: Vec<(Vec<f64>, Vec<(f64, usize)>)> = (chunk_start..chunk_end)
            .into_par_iter()
            .map(|i| {
                let mut s = Scratch::new(d, if cfg.accelerate { 0 } else { lib.len() });
                let mut patches = vec![0.0; w * d];
                let mut stats = Vec::with_capacity(w);
                for j in 0..w {
                    fill_patch_clamped(up, i, j, n, &mut s.query);
                    stats.push(estimate(lib, denom, cfg.accelerate, &mut s, &mut patches[j * d..(j + 1) * d]));
                }
                (patches, stats)
            })
            .collect();

        // Sequential scatter in row-major order keeps the sums thread-count independent.
        for (offset, (patches, stats)) in rows.iter().enumerate() {
            let i = chunk_start + offset;
            for j in 0..w {
                let (wsum, group) = stats[j];
                diag.estimates += 1;
                diag.max_weight_sum_error = diag.max_weight_sum_error.max((wsum - 1.0).abs());
                let gb = &bounds[group];
                let est = &patches[j * d..(j + 1) * d];
                for dr in 0..n {
                    let r = i as isize + dr as isize - half as isize;
                    if r < 0 || r >= h as isize {
                        continue;
                    }
                    for dc in 0..n {
                        let c = j as isize + dc as isize - half as isize;
                        if c < 0 || c >= w as isize {
                            continue;
                        }
                        let p = r as usize * w + c as usize;
                        let k = dr * n + dc;
                        acc[p] += est[k];
                        count[p] += 1;
                        lo[p] = lo[p].min(gb.lo[k]);
                        hi[p] = hi[p].max(gb.hi[k]);
                    }
                }
            }
        }
    }

    let data: Vec<f64> = acc.iter().zip(&count).map(|(a, &c)| a / f64::from(c)).collect();
    for ((&v, &l), &u) in data.iter().zip(&lo).zip(&hi) {
        let excess = (l - v).max(v - u).max(0.0);
        if excess > 1e-9 {
            diag.hull_violations += 1;
        }
        diag.max_hull_excess = diag.max_hull_excess.max(excess);
    }
    Ok((GrayImage::new(w, h, data)?, diag))
}

/// Filters the upsampled image against the library.
pub fn lbnlm_filter(up: &GrayImage, lib: &PairedLibrary, cfg: &NlmConfig) -> Result<GrayImage> {
    filter_impl(up, lib, cfg).map(|(img, _)| img)
}

/// Like [`lbnlm_filter`], also reporting the weight-sum and hull checks.
pub fn lbnlm_filter_with_diagnostics(
    up: &GrayImage,
    lib: &PairedLibrary,
    cfg: &NlmConfig,
) -> Result<(GrayImage, FilterDiagnostics)> {
    filter_impl(up, lib, cfg)
}

/// Candidate entries and normalized weights used for the query centered at `(i, j)`.
pub fn pixel_weights(
    up: &GrayImage,
    lib: &PairedLibrary,
    cfg: &NlmConfig,
    center: (usize, usize),
) -> Result<Vec<(usize, f64)>> {
    cfg.check_library(lib)?;
    if center.0 >= up.height() || center.1 >= up.width() {
        return Err(Error::param("pixel outside the image"));
    }
    let d = cfg.n * cfg.n;
    let mut s = Scratch::new(d, lib.len());
    fill_patch_clamped(up, center.0, center.1, cfg.n, &mut s.query);
    let mut out = vec![0.0; d];
    let (range, _) = candidate_range(lib, &s.query, cfg.accelerate);
    estimate(lib, weight_denominator(cfg.n, cfg.sigma_n)?, cfg.accelerate, &mut s, &mut out);
    Ok(range.zip(s.weights.iter().copied()).collect())
}

/// Bicubic x2 upsampling followed by [`lbnlm_filter`].
pub fn super_resolve(lr: &GrayImage, lib: &PairedLibrary, cfg: &NlmConfig) -> Result<GrayImage> {
    let up = bicubic_upsample(lr, 2)?;
    lbnlm_filter(&up, lib, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn patch(n: usize, v: Vec<f64>) -> Patch {
        Patch::new(n, (n / 2, n / 2), v).unwrap()
    }

    #[test]
    fn weights_basic_cases() {
        let q = patch(3, (0..9).map(f64::from).collect());
        assert_eq!(compute_weights(&q, &[q.clone()], 1.0).unwrap(), vec![1.0]);

        let a = patch(3, q.data().iter().map(|v| v + 2.0).collect());
        let b = patch(3, q.data().iter().map(|v| v - 2.0).collect());
        let w = compute_weights(&q, &[a, b], 3.0).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-15 && (w[1] - 0.5).abs() < 1e-15);

        assert!(compute_weights(&q, &[], 1.0).is_err());
        assert!(compute_weights(&q, &[q.clone()], 0.0).is_err());
        assert!(compute_weights(&q, &[patch(5, vec![0.0; 25])], 1.0).is_err());
    }

    #[test]
    fn raw_weight_hand_value() {
        // 81 pixels each off by sqrt(2): squared distance 162 = 2 * 81 * 1.
        let q = patch(9, vec![0.0; 81]);
        let c = patch(9, vec![2f64.sqrt(); 81]);
        let w = raw_weights(&q, &[c], 1.0).unwrap();
        assert!((w[0] - (-1f64).exp()).abs() < 1e-12);
        assert!((w[0] - 0.3679).abs() < 1e-4);
    }

    #[test]
    fn weights_survive_huge_distances() {
        let q = patch(3, vec![0.0; 9]);
        let far = patch(3, vec![255.0; 9]);
        let farther = patch(3, vec![-255.0; 9]);
        let w = compute_weights(&q, &[far, farther], 0.01).unwrap();
        let sum: f64 = w.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!((w[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn weight_entropy_grows_with_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = patch(3, (0..9).map(|_| rng.random_range(0.0..255.0)).collect());
        let cands: Vec<Patch> = (0..20)
            .map(|_| patch(3, (0..9).map(|_| rng.random_range(0.0..255.0)).collect()))
            .collect();
        let entropy = |s: f64| -> f64 {
            compute_weights(&q, &cands, s)
                .unwrap()
                .iter()
                .filter(|&&w| w > 0.0)
                .map(|w| -w * w.ln())
                .sum()
        };
        let sigmas = [1.0, 5.0, 10.0, 20.0, 40.0, 100.0, 1000.0];
        let values: Vec<f64> = sigmas.iter().map(|&s| entropy(s)).collect();
        for pair in values.windows(2) {
            assert!(pair[1] >= pair[0] - 1e-12, "{values:?}");
        }
        assert!(values[0] < 0.1);
        assert!((values[values.len() - 1] - 20f64.ln()).abs() < 0.01);
    }

    #[test]
    fn reconstruct_cases() {
        let a = patch(3, (0..9).map(f64::from).collect());
        assert_eq!(reconstruct_patch(&[1.0], &[a.clone()]).unwrap().data(), a.data());

        let zero = patch(3, vec![0.0; 9]);
        let two = patch(3, vec![200.0; 9]);
        let mid = reconstruct_patch(&[0.5, 0.5], &[zero.clone(), two.clone()]).unwrap();
        assert!(mid.data().iter().all(|&v| v == 100.0));

        assert!(reconstruct_patch(&[1.0], &[zero.clone(), two.clone()]).is_err());
        assert!(reconstruct_patch(&[0.7, 0.7], &[zero, two]).is_err());
    }

    #[test]
    fn reconstruct_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let patches: Vec<Patch> = (0..5)
            .map(|_| patch(5, (0..25).map(|_| rng.random_range(0.0..255.0)).collect()))
            .collect();
        let raw: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let got = reconstruct_patch(&w, &patches).unwrap();
        for p in 0..25 {
            let mut expected = 0.0;
            for l in 0..5 {
                expected += w[l] * patches[l].data()[p];
            }
            assert!((got.data()[p] - expected).abs() < 1e-9);
        }
    }

    fn random_library(n: usize, k: usize, len: usize, seed: u64) -> PairedLibrary {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = n * n;
        let entries: Vec<(Vec<f64>, Vec<f64>, usize)> = (0..len)
            .map(|l| {
                let hr: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..255.0)).collect();
                let lr: Vec<f64> = hr.iter().map(|v| v * 0.8 + rng.random_range(0.0..20.0)).collect();
                (hr, lr, l % k)
            })
            .collect();
        PairedLibrary::from_entries(n, k, seed, &entries).unwrap()
    }

    #[test]
    fn single_category_equals_full_library() {
        let lib = random_library(3, 1, 40, 1);
        let up = GrayImage::from_fn(12, 10, |r, c| ((r * 13 + c * 29) % 255) as f64);
        let on = NlmConfig {
            sigma_n: 20.0,
            accelerate: true,
            n: 3,
        };
        let off = NlmConfig { accelerate: false, ..on };
        assert_eq!(lbnlm_filter(&up, &lib, &on).unwrap(), lbnlm_filter(&up, &lib, &off).unwrap());
    }

    #[test]
    fn accelerated_support_is_nearest_category() {
        let lib = random_library(3, 4, 60, 2);
        let up = GrayImage::from_fn(8, 8, |r, c| ((r * 37 + c * 11) % 255) as f64);
        let cfg = NlmConfig {
            sigma_n: 10.0,
            accelerate: true,
            n: 3,
        };
        for (i, j) in [(0, 0), (3, 4), (7, 7)] {
            let q = crate::image::extract_patch(&up, (i, j), 3, crate::image::Border::Replicate).unwrap();
            let c = crate::library::nearest_category(&lib, &q).unwrap();
            let support: Vec<usize> = pixel_weights(&up, &lib, &cfg, (i, j))
                .unwrap()
                .into_iter()
                .map(|(l, _)| l)
                .collect();
            assert_eq!(support, lib.members(c).collect::<Vec<_>>());
        }
    }

    #[test]
    fn identity_library_reproduces_content() {
        // Library holds every interior patch of the image with lr == hr.
        let img = GrayImage::from_fn(16, 16, |r, c| ((r * 7 + c * 5) % 23) as f64 * 9.0);
        let n = 3;
        let mut entries = Vec::new();
        for i in 0..16 {
            for j in 0..16 {
                let p = crate::image::extract_patch(&img, (i, j), n, crate::image::Border::Replicate).unwrap();
                entries.push((p.data().to_vec(), p.data().to_vec(), 0));
            }
        }
        let lib = PairedLibrary::from_entries(n, 1, 0, &entries).unwrap();
        let cfg = NlmConfig {
            sigma_n: 0.01,
            accelerate: false,
            n,
        };
        let out = lbnlm_filter(&img, &lib, &cfg).unwrap();
        let max_err = out
            .data()
            .iter()
            .zip(img.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err < 1e-6, "{max_err}");
    }

    #[test]
    fn constant_input_constant_output() {
        let entries = vec![(vec![80.0; 9], vec![75.0; 9], 0), (vec![80.0; 9], vec![77.0; 9], 1)];
        let lib = PairedLibrary::from_entries(3, 2, 0, &entries).unwrap();
        let lr = GrayImage::filled(6, 5, 76.0);
        let cfg = NlmConfig {
            n: 3,
            ..NlmConfig::default()
        };
        let out = super_resolve(&lr, &lib, &cfg).unwrap();
        assert_eq!(out.dims(), (12, 10));
        assert!(out.data().iter().all(|&v| (v - 80.0).abs() < 1e-9));
    }

    #[test]
    fn config_mismatch_errors() {
        let lib = random_library(3, 2, 10, 4);
        let up = GrayImage::filled(5, 5, 1.0);
        assert!(lbnlm_filter(&up, &lib, &NlmConfig::default()).is_err());
        let bad = NlmConfig {
            sigma_n: -1.0,
            n: 3,
            accelerate: false,
        };
        assert!(lbnlm_filter(&up, &lib, &bad).is_err());
    }

    #[test]
    fn diagnostics_hold() {
        let lib = random_library(3, 3, 90, 5);
        let up = GrayImage::from_fn(20, 17, |r, c| ((r * 31 + c * 17) % 250) as f64);
        for accelerate in [false, true] {
            let cfg = NlmConfig {
                sigma_n: 5.0,
                accelerate,
                n: 3,
            };
            let (_, diag) = lbnlm_filter_with_diagnostics(&up, &lib, &cfg).unwrap();
            assert_eq!(diag.estimates, 20 * 17);
            assert!(diag.max_weight_sum_error <= 1e-9);
            assert_eq!(diag.hull_violations, 0);
        }
    }
}
