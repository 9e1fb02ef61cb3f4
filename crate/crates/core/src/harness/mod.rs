//! Experimental protocol: alignment of raw pairs, subimage partitioning,
//! self- and pooled-training runs, and synthetic data.

mod manifest;
mod partition;
mod report;
mod synth;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use manifest::{write_run, GridSpec, Manifest, PairEntry};
pub use partition::{partition_pair, reassemble_hr, tile_spans, PartitionPlan, SubPair};
pub use report::{aggregate_reports, parse_reports_csv, reports_csv, Sample, SubimageReport, Summary, SummaryRow};
pub use synth::{synthesize_pair, synthetic_specimen, synthetic_specimen_with, DegradationSpec, SpecimenSpec, GroundTruth, WarpField, WarpTerm};

use crate::error::{Error, Result};
use crate::image::{bicubic_upsample, GrayImage};
use crate::lbnlm::{lbnlm_filter, NlmConfig};
use crate::library::{build_library, merge_libraries, LibraryConfig, MergeConfig, PairPool, PairedLibrary};
use crate::metrics::{evaluate, EvalConfig};
use crate::registration::{global_register, match_locations, warp_into, GlobalTransform, MatchConfig, PatchMatch, SearchSpace};

/// An HR/LR acquisition of one specimen.
///
/// With `registration` unset the images are raw captures. Once set, `hr` and
/// `lr` are cropped to their common, aligned overlap and `hr` is exactly
/// twice the size of `lr`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub pair_id: String,
    pub hr: GrayImage,
    pub lr: GrayImage,
    pub registration: Option<GlobalTransform>,
}

impl ImagePair {
    pub fn new(pair_id: impl Into<String>, hr: GrayImage, lr: GrayImage) -> Self {
        Self {
            pair_id: pair_id.into(),
            hr,
            lr,
            registration: None,
        }
    }

    pub fn with_id(mut self, pair_id: impl Into<String>) -> Self {
        self.pair_id = pair_id.into();
        self
    }
}

/// Global registration of the bicubic-upsampled LR image onto the HR image.
pub fn register_pair(pair: &ImagePair, search: &SearchSpace) -> Result<GlobalTransform> {
    let up = bicubic_upsample(&pair.lr, 2)?;
    global_register(&pair.hr, &up, search)
}

/// Largest axis-aligned box of valid pixels, as `(top, left, width, height)`,
/// found by repeatedly dropping the border line with the most invalid pixels.
fn valid_box(valid: &[bool], width: usize, height: usize) -> Option<(usize, usize, usize, usize)> {
    let (mut top, mut left, mut bottom, mut right) = (0, 0, height, width);
    let at = |r: usize, c: usize| valid[r * width + c];
    while top < bottom && left < right {
        let h = (bottom - top) as f64;
        let w = (right - left) as f64;
        let bad_row = |r: usize| (left..right).filter(|&c| !at(r, c)).count() as f64 / w;
        let bad_col = |c: usize| (top..bottom).filter(|&r| !at(r, c)).count() as f64 / h;
        let sides = [bad_row(top), bad_row(bottom - 1), bad_col(left), bad_col(right - 1)];
        let (worst, frac) = sides
            .iter()
            .copied()
            .enumerate()
            .fold((0, 0.0), |best, (i, f)| if f > best.1 { (i, f) } else { best });
        let side = if frac > 0.0 {
            worst
        } else if (top..bottom).all(|r| (left..right).all(|c| at(r, c))) {
            return Some((top, left, right - left, bottom - top));
        } else {
            0
        };
        match side {
            0 => top += 1,
            1 => bottom -= 1,
            2 => left += 1,
            _ => right -= 1,
        }
    }
    None
}

/// Crops a raw pair to the overlap implied by `t` (as returned by
/// [`register_pair`]). The LR image is resampled into the HR frame at half
/// resolution, so the result is aligned pixel for pixel at 2:1.
pub fn align_with(pair: &ImagePair, t: &GlobalTransform) -> Result<ImagePair> {
    let (lw, lh) = (pair.hr.width() / 2, pair.hr.height() / 2);
    if lw == 0 || lh == 0 {
        return Err(Error::param(format!("pair {}: HR image too small", pair.pair_id)));
    }
    // LR pixel q sits at HR coordinate 2q + 0.5, so shifts halve and the
    // rotation center maps onto the LR center.
    let half = GlobalTransform {
        shift_x: t.shift_x / 2.0,
        shift_y: t.shift_y / 2.0,
        ..*t
    };
    let warped = warp_into(&pair.lr, lw, lh, &half);
    let (top, left, w, h) = valid_box(&warped.valid, lw, lh)
        .ok_or_else(|| Error::Registration(format!("pair {}: images do not overlap", pair.pair_id)))?;
    Ok(ImagePair {
        pair_id: pair.pair_id.clone(),
        hr: pair.hr.crop(2 * top, 2 * left, 2 * w, 2 * h)?,
        lr: warped.image.crop(top, left, w, h)?,
        registration: Some(*t),
    })
}

/// Registers a raw pair and crops it to the aligned overlap.
pub fn align_pair(pair: &ImagePair, search: &SearchSpace) -> Result<ImagePair> {
    let t = register_pair(pair, search)?;
    align_with(pair, &t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Strategy {
    /// One library per pair, applied to that pair only.
    #[default]
    #[serde(rename = "self")]
    SelfTraining,
    /// One merged library from every pair's training tiles.
    #[serde(rename = "pooled")]
    Pooled,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::SelfTraining => "self",
            Strategy::Pooled => "pooled",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "self" => Ok(Strategy::SelfTraining),
            "pooled" => Ok(Strategy::Pooled),
            other => Err(Error::param(format!("unknown strategy {other:?}; expected self or pooled"))),
        }
    }
}

/// Every parameter of a training/evaluation run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentConfig {
    pub plan: PartitionPlan,
    pub search: SearchSpace,
    pub matching: MatchConfig,
    pub library: LibraryConfig,
    pub nlm: NlmConfig,
    pub eval: EvalConfig,
    /// Also reconstruct and report the training tiles.
    pub in_sample: bool,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.plan.validate()?;
        self.nlm.validate()?;
        if self.matching.n != self.nlm.n {
            return Err(Error::param(format!(
                "matching patch side {} differs from filter patch side {}",
                self.matching.n, self.nlm.n
            )));
        }
        Ok(())
    }
}

/// One reconstructed tile.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub pair_id: String,
    pub subimage: usize,
    pub sample: Sample,
    pub hr_origin: (usize, usize),
    pub image: GrayImage,
}

/// Per-pair by-products of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct PairArtifacts {
    pub pair_id: String,
    pub registration: GlobalTransform,
    /// `(width, height)` of the aligned HR overlap.
    pub hr_dims: (usize, usize),
    /// Training matches in aligned-HR coordinates.
    pub matches: Vec<PatchMatch>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkippedPair {
    pub pair_id: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub strategy: Strategy,
    /// Sorted by pair id, then subimage index.
    pub reports: Vec<SubimageReport>,
    pub reconstructions: Vec<Reconstruction>,
    pub pairs: Vec<PairArtifacts>,
    /// Per pair for self-training, a single merged library when pooled.
    pub libraries: Vec<PairedLibrary>,
    pub skipped: Vec<SkippedPair>,
}

struct Prepared {
    pair: ImagePair,
    train: Vec<SubPair>,
    test: Vec<SubPair>,
}

fn prepare(pair: &ImagePair, cfg: &ExperimentConfig) -> Result<Prepared> {
    let aligned = match pair.registration {
        Some(_) => pair.clone(),
        None => align_pair(pair, &cfg.search)?,
    };
    let (train, test) = partition_pair(&aligned, &cfg.plan)?;
    Ok(Prepared {
        pair: aligned,
        train,
        test,
    })
}

/// Matches every training tile and builds that pair's library.
fn train(p: &Prepared, cfg: &ExperimentConfig) -> Result<(PairedLibrary, PairArtifacts)> {
    let mut pool = PairPool::new(cfg.matching.n)?;
    let mut all = Vec::new();
    for tile in &p.train {
        let up = bicubic_upsample(&tile.lr, 2)?;
        let matches = match_locations(&tile.hr, &up, &cfg.matching)?;
        let (top, left) = tile.hr_origin;
        all.extend(matches.iter().map(|m| PatchMatch {
            center: (m.center.0 + top, m.center.1 + left),
            ..*m
        }));
        pool.add_region(tile.hr.clone(), up, matches);
    }
    if all.is_empty() {
        return Err(Error::EmptyInput(format!(
            "pair {}: training tiles are too small to hold a patch and its search window",
            p.pair.pair_id
        )));
    }
    let library = build_library(&pool, &cfg.library)?;
    let artifacts = PairArtifacts {
        pair_id: p.pair.pair_id.clone(),
        registration: p.pair.registration.expect("prepared pairs are aligned"),
        hr_dims: p.pair.hr.dims(),
        matches: all,
    };
    Ok((library, artifacts))
}

/// Builds the library self-training would use for `pair`.
pub fn train_pair_library(pair: &ImagePair, cfg: &ExperimentConfig) -> Result<PairedLibrary> {
    cfg.validate()?;
    train(&prepare(pair, cfg)?, cfg).map(|(lib, _)| lib)
}

fn reconstruct(
    p: &Prepared,
    lib: &PairedLibrary,
    cfg: &ExperimentConfig,
) -> Result<(Vec<SubimageReport>, Vec<Reconstruction>)> {
    let mut tiles: Vec<(&SubPair, Sample)> = p.test.iter().map(|t| (t, Sample::OutOfSample)).collect();
    if cfg.in_sample {
        tiles.extend(p.train.iter().map(|t| (t, Sample::InSample)));
    }
    tiles.sort_by_key(|(t, _)| t.index);
    let mut reports = Vec::with_capacity(tiles.len());
    let mut images = Vec::with_capacity(tiles.len());
    for (tile, sample) in tiles {
        let up = bicubic_upsample(&tile.lr, 2)?;
        let sr = lbnlm_filter(&up, lib, &cfg.nlm)?;
        let report = evaluate(&tile.hr, &sr, &up, &cfg.eval)?;
        reports.push(SubimageReport {
            pair_id: tile.pair_id.clone(),
            subimage: tile.index,
            sample,
            report,
        });
        images.push(Reconstruction {
            pair_id: tile.pair_id.clone(),
            subimage: tile.index,
            sample,
            hr_origin: tile.hr_origin,
            image: sr,
        });
    }
    Ok((reports, images))
}

fn check_inputs(pairs: &[ImagePair], cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptyInput("no image pairs".into()));
    }
    let mut ids: Vec<&str> = pairs.iter().map(|p| p.pair_id.as_str()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::param(format!("duplicate pair id {:?}", w[0])));
    }
    Ok(())
}

fn skip(pair_id: &str, err: &Error, skipped: &mut Vec<SkippedPair>) {
    log::warn!("skipping pair {pair_id}: {err}");
    skipped.push(SkippedPair {
        pair_id: pair_id.to_string(),
        reason: err.to_string(),
    });
}

fn finish(
    strategy: Strategy,
    mut reports: Vec<SubimageReport>,
    mut reconstructions: Vec<Reconstruction>,
    mut pairs: Vec<PairArtifacts>,
    libraries: Vec<PairedLibrary>,
    skipped: Vec<SkippedPair>,
) -> RunOutput {
    reports.sort_by(|a, b| (&a.pair_id, a.subimage).cmp(&(&b.pair_id, b.subimage)));
    reconstructions.sort_by(|a, b| (&a.pair_id, a.subimage).cmp(&(&b.pair_id, b.subimage)));
    pairs.sort_by(|a, b| a.pair_id.cmp(&b.pair_id));
    RunOutput {
        strategy,
        reports,
        reconstructions,
        pairs,
        libraries,
        skipped,
    }
}

/// Each pair is enhanced with a library trained on its own training tiles.
/// Pairs that fail are logged and skipped.
pub fn run_self_training(pairs: &[ImagePair], cfg: &ExperimentConfig) -> Result<RunOutput> {
    check_inputs(pairs, cfg)?;
    let outcomes: Vec<Result<_>> = pairs
        .par_iter()
        .map(|pair| {
            let p = prepare(pair, cfg)?;
            let (lib, artifacts) = train(&p, cfg)?;
            let (reports, images) = reconstruct(&p, &lib, cfg)?;
            Ok((lib, artifacts, reports, images))
        })
        .collect();
    let (mut reports, mut images, mut arts, mut libs, mut skipped) = (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (pair, outcome) in pairs.iter().zip(outcomes) {
        match outcome {
            Ok((lib, a, r, i)) => {
                libs.push(lib);
                arts.push(a);
                reports.extend(r);
                images.extend(i);
            }
            Err(e) => skip(&pair.pair_id, &e, &mut skipped),
        }
    }
    Ok(finish(Strategy::SelfTraining, reports, images, arts, libs, skipped))
}

/// One library merged from every pair's training tiles enhances all pairs.
/// Pairs that fail before merging are logged and skipped.
pub fn run_pooled_training(pairs: &[ImagePair], cfg: &ExperimentConfig) -> Result<RunOutput> {
    check_inputs(pairs, cfg)?;
    let outcomes: Vec<Result<_>> = pairs
        .par_iter()
        .map(|pair| {
            let p = prepare(pair, cfg)?;
            let (lib, artifacts) = train(&p, cfg)?;
            Ok((p, lib, artifacts))
        })
        .collect();
    let (mut prepared, mut libs, mut arts, mut skipped) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (pair, outcome) in pairs.iter().zip(outcomes) {
        match outcome {
            Ok((p, lib, a)) => {
                prepared.push(p);
                libs.push(lib);
                arts.push(a);
            }
            Err(e) => skip(&pair.pair_id, &e, &mut skipped),
        }
    }
    if prepared.is_empty() {
        return Ok(finish(Strategy::Pooled, Vec::new(), Vec::new(), arts, Vec::new(), skipped));
    }
    let merged = merge_libraries(&libs, &MergeConfig::from(&cfg.library))?;
    let outcomes: Vec<Result<_>> = prepared.par_iter().map(|p| reconstruct(p, &merged, cfg)).collect();
    let (mut reports, mut images) = (Vec::new(), Vec::new());
    let mut kept = Vec::new();
    for ((p, a), outcome) in prepared.iter().zip(arts).zip(outcomes) {
        match outcome {
            Ok((r, i)) => {
                reports.extend(r);
                images.extend(i);
                kept.push(a);
            }
            Err(e) => skip(&p.pair.pair_id, &e, &mut skipped),
        }
    }
    Ok(finish(Strategy::Pooled, reports, images, kept, vec![merged], skipped))
}

pub fn run(strategy: Strategy, pairs: &[ImagePair], cfg: &ExperimentConfig) -> Result<RunOutput> {
    match strategy {
        Strategy::SelfTraining => run_self_training(pairs, cfg),
        Strategy::Pooled => run_pooled_training(pairs, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ExperimentConfig {
        ExperimentConfig {
            library: LibraryConfig {
                size: 400,
                categories: 8,
                oversample: 4,
                ..Default::default()
            },
            in_sample: true,
            ..Default::default()
        }
    }

    fn synthetic(seed: u64, spec: DegradationSpec) -> ImagePair {
        let truth = synthetic_specimen(192, 160, seed);
        synthesize_pair(&truth, &spec).unwrap().0.with_id(format!("pair{seed:02}"))
    }

    #[test]
    fn valid_box_cases() {
        let all = vec![true; 12];
        assert_eq!(valid_box(&all, 4, 3), Some((0, 0, 4, 3)));
        let mut corner = all.clone();
        corner[0] = false;
        let b = valid_box(&corner, 4, 3).unwrap();
        assert!(b.2 * b.3 >= 8, "{b:?}");
        assert_eq!(valid_box(&[false; 6], 3, 2), None);
    }

    #[test]
    fn align_identity_pair() {
        let truth = synthetic_specimen(96, 80, 2);
        let (pair, _) = synthesize_pair(&truth, &DegradationSpec::default()).unwrap();
        let aligned = align_pair(&pair, &SearchSpace::default()).unwrap();
        let t = aligned.registration.unwrap();
        assert_eq!((t.shift_x, t.shift_y, t.theta), (0.0, 0.0, 0.0));
        assert_eq!(aligned.hr, pair.hr);
        assert_eq!(aligned.lr, pair.lr);
    }

    #[test]
    fn align_shifted_pair_crops_to_overlap() {
        let truth = synthetic_specimen(128, 128, 6);
        let spec = DegradationSpec {
            global_shift: (6.0, -4.0),
            ..Default::default()
        };
        let (pair, _) = synthesize_pair(&truth, &spec).unwrap();
        let aligned = align_pair(&pair, &SearchSpace::default()).unwrap();
        let (w, h) = aligned.lr.dims();
        assert_eq!(aligned.hr.dims(), (2 * w, 2 * h));
        assert!(w < 64 && h < 64 && w >= 58 && h >= 58, "{w}x{h}");
        // The aligned LR matches the block average of the HR crop closely.
        let reference = crate::image::downsample(&aligned.hr, 2).unwrap();
        let mse = crate::metrics::mse(&reference, &aligned.lr).unwrap();
        assert!(mse < 4.0, "mse {mse}");
    }

    #[test]
    fn self_training_reports_every_tile() {
        let truth = synthetic_specimen(256, 256, 1);
        let pair = synthesize_pair(&truth, &DegradationSpec::default()).unwrap().0;
        let cfg = ExperimentConfig { in_sample: true, ..Default::default() };
        let out = run_self_training(&[pair], &cfg).unwrap();
        assert!(out.skipped.is_empty());
        let oos = out.reports.iter().filter(|r| r.sample == Sample::OutOfSample).count();
        assert_eq!(oos, 3);
        assert_eq!(out.reports.len(), 12);
        assert_eq!(out.reconstructions.len(), 12);
        assert!(out.reports.windows(2).all(|w| w[0].subimage < w[1].subimage));
        let summary = aggregate_reports(&out.reports).unwrap();
        assert!(summary.row(Sample::OutOfSample).unwrap().mean_delta_psnr > 0.0, "{summary}");
    }

    #[test]
    fn single_pair_pooling_keeps_entries() {
        let pair = synthetic(3, DegradationSpec { noise_sigma_lr: 3.0, seed: 1, ..Default::default() });
        let cfg = ExperimentConfig { in_sample: false, ..small_config() };
        let own = run_self_training(std::slice::from_ref(&pair), &cfg).unwrap();
        let pooled = run_pooled_training(std::slice::from_ref(&pair), &cfg).unwrap();
        let key = |lib: &PairedLibrary| {
            let mut e: Vec<(Vec<u32>, Vec<u32>)> = lib
                .entries()
                .map(|(h, l, _)| (h.iter().map(|v| v.to_bits()).collect(), l.iter().map(|v| v.to_bits()).collect()))
                .collect();
            e.sort();
            e
        };
        assert_eq!(key(&own.libraries[0]), key(&pooled.libraries[0]));
        assert_eq!(pooled.reports.len(), 3);
    }

    #[test]
    fn pooled_reports_all_test_tiles() {
        let a = synthetic(4, DegradationSpec { noise_sigma_lr: 2.0, seed: 1, ..Default::default() });
        let b = synthetic(5, DegradationSpec { noise_sigma_lr: 2.0, seed: 2, ..Default::default() });
        let cfg = ExperimentConfig { in_sample: false, ..small_config() };
        let expected = train_pair_library(&a, &cfg).unwrap().len() + train_pair_library(&b, &cfg).unwrap().len();
        let out = run_pooled_training(&[a, b], &cfg).unwrap();
        assert_eq!(out.reports.len(), 6);
        assert_eq!(out.libraries.len(), 1);
        assert_eq!(out.libraries[0].len(), expected);
    }

    #[test]
    fn failing_pair_is_skipped() {
        let good = synthetic(7, DegradationSpec::default());
        let tiny = ImagePair::new("tiny", GrayImage::filled(16, 16, 9.0), GrayImage::filled(8, 8, 9.0));
        let out = run_self_training(&[tiny, good], &small_config()).unwrap();
        assert_eq!(out.skipped.len(), 1);
        assert_eq!(out.skipped[0].pair_id, "tiny");
        assert_eq!(out.reports.len(), 12);
    }

    #[test]
    fn input_errors() {
        let cfg = small_config();
        assert!(run_self_training(&[], &cfg).is_err());
        let p = synthetic(8, DegradationSpec::default());
        assert!(run_pooled_training(&[p.clone(), p.clone()], &cfg).is_err());
        let bad = ExperimentConfig {
            nlm: NlmConfig { n: 7, ..Default::default() },
            ..cfg
        };
        assert!(run_self_training(&[p], &bad).is_err());
        assert_eq!("pooled".parse::<Strategy>().unwrap(), Strategy::Pooled);
        assert!("mixed".parse::<Strategy>().is_err());
    }
}
