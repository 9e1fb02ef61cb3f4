//! Image quality metrics and per-image evaluation against the bicubic baseline.

mod binary;
mod canny;
mod otsu;
mod ssim;

use serde::{Deserialize, Serialize};

pub use binary::{BinaryMap, EdgeMap, Mask};
pub use canny::{canny, canny_with, edge_similarity, CannyConfig};
pub use otsu::{histogram, otsu_mask, otsu_threshold, MIN_FOREGROUND_COMPONENT};
pub use ssim::{ssim, C1, C2};

use crate::error::{Error, Result};
use crate::image::GrayImage;

/// Reported in place of an infinite PSNR.
pub const PSNR_CAP: f64 = 99.0;

fn check_dims(a: &GrayImage, b: &GrayImage) -> Result<()> {
    if a.same_dims(b) {
        Ok(())
    } else {
        Err(Error::DimensionMismatch(format!("{:?} vs {:?}", a.dims(), b.dims())))
    }
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (255.0 * 255.0 / mse).log10()
    }
}

pub fn mse(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    check_dims(a, b)?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.data().len() as f64)
}

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` for identical images.
pub fn psnr(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    mse(a, b).map(psnr_from_mse)
}

pub fn masked_mse(a: &GrayImage, b: &GrayImage, mask: &Mask) -> Result<f64> {
    check_dims(a, b)?;
    if mask.dims() != a.dims() {
        return Err(Error::DimensionMismatch("mask does not match the images".into()));
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for ((x, y), &m) in a.data().iter().zip(b.data()).zip(mask.bits()) {
        if m {
            sum += (x - y) * (x - y);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyInput("mask selects no pixels".into()));
    }
    Ok(sum / count as f64)
}

/// PSNR over the masked pixels only.
pub fn masked_psnr(a: &GrayImage, b: &GrayImage, mask: &Mask) -> Result<f64> {
    masked_mse(a, b, mask).map(psnr_from_mse)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Relative high threshold for Canny.
    pub canny: f64,
    /// Frame width excluded from every metric.
    pub border: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            canny: 0.2,
            border: 4,
        }
    }
}

/// Metrics of one reconstruction against ground truth and the bicubic baseline.
///
/// PSNR values are capped at [`PSNR_CAP`]. Foreground/background deltas are
/// `None` when the Otsu mask (or its complement) is empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub psnr_sr: f64,
    pub psnr_bicubic: f64,
    pub delta_psnr: f64,
    pub ssim_sr: f64,
    pub ssim_bicubic: f64,
    pub delta_ssim: f64,
    pub fg_delta_psnr: Option<f64>,
    pub bg_delta_psnr: Option<f64>,
    pub sim_sr: f64,
    pub sim_bicubic: f64,
    pub failure: bool,
}

impl EvaluationReport {
    pub fn to_record(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }

    pub fn from_record(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Record(e.to_string()))
    }
}

fn capped(v: f64) -> f64 {
    v.min(PSNR_CAP)
}

fn strip_border(img: &GrayImage, border: usize) -> Result<GrayImage> {
    if border == 0 {
        return Ok(img.clone());
    }
    let (w, h) = img.dims();
    if w <= 2 * border || h <= 2 * border {
        return Err(Error::param(format!("{w}x{h} image has nothing inside a {border}-pixel border")));
    }
    img.crop(border, border, w - 2 * border, h - 2 * border)
}

/// Scores `sr` and `bicubic` against the ground truth `hr`.
pub fn evaluate(hr: &GrayImage, sr: &GrayImage, bicubic: &GrayImage, cfg: &EvalConfig) -> Result<EvaluationReport> {
    check_dims(hr, sr)?;
    check_dims(hr, bicubic)?;
    let hr = strip_border(hr, cfg.border)?;
    let sr = strip_border(sr, cfg.border)?;
    let bicubic = strip_border(bicubic, cfg.border)?;

    let psnr_sr = capped(psnr(&hr, &sr)?);
    let psnr_bicubic = capped(psnr(&hr, &bicubic)?);
    let ssim_sr = ssim(&hr, &sr)?;
    let ssim_bicubic = ssim(&hr, &bicubic)?;

    let fg = otsu_mask(&hr);
    let bg = fg.complement();
    let masked_delta = |mask: &Mask| -> Result<Option<f64>> {
        if mask.is_empty() {
            return Ok(None);
        }
        Ok(Some(
            capped(masked_psnr(&hr, &sr, mask)?) - capped(masked_psnr(&hr, &bicubic, mask)?),
        ))
    };
    let fg_delta_psnr = masked_delta(&fg)?;
    let bg_delta_psnr = masked_delta(&bg)?;

    let edges_hr = canny(&hr, cfg.canny)?;
    let sim_sr = edge_similarity(&edges_hr, &canny(&sr, cfg.canny)?)?;
    let sim_bicubic = edge_similarity(&edges_hr, &canny(&bicubic, cfg.canny)?)?;

    let delta_psnr = psnr_sr - psnr_bicubic;
    Ok(EvaluationReport {
        psnr_sr,
        psnr_bicubic,
        delta_psnr,
        ssim_sr,
        ssim_bicubic,
        delta_ssim: ssim_sr - ssim_bicubic,
        fg_delta_psnr,
        bg_delta_psnr,
        sim_sr,
        sim_bicubic,
        failure: delta_psnr < 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn textured(w: usize, h: usize, seed: u64) -> GrayImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GrayImage::from_fn(w, h, |r, c| {
            let blob = if (r as f64 - 20.0).hypot(c as f64 - 20.0) < 9.0 { 120.0 } else { 0.0 };
            40.0 + blob + rng.random_range(0.0..30.0)
        })
    }

    #[test]
    fn psnr_cases() {
        let a = GrayImage::filled(8, 8, 50.0);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = a.map(|v| v + 10.0);
        let expected = 10.0 * (255.0f64 * 255.0 / 100.0).log10();
        assert!((psnr(&a, &b).unwrap() - expected).abs() < 1e-12);
        assert!((psnr(&a, &b).unwrap() - 28.131).abs() < 1e-3);

        let checker = GrayImage::from_fn(6, 6, |r, c| if (r + c) % 2 == 0 { 0.0 } else { 255.0 });
        let inverted = checker.map(|v| 255.0 - v);
        assert_eq!(psnr(&checker, &inverted).unwrap(), 0.0);
        assert!(psnr(&a, &GrayImage::filled(8, 7, 0.0)).is_err());
    }

    #[test]
    fn psnr_symmetry() {
        let a = textured(30, 30, 1);
        let b = textured(30, 30, 2);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn masked_cases() {
        let a = textured(24, 20, 3);
        let b = textured(24, 20, 4);
        let full = Mask::full(24, 20);
        assert_eq!(masked_psnr(&a, &b, &full).unwrap(), psnr(&a, &b).unwrap());
        assert!(masked_psnr(&a, &b, &Mask::empty(24, 20)).is_err());

        let mut same = b.clone();
        let mut mask = Mask::empty(24, 20);
        for c in 0..24 {
            same.set(0, c, a.get(0, c));
            mask.set(0, c, true);
        }
        assert_eq!(masked_psnr(&a, &same, &mask).unwrap(), f64::INFINITY);

        // Area-weighted masked MSEs reproduce the full MSE.
        let m = otsu_mask(&a);
        let comp = m.complement();
        let total = mse(&a, &b).unwrap();
        let area = (24 * 20) as f64;
        let combined = masked_mse(&a, &b, &m).unwrap() * m.count() as f64 / area
            + masked_mse(&a, &b, &comp).unwrap() * comp.count() as f64 / area;
        assert!((combined - total).abs() < 1e-9);
    }

    #[test]
    fn evaluate_perfect_and_self() {
        let hr = textured(48, 48, 5);
        let bic = textured(48, 48, 6);
        let cfg = EvalConfig::default();
        let perfect = evaluate(&hr, &hr, &bic, &cfg).unwrap();
        assert_eq!(perfect.psnr_sr, PSNR_CAP);
        assert!((perfect.delta_psnr - (PSNR_CAP - perfect.psnr_bicubic)).abs() < 1e-9);
        assert_eq!(perfect.sim_sr, 1.0);
        assert!(!perfect.failure);

        let same = evaluate(&hr, &bic, &bic, &cfg).unwrap();
        assert_eq!(same.delta_psnr, 0.0);
        assert_eq!(same.delta_ssim, 0.0);
        assert_eq!(same.sim_sr, same.sim_bicubic);
        assert!(!same.failure);
        assert!((0.0..=1.0).contains(&same.sim_sr));

        let text = same.to_record();
        assert_eq!(EvaluationReport::from_record(&text).unwrap(), same);
    }

    #[test]
    fn evaluate_flags_failures() {
        let hr = textured(40, 40, 7);
        let good = hr.map(|v| v + 1.0);
        let bad = hr.map(|v| v + 5.0);
        let r = evaluate(&hr, &bad, &good, &EvalConfig::default()).unwrap();
        assert!(r.delta_psnr < 0.0 && r.failure);
        assert!((r.delta_psnr - (r.psnr_sr - r.psnr_bicubic)).abs() < 1e-12);
    }
}
