//! Synthetic specimens and a paired-acquisition degradation model.

use std::f64::consts::{PI, TAU};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ImagePair;
use crate::error::{Error, Result};
use crate::image::{downsample, gaussian_blur, GrayImage};
use crate::registration::GlobalTransform;

/// How the LR acquisition departs from the HR one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DegradationSpec {
    /// Gaussian blur applied before 2x block averaging, in HR pixels.
    pub blur_sigma: f64,
    pub noise_sigma_hr: f64,
    pub noise_sigma_lr: f64,
    pub contrast_gain: f64,
    pub contrast_offset: f64,
    /// `(x, y)` shift in HR pixels.
    pub global_shift: (f64, f64),
    /// Degrees.
    pub global_rotation: f64,
    /// Per-axis bound on the local displacement, in HR pixels.
    pub local_warp_amplitude: f64,
    /// Wavelength of the local displacement field, in HR pixels.
    pub local_warp_scale: f64,
    pub seed: u64,
}

impl Default for DegradationSpec {
    /// No degradation: the LR image is the exact block average of the truth.
    fn default() -> Self {
        Self {
            blur_sigma: 0.0,
            noise_sigma_hr: 0.0,
            noise_sigma_lr: 0.0,
            contrast_gain: 1.0,
            contrast_offset: 0.0,
            global_shift: (0.0, 0.0),
            global_rotation: 0.0,
            local_warp_amplitude: 0.0,
            local_warp_scale: 64.0,
            seed: 0,
        }
    }
}

impl DegradationSpec {
    pub fn validate(&self) -> Result<()> {
        let amplitudes = [
            ("blur_sigma", self.blur_sigma),
            ("noise_sigma_hr", self.noise_sigma_hr),
            ("noise_sigma_lr", self.noise_sigma_lr),
            ("local_warp_amplitude", self.local_warp_amplitude),
        ];
        for (name, v) in amplitudes {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::param(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.contrast_gain.is_finite() && self.contrast_gain > 0.0) {
            return Err(Error::param("contrast_gain must be positive"));
        }
        let others = [
            self.contrast_offset,
            self.global_shift.0,
            self.global_shift.1,
            self.global_rotation,
        ];
        if others.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("degradation parameters must be finite"));
        }
        if !(self.local_warp_scale.is_finite() && self.local_warp_scale > 0.0) {
            return Err(Error::param("local_warp_scale must be positive"));
        }
        Ok(())
    }
}

/// One sinusoidal term of the local displacement field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarpTerm {
    /// Spatial frequency along columns, radians per pixel.
    pub kx: f64,
    /// Spatial frequency along rows, radians per pixel.
    pub ky: f64,
    pub phase: f64,
    pub weight_x: f64,
    pub weight_y: f64,
}

/// Smooth displacement field; each axis is bounded by the sum of its absolute weights.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct WarpField {
    pub terms: Vec<WarpTerm>,
}

const WARP_TERMS: usize = 4;

impl WarpField {
    fn random(amplitude: f64, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut terms: Vec<WarpTerm> = (0..WARP_TERMS)
            .map(|_| {
                let dir = rng.random_range(0.0..TAU);
                let k = TAU / scale * rng.random_range(0.7..1.3);
                WarpTerm {
                    kx: k * dir.cos(),
                    ky: k * dir.sin(),
                    phase: rng.random_range(0.0..TAU),
                    weight_x: rng.random_range(-1.0..1.0),
                    weight_y: rng.random_range(-1.0..1.0),
                }
            })
            .collect();
        let sx: f64 = terms.iter().map(|t| t.weight_x.abs()).sum();
        let sy: f64 = terms.iter().map(|t| t.weight_y.abs()).sum();
        for t in &mut terms {
            t.weight_x *= if sx > 0.0 { amplitude / sx } else { 0.0 };
            t.weight_y *= if sy > 0.0 { amplitude / sy } else { 0.0 };
        }
        Self { terms }
    }

    /// `(dx, dy)` displacement at `(row, col)`.
    pub fn displacement(&self, row: f64, col: f64) -> (f64, f64) {
        self.terms.iter().fold((0.0, 0.0), |(dx, dy), t| {
            let s = (t.kx * col + t.ky * row + t.phase).sin();
            (dx + t.weight_x * s, dy + t.weight_y * s)
        })
    }

    /// Largest per-axis displacement the field can produce.
    pub fn bound(&self) -> f64 {
        let sx: f64 = self.terms.iter().map(|t| t.weight_x.abs()).sum();
        let sy: f64 = self.terms.iter().map(|t| t.weight_y.abs()).sum();
        sx.max(sy)
    }
}

/// What the generator did, for validating registration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// The transform that maps the upsampled LR image back onto the HR frame.
    pub transform: GlobalTransform,
    pub warp: WarpField,
    pub spec: DegradationSpec,
}

impl GroundTruth {
    pub fn to_record(&self) -> String {
        toml::to_string(self).expect("ground truth serializes")
    }

    pub fn from_record(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Record(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_record()).map_err(|e| Error::io(path, e))
    }
}

/// Simulates a paired acquisition of `truth`.
///
/// The LR frame sees the specimen displaced: LR-frame point `q` images the
/// truth at `R(theta)(q - c) + c + s + w(q)`, with `c` the image center, `s`
/// the global shift and `w` the local warp. Contrast is then changed, the
/// result blurred, 2x block-averaged and made noisy. The HR image is the
/// truth plus noise. Both are clamped to `[0, 255]`.
pub fn synthesize_pair(truth: &GrayImage, spec: &DegradationSpec) -> Result<(ImagePair, GroundTruth)> {
    spec.validate()?;
    let (w, h) = truth.dims();
    if w % 2 != 0 || h % 2 != 0 {
        return Err(Error::param(format!("truth dims must be even, got {w}x{h}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let warp = if spec.local_warp_amplitude > 0.0 {
        WarpField::random(spec.local_warp_amplitude, spec.local_warp_scale, &mut rng)
    } else {
        WarpField::default()
    };

    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = spec.global_rotation.to_radians().sin_cos();
    let (sx, sy) = spec.global_shift;
    let identity_geometry = spec.global_rotation == 0.0 && sx == 0.0 && sy == 0.0 && warp.terms.is_empty();
    let displaced = if identity_geometry {
        truth.clone()
    } else {
        GrayImage::from_fn(w, h, |r, c| {
            let (dx, dy) = (c as f64 - cx, r as f64 - cy);
            let (wx, wy) = warp.displacement(r as f64, c as f64);
            let x = cos * dx - sin * dy + cx + sx + wx;
            let y = sin * dx + cos * dy + cy + sy + wy;
            truth.sample_bicubic(y, x)
        })
    };
    let contrasted = if spec.contrast_gain == 1.0 && spec.contrast_offset == 0.0 {
        displaced
    } else {
        displaced.map(|v| spec.contrast_gain * v + spec.contrast_offset)
    };
    let lr_clean = downsample(&gaussian_blur(&contrasted, spec.blur_sigma), 2)?;

    let hr = add_noise(truth, spec.noise_sigma_hr, &mut rng)?;
    let lr = add_noise(&lr_clean, spec.noise_sigma_lr, &mut rng)?;
    let truth_record = GroundTruth {
        transform: GlobalTransform::new(sx, sy, spec.global_rotation),
        warp,
        spec: spec.clone(),
    };
    Ok((ImagePair::new("synthetic", hr, lr), truth_record))
}

fn add_noise(img: &GrayImage, sigma: f64, rng: &mut ChaCha8Rng) -> Result<GrayImage> {
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::param(e.to_string()))?;
    let data = img
        .data()
        .iter()
        .map(|&v| {
            let noisy = if sigma > 0.0 { v + normal.sample(rng) } else { v };
            noisy.clamp(0.0, 255.0)
        })
        .collect();
    GrayImage::new(img.width(), img.height(), data)
}

/// Texture parameters of [`synthetic_specimen_with`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpecimenSpec {
    pub host_level: f64,
    /// Peak amplitude of each host grain wave.
    pub grain_amplitude: f64,
    /// Range of grain wavelengths, px.
    pub grain_period: (f64, f64),
    pub grain_waves: usize,
    /// Peak amplitude of each wave of the particle interior texture.
    pub inner_amplitude: f64,
    /// Particle rim softness, px.
    pub rim_width: f64,
    /// Mean area per particle, px^2.
    pub area_per_particle: f64,
    /// Range of particle semi-axes, px.
    pub particle_radius: (f64, f64),
}

impl Default for SpecimenSpec {
    fn default() -> Self {
        Self {
            host_level: 70.0,
            grain_amplitude: 4.0,
            grain_period: (6.0, 14.0),
            grain_waves: 6,
            inner_amplitude: 3.0,
            rim_width: 0.3,
            area_per_particle: 2500.0,
            particle_radius: (4.0, 16.0),
        }
    }
}

/// A specimen-like test image with the default texture.
pub fn synthetic_specimen(width: usize, height: usize, seed: u64) -> GrayImage {
    synthetic_specimen_with(width, height, seed, &SpecimenSpec::default())
}

/// Bright particles with sharp rims and inner texture on a darker, grainy host.
pub fn synthetic_specimen_with(width: usize, height: usize, seed: u64, spec: &SpecimenSpec) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    struct Wave {
        kx: f64,
        ky: f64,
        phase: f64,
        amp: f64,
    }
    let mut waves = |count: usize, period: (f64, f64), amp: f64| -> Vec<Wave> {
        (0..count)
            .map(|_| {
                let dir = rng.random_range(0.0..PI);
                let k = TAU / rng.random_range(period.0..period.1);
                Wave {
                    kx: k * dir.cos(),
                    ky: k * dir.sin(),
                    phase: rng.random_range(0.0..TAU),
                    amp: amp * rng.random_range(0.5..1.0),
                }
            })
            .collect()
    };
    let grain = waves(spec.grain_waves, spec.grain_period, spec.grain_amplitude);
    let inner = waves(4, (5.0, 12.0), spec.inner_amplitude);

    struct Particle {
        cy: f64,
        cx: f64,
        ry: f64,
        rx: f64,
        angle: f64,
        level: f64,
    }
    let area = (width * height) as f64;
    let count = ((area / spec.area_per_particle).round() as usize).max(3);
    let radius = spec.particle_radius.0..spec.particle_radius.1;
    let particles: Vec<Particle> = (0..count)
        .map(|_| Particle {
            cy: rng.random_range(0.0..height as f64),
            cx: rng.random_range(0.0..width as f64),
            ry: rng.random_range(radius.clone()),
            rx: rng.random_range(radius.clone()),
            angle: rng.random_range(0.0..PI),
            level: [150.0, 185.0, 220.0][rng.random_range(0..3)],
        })
        .collect();

    let eval = |waves: &[Wave], r: f64, c: f64| -> f64 {
        waves
            .iter()
            .map(|w| w.amp * (w.kx * c + w.ky * r + w.phase).sin())
            .sum()
    };
    let rim = spec.rim_width.max(1e-3);
    GrayImage::from_fn(width, height, |r, c| {
        let (rf, cf) = (r as f64, c as f64);
        let mut v = spec.host_level + eval(&grain, rf, cf);
        for p in &particles {
            let (dy, dx) = (rf - p.cy, cf - p.cx);
            let (s, co) = p.angle.sin_cos();
            let u = (co * dx + s * dy) / p.rx;
            let w = (-s * dx + co * dy) / p.ry;
            // Signed distance to the rim, in pixels, approximately.
            let dist = ((u * u + w * w).sqrt() - 1.0) * p.rx.min(p.ry);
            let inside = 1.0 / (1.0 + (dist / rim).exp());
            if inside > 1e-4 {
                let target = p.level + eval(&inner, rf, cf);
                v += inside * (target - v);
            }
        }
        v.clamp(0.0, 255.0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::bicubic_upsample;
    use crate::registration::{global_register, SearchSpace};

    #[test]
    fn identity_degradation_is_block_average() {
        let truth = synthetic_specimen(64, 48, 3);
        let (pair, gt) = synthesize_pair(&truth, &DegradationSpec::default()).unwrap();
        assert_eq!(pair.hr, truth);
        assert_eq!(pair.lr, downsample(&truth, 2).unwrap());
        assert_eq!(gt.transform, GlobalTransform::identity());
        assert!(gt.warp.terms.is_empty());
    }

    #[test]
    fn deterministic_under_seed() {
        let truth = synthetic_specimen(64, 64, 1);
        let spec = DegradationSpec {
            noise_sigma_hr: 4.0,
            noise_sigma_lr: 8.0,
            local_warp_amplitude: 2.0,
            global_rotation: 1.0,
            seed: 9,
            ..Default::default()
        };
        let (a, ga) = synthesize_pair(&truth, &spec).unwrap();
        let (b, gb) = synthesize_pair(&truth, &spec).unwrap();
        assert_eq!(a.hr, b.hr);
        assert_eq!(a.lr, b.lr);
        assert_eq!(ga, gb);
        let (c, _) = synthesize_pair(&truth, &DegradationSpec { seed: 10, ..spec }).unwrap();
        assert_ne!(a.lr, c.lr);
        assert_eq!(synthetic_specimen(64, 64, 1), truth);
    }

    #[test]
    fn warp_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let field = WarpField::random(2.0, 40.0, &mut rng);
        assert!((field.bound() - 2.0).abs() < 1e-12);
        for r in (0..200).step_by(7) {
            for c in (0..200).step_by(5) {
                let (dx, dy) = field.displacement(r as f64, c as f64);
                assert!(dx.abs() <= 2.0 + 1e-12 && dy.abs() <= 2.0 + 1e-12);
            }
        }
    }

    #[test]
    fn registration_recovers_generator_shift() {
        let truth = synthetic_specimen(128, 128, 5);
        let spec = DegradationSpec {
            global_shift: (3.0, -2.0),
            ..Default::default()
        };
        let (pair, gt) = synthesize_pair(&truth, &spec).unwrap();
        let up = bicubic_upsample(&pair.lr, 2).unwrap();
        let t = global_register(&pair.hr, &up, &SearchSpace::default()).unwrap();
        assert_eq!((t.shift_x, t.shift_y, t.theta), (3.0, -2.0, 0.0));
        assert_eq!((gt.transform.shift_x, gt.transform.shift_y), (3.0, -2.0));
    }

    #[test]
    fn ground_truth_record_round_trip() {
        let truth = synthetic_specimen(32, 32, 2);
        let spec = DegradationSpec {
            local_warp_amplitude: 1.5,
            global_shift: (1.25, -0.5),
            seed: 3,
            ..Default::default()
        };
        let (_, gt) = synthesize_pair(&truth, &spec).unwrap();
        assert_eq!(GroundTruth::from_record(&gt.to_record()).unwrap(), gt);
    }

    #[test]
    fn rejects_bad_specs() {
        let truth = GrayImage::filled(16, 16, 10.0);
        let bad = [
            DegradationSpec { blur_sigma: -1.0, ..Default::default() },
            DegradationSpec { noise_sigma_lr: f64::NAN, ..Default::default() },
            DegradationSpec { contrast_gain: 0.0, ..Default::default() },
            DegradationSpec { local_warp_scale: 0.0, ..Default::default() },
        ];
        for spec in &bad {
            assert!(synthesize_pair(&truth, spec).is_err(), "{spec:?}");
        }
        assert!(synthesize_pair(&GrayImage::filled(15, 16, 0.0), &DegradationSpec::default()).is_err());
    }

    #[test]
    fn specimen_has_texture_and_range() {
        let img = synthetic_specimen(96, 96, 8);
        let (lo, hi) = img.min_max();
        assert!(lo >= 0.0 && hi <= 255.0);
        assert!(hi - lo > 100.0);
    }
}
