//! Global rigid registration and per-patch local registration.
//!
//! The global stage finds the shift and rotation that minimize the MSE between
//! the HR image and the transformed upsampled LR image over their overlap, by
//! an exhaustive coarse grid on block-downsampled images followed by a fine
//! grid at full resolution. The local stage corrects residual distortion by
//! maximizing the normalized inner product between patches in a small square
//! neighborhood.
//!
//! Transform convention: for a source image with center `c`, the transformed
//! image satisfies `out(p) = src(R(-theta) (p - s - c) + c)` where `s` is the
//! shift `(shift_x, shift_y)` in (column, row) order. Registering `up` to `hr`
//! means finding the transform for which `apply_transform(up) ~= hr`.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{check_side, downsample, extract_patch, variance, Border, GrayImage, Patch};

/// Shift + rotation aligning the upsampled LR image onto the HR image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlobalTransform {
    /// Column shift in pixels.
    pub shift_x: f64,
    /// Row shift in pixels.
    pub shift_y: f64,
    /// Rotation in degrees about the source image center.
    pub theta: f64,
    /// Mean squared error on the overlap at this transform.
    pub mse: f64,
}

impl GlobalTransform {
    pub fn identity() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    pub fn new(shift_x: f64, shift_y: f64, theta: f64) -> Self {
        Self {
            shift_x,
            shift_y,
            theta,
            mse: 0.0,
        }
    }

    pub fn inverse(&self) -> Self {
        // Same center, rotation -theta, shift -R(-theta) s.
        let (sin, cos) = (-self.theta).to_radians().sin_cos();
        let sx = -(cos * self.shift_x - sin * self.shift_y);
        let sy = -(sin * self.shift_x + cos * self.shift_y);
        Self::new(sx, sy, -self.theta)
    }

    /// Serializes as a small `key = value` record.
    pub fn to_record(&self) -> String {
        toml::to_string(self).expect("transform serializes")
    }

    pub fn from_record(text: &str) -> Result<Self> {
        let t: Self = toml::from_str(text).map_err(|e| Error::Record(e.to_string()))?;
        if !(t.shift_x.is_finite() && t.shift_y.is_finite() && t.theta.is_finite()) {
            return Err(Error::Record("non-finite transform parameter".into()));
        }
        Ok(t)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_record()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_record(&text)
    }
}

/// Coarse-to-fine grid for [`global_register`]. Shifts are in full-resolution
/// pixels, angles in degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchSpace {
    pub coarse_factor: usize,
    pub coarse_shift_range: u32,
    pub coarse_shift_step: u32,
    pub theta_range: f64,
    pub coarse_theta_step: f64,
    pub fine_shift_range: u32,
    pub fine_theta_range: f64,
    pub fine_theta_step: f64,
    /// Minimum overlap as a fraction of the HR image area.
    pub min_overlap: f64,
    /// Number of best coarse candidates, at distinct angles, refined at full resolution.
    pub coarse_candidates: usize,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            coarse_factor: 4,
            coarse_shift_range: 64,
            coarse_shift_step: 4,
            theta_range: 5.0,
            coarse_theta_step: 0.5,
            fine_shift_range: 4,
            fine_theta_range: 0.5,
            fine_theta_step: 0.1,
            min_overlap: 0.5,
            coarse_candidates: 3,
        }
    }
}

impl SearchSpace {
    fn validate(&self) -> Result<()> {
        if self.coarse_factor < 2 {
            return Err(Error::param("coarse_factor must be >= 2"));
        }
        if self.coarse_shift_step == 0 {
            return Err(Error::param("coarse_shift_step must be positive"));
        }
        let steps = [self.coarse_theta_step, self.fine_theta_step];
        if steps.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::param("theta steps must be positive"));
        }
        if !(self.theta_range.is_finite() && self.theta_range >= 0.0)
            || !(self.fine_theta_range.is_finite() && self.fine_theta_range >= 0.0)
        {
            return Err(Error::param("theta ranges must be non-negative"));
        }
        if self.coarse_candidates == 0 {
            return Err(Error::param("coarse_candidates must be positive"));
        }
        if !(self.min_overlap > 0.0 && self.min_overlap <= 1.0) {
            return Err(Error::param("min_overlap must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Angle grid `center + i * step` for integer `i`, restricted to `[-limit, limit]`.
fn angle_grid(center: f64, half_width: f64, step: f64, limit: f64) -> Vec<f64> {
    let n = (half_width / step + 1e-9).floor() as i64;
    (-n..=n)
        .map(|i| canonical_angle(center + i as f64 * step))
        .filter(|a| a.abs() <= limit + 1e-9)
        .collect()
}

/// Rounds away accumulated binary error so grid angles compare exactly.
fn canonical_angle(a: f64) -> f64 {
    let r = (a * 1e6).round() / 1e6;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

/// Image after a geometric transform, with a per-pixel validity mask.
#[derive(Debug, Clone)]
pub struct Warped {
    pub image: GrayImage,
    /// `false` where the source coordinate fell outside the source image.
    pub valid: Vec<bool>,
}

impl Warped {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

fn source_center(img: &GrayImage) -> (f64, f64) {
    (
        (img.height() as f64 - 1.0) / 2.0,
        (img.width() as f64 - 1.0) / 2.0,
    )
}

/// Resamples `src` into a `width`x`height` frame under `t`.
pub fn warp_into(src: &GrayImage, width: usize, height: usize, t: &GlobalTransform) -> Warped {
    let (cy, cx) = source_center(src);
    let (sin, cos) = (-t.theta).to_radians().sin_cos();
    let eps = 1e-9;
    let (max_y, max_x) = (src.height() as f64 - 1.0 + eps, src.width() as f64 - 1.0 + eps);
    let rows: Vec<(Vec<f64>, Vec<bool>)> = (0..height)
        .into_par_iter()
        .map(|r| {
            let mut vals = Vec::with_capacity(width);
            let mut valid = Vec::with_capacity(width);
            for c in 0..width {
                let dx = c as f64 - t.shift_x - cx;
                let dy = r as f64 - t.shift_y - cy;
                let x = cos * dx - sin * dy + cx;
                let y = sin * dx + cos * dy + cy;
                valid.push(x >= -eps && y >= -eps && x <= max_x && y <= max_y);
                vals.push(src.sample_bicubic(y, x));
            }
            (vals, valid)
        })
        .collect();
    let mut data = Vec::with_capacity(width * height);
    let mut valid = Vec::with_capacity(width * height);
    for (v, m) in rows {
        data.extend(v);
        valid.extend(m);
    }
    Warped {
        image: GrayImage::new(width, height, data).expect("finite warp of a finite image"),
        valid,
    }
}

/// Rotates about the image center, then shifts, resampling bicubically.
pub fn apply_transform(img: &GrayImage, t: &GlobalTransform) -> Warped {
    warp_into(img, img.width(), img.height(), t)
}

/// Rotation-only warp of `src` in its own frame; integer shifts are then pure index offsets.
fn rotated(src: &GrayImage, theta: f64) -> Warped {
    apply_transform(src, &GlobalTransform::new(0.0, 0.0, theta))
}

/// MSE between `hr` and the rotated source shifted by integer `(sx, sy)`, or
/// `None` when the overlap is smaller than `min_pixels`.
fn shifted_mse(hr: &GrayImage, rot: &Warped, sx: i64, sy: i64, min_pixels: usize) -> Option<f64> {
    let (sw, sh) = (rot.image.width() as i64, rot.image.height() as i64);
    let (hw, hh) = (hr.width() as i64, hr.height() as i64);
    // HR pixel p pairs with source pixel p - s.
    let r0 = sy.max(0);
    let r1 = (sh + sy).min(hh);
    let c0 = sx.max(0);
    let c1 = (sw + sx).min(hw);
    if r0 >= r1 || c0 >= c1 {
        return None;
    }
    if ((r1 - r0) * (c1 - c0)) < min_pixels as i64 {
        return None;
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    let src = rot.image.data();
    for r in r0..r1 {
        let hr_row = hr.row(r as usize);
        let base = ((r - sy) * sw) as usize;
        for c in c0..c1 {
            let idx = base + (c - sx) as usize;
            if rot.valid[idx] {
                let d = hr_row[c as usize] - src[idx];
                sum += d * d;
                count += 1;
            }
        }
    }
    (count >= min_pixels && count > 0).then(|| sum / count as f64)
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    sx: i64,
    sy: i64,
    theta: f64,
    mse: f64,
}

/// Lower MSE first, then smallest (|theta|, |x|+|y|), then lexicographic (theta, x, y).
fn candidate_order(a: &Candidate, b: &Candidate) -> Ordering {
    a.mse
        .total_cmp(&b.mse)
        .then(a.theta.abs().total_cmp(&b.theta.abs()))
        .then((a.sx.abs() + a.sy.abs()).cmp(&(b.sx.abs() + b.sy.abs())))
        .then(a.theta.total_cmp(&b.theta))
        .then(a.sx.cmp(&b.sx))
        .then(a.sy.cmp(&b.sy))
}

/// Best candidate of each angle that has one, ordered best first.
fn grid_search(
    hr: &GrayImage,
    src: &GrayImage,
    thetas: &[f64],
    shifts_x: &[i64],
    shifts_y: &[i64],
    min_overlap: f64,
) -> Vec<Candidate> {
    let min_pixels = ((hr.width() * hr.height()) as f64 * min_overlap).ceil() as usize;
    let per_theta: Vec<Option<Candidate>> = thetas
        .par_iter()
        .map(|&theta| {
            let rot = rotated(src, theta);
            let mut best: Option<Candidate> = None;
            for &sy in shifts_y {
                for &sx in shifts_x {
                    if let Some(mse) = shifted_mse(hr, &rot, sx, sy, min_pixels) {
                        let cand = Candidate { sx, sy, theta, mse };
                        if best.is_none_or(|b| candidate_order(&cand, &b) == Ordering::Less) {
                            best = Some(cand);
                        }
                    }
                }
            }
            best
        })
        .collect();
    let mut best: Vec<Candidate> = per_theta.into_iter().flatten().collect();
    best.sort_by(candidate_order);
    best
}

/// Bound on how often a fine window may be re-centered.
const MAX_RECENTER: usize = 8;

/// Full-resolution window search around `start = (x, y, theta)`. While the
/// optimum lies on the window edge and keeps improving, the window is
/// re-centered on it, so a coarse estimate off by more than the window still
/// converges on the grid.
fn refine(hr: &GrayImage, up: &GrayImage, start: (i64, i64, f64), search: &SearchSpace) -> Option<Candidate> {
    let fr = search.fine_shift_range as i64;
    let theta_reach = (search.fine_theta_range / search.fine_theta_step + 1e-9).floor() * search.fine_theta_step;
    let mut center = start;
    let mut best: Option<Candidate> = None;
    for _ in 0..MAX_RECENTER {
        let xs: Vec<i64> = (-fr..=fr).map(|d| center.0 + d).collect();
        let ys: Vec<i64> = (-fr..=fr).map(|d| center.1 + d).collect();
        let thetas = angle_grid(center.2, search.fine_theta_range, search.fine_theta_step, search.theta_range);
        let Some(cand) = grid_search(hr, up, &thetas, &xs, &ys, search.min_overlap).into_iter().next() else {
            break;
        };
        if best.is_some_and(|b| candidate_order(&cand, &b) != Ordering::Less) {
            break;
        }
        best = Some(cand);
        let shift_edge = fr > 0 && ((cand.sx - center.0).abs() == fr || (cand.sy - center.1).abs() == fr);
        let theta_edge = theta_reach > 0.0
            && (cand.theta - center.2).abs() >= theta_reach - 1e-9
            && cand.theta.abs() < search.theta_range - 1e-9;
        if !(shift_edge || theta_edge) {
            break;
        }
        center = (cand.sx, cand.sy, cand.theta);
    }
    best
}

/// Coarse-to-fine grid search for the MSE-minimizing shift and rotation.
pub fn global_register(hr: &GrayImage, up: &GrayImage, search: &SearchSpace) -> Result<GlobalTransform> {
    search.validate()?;
    let f = search.coarse_factor;

    // Coarse stage on block-averaged images.
    let hr_c = downsample(hr, f)?;
    let up_c = downsample(up, f)?;
    let range_c = (search.coarse_shift_range as f64 / f as f64).round() as i64;
    let step_c = ((search.coarse_shift_step as f64 / f as f64).round() as i64).max(1);
    let coarse_shifts: Vec<i64> = (-range_c..=range_c)
        .filter(|s| s.rem_euclid(step_c) == 0)
        .collect();
    let coarse_thetas = angle_grid(0.0, search.theta_range, search.coarse_theta_step, search.theta_range);
    if coarse_thetas.is_empty() || coarse_shifts.is_empty() {
        return Err(Error::Registration("search space is empty".into()));
    }
    let coarse = grid_search(
        &hr_c,
        &up_c,
        &coarse_thetas,
        &coarse_shifts,
        &coarse_shifts,
        search.min_overlap,
    );
    if coarse.is_empty() {
        return Err(Error::Registration(
            "no candidate reaches the minimum overlap at the coarse stage".into(),
        ));
    }

    // Fine stage at full resolution around each retained coarse optimum.
    let fine = coarse
        .iter()
        .take(search.coarse_candidates)
        .filter_map(|c| refine(hr, up, (c.sx * f as i64, c.sy * f as i64, c.theta), search))
        .min_by(candidate_order)
        .ok_or_else(|| {
            Error::Registration("no candidate reaches the minimum overlap at the fine stage".into())
        })?;
    Ok(GlobalTransform {
        shift_x: fine.sx as f64,
        shift_y: fine.sy as f64,
        theta: fine.theta,
        mse: fine.mse,
    })
}

/// Normalized inner product of two equal-length vectors; `None` if either has zero norm.
fn normalized_inner(a: &[f64], b: &[f64]) -> Option<f64> {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some(dot / (na.sqrt() * nb.sqrt()))
    }
}

/// Finds the HR patch center near `center` that best matches the `reg` patch
/// at `center` under the normalized inner product.
pub fn local_register(
    hr: &GrayImage,
    reg: &GrayImage,
    center: (usize, usize),
    n: usize,
    radius: usize,
) -> Result<(usize, usize)> {
    check_side(n)?;
    let (i, j) = center;
    let half = n / 2;
    let reach = half + radius;
    if i < reach || j < reach || i + reach >= hr.height() || j + reach >= hr.width() {
        return Err(Error::param(format!(
            "search window of radius {radius} around ({i}, {j}) is not interior to the HR image"
        )));
    }
    let query = extract_patch(reg, center, n, Border::Interior)?;
    if query.data().iter().all(|&v| v == 0.0) {
        return Err(Error::DegeneratePatch { row: i, col: j });
    }
    let mut buf = vec![0.0; n * n];
    let r = radius as isize;
    let mut best: Option<(f64, isize, isize)> = None;
    for di in -r..=r {
        for dj in -r..=r {
            let ci = (i as isize + di) as usize;
            let cj = (j as isize + dj) as usize;
            crate::image::fill_patch_clamped(hr, ci, cj, n, &mut buf);
            let score = normalized_inner(&buf, query.data())
                .ok_or(Error::DegeneratePatch { row: ci, col: cj })?;
            let better = match best {
                None => true,
                Some((s, bi, bj)) => match score.total_cmp(&s) {
                    Ordering::Greater => true,
                    Ordering::Less => false,
                    Ordering::Equal => (di * di + dj * dj, di, dj) < (bi * bi + bj * bj, bi, bj),
                },
            };
            if better {
                best = Some((score, di, dj));
            }
        }
    }
    let (_, di, dj) = best.expect("non-empty neighborhood");
    Ok(((i as isize + di) as usize, (j as isize + dj) as usize))
}

/// Location of a matched pair: `reg` patch at `center`, HR patch at `center + displacement`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchMatch {
    pub center: (usize, usize),
    pub displacement: (isize, isize),
    /// Whether the reg-side variance exceeded the threshold and local registration ran.
    pub textured: bool,
}

impl PatchMatch {
    pub fn hr_center(&self) -> (usize, usize) {
        (
            (self.center.0 as isize + self.displacement.0) as usize,
            (self.center.1 as isize + self.displacement.1) as usize,
        )
    }
}

/// Matched HR patch and registered upsampled-LR patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub hr: Patch,
    pub lr_up: Patch,
    pub displacement: (isize, isize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchConfig {
    pub n: usize,
    pub variance_threshold: f64,
    pub radius: usize,
    pub stride: usize,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            n: 9,
            variance_threshold: 100.0,
            radius: 5,
            stride: 1,
        }
    }
}

impl MatchConfig {
    fn validate(&self) -> Result<()> {
        check_side(self.n)?;
        if self.stride == 0 {
            return Err(Error::param("stride must be positive"));
        }
        if !self.variance_threshold.is_finite() {
            return Err(Error::param("variance threshold must be finite"));
        }
        Ok(())
    }
}

/// Locates matched pairs without materializing patch data.
///
/// Centers lie on the stride grid, far enough from the border that both the
/// reg patch and every local-search candidate are interior.
pub fn match_locations(hr: &GrayImage, reg: &GrayImage, cfg: &MatchConfig) -> Result<Vec<PatchMatch>> {
    cfg.validate()?;
    if !hr.same_dims(reg) {
        return Err(Error::DimensionMismatch(format!(
            "HR {:?} vs registered {:?}",
            hr.dims(),
            reg.dims()
        )));
    }
    let reach = cfg.n / 2 + cfg.radius;
    if hr.height() <= 2 * reach || hr.width() <= 2 * reach {
        return Ok(Vec::new());
    }
    let rows: Vec<usize> = (reach..hr.height() - reach).step_by(cfg.stride).collect();
    let cols: Vec<usize> = (reach..hr.width() - reach).step_by(cfg.stride).collect();
    let per_row: Result<Vec<Vec<PatchMatch>>> = rows
        .par_iter()
        .map(|&i| {
            let mut out = Vec::with_capacity(cols.len());
            let mut buf = vec![0.0; cfg.n * cfg.n];
            for &j in &cols {
                crate::image::fill_patch_clamped(reg, i, j, cfg.n, &mut buf);
                let textured = variance(&buf) > cfg.variance_threshold;
                let displacement = if textured {
                    let (bi, bj) = local_register(hr, reg, (i, j), cfg.n, cfg.radius)?;
                    (bi as isize - i as isize, bj as isize - j as isize)
                } else {
                    (0, 0)
                };
                out.push(PatchMatch {
                    center: (i, j),
                    displacement,
                    textured,
                });
            }
            Ok(out)
        })
        .collect();
    Ok(per_row?.into_iter().flatten().collect())
}

pub fn materialize_pair(hr: &GrayImage, reg: &GrayImage, m: &PatchMatch, n: usize) -> Result<PatchPair> {
    Ok(PatchPair {
        hr: extract_patch(hr, m.hr_center(), n, Border::Interior)?,
        lr_up: extract_patch(reg, m.center, n, Border::Interior)?,
        displacement: m.displacement,
    })
}

/// Local registration over the stride grid; textured patches are searched,
/// the rest are paired in place.
pub fn match_patches(hr: &GrayImage, reg: &GrayImage, cfg: &MatchConfig) -> Result<Vec<PatchPair>> {
    match_locations(hr, reg, cfg)?
        .iter()
        .map(|m| materialize_pair(hr, reg, m, cfg.n))
        .collect()
}

/// One `i,j,di,dj` line per textured match, with a header.
pub fn displacement_csv(matches: &[PatchMatch]) -> String {
    let mut out = String::from("i,j,di,dj\n");
    for m in matches.iter().filter(|m| m.textured) {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            m.center.0, m.center.1, m.displacement.0, m.displacement.1
        );
    }
    out
}
