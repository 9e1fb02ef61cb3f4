//! Canny edge detection and the edge-map agreement score.

use std::collections::VecDeque;

use super::binary::EdgeMap;
use crate::error::{Error, Result};
use crate::image::{gaussian_blur, GrayImage};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CannyConfig {
    /// High hysteresis threshold as a fraction of the largest gradient magnitude.
    pub high: f64,
    /// Low threshold as a fraction of the high one.
    pub low_ratio: f64,
    /// Pre-smoothing Gaussian sigma.
    pub sigma: f64,
}

impl CannyConfig {
    pub fn new(high: f64) -> Self {
        Self {
            high,
            low_ratio: 0.4,
            sigma: 1.4,
        }
    }
}

impl Default for CannyConfig {
    fn default() -> Self {
        Self::new(0.2)
    }
}

/// Canny with the default smoothing and low/high ratio.
pub fn canny(img: &GrayImage, high_param: f64) -> Result<EdgeMap> {
    canny_with(img, &CannyConfig::new(high_param))
}

pub fn canny_with(img: &GrayImage, cfg: &CannyConfig) -> Result<EdgeMap> {
    if !(cfg.high > 0.0 && cfg.high < 1.0) {
        return Err(Error::param(format!(
            "canny threshold must lie in (0, 1), got {}",
            cfg.high
        )));
    }
    if !(cfg.low_ratio > 0.0 && cfg.low_ratio <= 1.0) {
        return Err(Error::param("canny low ratio must lie in (0, 1]"));
    }
    let smooth = gaussian_blur(img, cfg.sigma);
    let (w, h) = smooth.dims();
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    let mut mag = vec![0.0f64; w * h];
    for r in 0..h as isize {
        for c in 0..w as isize {
            let p = |dr: isize, dc: isize| smooth.get_clamped(r + dr, c + dc);
            let x = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
            let y = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
            let i = r as usize * w + c as usize;
            gx[i] = x;
            gy[i] = y;
            mag[i] = x.hypot(y);
        }
    }
    let max_mag = mag.iter().copied().fold(0.0, f64::max);
    // Relative threshold on a flat image: anything above rounding noise is spurious.
    if max_mag <= 1e-9 {
        return Ok(EdgeMap::empty(w, h));
    }

    // Non-maximum suppression along the quantized gradient direction. A pixel
    // must strictly beat its backward neighbor and tie-or-beat its forward one,
    // so two-pixel plateaus thin to a single pixel.
    let mut thin = vec![0.0; w * h];
    for r in 1..h.saturating_sub(1) {
        for c in 1..w.saturating_sub(1) {
            let i = r * w + c;
            let m = mag[i];
            if m == 0.0 {
                continue;
            }
            let angle = gy[i].atan2(gx[i]).to_degrees().rem_euclid(180.0);
            let (dr, dc): (isize, isize) = if !(22.5..157.5).contains(&angle) {
                (0, 1)
            } else if angle < 67.5 {
                (1, 1)
            } else if angle < 112.5 {
                (1, 0)
            } else {
                (1, -1)
            };
            let fwd = mag[(r as isize + dr) as usize * w + (c as isize + dc) as usize];
            let bwd = mag[(r as isize - dr) as usize * w + (c as isize - dc) as usize];
            if m >= fwd && m > bwd {
                thin[i] = m;
            }
        }
    }

    let high = cfg.high * max_mag;
    let low = cfg.low_ratio * high;
    let mut edges = EdgeMap::empty(w, h);
    let mut queue = VecDeque::new();
    for (i, &m) in thin.iter().enumerate() {
        if m >= high {
            edges.set(i / w, i % w, true);
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (r, c) = ((i / w) as isize, (i % w) as isize);
        for dr in -1..=1 {
            for dc in -1..=1 {
                let (nr, nc) = (r + dr, c + dc);
                if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                    continue;
                }
                let (nr, nc) = (nr as usize, nc as usize);
                let j = nr * w + nc;
                if thin[j] >= low && !edges.get(nr, nc) {
                    edges.set(nr, nc, true);
                    queue.push_back(j);
                }
            }
        }
    }
    Ok(edges)
}

/// `1 - |B_hr xor B_sr| / (|B_hr| + |B_sr|)`, or 1 when both maps are empty.
pub fn edge_similarity(b_hr: &EdgeMap, b_sr: &EdgeMap) -> Result<f64> {
    if b_hr.dims() != b_sr.dims() {
        return Err(Error::DimensionMismatch(format!(
            "edge maps {:?} vs {:?}",
            b_hr.dims(),
            b_sr.dims()
        )));
    }
    let total = b_hr.count() + b_sr.count();
    if total == 0 {
        return Ok(1.0);
    }
    let differ = b_hr
        .bits()
        .iter()
        .zip(b_sr.bits())
        .filter(|(a, b)| a != b)
        .count();
    Ok(1.0 - differ as f64 / total as f64)
}
