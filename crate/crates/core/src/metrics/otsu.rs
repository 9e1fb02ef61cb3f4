//! Otsu's global threshold and the derived foreground mask.

use super::binary::Mask;
use crate::image::GrayImage;
use crate::io::quantize;

/// Foreground components smaller than this are treated as noise.
pub const MIN_FOREGROUND_COMPONENT: usize = 16;

pub fn histogram(img: &GrayImage) -> [u64; 256] {
    let mut hist = [0u64; 256];
    for &v in img.data() {
        hist[quantize(v) as usize] += 1;
    }
    hist
}

/// Threshold `t` maximizing the between-class variance of `{<= t}` vs `{> t}`.
///
/// The first maximizer wins. With fewer than two occupied bins no split is
/// possible and the highest occupied bin is returned, which leaves the
/// foreground empty.
pub fn otsu_threshold(hist: &[u64; 256]) -> u8 {
    let total: u64 = hist.iter().sum();
    if total == 0 {
        return 0;
    }
    let n = total as f64;
    let sum_total: u64 = hist.iter().enumerate().map(|(i, &h)| i as u64 * h).sum();
    let mean_total = sum_total as f64 / n;
    let (mut count0, mut sum0) = (0u64, 0u64);
    let mut best: Option<(u8, f64)> = None;
    for (t, &h) in hist.iter().enumerate() {
        count0 += h;
        sum0 += t as u64 * h;
        if count0 == 0 || count0 == total {
            continue;
        }
        let w0 = count0 as f64 / n;
        let w1 = (total - count0) as f64 / n;
        let num = mean_total * w0 - sum0 as f64 / n;
        let between = num * num / (w0 * w1);
        if best.is_none_or(|(_, b)| between > b) {
            best = Some((t as u8, between));
        }
    }
    match best {
        Some((t, _)) => t,
        None => hist.iter().rposition(|&h| h > 0).unwrap_or(0) as u8,
    }
}

/// Pixels brighter than the Otsu threshold, minus small isolated components.
pub fn otsu_mask(img: &GrayImage) -> Mask {
    let t = otsu_threshold(&histogram(img));
    let bits = img.data().iter().map(|&v| quantize(v) > t).collect();
    let mut mask = Mask::new(img.width(), img.height(), bits).expect("matching dims");
    mask.remove_small_components(MIN_FOREGROUND_COMPONENT);
    mask
}
