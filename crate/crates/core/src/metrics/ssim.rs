//! Mean SSIM with an 11x11 Gaussian window (sigma 1.5), over valid window positions only.

use crate::error::{Error, Result};
use crate::image::{gaussian_kernel, GrayImage};

pub const WINDOW: usize = 11;
pub const WINDOW_SIGMA: f64 = 1.5;
pub const C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
pub const C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

pub fn ssim(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    if !a.same_dims(b) {
        return Err(Error::DimensionMismatch(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    let (w, h) = a.dims();
    if w < WINDOW || h < WINDOW {
        return Err(Error::param(format!(
            "SSIM needs at least {WINDOW}x{WINDOW} pixels, got {w}x{h}"
        )));
    }
    let k = gaussian_kernel(WINDOW_SIGMA, WINDOW / 2);
    let (ow, oh) = (w - WINDOW + 1, h - WINDOW + 1);

    // Five weighted moments per valid window: a, b, a², b², ab.
    let mut horiz = vec![[0.0f64; 5]; h * ow];
    for r in 0..h {
        let ra = a.row(r);
        let rb = b.row(r);
        for c in 0..ow {
            let mut m = [0.0; 5];
            for (t, kv) in k.iter().enumerate() {
                let (x, y) = (ra[c + t], rb[c + t]);
                m[0] += kv * x;
                m[1] += kv * y;
                m[2] += kv * x * x;
                m[3] += kv * y * y;
                m[4] += kv * x * y;
            }
            horiz[r * ow + c] = m;
        }
    }
    let mut total = 0.0;
    for r in 0..oh {
        for c in 0..ow {
            let mut m = [0.0; 5];
            for (t, kv) in k.iter().enumerate() {
                let src = &horiz[(r + t) * ow + c];
                for q in 0..5 {
                    m[q] += kv * src[q];
                }
            }
            let (mu_a, mu_b) = (m[0], m[1]);
            let var_a = m[2] - mu_a * mu_a;
            let var_b = m[3] - mu_b * mu_b;
            let cov = m[4] - mu_a * mu_b;
            total += ((2.0 * mu_a * mu_b + C1) * (2.0 * cov + C2))
                / ((mu_a * mu_a + mu_b * mu_b + C1) * (var_a + var_b + C2));
        }
    }
    Ok(total / (ow * oh) as f64)
}
