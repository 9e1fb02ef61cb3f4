//! Grayscale rasters, resampling and patch extraction.
//!
//! Intensities are kept as `f64` in the nominal range `[0, 255]` through the
//! whole pipeline. Quantization to 8 bits happens only when an image is saved
//! (see [`crate::io`]).

use crate::error::{Error, Result};

/// Row-major grayscale raster with real-valued intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::param(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} samples for a {width}x{height} image",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::param(format!("non-finite intensity at index {pos}")));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Panics on zero dimensions; intended for internally constructed images.
    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        let mut data = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.width + col] = value;
    }

    /// Reads with border replication for out-of-range coordinates.
    #[inline]
    pub fn get_clamped(&self, row: isize, col: isize) -> f64 {
        let r = row.clamp(0, self.height as isize - 1) as usize;
        let c = col.clamp(0, self.width as isize - 1) as usize;
        self.data[r * self.width + c]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.width..(row + 1) * self.width]
    }

    pub fn same_dims(&self, other: &GrayImage) -> bool {
        self.dims() == other.dims()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Copies the `width`x`height` window whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, width: usize, height: usize) -> Result<GrayImage> {
        if width == 0 || height == 0 || top + height > self.height || left + width > self.width {
            return Err(Error::param(format!(
                "crop {width}x{height} at ({top}, {left}) exceeds {}x{} image",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(width * height);
        for r in top..top + height {
            data.extend_from_slice(&self.data[r * self.width + left..r * self.width + left + width]);
        }
        Ok(GrayImage {
            width,
            height,
            data,
        })
    }

    /// Writes `src` into this image with its top-left corner at `(top, left)`.
    pub fn paste(&mut self, src: &GrayImage, top: usize, left: usize) -> Result<()> {
        if top + src.height > self.height || left + src.width > self.width {
            return Err(Error::param("pasted image exceeds destination bounds"));
        }
        for r in 0..src.height {
            let dst = (top + r) * self.width + left;
            self.data[dst..dst + src.width].copy_from_slice(src.row(r));
        }
        Ok(())
    }

    /// Bicubic sample at fractional `(y, x)` with border replication.
    pub fn sample_bicubic(&self, y: f64, x: f64) -> f64 {
        let y0 = y.floor();
        let x0 = x.floor();
        let wy = keys_weights(y - y0);
        let wx = keys_weights(x - x0);
        let (y0, x0) = (y0 as isize, x0 as isize);
        let mut acc = 0.0;
        for (dy, wyv) in wy.iter().enumerate() {
            let r = y0 - 1 + dy as isize;
            let mut row_acc = 0.0;
            for (dx, wxv) in wx.iter().enumerate() {
                row_acc += wxv * self.get_clamped(r, x0 - 1 + dx as isize);
            }
            acc += wyv * row_acc;
        }
        acc
    }
}

/// Keys cubic-convolution parameter.
pub const KEYS_A: f64 = -0.5;

/// Keys cubic convolution kernel.
pub fn keys_kernel(x: f64) -> f64 {
    let a = KEYS_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Weights of the four taps at offsets -1, 0, 1, 2 for fractional position `t`.
#[inline]
fn keys_weights(t: f64) -> [f64; 4] {
    [
        keys_kernel(t + 1.0),
        keys_kernel(t),
        keys_kernel(1.0 - t),
        keys_kernel(2.0 - t),
    ]
}

/// Upsamples by an integer factor with the Keys kernel.
///
/// Pixel centers are aligned, i.e. output pixel `R` samples the input at
/// `(R + 0.5) / factor - 0.5`. This is the convention that matches block
/// averaging in [`downsample`].
pub fn bicubic_upsample(img: &GrayImage, factor: usize) -> Result<GrayImage> {
    if factor < 2 {
        return Err(Error::param(format!("upsampling factor must be >= 2, got {factor}")));
    }
    let (w, h) = img.dims();
    let (ow, oh) = (w * factor, h * factor);
    let f = factor as f64;

    // The kernel is separable; precompute taps per output column and row.
    let taps = |n_out: usize| -> Vec<(isize, [f64; 4])> {
        (0..n_out)
            .map(|o| {
                let src = (o as f64 + 0.5) / f - 0.5;
                let base = src.floor();
                (base as isize, keys_weights(src - base))
            })
            .collect()
    };
    let col_taps = taps(ow);
    let row_taps = taps(oh);

    // Horizontal pass: h x ow.
    let mut horiz = vec![0.0; h * ow];
    for r in 0..h {
        for (oc, (base, wts)) in col_taps.iter().enumerate() {
            let mut acc = 0.0;
            for (k, wv) in wts.iter().enumerate() {
                acc += wv * img.get_clamped(r as isize, base - 1 + k as isize);
            }
            horiz[r * ow + oc] = acc;
        }
    }
    let mut data = vec![0.0; oh * ow];
    for (or, (base, wts)) in row_taps.iter().enumerate() {
        let out_row = &mut data[or * ow..(or + 1) * ow];
        for (k, wv) in wts.iter().enumerate() {
            let r = (base - 1 + k as isize).clamp(0, h as isize - 1) as usize;
            let src = &horiz[r * ow..(r + 1) * ow];
            for (o, s) in out_row.iter_mut().zip(src) {
                *o += wv * s;
            }
        }
    }
    Ok(GrayImage {
        width: ow,
        height: oh,
        data,
    })
}

/// Block-average decimation; trailing partial blocks are dropped.
pub fn downsample(img: &GrayImage, factor: usize) -> Result<GrayImage> {
    if factor < 2 {
        return Err(Error::param(format!("downsampling factor must be >= 2, got {factor}")));
    }
    let (w, h) = img.dims();
    if w < factor || h < factor {
        return Err(Error::param(format!(
            "{w}x{h} image is smaller than the downsampling factor {factor}"
        )));
    }
    let (ow, oh) = (w / factor, h / factor);
    let norm = 1.0 / (factor * factor) as f64;
    let data = (0..oh)
        .flat_map(|r| (0..ow).map(move |c| (r, c)))
        .map(|(r, c)| {
            let mut acc = 0.0;
            for y in r * factor..(r + 1) * factor {
                for x in c * factor..(c + 1) * factor {
                    acc += img.get(y, x);
                }
            }
            acc * norm
        })
        .collect();
    Ok(GrayImage {
        width: ow,
        height: oh,
        data,
    })
}

/// Normalized 1-D Gaussian taps over `[-radius, radius]`.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let x = i as f64 - radius as f64;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian blur (radius `ceil(3 sigma)`) with border replication.
/// A non-positive sigma returns a copy.
pub fn gaussian_blur(img: &GrayImage, sigma: f64) -> GrayImage {
    if !(sigma > 0.0) {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as usize;
    let k = gaussian_kernel(sigma, radius);
    let (w, h) = img.dims();
    let r = radius as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * img.get_clamped(y as isize, x as isize + i as isize - r))
                .sum();
        }
    }
    let mut data = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            data[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| {
                    let yy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                    kv * tmp[yy * w + x]
                })
                .sum();
        }
    }
    GrayImage {
        width: w,
        height: h,
        data,
    }
}

/// Square window of odd side around a center pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    side: usize,
    center: (usize, usize),
    data: Vec<f64>,
}

impl Patch {
    pub fn new(side: usize, center: (usize, usize), data: Vec<f64>) -> Result<Self> {
        check_side(side)?;
        if data.len() != side * side {
            return Err(Error::DimensionMismatch(format!(
                "{} samples for a {side}x{side} patch",
                data.len()
            )));
        }
        Ok(Self { side, center, data })
    }

    #[inline]
    pub fn side(&self) -> usize {
        self.side
    }

    #[inline]
    pub fn center(&self) -> (usize, usize) {
        self.center
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Writes the patch back into `img` at its recorded center.
    pub fn embed_into(&self, img: &mut GrayImage) -> Result<()> {
        let half = self.side / 2;
        let (r, c) = self.center;
        if r < half || c < half || r + half >= img.height || c + half >= img.width {
            return Err(Error::param("patch does not fit inside the destination image"));
        }
        for dr in 0..self.side {
            let dst = (r - half + dr) * img.width + c - half;
            img.data[dst..dst + self.side]
                .copy_from_slice(&self.data[dr * self.side..(dr + 1) * self.side]);
        }
        Ok(())
    }
}

pub(crate) fn check_side(side: usize) -> Result<()> {
    if side < 3 || side % 2 == 0 {
        return Err(Error::param(format!("patch side must be odd and >= 3, got {side}")));
    }
    Ok(())
}

/// Whether out-of-range patch pixels are an error or clamp to the border.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Border {
    #[default]
    Interior,
    Replicate,
}

pub fn extract_patch(
    img: &GrayImage,
    center: (usize, usize),
    side: usize,
    border: Border,
) -> Result<Patch> {
    check_side(side)?;
    let (r, c) = center;
    if r >= img.height || c >= img.width {
        return Err(Error::param(format!(
            "patch center ({r}, {c}) outside {}x{} image",
            img.width, img.height
        )));
    }
    let mut data = vec![0.0; side * side];
    match border {
        Border::Interior => {
            let half = side / 2;
            if r < half || c < half || r + half >= img.height || c + half >= img.width {
                return Err(Error::param(format!(
                    "patch of side {side} at ({r}, {c}) is not interior"
                )));
            }
            for dr in 0..side {
                let src = (r - half + dr) * img.width + c - half;
                data[dr * side..(dr + 1) * side].copy_from_slice(&img.data[src..src + side]);
            }
        }
        Border::Replicate => fill_patch_clamped(img, r, c, side, &mut data),
    }
    Ok(Patch { side, center, data })
}

/// Fills `out` with the `side`x`side` window at `(r, c)`, replicating borders.
pub(crate) fn fill_patch_clamped(img: &GrayImage, r: usize, c: usize, side: usize, out: &mut [f64]) {
    let half = (side / 2) as isize;
    let (r, c) = (r as isize, c as isize);
    let interior = r >= half
        && c >= half
        && r + half < img.height as isize
        && c + half < img.width as isize;
    if interior {
        for dr in 0..side {
            let src = (r - half) as usize + dr;
            let src = src * img.width + (c - half) as usize;
            out[dr * side..(dr + 1) * side].copy_from_slice(&img.data[src..src + side]);
        }
    } else {
        for dr in 0..side {
            for dc in 0..side {
                out[dr * side + dc] =
                    img.get_clamped(r - half + dr as isize, c - half + dc as isize);
            }
        }
    }
}

/// Population variance of a sample slice.
pub(crate) fn variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// Population variance (divides by n²) of the patch intensities.
pub fn patch_variance(p: &Patch) -> f64 {
    variance(&p.data)
}
