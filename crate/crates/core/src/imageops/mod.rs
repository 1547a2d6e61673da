//! Image pre-processing: range normalization, standardization, histogram
//! equalization, CLAHE, unsharp masking, and bilinear resampling.

mod augment;

pub use augment::{augment, AugmentConfig};

use crate::error::{Error, Result};
use crate::projector::{minmax_to_unit, RadiographImage, RangeTag};

/// Min-max normalization to [0, 1]; constant images map to all zeros.
pub fn minmax_normalize(img: &RadiographImage) -> RadiographImage {
    minmax_to_unit(img)
}

/// Shifts/scales so the sample mean and population std hit the targets.
/// A constant image maps to all `mean_target`.
pub fn standardize(img: &RadiographImage, mean_target: f64, std_target: f64) -> RadiographImage {
    let n = img.pixels().len() as f64;
    let min = img.pixels().iter().cloned().fold(f64::INFINITY, f64::min);
    let max = img.pixels().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mean = img.pixels().iter().sum::<f64>() / n;
    let var = img.pixels().iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let pixels = if std > 0.0 && min < max {
        img.pixels()
            .iter()
            .map(|p| (p - mean) / std * std_target + mean_target)
            .collect()
    } else {
        vec![mean_target; img.pixels().len()]
    };
    RadiographImage::new_unchecked(img.width(), img.height(), pixels, RangeTag::Standardized)
}

#[inline]
fn bin_of(p: f64, bins: usize) -> usize {
    ((p * bins as f64) as usize).min(bins - 1)
}

/// Global histogram equalization over `bins` uniform bins on [0, 1]:
/// `out = (cdf - cdf_min) / (1 - cdf_min)`. Constant images are unchanged.
pub fn hist_eq(img: &RadiographImage, bins: usize) -> RadiographImage {
    assert!(bins >= 2, "hist_eq needs at least 2 bins");
    let mut hist = vec![0u64; bins];
    for &p in img.pixels() {
        hist[bin_of(p, bins)] += 1;
    }
    let total = img.pixels().len() as f64;
    let mut cdf = vec![0.0f64; bins];
    let mut acc = 0u64;
    for (c, h) in cdf.iter_mut().zip(&hist) {
        acc += h;
        *c = acc as f64 / total;
    }
    let cdf_min = cdf
        .iter()
        .zip(&hist)
        .find(|(_, &h)| h > 0)
        .map(|(c, _)| *c)
        .unwrap_or(0.0);
    let denom = 1.0 - cdf_min;
    if denom <= 0.0 {
        return img.clone();
    }
    let pixels = img
        .pixels()
        .iter()
        .map(|&p| ((cdf[bin_of(p, bins)] - cdf_min) / denom).clamp(0.0, 1.0))
        .collect();
    RadiographImage::new_unchecked(img.width(), img.height(), pixels, RangeTag::Unit)
}

const CLAHE_BINS: usize = 256;

/// One tile's bin -> value lookup table; `None` marks a degenerate tile whose
/// mapping is the identity.
struct TileLut {
    lut: Option<[f64; CLAHE_BINS]>,
}

impl TileLut {
    #[inline]
    fn map(&self, p: f64) -> f64 {
        match &self.lut {
            Some(lut) => lut[bin_of(p, CLAHE_BINS)],
            None => p,
        }
    }
}

fn clipped_tile_lut(pixels: &[f64], clip: f64) -> TileLut {
    let mut hist = [0u64; CLAHE_BINS];
    for &p in pixels {
        hist[bin_of(p, CLAHE_BINS)] += 1;
    }
    let threshold = ((clip * pixels.len() as f64).round() as u64).max(1);
    let mut excess = 0u64;
    for h in hist.iter_mut() {
        if *h > threshold {
            excess += *h - threshold;
            *h = threshold;
        }
    }
    // Single-pass uniform redistribution; the sub-bin residue is discarded.
    let per_bin = excess / CLAHE_BINS as u64;
    for h in hist.iter_mut() {
        *h += per_bin;
    }
    let total: u64 = hist.iter().sum();
    if total == 0 {
        return TileLut { lut: None };
    }
    let mut cdf = [0.0f64; CLAHE_BINS];
    let mut acc = 0u64;
    for (c, h) in cdf.iter_mut().zip(&hist) {
        acc += h;
        *c = acc as f64 / total as f64;
    }
    let cdf_min = cdf
        .iter()
        .zip(&hist)
        .find(|(_, &h)| h > 0)
        .map(|(c, _)| *c)
        .unwrap_or(0.0);
    let denom = 1.0 - cdf_min;
    if denom <= 0.0 {
        return TileLut { lut: None };
    }
    let mut lut = [0.0f64; CLAHE_BINS];
    for (l, c) in lut.iter_mut().zip(&cdf) {
        *l = ((c - cdf_min) / denom).clamp(0.0, 1.0);
    }
    TileLut { lut: Some(lut) }
}

/// Contrast-limited adaptive histogram equalization on a tile grid of the
/// given window size. Per-tile clipped-histogram CDF mappings are blended by
/// bilinear interpolation between the four nearest tile centers. A window
/// larger than the image degrades to a single tile (clipped global HE).
pub fn clahe(img: &RadiographImage, window: (usize, usize), clip: f64) -> Result<RadiographImage> {
    if window.0 == 0 || window.1 == 0 {
        return Err(Error::invalid("window", "must be positive"));
    }
    if clip.is_nan() || clip <= 0.0 {
        return Err(Error::invalid("clip", "must be > 0"));
    }
    let (w, h) = (img.width(), img.height());
    let min = img.pixels().iter().cloned().fold(f64::INFINITY, f64::min);
    let max = img.pixels().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if min == max {
        return Ok(img.clone());
    }
    let tw = window.0.min(w);
    let th = window.1.min(h);
    let ntx = w.div_ceil(tw);
    let nty = h.div_ceil(th);

    let mut luts = Vec::with_capacity(ntx * nty);
    let mut centers_x = vec![0.0f64; ntx];
    let mut centers_y = vec![0.0f64; nty];
    for (ty, cy) in centers_y.iter_mut().enumerate() {
        let y0 = ty * th;
        let y1 = ((ty + 1) * th).min(h);
        *cy = (y0 + y1 - 1) as f64 / 2.0;
        for (tx, cx) in centers_x.iter_mut().enumerate() {
            let x0 = tx * tw;
            let x1 = ((tx + 1) * tw).min(w);
            *cx = (x0 + x1 - 1) as f64 / 2.0;
            let mut tile = Vec::with_capacity((x1 - x0) * (y1 - y0));
            for y in y0..y1 {
                tile.extend_from_slice(&img.pixels()[y * w + x0..y * w + x1]);
            }
            luts.push(clipped_tile_lut(&tile, clip));
        }
    }

    // Neighbor pair + interpolation weight along one axis, clamped at borders.
    let axis_blend = |pos: f64, centers: &[f64]| -> (usize, usize, f64) {
        if centers.len() == 1 || pos <= centers[0] {
            return (0, 0, 0.0);
        }
        let last = centers.len() - 1;
        if pos >= centers[last] {
            return (last, last, 0.0);
        }
        let mut i = 0;
        while centers[i + 1] < pos {
            i += 1;
        }
        let t = (pos - centers[i]) / (centers[i + 1] - centers[i]);
        (i, i + 1, t)
    };

    let mut out = vec![0.0f64; w * h];
    for y in 0..h {
        let (ty0, ty1, wy) = axis_blend(y as f64, &centers_y);
        for x in 0..w {
            let (tx0, tx1, wx) = axis_blend(x as f64, &centers_x);
            let p = img.at(x, y);
            let v00 = luts[ty0 * ntx + tx0].map(p);
            let v01 = luts[ty0 * ntx + tx1].map(p);
            let v10 = luts[ty1 * ntx + tx0].map(p);
            let v11 = luts[ty1 * ntx + tx1].map(p);
            let top = v00 * (1.0 - wx) + v01 * wx;
            let bottom = v10 * (1.0 - wx) + v11 * wx;
            out[y * w + x] = (top * (1.0 - wy) + bottom * wy).clamp(0.0, 1.0);
        }
    }
    Ok(RadiographImage::new_unchecked(w, h, out, RangeTag::Unit))
}

/// 5-tap Gaussian (sigma = 1) weights, normalized.
fn gauss5() -> [f64; 5] {
    let raw = [(-2.0f64), -1.0, 0.0, 1.0, 2.0].map(|i: f64| (-i * i / 2.0).exp());
    let sum: f64 = raw.iter().sum();
    raw.map(|w| w / sum)
}

#[inline]
fn reflect(i: isize, n: isize) -> usize {
    // Symmetric reflection including the edge sample: -1 -> 0, n -> n-1.
    let mut i = i;
    if i < 0 {
        i = -i - 1;
    }
    if i >= n {
        i = 2 * n - 1 - i;
    }
    i.clamp(0, n - 1) as usize
}

/// Separable 5x5 Gaussian blur (sigma = 1) with reflect padding.
pub fn gaussian_blur5(img: &RadiographImage) -> RadiographImage {
    let k = gauss5();
    let (w, h) = (img.width() as isize, img.height() as isize);
    let src = img.pixels();
    let mut tmp = vec![0.0f64; src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, kw) in k.iter().enumerate() {
                let xi = reflect(x + t as isize - 2, w);
                acc += kw * src[(y as usize) * w as usize + xi];
            }
            tmp[(y as usize) * w as usize + x as usize] = acc;
        }
    }
    let mut out = vec![0.0f64; src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, kw) in k.iter().enumerate() {
                let yi = reflect(y + t as isize - 2, h);
                acc += kw * tmp[yi * w as usize + x as usize];
            }
            out[(y as usize) * w as usize + x as usize] = acc;
        }
    }
    RadiographImage::new_unchecked(img.width(), img.height(), out, img.range())
}

/// Unsharp masking: `img + alpha * (img - blur(img))`. Unit-tagged images
/// are clamped back to [0, 1]; other tags pass through unclamped.
pub fn sharpen(img: &RadiographImage, alpha: f64) -> RadiographImage {
    let blur = gaussian_blur5(img);
    let clamp = img.range() == RangeTag::Unit;
    let pixels = img
        .pixels()
        .iter()
        .zip(blur.pixels())
        .map(|(&p, &b)| {
            let v = p + alpha * (p - b);
            if clamp { v.clamp(0.0, 1.0) } else { v }
        })
        .collect();
    RadiographImage::new_unchecked(img.width(), img.height(), pixels, img.range())
}

/// Bilinear resampling with pixel-center alignment and edge clamping.
pub fn resample_bilinear(img: &RadiographImage, new_w: usize, new_h: usize) -> RadiographImage {
    assert!(new_w > 0 && new_h > 0);
    if new_w == img.width() && new_h == img.height() {
        return img.clone();
    }
    let (w, h) = (img.width(), img.height());
    let mut out = vec![0.0f64; new_w * new_h];
    for y in 0..new_h {
        let sy = ((y as f64 + 0.5) * h as f64 / new_h as f64 - 0.5).clamp(0.0, h as f64 - 1.0);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for x in 0..new_w {
            let sx = ((x as f64 + 0.5) * w as f64 / new_w as f64 - 0.5).clamp(0.0, w as f64 - 1.0);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            let top = img.at(x0, y0) * (1.0 - fx) + img.at(x1, y0) * fx;
            let bottom = img.at(x0, y1) * (1.0 - fx) + img.at(x1, y1) * fx;
            out[y * new_w + x] = top * (1.0 - fy) + bottom * fy;
        }
    }
    let range = if img.range() == RangeTag::Binary { RangeTag::Raw } else { img.range() };
    RadiographImage::new_unchecked(new_w, new_h, out, range)
}
