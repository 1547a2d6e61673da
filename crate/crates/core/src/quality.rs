//! Image-pair quality metrics: RMSE, PSNR, SSIM and multiscale SSIM, plus
//! set-level evaluation reports.
//!
//! Unit-range images are mapped onto an 8-bit dynamic range (x255) before
//! comparison, which is the only scale consistent with RMSE around 19-20
//! coexisting with PSNR around 22 dB.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projector::RadiographImage;

/// Canonical five-scale MS-SSIM exponents. They famously sum to 1.0001, so
/// they are renormalized at config construction.
pub const MSSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    /// Dynamic range L; unit images are scaled by this factor.
    pub dynamic_range: f64,
    pub k1: f64,
    pub k2: f64,
    /// Gaussian window side (odd).
    pub window: usize,
    pub sigma: f64,
    /// MS-SSIM scale count.
    pub scales: usize,
    /// Per-scale exponents, normalized to sum to 1.
    pub weights: Vec<f64>,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig::with_scales(5)
    }
}

impl MetricConfig {
    /// Config with `scales` MS-SSIM levels; exponents are the first `scales`
    /// canonical weights, renormalized.
    pub fn with_scales(scales: usize) -> Self {
        assert!((1..=5).contains(&scales), "scales must be in 1..=5");
        let picked = &MSSSIM_WEIGHTS[..scales];
        let sum: f64 = picked.iter().sum();
        MetricConfig {
            dynamic_range: 255.0,
            k1: 0.01,
            k2: 0.03,
            window: 11,
            sigma: 1.5,
            scales,
            weights: picked.iter().map(|w| w / sum).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dynamic_range.is_nan() || self.dynamic_range <= 0.0 {
            return Err(Error::invalid("dynamic_range", "must be > 0"));
        }
        if self.window < 3 || self.window.is_multiple_of(2) {
            return Err(Error::invalid("window", "must be odd and >= 3"));
        }
        if self.weights.len() != self.scales {
            return Err(Error::invalid("weights", "must have one entry per scale"));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::invalid("weights", format!("must sum to 1, got {sum}")));
        }
        Ok(())
    }

    fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }
}

fn check_dims(a: &RadiographImage, b: &RadiographImage) -> Result<()> {
    if !a.same_dims(b) {
        return Err(Error::shape(
            "metric",
            format!("{}x{} vs {}x{}", a.width(), a.height(), b.width(), b.height()),
        ));
    }
    Ok(())
}

/// Root-mean-square error on the L-scaled images.
pub fn rmse(a: &RadiographImage, b: &RadiographImage, cfg: &MetricConfig) -> Result<f64> {
    cfg.validate()?;
    check_dims(a, b)?;
    let l = cfg.dynamic_range;
    let n = a.pixels().len() as f64;
    let sq = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(x, y)| {
            let d = x * l - y * l;
            d * d
        })
        .sum::<f64>();
    Ok((sq / n).sqrt())
}

/// Peak signal-to-noise ratio in dB. Identical images return the +infinity
/// sentinel rather than an error.
pub fn psnr(a: &RadiographImage, b: &RadiographImage, cfg: &MetricConfig) -> Result<f64> {
    let e = rmse(a, b, cfg)?;
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (cfg.dynamic_range / e).log10())
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let mut w: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Separable valid-mode filtering: output is (w-k+1) x (h-k+1).
fn filter_valid(pixels: &[f64], w: usize, h: usize, kernel: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = kernel.len();
    let ow = w - k + 1;
    let mut horiz = vec![0.0f64; ow * h];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (t, kw) in kernel.iter().enumerate() {
                acc += kw * pixels[y * w + x + t];
            }
            horiz[y * ow + x] = acc;
        }
    }
    let oh = h - k + 1;
    let mut out = vec![0.0f64; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (t, kw) in kernel.iter().enumerate() {
                acc += kw * horiz[(y + t) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    (out, ow, oh)
}

/// Mean luminance and contrast-structure terms over the local SSIM maps.
fn ssim_terms(
    a: &[f64],
    b: &[f64],
    w: usize,
    h: usize,
    cfg: &MetricConfig,
) -> Result<(f64, f64)> {
    if w < cfg.window || h < cfg.window {
        return Err(Error::invalid(
            "image",
            format!("{w}x{h} smaller than the {0}x{0} SSIM window", cfg.window),
        ));
    }
    let kernel = gaussian_window(cfg.window, cfg.sigma);
    let aa: Vec<f64> = a.iter().map(|x| x * x).collect();
    let bb: Vec<f64> = b.iter().map(|x| x * x).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let (mu_a, ow, oh) = filter_valid(a, w, h, &kernel);
    let (mu_b, _, _) = filter_valid(b, w, h, &kernel);
    let (e_aa, _, _) = filter_valid(&aa, w, h, &kernel);
    let (e_bb, _, _) = filter_valid(&bb, w, h, &kernel);
    let (e_ab, _, _) = filter_valid(&ab, w, h, &kernel);
    let (c1, c2) = (cfg.c1(), cfg.c2());
    let mut lum_sum = 0.0;
    let mut cs_sum = 0.0;
    for i in 0..ow * oh {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        lum_sum += (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        cs_sum += (2.0 * cov + c2) / (va + vb + c2);
    }
    let n = (ow * oh) as f64;
    Ok((lum_sum / n, cs_sum / n))
}

/// Mean SSIM over local Gaussian windows (valid mode) on L-scaled images.
pub fn ssim(a: &RadiographImage, b: &RadiographImage, cfg: &MetricConfig) -> Result<f64> {
    cfg.validate()?;
    check_dims(a, b)?;
    let l = cfg.dynamic_range;
    let (w, h) = (a.width(), a.height());
    if w < cfg.window || h < cfg.window {
        return Err(Error::invalid(
            "image",
            format!("{w}x{h} smaller than the {0}x{0} SSIM window", cfg.window),
        ));
    }
    let kernel = gaussian_window(cfg.window, cfg.sigma);
    let ap: Vec<f64> = a.pixels().iter().map(|p| p * l).collect();
    let bp: Vec<f64> = b.pixels().iter().map(|p| p * l).collect();
    let aa: Vec<f64> = ap.iter().map(|x| x * x).collect();
    let bb: Vec<f64> = bp.iter().map(|x| x * x).collect();
    let ab: Vec<f64> = ap.iter().zip(&bp).map(|(x, y)| x * y).collect();
    let (mu_a, ow, oh) = filter_valid(&ap, w, h, &kernel);
    let (mu_b, _, _) = filter_valid(&bp, w, h, &kernel);
    let (e_aa, _, _) = filter_valid(&aa, w, h, &kernel);
    let (e_bb, _, _) = filter_valid(&bb, w, h, &kernel);
    let (e_ab, _, _) = filter_valid(&ab, w, h, &kernel);
    let (c1, c2) = (cfg.c1(), cfg.c2());
    let mut sum = 0.0;
    for i in 0..ow * oh {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(sum / (ow * oh) as f64)
}

fn downsample_half(pixels: &[f64], w: usize, h: usize) -> (Vec<f64>, usize, usize) {
    let ow = w / 2;
    let oh = h / 2;
    let mut out = vec![0.0f64; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let i = 2 * y * w + 2 * x;
            out[y * ow + x] = 0.25 * (pixels[i] + pixels[i + 1] + pixels[i + w] + pixels[i + w + 1]);
        }
    }
    (out, ow, oh)
}

/// Multiscale SSIM: contrast-structure at every scale, luminance at the
/// coarsest, each raised to its (normalized) weight; downsampling is 2x2 mean
/// pooling. Negative term means are clamped to zero so the product stays
/// real-valued.
pub fn msssim(a: &RadiographImage, b: &RadiographImage, cfg: &MetricConfig) -> Result<f64> {
    cfg.validate()?;
    check_dims(a, b)?;
    let min_dim = a.width().min(a.height());
    let needed = cfg.window << (cfg.scales - 1);
    if min_dim < needed {
        return Err(Error::invalid(
            "image",
            format!(
                "min dim {min_dim} too small for {} scales (needs >= {needed})",
                cfg.scales
            ),
        ));
    }
    let l = cfg.dynamic_range;
    let mut ap: Vec<f64> = a.pixels().iter().map(|p| p * l).collect();
    let mut bp: Vec<f64> = b.pixels().iter().map(|p| p * l).collect();
    let (mut w, mut h) = (a.width(), a.height());
    let mut result = 1.0f64;
    for (s, weight) in cfg.weights.iter().enumerate() {
        let (lum, cs) = ssim_terms(&ap, &bp, w, h, cfg)?;
        result *= cs.max(0.0).powf(*weight);
        if s + 1 == cfg.scales {
            result *= lum.max(0.0).powf(*weight);
        } else {
            let (na, nw, nh) = downsample_half(&ap, w, h);
            let (nb, _, _) = downsample_half(&bp, w, h);
            ap = na;
            bp = nb;
            w = nw;
            h = nh;
        }
    }
    Ok(result)
}

/// One row of metric values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSample {
    pub rmse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub msssim: f64,
}

/// Per-image metrics plus population mean/std aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_image: Vec<MetricSample>,
    pub mean: MetricSample,
    pub std: MetricSample,
}

impl MetricReport {
    /// Aligned-column table in the style of a "mean(std)" results row.
    pub fn to_table(&self) -> String {
        let cell = |m: f64, s: f64| {
            if m.is_finite() {
                format!("{m:.2}({s:.2})")
            } else {
                "inf".to_string()
            }
        };
        let cols = [
            ("RMSE", cell(self.mean.rmse, self.std.rmse)),
            ("PSNR[dB]", cell(self.mean.psnr, self.std.psnr)),
            ("SSIM", cell(self.mean.ssim, self.std.ssim)),
            ("MSSIM", cell(self.mean.msssim, self.std.msssim)),
        ];
        let mut header = String::new();
        let mut row = String::new();
        for (name, value) in &cols {
            let width = name.len().max(value.len()) + 2;
            header.push_str(&format!("{name:<width$}"));
            row.push_str(&format!("{value:<width$}"));
        }
        format!("{}\n{}\n", header.trim_end(), row.trim_end())
    }
}

/// Evaluates every (prediction, target) pair and aggregates with the
/// population-std convention.
pub fn evaluate_set(
    pairs: &[(RadiographImage, RadiographImage)],
    cfg: &MetricConfig,
) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::invalid("pairs", "evaluation set is empty"));
    }
    let mut per_image = Vec::with_capacity(pairs.len());
    for (pred, target) in pairs {
        per_image.push(MetricSample {
            rmse: rmse(pred, target, cfg)?,
            psnr: psnr(pred, target, cfg)?,
            ssim: ssim(pred, target, cfg)?,
            msssim: msssim(pred, target, cfg)?,
        });
    }
    let n = per_image.len() as f64;
    let mean_of = |f: fn(&MetricSample) -> f64| per_image.iter().map(f).sum::<f64>() / n;
    let mean = MetricSample {
        rmse: mean_of(|s| s.rmse),
        psnr: mean_of(|s| s.psnr),
        ssim: mean_of(|s| s.ssim),
        msssim: mean_of(|s| s.msssim),
    };
    let std_of = |f: fn(&MetricSample) -> f64, m: f64| {
        (per_image.iter().map(|s| (f(s) - m) * (f(s) - m)).sum::<f64>() / n).sqrt()
    };
    let std = MetricSample {
        rmse: std_of(|s| s.rmse, mean.rmse),
        psnr: std_of(|s| s.psnr, mean.psnr),
        ssim: std_of(|s| s.ssim, mean.ssim),
        msssim: std_of(|s| s.msssim, mean.msssim),
    };
    Ok(MetricReport { per_image, mean, std })
}
