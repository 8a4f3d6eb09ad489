//! Evaluation metrics: PSNR and SSIM on [0, 1] images, landmark distance
//! through a detector, masked L2 over semantic regions, and a palette
//! histogram distance. All pure and symmetric where symmetry makes sense;
//! identical inputs score perfectly by construction.

use crate::error::{Result, UvError};
use crate::landmarks::Detector;
use crate::spectra::luminance;
use crate::tensor::Scalar;
use crate::toyfaces::{Image, N_LANDMARKS};
use ndarray::Array2;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(UvError::ShapeMismatch {
            name: "metric inputs".into(),
            expected: a.shape().to_vec(),
            found: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB on unit range; equality saturates to the
/// +infinity sentinel.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    let mse = a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() })
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-((i as f64 - c) * (i as f64 - c)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable Gaussian blur, valid region only: output (H-10) x (W-10).
fn blur_valid(img: &Array2<f64>) -> Array2<f64> {
    let k = gaussian_kernel();
    let (h, w) = img.dim();
    let mut rows = Array2::zeros((h, w - SSIM_WINDOW + 1));
    for y in 0..h {
        for x in 0..w - SSIM_WINDOW + 1 {
            rows[[y, x]] = (0..SSIM_WINDOW).map(|i| k[i] * img[[y, x + i]]).sum::<f64>();
        }
    }
    let mut out = Array2::zeros((h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1));
    for y in 0..h - SSIM_WINDOW + 1 {
        for x in 0..w - SSIM_WINDOW + 1 {
            out[[y, x]] = (0..SSIM_WINDOW).map(|i| k[i] * rows[[y + i, x]]).sum::<f64>();
        }
    }
    out
}

/// Mean structural similarity over luminance with the standard 11x11
/// Gaussian window. Constant images exercise only the means term, so the
/// closed form (2 mu_a mu_b + C1) / (mu_a^2 + mu_b^2 + C1) falls out.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    let (h, w) = (a.shape()[1], a.shape()[2]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(UvError::validation(
            "ssim input",
            &format!("image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let la = luminance(a);
    let lb = luminance(b);
    let mu_a = blur_valid(&la);
    let mu_b = blur_valid(&lb);
    let aa = blur_valid(&la.mapv(|v| v * v));
    let bb = blur_valid(&lb.mapv(|v| v * v));
    let ab = blur_valid(&(&la * &lb));
    let mut acc = 0.0;
    for ((y, x), &ma) in mu_a.indexed_iter() {
        let mb = mu_b[[y, x]];
        let va = aa[[y, x]] - ma * ma;
        let vb = bb[[y, x]] - mb * mb;
        let cov = ab[[y, x]] - ma * mb;
        acc += (2.0 * ma * mb + C1) * (2.0 * cov + C2) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
    }
    Ok(acc / mu_a.len() as f64)
}

/// Mean Euclidean distance between the detector's read of `texture` and the
/// reference points, in pixels.
pub fn landmark_l2<S: Scalar>(
    texture: &Image,
    detector: &Detector<S>,
    l_star: &[[f32; 2]],
) -> Result<f64> {
    if l_star.is_empty() || l_star.len() != N_LANDMARKS {
        return Err(UvError::validation(
            "landmark targets",
            &format!("need {N_LANDMARKS} points, got {}", l_star.len()),
        ));
    }
    let pred = detector.detect(&crate::landmarks::image_to_array::<S>(texture));
    let acc: f64 = pred
        .0
        .iter()
        .zip(l_star)
        .map(|(p, t)| {
            let dx = p[0] as f64 - t[0] as f64;
            let dy = p[1] as f64 - t[1] as f64;
            (dx * dx + dy * dy).sqrt()
        })
        .sum();
    Ok(acc / l_star.len() as f64)
}

/// Mean squared pixel difference restricted to `mask` (all channels).
pub fn masked_l2(a: &Image, b: &Image, mask: &Array2<bool>) -> Result<f64> {
    same_shape(a, b)?;
    let (h, w) = (a.shape()[1], a.shape()[2]);
    if mask.dim() != (h, w) {
        return Err(UvError::ShapeMismatch {
            name: "mask".into(),
            expected: vec![h, w],
            found: mask.shape().to_vec(),
        });
    }
    let mut acc = 0.0f64;
    let mut n = 0usize;
    for ((y, x), &on) in mask.indexed_iter() {
        if on {
            for c in 0..3 {
                let d = a[[c, y, x]] as f64 - b[[c, y, x]] as f64;
                acc += d * d;
            }
            n += 3;
        }
    }
    if n == 0 {
        return Err(UvError::validation("mask", "selects no pixels"));
    }
    Ok(acc / n as f64)
}

const PALETTE_BINS: usize = 16;

fn palette_histogram(img: &Image) -> Vec<f64> {
    let mut h = vec![0.0f64; PALETTE_BINS * PALETTE_BINS * PALETTE_BINS];
    let (hh, ww) = (img.shape()[1], img.shape()[2]);
    let bin = |v: f32| ((v * PALETTE_BINS as f32) as usize).min(PALETTE_BINS - 1);
    for y in 0..hh {
        for x in 0..ww {
            let (r, g, b) = (bin(img[[0, y, x]]), bin(img[[1, y, x]]), bin(img[[2, y, x]]));
            h[(r * PALETTE_BINS + g) * PALETTE_BINS + b] += 1.0;
        }
    }
    let n = (hh * ww) as f64;
    for v in &mut h {
        *v /= n;
    }
    h
}

/// L1 distance between 16^3-bin normalized joint RGB histograms; a color
/// summary blind to layout.
pub fn palette_hist_distance(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    let (ha, hb) = (palette_histogram(a), palette_histogram(b));
    Ok(ha.iter().zip(&hb).map(|(x, y)| (x - y).abs()).sum())
}

/// Per-sample metric values with aggregates that always equal their
/// recomputation from the rows.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub sample_id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub landmark_l2: f64,
    pub mouth_l2: f64,
    pub brow_l2: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_landmark_l2: f64,
    pub mean_mouth_l2: f64,
    pub mean_brow_l2: f64,
    pub config_digest: String,
}

impl MetricReport {
    pub fn from_rows(rows: Vec<MetricRow>, config_digest: String) -> Result<Self> {
        if rows.is_empty() {
            return Err(UvError::validation("metric report", "no samples"));
        }
        let n = rows.len() as f64;
        let mean = |f: fn(&MetricRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Ok(MetricReport {
            mean_psnr: mean(|r| r.psnr),
            mean_ssim: mean(|r| r.ssim),
            mean_landmark_l2: mean(|r| r.landmark_l2),
            mean_mouth_l2: mean(|r| r.mouth_l2),
            mean_brow_l2: mean(|r| r.brow_l2),
            rows,
            config_digest,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("sample_id,psnr,ssim,landmark_l2,mouth_l2,brow_l2\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.sample_id, r.psnr, r.ssim, r.landmark_l2, r.mouth_l2, r.brow_l2
            ));
        }
        s
    }
}
