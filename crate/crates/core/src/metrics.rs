//! Image quality metrics: PSNR and SSIM on `[0, 1]` float images.
//!
//! Images are row-major, interleaved by channel (HWC). Both metrics assume a
//! peak signal of 1.0.

use crate::{Error, Result};

/// Cap applied to PSNR so identical images report a finite score.
pub const PSNR_CAP_DB: f32 = 99.0;

/// SSIM window side length.
pub const SSIM_WINDOW: usize = 11;

/// Gaussian sigma for the SSIM window.
pub const SSIM_SIGMA: f32 = 1.5;

const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Peak signal-to-noise ratio in dB between two equally sized images.
///
/// `-10 * log10(mse)` with peak 1.0, capped at [`PSNR_CAP_DB`] so identical
/// inputs do not return infinity. Panics if lengths differ or inputs are
/// empty.
pub fn psnr(img_a: &[f32], img_b: &[f32]) -> f32 {
    assert_eq!(img_a.len(), img_b.len(), "psnr inputs must have equal shape");
    assert!(!img_a.is_empty(), "psnr inputs must be non-empty");
    let mut acc = 0.0f64;
    for (&a, &b) in img_a.iter().zip(img_b) {
        let e = (a - b) as f64;
        acc += e * e;
    }
    let mse = acc / img_a.len() as f64;
    if mse == 0.0 {
        return PSNR_CAP_DB;
    }
    (-10.0 * mse.log10()).min(PSNR_CAP_DB as f64) as f32
}

/// Mean structural similarity between two HWC images.
///
/// Uses the standard 11x11 Gaussian window (sigma 1.5), C1 = 0.01^2,
/// C2 = 0.03^2, windowed (not sample) covariance, and only window positions
/// fully inside the image. Channels are scored independently and averaged.
///
/// Returns an error if the image is smaller than the window.
pub fn ssim(img_a: &[f32], img_b: &[f32], width: usize, height: usize, channels: usize) -> Result<f32> {
    assert_eq!(img_a.len(), width * height * channels, "ssim image A shape mismatch");
    assert_eq!(img_b.len(), img_a.len(), "ssim inputs must have equal shape");
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        return Err(Error::config(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {width}x{height}"
        )));
    }

    let kernel = gaussian_kernel();
    let mut total = 0.0f64;
    for c in 0..channels {
        let plane_a = extract_plane(img_a, width, height, channels, c);
        let plane_b = extract_plane(img_b, width, height, channels, c);
        total += ssim_plane(&plane_a, &plane_b, width, height, &kernel);
    }
    Ok((total / channels as f64) as f32)
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0f64; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    let s2 = 2.0 * (SSIM_SIGMA as f64) * (SSIM_SIGMA as f64);
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / s2).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

fn extract_plane(img: &[f32], width: usize, height: usize, channels: usize, c: usize) -> Vec<f64> {
    let mut plane = vec![0.0f64; width * height];
    for i in 0..width * height {
        plane[i] = img[i * channels + c] as f64;
    }
    plane
}

/// Separable valid-mode Gaussian filter: rows then columns.
/// Output is (height - window + 1) x (width - window + 1).
fn filter_valid(plane: &[f64], width: usize, height: usize, kernel: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let out_w = width - SSIM_WINDOW + 1;
    let out_h = height - SSIM_WINDOW + 1;
    let mut rows = vec![0.0f64; out_w * height];
    for y in 0..height {
        for x in 0..out_w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                acc += kv * plane[y * width + x + k];
            }
            rows[y * out_w + x] = acc;
        }
    }
    let mut out = vec![0.0f64; out_w * out_h];
    for y in 0..out_h {
        for x in 0..out_w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                acc += kv * rows[(y + k) * out_w + x];
            }
            out[y * out_w + x] = acc;
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], width: usize, height: usize, kernel: &[f64; SSIM_WINDOW]) -> f64 {
    let n = a.len();
    let mut a2 = vec![0.0f64; n];
    let mut b2 = vec![0.0f64; n];
    let mut ab = vec![0.0f64; n];
    for i in 0..n {
        a2[i] = a[i] * a[i];
        b2[i] = b[i] * b[i];
        ab[i] = a[i] * b[i];
    }
    let mu_a = filter_valid(a, width, height, kernel);
    let mu_b = filter_valid(b, width, height, kernel);
    let e_a2 = filter_valid(&a2, width, height, kernel);
    let e_b2 = filter_valid(&b2, width, height, kernel);
    let e_ab = filter_valid(&ab, width, height, kernel);

    let mut acc = 0.0f64;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_a2[i] - ma * ma;
        let vb = e_b2[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let s = ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        acc += s;
    }
    acc / mu_a.len() as f64
}
