//! Full-reference image quality metrics on `[0, 1]` intensities.
//!
//! SSIM uses an 11×11 Gaussian window (σ = 1.5) over valid positions only,
//! with `C1 = (0.01 L)²`, `C2 = (0.03 L)²`, `C3 = C2 / 2` and `L = 1`.
//! Color images are compared on their channel-mean luminance unless
//! [`SsimColor::PerChannel`] is requested.
//!
//! MSE values are in squared `[0, 1]` units; multiply by [`SCALE_255_SQ`]
//! to compare with figures computed on 0–255 intensities.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::ImageBuffer;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const SSIM_C3: f64 = SSIM_C2 / 2.0;

/// Converts squared `[0, 1]` errors to squared 0–255 errors.
pub const SCALE_255_SQ: f64 = 255.0 * 255.0;

fn check_same(a: &ImageBuffer, b: &ImageBuffer, op: &'static str) -> Result<()> {
    let dims = |x: &ImageBuffer| (x.height(), x.width(), x.channels());
    if dims(a) != dims(b) {
        return Err(Error::shape(op, format!("{:?} vs {:?}", dims(a), dims(b))));
    }
    Ok(())
}

pub fn mse(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    check_same(a, b, "mse")?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.data().len() as f64)
}

/// `10·log10(peak² / MSE)`; identical images give `f64::INFINITY`.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer, peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(psnr_from_mse(m, peak))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SsimColor {
    /// SSIM of the channel-mean luminance images.
    #[default]
    Luminance,
    /// Mean of per-channel SSIMs.
    PerChannel,
}

/// Mean SSIM and the means of its luminance, contrast and structure terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimReport {
    pub ssim: f64,
    pub mean_l: f64,
    pub mean_c: f64,
    pub mean_s: f64,
}

pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<SsimReport> {
    ssim_with(a, b, SsimColor::Luminance)
}

pub fn ssim_with(a: &ImageBuffer, b: &ImageBuffer, color: SsimColor) -> Result<SsimReport> {
    check_same(a, b, "ssim")?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(
            "ssim",
            format!("{h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    match color {
        SsimColor::Luminance => Ok(ssim_plane(&luminance(a), &luminance(b), h, w)),
        SsimColor::PerChannel => {
            let n = a.channels() as f64;
            let mut acc = SsimReport { ssim: 0.0, mean_l: 0.0, mean_c: 0.0, mean_s: 0.0 };
            for c in 0..a.channels() {
                let r = ssim_plane(a.plane(c), b.plane(c), h, w);
                acc.ssim += r.ssim / n;
                acc.mean_l += r.mean_l / n;
                acc.mean_c += r.mean_c / n;
                acc.mean_s += r.mean_s / n;
            }
            Ok(acc)
        }
    }
}

fn luminance(img: &ImageBuffer) -> Vec<f64> {
    let hw = img.height() * img.width();
    let n = img.channels() as f64;
    (0..hw)
        .map(|i| (0..img.channels()).map(|c| img.plane(c)[i]).sum::<f64>() / n)
        .collect()
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let center = (size / 2) as f64;
    let taps: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - center).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Separable valid-mode filtering of an `h × w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        let line = &src[y * w..(y + 1) * w];
        for x in 0..wo {
            rows[y * wo + x] = taps.iter().zip(&line[x..x + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for (i, t) in taps.iter().enumerate() {
            let line = &rows[(y + i) * wo..(y + i + 1) * wo];
            for (o, v) in out[y * wo..(y + 1) * wo].iter_mut().zip(line) {
                *o += t * v;
            }
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> SsimReport {
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let mu_a = filter_valid(a, h, w, &taps);
    let mu_b = filter_valid(b, h, w, &taps);
    let e_aa = filter_valid(&prod(a, a), h, w, &taps);
    let e_bb = filter_valid(&prod(b, b), h, w, &taps);
    let e_ab = filter_valid(&prod(a, b), h, w, &taps);

    let n = mu_a.len() as f64;
    let mut sums = [0.0; 4];
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let var_a = (e_aa[i] - ma * ma).max(0.0);
        let var_b = (e_bb[i] - mb * mb).max(0.0);
        let cov = e_ab[i] - ma * mb;
        let (sa, sb) = (var_a.sqrt(), var_b.sqrt());
        let l = (2.0 * ma * mb + SSIM_C1) / (ma * ma + mb * mb + SSIM_C1);
        let c = (2.0 * sa * sb + SSIM_C2) / (var_a + var_b + SSIM_C2);
        let s = (cov + SSIM_C3) / (sa * sb + SSIM_C3);
        sums[0] += l * c * s;
        sums[1] += l;
        sums[2] += c;
        sums[3] += s;
    }
    SsimReport {
        ssim: sums[0] / n,
        mean_l: sums[1] / n,
        mean_c: sums[2] / n,
        mean_s: sums[3] / n,
    }
}

/// Total MSE split into the MSE between per-channel mean images and the MSE
/// between the zero-mean residuals. The two parts sum to the total.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MseDecomposition {
    pub total: f64,
    pub mean_part: f64,
    pub residual_part: f64,
}

pub fn mse_decompose(a: &ImageBuffer, b: &ImageBuffer) -> Result<MseDecomposition> {
    check_same(a, b, "mse_decompose")?;
    let hw = (a.height() * a.width()) as f64;
    let count = a.data().len() as f64;
    let mut mean_sq = 0.0;
    let mut resid_sq = 0.0;
    for c in 0..a.channels() {
        let (pa, pb) = (a.plane(c), b.plane(c));
        let ma = pa.iter().sum::<f64>() / hw;
        let mb = pb.iter().sum::<f64>() / hw;
        mean_sq += (ma - mb) * (ma - mb) * hw;
        resid_sq += pa
            .iter()
            .zip(pb)
            .map(|(x, y)| {
                let d = (x - ma) - (y - mb);
                d * d
            })
            .sum::<f64>();
    }
    Ok(MseDecomposition {
        total: mse(a, b)?,
        mean_part: mean_sq / count,
        residual_part: resid_sq / count,
    })
}

/// Everything reported for one image pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub psnr: f64,
    pub ssim: f64,
    pub mean_l: f64,
    pub mean_c: f64,
    pub mean_s: f64,
    pub mse_total: f64,
    pub mse_mean_part: f64,
    pub mse_residual_part: f64,
}

impl MetricsReport {
    pub fn compute(estimate: &ImageBuffer, reference: &ImageBuffer) -> Result<Self> {
        let s = ssim(estimate, reference)?;
        let d = mse_decompose(estimate, reference)?;
        Ok(Self {
            psnr: psnr_from_mse(d.total, 1.0),
            ssim: s.ssim,
            mean_l: s.mean_l,
            mean_c: s.mean_c,
            mean_s: s.mean_s,
            mse_total: d.total,
            mse_mean_part: d.mean_part,
            mse_residual_part: d.residual_part,
        })
    }

    fn fields(&self) -> [f64; 8] {
        [
            self.psnr,
            self.ssim,
            self.mean_l,
            self.mean_c,
            self.mean_s,
            self.mse_total,
            self.mse_mean_part,
            self.mse_residual_part,
        ]
    }

    /// Field-wise arithmetic mean; `None` for an empty slice.
    pub fn mean(reports: &[MetricsReport]) -> Option<Self> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let mut acc = [0.0; 8];
        for r in reports {
            for (a, v) in acc.iter_mut().zip(r.fields()) {
                *a += v / n;
            }
        }
        let [psnr, ssim, mean_l, mean_c, mean_s, mse_total, mse_mean_part, mse_residual_part] = acc;
        Some(Self {
            psnr,
            ssim,
            mean_l,
            mean_c,
            mean_s,
            mse_total,
            mse_mean_part,
            mse_residual_part,
        })
    }
}

pub const CSV_HEADER: &str = "image,psnr_db,ssim,mean_l,mean_c,mean_s,mse_total,mse_mean,mse_residual";

/// One CSV row per image plus a final `mean` row. Infinite PSNR prints as `inf`.
pub fn metrics_csv(rows: &[(String, MetricsReport)]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    let mut line = |name: &str, r: &MetricsReport| {
        let vals: Vec<String> = r.fields().iter().map(|v| format!("{v}")).collect();
        let _ = writeln!(out, "{},{}", csv_escape(name), vals.join(","));
    };
    for (name, r) in rows {
        line(name, r);
    }
    let reports: Vec<MetricsReport> = rows.iter().map(|(_, r)| *r).collect();
    if let Some(mean) = MetricsReport::mean(&reports) {
        line("mean", &mean);
    }
    out
}

fn csv_escape(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn write_metrics_csv(rows: &[(String, MetricsReport)], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, metrics_csv(rows)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::reference_ssim;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn img(h: usize, w: usize, c: usize, f: impl FnMut(usize) -> f64) -> ImageBuffer {
        ImageBuffer::new(h, w, c, (0..h * w * c).map(f).collect()).unwrap()
    }

    fn random(seed: u64, h: usize, w: usize, c: usize) -> ImageBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        img(h, w, c, |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn psnr_hand_cases() {
        let a = random(1, 8, 8, 3);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let lo = img(8, 8, 3, |_| 0.3);
        let hi = img(8, 8, 3, |_| 0.4);
        assert!((psnr(&lo, &hi, 1.0).unwrap() - 20.0).abs() < 1e-9);
        let black = img(8, 8, 3, |_| 0.0);
        let white = img(8, 8, 3, |_| 1.0);
        assert!(psnr(&black, &white, 1.0).unwrap().abs() < 1e-12);
        assert!(psnr(&black, &img(8, 8, 1, |_| 0.0), 1.0).is_err());
    }

    #[test]
    fn ssim_identical() {
        let a = random(2, 20, 24, 3);
        let r = ssim(&a, &a).unwrap();
        for v in [r.ssim, r.mean_l, r.mean_c, r.mean_s] {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ssim_constant_images() {
        let black = img(16, 16, 1, |_| 0.0);
        let white = img(16, 16, 1, |_| 1.0);
        let r = ssim(&black, &white).unwrap();
        let expected = SSIM_C1 / (1.0 + SSIM_C1);
        assert!((r.ssim - expected).abs() < 1e-12);
        assert!((r.ssim - 9.999e-5).abs() < 1e-7);
        assert!((r.mean_c - 1.0).abs() < 1e-12 && (r.mean_s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_matches_windowed_reference() {
        for seed in 0..5 {
            let a = random(10 + seed, 17, 21, 3);
            let b = random(20 + seed, 17, 21, 3);
            let fast = ssim(&a, &b).unwrap();
            let slow = reference_ssim(&a, &b);
            assert!((fast.ssim - slow).abs() < 1e-12, "{} vs {slow}", fast.ssim);
        }
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = random(3, 10, 30, 1);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn per_channel_mode() {
        let a = random(4, 16, 16, 3);
        let r = ssim_with(&a, &a, SsimColor::PerChannel).unwrap();
        assert!((r.ssim - 1.0).abs() < 1e-12);
        let b = random(5, 16, 16, 3);
        let r = ssim_with(&a, &b, SsimColor::PerChannel).unwrap();
        assert!(r.ssim < 0.5);
    }

    #[test]
    fn decomposition_cases() {
        let a = random(6, 9, 7, 3);
        assert_eq!(
            mse_decompose(&a, &a).unwrap(),
            MseDecomposition { total: 0.0, mean_part: 0.0, residual_part: 0.0 }
        );
        let shifted = img(9, 7, 3, |i| a.data()[i] + 0.2);
        let d = mse_decompose(&a, &shifted).unwrap();
        assert!((d.mean_part - 0.04).abs() < 1e-12);
        assert!(d.residual_part.abs() < 1e-12);
        assert!((d.total - 0.04).abs() < 1e-12);
    }

    #[test]
    fn report_and_csv() {
        let a = random(7, 12, 12, 3);
        let b = random(8, 12, 12, 3);
        let same = MetricsReport::compute(&a, &a).unwrap();
        assert_eq!(same.psnr, f64::INFINITY);
        assert!((same.ssim - 1.0).abs() < 1e-12);
        let diff = MetricsReport::compute(&a, &b).unwrap();
        let mean = MetricsReport::mean(&[diff, diff]).unwrap();
        assert!((mean.ssim - diff.ssim).abs() < 1e-15);

        let csv = metrics_csv(&[("x.png".into(), same), ("y,z.png".into(), diff)]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], CSV_HEADER);
        assert!(lines[1].starts_with("x.png,inf,"));
        assert!(lines[2].starts_with("\"y,z.png\","));
        assert!(lines[3].starts_with("mean,inf,"));
    }

    proptest! {
        #[test]
        fn decomposition_identity(seed in 0u64..1000, h in 1usize..12, w in 1usize..12) {
            let a = random(seed, h, w, 3);
            let b = random(seed + 5000, h, w, 3);
            let d = mse_decompose(&a, &b).unwrap();
            prop_assert!((d.total - (d.mean_part + d.residual_part)).abs() < 1e-9);
            prop_assert!((d.total - mse(&a, &b).unwrap()).abs() < 1e-15);
        }

        #[test]
        fn ssim_is_symmetric(seed in 0u64..1000) {
            let a = random(seed, 14, 13, 3);
            let b = random(seed + 1, 14, 13, 3);
            let ab = ssim(&a, &b).unwrap().ssim;
            let ba = ssim(&b, &a).unwrap().ssim;
            prop_assert!((ab - ba).abs() < 1e-12);
        }

        #[test]
        fn psnr_decreases_with_mse(m1 in 1e-6f64..1.0, m2 in 1e-6f64..1.0) {
            prop_assume!(m1 < m2);
            prop_assert!(psnr_from_mse(m1, 1.0) > psnr_from_mse(m2, 1.0));
        }
    }
}
