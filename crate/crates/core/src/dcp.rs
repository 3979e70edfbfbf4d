//! Dark channel prior dehazing, the classical non-learned comparator.
//!
//! The pipeline estimates the dark channel, picks the atmospheric light from
//! the brightest dark-channel pixels, derives a coarse transmission map,
//! optionally refines it with a guided filter, and inverts the scattering
//! model with a transmission floor:
//!
//! ```text
//! t = 1 − ω · dark(I / A)
//! J = (I − A) / max(t, t0) + A
//! ```

use crate::error::{Error, Result};
use crate::io::ImageBuffer;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DcpConfig {
    /// Odd side length of the dark-channel window.
    pub patch: usize,
    /// Fraction of haze removed, `0 < ω ≤ 1`.
    pub omega: f64,
    /// Lower bound on the transmission used for recovery.
    pub t0: f64,
    /// Fraction of brightest dark-channel pixels averaged into `A`.
    pub top_fraction: f64,
    pub guided_radius: usize,
    pub guided_eps: f64,
    /// Refine the transmission with a guided filter.
    pub refine: bool,
}

impl Default for DcpConfig {
    fn default() -> Self {
        Self {
            patch: 15,
            omega: 0.95,
            t0: 0.1,
            top_fraction: 0.001,
            guided_radius: 40,
            guided_eps: 1e-3,
            refine: true,
        }
    }
}

impl DcpConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.patch.is_multiple_of(2) {
            return bad(format!("patch must be odd, got {}", self.patch));
        }
        if !(self.omega > 0.0 && self.omega <= 1.0) {
            return bad(format!("omega must lie in (0, 1], got {}", self.omega));
        }
        if !(self.t0 > 0.0 && self.t0 < 1.0) {
            return bad(format!("t0 must lie in (0, 1), got {}", self.t0));
        }
        if !(self.top_fraction > 0.0 && self.top_fraction <= 1.0) {
            return bad(format!("top_fraction must lie in (0, 1], got {}", self.top_fraction));
        }
        if !(self.guided_eps > 0.0) {
            return bad(format!("guided_eps must be positive, got {}", self.guided_eps));
        }
        Ok(())
    }
}

/// Sliding minimum along rows then columns; windows are clipped at the
/// border, which equals edge replication for a minimum.
fn min_filter(src: &[f64], h: usize, w: usize, radius: usize) -> Vec<f64> {
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (lo, hi) = (x.saturating_sub(radius), (x + radius + 1).min(w));
            rows[y * w + x] = src[y * w + lo..y * w + hi].iter().copied().fold(f64::INFINITY, f64::min);
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let (lo, hi) = (y.saturating_sub(radius), (y + radius + 1).min(h));
        for x in 0..w {
            out[y * w + x] = (lo..hi).map(|yy| rows[yy * w + x]).fold(f64::INFINITY, f64::min);
        }
    }
    out
}

/// Per-pixel minimum over channels, then over the `patch × patch` neighborhood.
pub fn dark_channel(img: &ImageBuffer, patch: usize) -> Result<ImageBuffer> {
    let (h, w) = (img.height(), img.width());
    if patch.is_multiple_of(2) || patch == 0 {
        return Err(Error::InvalidArgument(format!("patch must be odd, got {patch}")));
    }
    if patch > h.min(w) {
        return Err(Error::InvalidArgument(format!(
            "patch {patch} exceeds the {h}x{w} image"
        )));
    }
    let channel_min: Vec<f64> = (0..h * w)
        .map(|i| (0..img.channels()).map(|c| img.plane(c)[i]).fold(f64::INFINITY, f64::min))
        .collect();
    ImageBuffer::new(h, w, 1, min_filter(&channel_min, h, w, patch / 2))
}

/// Mean color of the `top_fraction` brightest dark-channel pixels (at
/// least one). Ties keep row-major order.
pub fn estimate_atmospheric_light(img: &ImageBuffer, dark: &ImageBuffer, top_fraction: f64) -> Result<[f64; 3]> {
    if !(top_fraction > 0.0 && top_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "top_fraction must lie in (0, 1], got {top_fraction}"
        )));
    }
    if (img.height(), img.width()) != (dark.height(), dark.width()) || img.channels() != 3 {
        return Err(Error::shape(
            "estimate_atmospheric_light",
            "expected an RGB image and a dark channel of the same size",
        ));
    }
    let hw = img.height() * img.width();
    let count = ((top_fraction * hw as f64).ceil() as usize).clamp(1, hw);
    let d = dark.plane(0);
    let mut order: Vec<usize> = (0..hw).collect();
    // Stable sort keeps row-major order among equal values.
    order.sort_by(|&a, &b| d[b].total_cmp(&d[a]));
    let mut a = [0.0; 3];
    for &i in &order[..count] {
        for (c, v) in a.iter_mut().enumerate() {
            *v += img.plane(c)[i];
        }
    }
    Ok(a.map(|v| v / count as f64))
}

/// `t = 1 − ω · dark(I / A)` with the normalized dark channel clamped to
/// `[0, 1]`, so `t ∈ [1 − ω, 1]`.
pub fn estimate_transmission(img: &ImageBuffer, atmosphere: [f64; 3], omega: f64, patch: usize) -> Result<ImageBuffer> {
    if img.channels() != 3 {
        return Err(Error::shape("estimate_transmission", "expected an RGB image"));
    }
    if let Some(a) = atmosphere.iter().find(|a| !(**a > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "atmospheric light must be positive, got {a}"
        )));
    }
    let hw = img.height() * img.width();
    let mut normalized = Vec::with_capacity(3 * hw);
    for (c, a) in atmosphere.iter().enumerate() {
        normalized.extend(img.plane(c).iter().map(|v| v / a));
    }
    let normalized = ImageBuffer::new(img.height(), img.width(), 3, normalized)?;
    let dark = dark_channel(&normalized, patch)?;
    let t = dark.data().iter().map(|d| 1.0 - omega * d.clamp(0.0, 1.0)).collect();
    ImageBuffer::new(img.height(), img.width(), 1, t)
}

/// Summed-area table of an `h × w` plane, `(h + 1) × (w + 1)`.
fn integral(src: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut s = vec![0.0; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += src[y * w + x];
            s[(y + 1) * (w + 1) + x + 1] = s[y * (w + 1) + x + 1] + row;
        }
    }
    s
}

/// Mean over the `(2r + 1)²` window clipped to the image.
pub fn box_mean(src: &[f64], h: usize, w: usize, radius: usize) -> Vec<f64> {
    let s = integral(src, h, w);
    let at = |y: usize, x: usize| s[y * (w + 1) + x];
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(radius), (y + radius + 1).min(h));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(radius), (x + radius + 1).min(w));
            let area = ((y1 - y0) * (x1 - x0)) as f64;
            out[y * w + x] = (at(y1, x1) - at(y0, x1) - at(y1, x0) + at(y0, x0)) / area;
        }
    }
    out
}

/// Guided filter with a gray guide:
///
/// ```text
/// a = cov(g, p) / (var(g) + eps),  b = mean(p) − a · mean(g)
/// q = mean(a) · g + mean(b)
/// ```
///
/// with box means of the given radius.
pub fn guided_filter(guide: &ImageBuffer, input: &ImageBuffer, radius: usize, eps: f64) -> Result<ImageBuffer> {
    let (h, w) = (guide.height(), guide.width());
    if (input.height(), input.width()) != (h, w) || guide.channels() != 1 || input.channels() != 1 {
        return Err(Error::shape(
            "guided_filter",
            "guide and input must be single-channel images of the same size",
        ));
    }
    if radius == 0 || radius >= h.min(w) {
        return Err(Error::InvalidArgument(format!(
            "guided filter radius {radius} must be positive and smaller than the {h}x{w} image"
        )));
    }
    let (g, p) = (guide.data(), input.data());
    let mean = |v: &[f64]| box_mean(v, h, w, radius);
    let mean_g = mean(g);
    let mean_p = mean(p);
    let gg: Vec<f64> = g.iter().map(|v| v * v).collect();
    let gp: Vec<f64> = g.iter().zip(p).map(|(a, b)| a * b).collect();
    let corr_gg = mean(&gg);
    let corr_gp = mean(&gp);
    let mut a = vec![0.0; h * w];
    let mut b = vec![0.0; h * w];
    for i in 0..h * w {
        let var = corr_gg[i] - mean_g[i] * mean_g[i];
        let cov = corr_gp[i] - mean_g[i] * mean_p[i];
        a[i] = cov / (var + eps);
        b[i] = mean_p[i] - a[i] * mean_g[i];
    }
    let mean_a = mean(&a);
    let mean_b = mean(&b);
    let q = (0..h * w).map(|i| mean_a[i] * g[i] + mean_b[i]).collect();
    ImageBuffer::new(h, w, 1, q)
}

#[derive(Clone, Debug)]
pub struct DcpOutput {
    /// Recovered image, unclamped.
    pub clean: ImageBuffer,
    /// Transmission used for recovery, before the `t0` floor.
    pub transmission: ImageBuffer,
    pub atmosphere: [f64; 3],
}

/// Full pipeline. The guided-filter radius is capped at `min(H, W) − 1` so
/// the default settings also run on small images.
pub fn dcp_dehaze(img: &ImageBuffer, config: &DcpConfig) -> Result<DcpOutput> {
    config.validate()?;
    let img = img.to_rgb();
    let (h, w) = (img.height(), img.width());
    let dark = dark_channel(&img, config.patch)?;
    let atmosphere = estimate_atmospheric_light(&img, &dark, config.top_fraction)?;
    let mut t = estimate_transmission(&img, atmosphere, config.omega, config.patch)?;
    if config.refine && h.min(w) > 1 {
        let gray: Vec<f64> = (0..h * w).map(|i| (0..3).map(|c| img.plane(c)[i]).sum::<f64>() / 3.0).collect();
        let guide = ImageBuffer::new(h, w, 1, gray)?;
        let radius = config.guided_radius.min(h.min(w) - 1);
        t = guided_filter(&guide, &t, radius, config.guided_eps)?;
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(3 * hw);
    for (c, a) in atmosphere.iter().enumerate() {
        out.extend(
            img.plane(c)
                .iter()
                .zip(t.data())
                .map(|(i, tv)| (i - a) / tv.max(config.t0) + a),
        );
    }
    Ok(DcpOutput {
        clean: ImageBuffer::new(h, w, 3, out)?,
        transmission: t,
        atmosphere,
    })
}
