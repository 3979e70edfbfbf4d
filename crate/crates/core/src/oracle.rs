//! Slow reference implementations used only as test oracles.

use crate::tensor::{ConvSpec, Tensor};

/// Direct loop over output pixels and kernel taps.
pub fn reference_conv(input: &Tensor, weights: &Tensor, bias: &[f64], spec: &ConvSpec) -> Tensor {
    let [n, cin, h, w] = input.shape();
    let (ho, wo) = spec.output_hw(h, w).unwrap();
    let mut out = Tensor::zeros([n, spec.out_channels, ho, wo]);
    for b in 0..n {
        for co in 0..spec.out_channels {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias[co];
                    for ci in 0..cin {
                        for ky in 0..spec.kernel_h {
                            for kx in 0..spec.kernel_w {
                                let iy = oy as isize + ky as isize - spec.pad as isize;
                                let ix = ox as isize + kx as isize - spec.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += weights.get(co, ci, ky, kx)
                                        * input.get(b, ci, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    out.set(b, co, oy, ox, acc);
                }
            }
        }
    }
    out
}

/// Windowed SSIM evaluated directly: a normalized 11×11 Gaussian (σ = 1.5)
/// at every valid position, two-pass weighted moments, and the combined
/// `(2μaμb + C1)(2σab + C2) / ((μa² + μb² + C1)(σa² + σb² + C2))` form, on
/// channel-mean luminance.
pub fn reference_ssim(a: &crate::io::ImageBuffer, b: &crate::io::ImageBuffer) -> f64 {
    let (h, w, ch) = (a.height(), a.width(), a.channels());
    let lum = |img: &crate::io::ImageBuffer, y: usize, x: usize| {
        (0..ch).map(|c| img.plane(c)[y * w + x]).sum::<f64>() / ch as f64
    };
    let mut kernel = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (dy, row) in kernel.iter_mut().enumerate() {
        for (dx, k) in row.iter_mut().enumerate() {
            let r2 = (dy as f64 - 5.0).powi(2) + (dx as f64 - 5.0).powi(2);
            *k = (-r2 / (2.0 * 1.5 * 1.5)).exp();
            total += *k;
        }
    }
    let (c1, c2) = (1e-4, 9e-4);
    let mut sum = 0.0;
    let mut count = 0;
    for y0 in 0..=h - 11 {
        for x0 in 0..=w - 11 {
            let (mut ma, mut mb) = (0.0, 0.0);
            for dy in 0..11 {
                for dx in 0..11 {
                    let k = kernel[dy][dx] / total;
                    ma += k * lum(a, y0 + dy, x0 + dx);
                    mb += k * lum(b, y0 + dy, x0 + dx);
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for dy in 0..11 {
                for dx in 0..11 {
                    let k = kernel[dy][dx] / total;
                    let da = lum(a, y0 + dy, x0 + dx) - ma;
                    let db = lum(b, y0 + dy, x0 + dx) - mb;
                    va += k * da * da;
                    vb += k * db * db;
                    cov += k * da * db;
                }
            }
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    sum / count as f64
}
