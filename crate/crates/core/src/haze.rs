//! Haze synthesis with the atmospheric scattering model.
//!
//! A clean image `J` seen through homogeneous haze becomes
//! `I = J·t + A·(1 − t)` with transmission `t = exp(−β·d)` for normalized
//! depth `d ∈ [0, 1]`. Everything here works in linear `[0, 1]` intensity;
//! no gamma handling is applied. Hazy values are never clamped in memory,
//! only when written to an 8-bit PNG.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{self, DatasetRecord, ImageBuffer};
use crate::tensor::Tensor;

/// Scattering coefficients used to synthesize the training data.
pub const BETA_CHOICES: [f64; 7] = [0.4, 0.6, 0.8, 1.0, 1.2, 1.4, 1.6];

/// Range each atmospheric light channel is drawn from.
pub const ATMOSPHERE_RANGE: (f64, f64) = (0.6, 1.0);

pub const MANIFEST_NAME: &str = "manifest.tsv";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HazeParams {
    /// Per-channel atmospheric light `A`.
    pub atmosphere: [f64; 3],
    /// Scattering coefficient `β` per unit normalized depth.
    pub beta: f64,
    /// Constant bias `b` of the clean-image generation formula.
    pub bias: f64,
}

impl HazeParams {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let (lo, hi) = ATMOSPHERE_RANGE;
        let atmosphere = [
            rng.random_range(lo..=hi),
            rng.random_range(lo..=hi),
            rng.random_range(lo..=hi),
        ];
        let beta = BETA_CHOICES[rng.random_range(0..BETA_CHOICES.len())];
        Self {
            atmosphere,
            beta,
            bias: 1.0,
        }
    }

    /// Samples `A` only; `beta` is fixed.
    pub fn sample_with_beta<R: Rng + ?Sized>(rng: &mut R, beta: f64) -> Self {
        Self {
            beta,
            ..Self::sample(rng)
        }
    }
}

/// Deterministic draw of atmospheric light and scattering coefficient.
pub fn sample_haze_params(seed: u64) -> HazeParams {
    HazeParams::sample(&mut ChaCha8Rng::seed_from_u64(seed))
}

/// Scene depth normalized to `[0, 1]`, 1 being farthest.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                "DepthMap::new",
                format!("{height}x{width} needs {} values, got {}", height * width, data.len()),
            ));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "depth values must lie in [0, 1], found {v}"
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Min-max normalizes raw depths. A constant map becomes all zeros.
    pub fn normalized(height: usize, width: usize, raw: &[f64]) -> Result<Self> {
        if let Some(v) = raw.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("depth value {v}")));
        }
        let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        let data = raw
            .iter()
            .map(|&v| if span > 0.0 { (v - lo) / span } else { 0.0 })
            .collect();
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_image(&self) -> ImageBuffer {
        ImageBuffer::new(self.height, self.width, 1, self.data.clone()).expect("valid depth")
    }
}

/// `t(x) = exp(−β·d(x))` as a `[1, 1, H, W]` tensor.
pub fn transmission_from_depth(depth: &DepthMap, beta: f64) -> Result<Tensor> {
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "scattering coefficient must be finite and non-negative, got {beta}"
        )));
    }
    Tensor::new(
        [1, 1, depth.height, depth.width],
        depth.data.iter().map(|&d| (-beta * d).exp()).collect(),
    )
}

/// `I = J·t + A·(1 − t)`, with `t` (`[N, 1, H, W]`) broadcast over the
/// three channels of `clean` (`[N, 3, H, W]`).
pub fn apply_scattering(clean: &Tensor, t: &Tensor, atmosphere: [f64; 3]) -> Result<Tensor> {
    let [n, c, h, w] = clean.shape();
    if c != 3 || t.shape() != [n, 1, h, w] {
        return Err(Error::shape(
            "apply_scattering",
            format!(
                "clean {:?} needs 3 channels and transmission [{n}, 1, {h}, {w}], got {:?}",
                clean.shape(),
                t.shape()
            ),
        ));
    }
    let mut out = clean.clone();
    for b in 0..n {
        let tp = t.plane(b, 0);
        for (ch, &a) in atmosphere.iter().enumerate() {
            for (v, &tv) in out.plane_mut(b, ch).iter_mut().zip(tp) {
                *v = *v * tv + a * (1.0 - tv);
            }
        }
    }
    Ok(out)
}

/// Hazy image for `clean` (`[1, 3, H, W]`), `depth` and `params`.
pub fn synthesize(clean: &Tensor, depth: &DepthMap, params: &HazeParams) -> Result<Tensor> {
    let t = transmission_from_depth(depth, params.beta)?;
    apply_scattering(clean, &t, params.atmosphere)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let sector = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let h = rng.random_range(0.0..1.0);
    let s = rng.random_range(0.35..1.0);
    let v = rng.random_range(0.25..1.0);
    hsv_to_rgb(h, s, v)
}

/// Deterministic synthetic scene: a receding backdrop and floor with a few
/// textured boxes in front, each region carrying a consistent depth ramp.
///
/// Returns the clean image (`[1, 3, H, W]`) and a depth map spanning exactly
/// `[0, 1]`, so reloading it through min-max normalization is a no-op.
pub fn procedural_scene(seed: u64, height: usize, width: usize) -> Result<(Tensor, DepthMap)> {
    if height < 16 || width < 16 {
        return Err(Error::InvalidArgument(format!(
            "procedural scenes need at least 16x16 pixels, got {height}x{width}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (height as f64, width as f64);
    let hw = height * width;
    let mut rgb = vec![0.0; 3 * hw];
    let mut depth = vec![0.0; hw];

    let horizon = rng.random_range(0.35..0.65) * h;
    let back_top = random_color(&mut rng);
    let back_bottom = random_color(&mut rng);
    let floor_near = random_color(&mut rng);
    let floor_far = random_color(&mut rng);
    let floor_depth = rng.random_range(0.55..0.85);
    let (freq, phase) = (rng.random_range(0.05..0.3), rng.random_range(0.0..6.3));

    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            let fy = y as f64 + 0.5;
            let (color, d) = if fy < horizon {
                let s = fy / horizon;
                let c = lerp3(back_top, back_bottom, s);
                (c, 1.0 - 0.1 * s)
            } else {
                let s = (fy - horizon) / (h - horizon);
                let c = lerp3(floor_far, floor_near, s);
                let stripe = 0.08 * ((x as f64) * freq + phase + 4.0 * s).sin();
                (c.map(|v| v + stripe), floor_depth * (1.0 - s))
            };
            for (ch, v) in color.iter().enumerate() {
                rgb[ch * hw + i] = *v;
            }
            depth[i] = d;
        }
    }

    let boxes = rng.random_range(3..=6);
    // (depth, [y0, x0, y1, x1], color, tilt, texture)
    #[allow(clippy::type_complexity)]
    let mut specs: Vec<(f64, [usize; 4], [f64; 3], f64, f64)> = (0..boxes)
        .map(|_| {
            let bh = rng.random_range(0.15..0.5) * h;
            let bw = rng.random_range(0.15..0.5) * w;
            let y0 = rng.random_range(0.0..(h - bh));
            let x0 = rng.random_range(0.0..(w - bw));
            let rect = [
                y0 as usize,
                x0 as usize,
                ((y0 + bh) as usize).min(height),
                ((x0 + bw) as usize).min(width),
            ];
            let d = rng.random_range(0.05..0.75);
            let tilt = rng.random_range(-0.08..0.08);
            let texture = rng.random_range(0.0..0.12);
            (d, rect, random_color(&mut rng), tilt, texture)
        })
        .collect();
    // Painter's order: far boxes first so nearer ones occlude them.
    specs.sort_by(|a, b| b.0.total_cmp(&a.0));
    for (d, [y0, x0, y1, x1], color, tilt, texture) in specs {
        for y in y0..y1 {
            for x in x0..x1 {
                let i = y * width + x;
                let u = (x - x0) as f64 / (x1 - x0).max(1) as f64;
                let check = if ((x - x0) / 4 + (y - y0) / 4) % 2 == 0 { texture } else { -texture };
                for (ch, v) in color.iter().enumerate() {
                    rgb[ch * hw + i] = v * (1.0 + check);
                }
                depth[i] = d + tilt * (u - 0.5);
            }
        }
    }

    for v in &mut rgb {
        *v = v.clamp(0.0, 1.0);
    }
    let clean = Tensor::new([1, 3, height, width], rgb)?;
    let depth = DepthMap::normalized(height, width, &depth)?;
    Ok((clean, depth))
}

fn lerp3(a: [f64; 3], b: [f64; 3], s: f64) -> [f64; 3] {
    [0, 1, 2].map(|i| a[i] + (b[i] - a[i]) * s)
}

/// Reads a depth PNG (any bit depth, gray or color) and min-max normalizes it.
pub fn read_depth(path: impl AsRef<Path>) -> Result<DepthMap> {
    let img = io::read_png(path)?;
    DepthMap::normalized(img.height(), img.width(), img.plane(0))
}

/// Outcome of [`build_dataset`].
#[derive(Clone, Debug, Default)]
pub struct DatasetSummary {
    pub records: Vec<DatasetRecord>,
    /// Clean images that produced no record, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
    pub manifest_path: PathBuf,
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut stems = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if path.is_file() && is_png {
            if let Some(stem) = path.file_stem() {
                stems.insert(stem.to_string_lossy().into_owned(), path);
            }
        }
    }
    Ok(stems)
}

/// Synthesizes hazy counterparts for every clean PNG in `clean_dir` that has
/// a depth PNG with the same stem in `depth_dir`.
///
/// With `betas = None` each clean image yields one hazy image with sampled
/// `A` and `β`. With explicit `betas`, it yields one hazy image per listed
/// `β`, each with freshly sampled `A`. Random draws depend only on `seed`
/// and the image's position in stem order, and the manifest
/// (`out_dir/manifest.tsv`) is written in stem order, so the output does not
/// depend on scheduling.
pub fn build_dataset(
    clean_dir: &Path,
    depth_dir: &Path,
    out_dir: &Path,
    seed: u64,
    betas: Option<&[f64]>,
) -> Result<DatasetSummary> {
    if let Some(bs) = betas {
        if let Some(b) = bs.iter().find(|b| !(**b >= 0.0) || !b.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid beta {b}")));
        }
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let clean = png_stems(clean_dir)?;
    let depth = png_stems(depth_dir)?;

    let jobs: Vec<(usize, &String, &PathBuf)> = clean
        .iter()
        .enumerate()
        .map(|(i, (stem, path))| (i, stem, path))
        .collect();

    let results: Vec<std::result::Result<Vec<DatasetRecord>, (PathBuf, String)>> = jobs
        .par_iter()
        .map(|&(index, stem, clean_path)| {
            let Some(depth_path) = depth.get(stem) else {
                return Err((clean_path.clone(), "no depth map with matching stem".into()));
            };
            synth_one(index, stem, clean_path, depth_path, out_dir, seed, betas)
                .map_err(|e| (clean_path.clone(), e.to_string()))
        })
        .collect();

    let mut summary = DatasetSummary {
        manifest_path: out_dir.join(MANIFEST_NAME),
        ..Default::default()
    };
    for r in results {
        match r {
            Ok(recs) => summary.records.extend(recs),
            Err(skip) => summary.skipped.push(skip),
        }
    }
    io::write_manifest(&summary.records, &summary.manifest_path)?;
    Ok(summary)
}

fn synth_one(
    index: usize,
    stem: &str,
    clean_path: &Path,
    depth_path: &Path,
    out_dir: &Path,
    seed: u64,
    betas: Option<&[f64]>,
) -> Result<Vec<DatasetRecord>> {
    let clean = io::read_png(clean_path)?.to_rgb();
    let depth = read_depth(depth_path)?;
    if (clean.height(), clean.width()) != (depth.height(), depth.width()) {
        return Err(Error::shape(
            "build_dataset",
            format!(
                "clean is {}x{}, depth is {}x{}",
                clean.height(),
                clean.width(),
                depth.height(),
                depth.width()
            ),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let params: Vec<HazeParams> = match betas {
        None => vec![HazeParams::sample(&mut rng)],
        Some(bs) => bs
            .iter()
            .map(|&b| HazeParams::sample_with_beta(&mut rng, b))
            .collect(),
    };

    let clean_t = clean.to_tensor();
    params
        .into_iter()
        .enumerate()
        .map(|(k, p)| {
            let hazy = synthesize(&clean_t, &depth, &p)?;
            let hazy_path = out_dir.join(format!("{stem}_{k}.png"));
            io::write_png(&ImageBuffer::from_tensor(&hazy, 0)?, &hazy_path)?;
            Ok(DatasetRecord {
                clean_path: clean_path.to_path_buf(),
                depth_path: depth_path.to_path_buf(),
                hazy_path,
                params: p,
            })
        })
        .collect()
}

/// Writes `count` procedural scenes as `out/clean/scene_NNNNN.png` (8-bit RGB)
/// and `out/depth/scene_NNNNN.png` (16-bit gray). Scene `i` uses seed
/// `seed + i`.
pub fn write_scenes(out_dir: &Path, count: usize, height: usize, width: usize, seed: u64) -> Result<Vec<(PathBuf, PathBuf)>> {
    let clean_dir = out_dir.join("clean");
    let depth_dir = out_dir.join("depth");
    for d in [&clean_dir, &depth_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    (0..count)
        .into_par_iter()
        .map(|i| {
            let (clean, depth) = procedural_scene(seed.wrapping_add(i as u64), height, width)?;
            let name = format!("scene_{i:05}.png");
            let (cp, dp) = (clean_dir.join(&name), depth_dir.join(&name));
            io::write_png(&ImageBuffer::from_tensor(&clean, 0)?, &cp)?;
            io::write_png16(&depth.to_image(), &dp)?;
            Ok((cp, dp))
        })
        .collect()
}
