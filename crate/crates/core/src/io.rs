//! PNG images, 16-bit depth maps and dataset manifests.
//!
//! Images live in memory as planar `f64` on `[0, 1]`. 8-bit samples map to
//! `v / 255` and 16-bit samples to `v / 65535`; writing clamps to `[0, 1]`
//! and rounds to the nearest code.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::haze::HazeParams;
use crate::tensor::Tensor;

/// Planar image: `data[c * H * W + y * W + x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(
                "ImageBuffer::new",
                format!(
                    "{height}x{width}x{channels} needs {} samples, got {}",
                    height * width * channels,
                    data.len()
                ),
            ));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("image sample {v}")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }

    /// Gray images are replicated into three channels.
    pub fn to_rgb(&self) -> ImageBuffer {
        if self.channels == 3 {
            return self.clone();
        }
        let mut data = Vec::with_capacity(self.data.len() * 3);
        for _ in 0..3 {
            data.extend_from_slice(&self.data);
        }
        ImageBuffer {
            height: self.height,
            width: self.width,
            channels: 3,
            data,
        }
    }

    /// `[1, C, H, W]` tensor sharing the planar layout.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            [1, self.channels, self.height, self.width],
            self.data.clone(),
        )
        .expect("layout matches")
    }

    /// Sample `n` of a tensor with 1 or 3 channels.
    pub fn from_tensor(t: &Tensor, n: usize) -> Result<Self> {
        let [batch, c, h, w] = t.shape();
        if n >= batch {
            return Err(Error::shape(
                "ImageBuffer::from_tensor",
                format!("sample {n} of batch {batch}"),
            ));
        }
        let per = c * h * w;
        Self::new(h, w, c, t.data()[n * per..(n + 1) * per].to_vec())
    }
}

fn image_err(path: &Path, message: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

/// Reads a PNG as gray (1 channel) or RGB (3 channels); alpha is dropped.
pub fn read_png(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| image_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| image_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| image_err(path, e))?;
    let (h, w) = (info.height as usize, info.width as usize);

    let (src_channels, keep) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => return Err(image_err(path, "palette was not expanded")),
    };
    let samples: Vec<f64> = match info.bit_depth {
        png::BitDepth::Eight => buf[..h * info.line_size]
            .chunks(info.line_size)
            .flat_map(|row| row[..w * src_channels].iter().map(|&v| v as f64 / 255.0))
            .collect(),
        png::BitDepth::Sixteen => buf[..h * info.line_size]
            .chunks(info.line_size)
            .flat_map(|row| {
                row[..w * src_channels * 2]
                    .chunks_exact(2)
                    .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / 65535.0)
            })
            .collect(),
        other => {
            return Err(image_err(
                path,
                format!("unsupported bit depth {other:?}"),
            ))
        }
    };

    let hw = h * w;
    let mut data = vec![0.0; hw * keep];
    for (i, px) in samples.chunks_exact(src_channels).enumerate() {
        for c in 0..keep {
            data[c * hw + i] = px[c];
        }
    }
    ImageBuffer::new(h, w, keep, data)
}

fn quantize(v: f64, max: f64) -> f64 {
    (v.clamp(0.0, 1.0) * max).round()
}

fn write_raw(path: &Path, img: &ImageBuffer, depth: png::BitDepth, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    encoder.set_color(if img.channels == 3 {
        png::ColorType::Rgb
    } else {
        png::ColorType::Grayscale
    });
    encoder.set_depth(depth);
    let mut writer = encoder.write_header().map_err(|e| image_err(path, e))?;
    writer.write_image_data(bytes).map_err(|e| image_err(path, e))?;
    writer.finish().map_err(|e| image_err(path, e))
}

fn interleaved(img: &ImageBuffer) -> impl Iterator<Item = f64> + '_ {
    let hw = img.height * img.width;
    (0..hw).flat_map(move |i| (0..img.channels).map(move |c| img.data[c * hw + i]))
}

/// Writes an 8-bit gray or RGB PNG.
pub fn write_png(img: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    let bytes: Vec<u8> = interleaved(img).map(|v| quantize(v, 255.0) as u8).collect();
    write_raw(path.as_ref(), img, png::BitDepth::Eight, &bytes)
}

/// Writes a 16-bit PNG (used for depth maps).
pub fn write_png16(img: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    let bytes: Vec<u8> = interleaved(img)
        .flat_map(|v| (quantize(v, 65535.0) as u16).to_be_bytes())
        .collect();
    write_raw(path.as_ref(), img, png::BitDepth::Sixteen, &bytes)
}

/// One row of a dataset manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub clean_path: PathBuf,
    pub depth_path: PathBuf,
    pub hazy_path: PathBuf,
    pub params: HazeParams,
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn format_real(v: f64) -> String {
    format!("{v:.16e}")
}

fn path_field(p: &Path) -> Result<String> {
    let s = p.to_string_lossy().into_owned();
    if s.contains(['\t', '\n', '\r']) {
        return Err(Error::InvalidArgument(format!(
            "manifest paths cannot contain tabs or newlines: {s:?}"
        )));
    }
    Ok(s)
}

/// Tab-separated: `clean, depth, hazy, A_r, A_g, A_b, beta`, one record per line.
pub fn write_manifest(records: &[DatasetRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for r in records {
        let [ar, ag, ab] = r.params.atmosphere;
        let fields = [
            path_field(&r.clean_path)?,
            path_field(&r.depth_path)?,
            path_field(&r.hazy_path)?,
            format_real(ar),
            format_real(ag),
            format_real(ab),
            format_real(r.params.beta),
        ];
        out.push_str(&fields.join("\t"));
        out.push('\n');
    }
    let mut f = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    f.write_all(out.as_bytes())
        .and_then(|_| f.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<DatasetRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 7 {
            return Err(parse_err(format!(
                "expected 7 tab-separated fields, found {}",
                fields.len()
            )));
        }
        let real = |s: &str, name: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| parse_err(format!("{name}: not a number: {s:?}")))
        };
        records.push(DatasetRecord {
            clean_path: PathBuf::from(fields[0]),
            depth_path: PathBuf::from(fields[1]),
            hazy_path: PathBuf::from(fields[2]),
            params: HazeParams {
                atmosphere: [
                    real(fields[3], "A_r")?,
                    real(fields[4], "A_g")?,
                    real(fields[5], "A_b")?,
                ],
                beta: real(fields[6], "beta")?,
                bias: 1.0,
            },
        });
    }
    Ok(records)
}
