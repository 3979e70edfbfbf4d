//! Mini-batch SGD training of AOD-Net on a synthetic manifest, and
//! evaluation of a trained model.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{self, DatasetRecord, ImageBuffer};
use crate::metrics::MetricsReport;
use crate::model::{self, AodNetParams, ArchVariant};
use crate::tensor::{self, ClipMode, GradTape, SgdMomentum, Tensor};

/// Scale of the objective whose gradient drives the update. The logged loss
/// is always the per-element mean squared error.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LossScale {
    /// Half the squared error summed over each sample, averaged over the
    /// batch: `Σ‖Ĵ − J‖² / 2N`, the Euclidean loss of Caffe.
    #[default]
    PerSample,
    /// Mean over every element of the batch.
    Mean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Gradient clipping bound.
    pub clip_bound: f64,
    pub clip_mode: ClipMode,
    pub loss_scale: LossScale,
    /// Random `(height, width)` crop taken from every sample each epoch.
    pub crop: Option<(usize, usize)>,
    pub seed: u64,
    pub init_std: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 0.0001,
            batch_size: 8,
            epochs: 40,
            clip_bound: 0.1,
            clip_mode: ClipMode::Elementwise,
            loss_scale: LossScale::PerSample,
            crop: None,
            seed: 0,
            init_std: model::DEFAULT_INIT_STD,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("clip bound", self.clip_bound),
            ("init std", self.init_std),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if let Some((h, w)) = self.crop {
            if h < model::MIN_SPATIAL || w < model::MIN_SPATIAL {
                return Err(Error::InvalidArgument(format!(
                    "crop {h}x{w} is below the {m}x{m} minimum",
                    m = model::MIN_SPATIAL
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationLog {
    pub iteration: usize,
    pub epoch: usize,
    /// Batch MSE before the update.
    pub loss: f64,
    /// Share of gradient entries changed by clipping.
    pub clipped_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub seconds: f64,
    pub clipped_fraction: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub iterations: Vec<IterationLog>,
    pub epochs: Vec<EpochLog>,
}

pub const LOSS_CSV_HEADER: &str = "iteration,epoch,loss,clipped_fraction";

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{LOSS_CSV_HEADER}\n");
        for it in &self.iterations {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                it.iteration, it.epoch, io::format_real(it.loss), it.clipped_fraction
            );
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// One hazy/clean training pair, each `[1, 3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub hazy: Tensor,
    pub clean: Tensor,
}

impl Sample {
    pub fn new(hazy: Tensor, clean: Tensor) -> Result<Self> {
        hazy.expect_same_shape(&clean, "sample")?;
        if hazy.batch() != 1 || hazy.channels() != 3 {
            return Err(Error::shape(
                "sample",
                format!("expected [1, 3, H, W], got {:?}", hazy.shape()),
            ));
        }
        Ok(Self { hazy, clean })
    }
}

/// Decodes every record, in manifest order.
pub fn load_samples(records: &[DatasetRecord]) -> Result<Vec<Sample>> {
    records
        .par_iter()
        .map(|r| {
            let hazy = io::read_png(&r.hazy_path)?.to_rgb();
            let clean = io::read_png(&r.clean_path)?.to_rgb();
            if (hazy.height(), hazy.width()) != (clean.height(), clean.width()) {
                return Err(Error::Image {
                    path: r.hazy_path.clone(),
                    message: format!(
                        "hazy image is {}x{} but {} is {}x{}",
                        hazy.height(),
                        hazy.width(),
                        r.clean_path.display(),
                        clean.height(),
                        clean.width()
                    ),
                });
            }
            Sample::new(hazy.to_tensor(), clean.to_tensor())
        })
        .collect()
}

/// Loads the records and trains on them.
pub fn train(
    records: &[DatasetRecord],
    config: &TrainConfig,
    arch: ArchVariant,
) -> Result<(AodNetParams, TrainLog)> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("manifest has no records".into()));
    }
    config.validate()?;
    let samples = load_samples(records)?;
    train_samples(&samples, config, arch, |_, _, _| Ok(()))
}

/// Trains on in-memory samples. `on_epoch` runs after every epoch with the
/// 1-based epoch number and may, for example, write checkpoints.
pub fn train_samples(
    samples: &[Sample],
    config: &TrainConfig,
    arch: ArchVariant,
    mut on_epoch: impl FnMut(usize, &AodNetParams, &EpochLog) -> Result<()>,
) -> Result<(AodNetParams, TrainLog)> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no training samples".into()));
    }
    check_sizes(samples, config.crop)?;

    let mut params = model::init_params(config.seed, config.init_std, arch)?;
    let mut velocity: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let sgd = SgdMomentum {
        lr: config.lr,
        momentum: config.momentum,
        weight_decay: config.weight_decay,
    };
    let param_scalars = params.param_count();
    let mut log = TrainLog::default();
    let mut iteration = 0;

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(epoch as u64));
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);

        let (mut loss_sum, mut clipped_sum, mut steps) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let mut hazy = Vec::with_capacity(chunk.len());
            let mut clean = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = &samples[i];
                match config.crop {
                    Some((ch, cw)) => {
                        let y = rng.random_range(0..=s.hazy.height() - ch);
                        let x = rng.random_range(0..=s.hazy.width() - cw);
                        hazy.push(s.hazy.crop(y, x, ch, cw)?);
                        clean.push(s.clean.crop(y, x, ch, cw)?);
                    }
                    None => {
                        hazy.push(s.hazy.clone());
                        clean.push(s.clean.clone());
                    }
                }
            }

            let mut tape = GradTape::new();
            let input = tape.constant(Tensor::stack(&hazy)?);
            let target = tape.constant(Tensor::stack(&clean)?);
            let vars = model::record_dehaze(&params, &mut tape, input)?;
            let loss_var = tape.mse_loss(vars.clean, target)?;
            let loss = tape.value(loss_var).data()[0];
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss is {loss} at iteration {iteration} (epoch {epoch})"
                )));
            }
            let mut grads = tape.backward(loss_var)?;
            let mut g: Vec<Tensor> = vars
                .params
                .iter()
                .zip(params.tensors())
                .map(|(v, p)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect();
            if config.loss_scale == LossScale::PerSample {
                // Gradient of the mean, times elements per sample / 2.
                let factor = (tape.value(input).len() / chunk.len()) as f64 / 2.0;
                for t in &mut g {
                    for v in t.data_mut() {
                        *v *= factor;
                    }
                }
            }
            let clipped = tensor::clip_gradients(&mut g, config.clip_bound, config.clip_mode)?;
            sgd.step(params.tensors_mut(), &g, &mut velocity)
                .map_err(|e| Error::NonFinite(format!("iteration {iteration} (epoch {epoch}): {e}")))?;

            log.iterations.push(IterationLog {
                iteration,
                epoch,
                loss,
                clipped_fraction: clipped as f64 / param_scalars as f64,
            });
            loss_sum += loss;
            clipped_sum += clipped;
            steps += 1;
            iteration += 1;
        }

        let entry = EpochLog {
            epoch,
            mean_loss: loss_sum / steps as f64,
            seconds: started.elapsed().as_secs_f64(),
            clipped_fraction: clipped_sum as f64 / (steps * param_scalars) as f64,
        };
        on_epoch(epoch, &params, &entry)?;
        log.epochs.push(entry);
    }
    Ok((params, log))
}

fn check_sizes(samples: &[Sample], crop: Option<(usize, usize)>) -> Result<()> {
    let first = samples[0].hazy.shape();
    for (i, s) in samples.iter().enumerate() {
        let [_, _, h, w] = s.hazy.shape();
        match crop {
            Some((ch, cw)) if ch > h || cw > w => {
                return Err(Error::InvalidArgument(format!(
                    "crop {ch}x{cw} does not fit sample {i} of size {h}x{w}"
                )))
            }
            None if s.hazy.shape() != first => {
                return Err(Error::InvalidArgument(format!(
                    "sample {i} is {h}x{w} but sample 0 is {}x{}; pass a crop to train on mixed sizes",
                    first[2], first[3]
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

/// Per-record metrics and their means.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub rows: Vec<(String, MetricsReport)>,
    pub mean: MetricsReport,
}

impl Evaluation {
    pub fn to_csv(&self) -> String {
        crate::metrics::metrics_csv(&self.rows)
    }
}

/// Scores `restore(hazy)` against the clean image for every sample. The
/// restored image is clamped to `[0, 1]`, as it would be when saved.
pub fn evaluate_with<F>(samples: &[(String, Sample)], restore: F) -> Result<Evaluation>
where
    F: Fn(&Tensor) -> Result<Tensor> + Sync,
{
    if samples.is_empty() {
        return Err(Error::InvalidArgument("nothing to evaluate".into()));
    }
    let rows: Vec<(String, MetricsReport)> = samples
        .par_iter()
        .map(|(name, s)| {
            let out = restore(&s.hazy)?.map(|v| v.clamp(0.0, 1.0));
            let est = ImageBuffer::from_tensor(&out, 0)?;
            let reference = ImageBuffer::from_tensor(&s.clean, 0)?;
            Ok((name.clone(), MetricsReport::compute(&est, &reference)?))
        })
        .collect::<Result<_>>()?;
    let reports: Vec<MetricsReport> = rows.iter().map(|(_, r)| *r).collect();
    let mean = MetricsReport::mean(&reports).expect("rows are non-empty");
    Ok(Evaluation { rows, mean })
}

/// Loads the records and scores the model's output on each, named by the
/// hazy file name.
pub fn evaluate(params: &AodNetParams, records: &[DatasetRecord]) -> Result<Evaluation> {
    evaluate_with(&named_samples(records)?, |hazy| model::dehaze(params, hazy))
}

pub fn named_samples(records: &[DatasetRecord]) -> Result<Vec<(String, Sample)>> {
    let samples = load_samples(records)?;
    Ok(records
        .iter()
        .zip(samples)
        .map(|(r, s)| {
            let name = r
                .hazy_path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| r.hazy_path.display().to_string());
            (name, s)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::haze::{self, HazeParams};
    use crate::model::save_checkpoint;

    fn synthetic(seed: u64, size: usize, beta: f64) -> Sample {
        let (clean, depth) = haze::procedural_scene(seed, size, size).unwrap();
        let params = HazeParams {
            atmosphere: [0.8, 0.85, 0.9],
            beta,
            bias: 1.0,
        };
        let hazy = haze::synthesize(&clean, &depth, &params).unwrap();
        Sample::new(hazy, clean).unwrap()
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let cfg = TrainConfig { epochs: 0, seed: 9, ..Default::default() };
        let (p, log) = train_samples(&[synthetic(1, 16, 1.0)], &cfg, ArchVariant::MultiScale, |_, _, _| Ok(())).unwrap();
        assert_eq!(p, model::init_params(9, cfg.init_std, ArchVariant::MultiScale).unwrap());
        assert!(log.iterations.is_empty() && log.epochs.is_empty());
    }

    #[test]
    fn overfits_a_single_sample() {
        let cfg = TrainConfig { epochs: 200, batch_size: 1, seed: 3, ..Default::default() };
        let (_, log) = train_samples(&[synthetic(2, 16, 1.2)], &cfg, ArchVariant::MultiScale, |_, _, _| Ok(())).unwrap();
        let first = log.iterations[0].loss;
        let last = log.iterations.last().unwrap().loss;
        assert_eq!(log.iterations.len(), 200);
        assert!(last < 0.1 * first, "loss {first} -> {last}");
    }

    #[test]
    fn per_sample_scale_multiplies_the_mean_gradient() {
        let samples = [synthetic(4, 16, 1.0), synthetic(5, 16, 0.6)];
        let base = TrainConfig {
            epochs: 1,
            batch_size: 2,
            momentum: 0.0,
            weight_decay: 0.0,
            clip_bound: 1e12,
            seed: 2,
            ..Default::default()
        };
        let per_sample = TrainConfig { loss_scale: LossScale::PerSample, ..base.clone() };
        let mean = TrainConfig {
            loss_scale: LossScale::Mean,
            lr: base.lr * (3 * 16 * 16) as f64 / 2.0,
            ..base
        };
        let (a, _) = train_samples(&samples, &per_sample, ArchVariant::MultiScale, |_, _, _| Ok(())).unwrap();
        let (b, _) = train_samples(&samples, &mean, ArchVariant::MultiScale, |_, _, _| Ok(())).unwrap();
        for (x, y) in a.tensors().iter().zip(b.tensors()) {
            assert!(x.max_abs_diff(y).unwrap() < 1e-12);
        }
    }

    #[test]
    fn log_has_one_entry_per_iteration() {
        let samples: Vec<Sample> = (0..5).map(|i| synthetic(i, 16, 0.8)).collect();
        let cfg = TrainConfig { epochs: 3, batch_size: 2, seed: 1, ..Default::default() };
        let mut seen = Vec::new();
        let (_, log) = train_samples(&samples, &cfg, ArchVariant::Plain, |e, _, _| {
            seen.push(e);
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, vec![1, 2, 3]);
        assert_eq!(log.iterations.len(), 9);
        assert_eq!(log.epochs.len(), 3);
        assert!(log.iterations.iter().enumerate().all(|(i, it)| it.iteration == i));
        for e in &log.epochs {
            assert!((0.0..=1.0).contains(&e.clipped_fraction));
        }
        let csv = log.to_csv();
        assert!(csv.starts_with(LOSS_CSV_HEADER));
        assert_eq!(csv.lines().count(), 10);
    }

    #[test]
    fn same_seed_same_checkpoint() {
        let samples: Vec<Sample> = (0..4).map(|i| synthetic(i, 20, 1.0)).collect();
        let cfg = TrainConfig { epochs: 2, batch_size: 2, crop: Some((12, 12)), seed: 5, ..Default::default() };
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = Vec::new();
        for run in 0..2 {
            let (p, _) = train_samples(&samples, &cfg, ArchVariant::MultiScale, |_, _, _| Ok(())).unwrap();
            let path = dir.path().join(format!("{run}.ckpt"));
            save_checkpoint(&p, &path).unwrap();
            bytes.push(std::fs::read(&path).unwrap());
        }
        assert_eq!(bytes[0], bytes[1]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mixed = [synthetic(0, 16, 1.0), synthetic(1, 20, 1.0)];
        let cfg = TrainConfig { epochs: 1, ..Default::default() };
        assert!(train_samples(&mixed, &cfg, ArchVariant::MultiScale, |_, _, _| Ok(())).is_err());
        let cropped = TrainConfig { crop: Some((16, 16)), ..cfg.clone() };
        assert!(train_samples(&mixed, &cropped, ArchVariant::MultiScale, |_, _, _| Ok(())).is_ok());
        let too_big = TrainConfig { crop: Some((18, 18)), ..cfg.clone() };
        assert!(train_samples(&mixed, &too_big, ArchVariant::MultiScale, |_, _, _| Ok(())).is_err());
        assert!(train_samples(&[], &cfg, ArchVariant::MultiScale, |_, _, _| Ok(())).is_err());
        assert!(TrainConfig { batch_size: 0, ..cfg.clone() }.validate().is_err());
        assert!(TrainConfig { lr: 0.0, ..cfg.clone() }.validate().is_err());
        assert!(TrainConfig { momentum: 1.0, ..cfg }.validate().is_err());
    }

    #[test]
    fn nan_loss_aborts_with_iteration() {
        let mut s = synthetic(0, 16, 1.0);
        s.clean.data_mut()[5] = f64::NAN;
        let cfg = TrainConfig { epochs: 1, ..Default::default() };
        match train_samples(&[s], &cfg, ArchVariant::MultiScale, |_, _, _| Ok(())) {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("iteration 0"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn evaluation_means_and_identity() {
        let samples: Vec<(String, Sample)> =
            (0..3).map(|i| (format!("s{i}"), synthetic(i, 16, 1.0))).collect();
        let clean_lookup: Vec<Tensor> = samples.iter().map(|(_, s)| s.clean.clone()).collect();
        let idx = std::sync::atomic::AtomicUsize::new(0);
        // Serial pool so the identity restorer sees samples in order.
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let ev = pool
            .install(|| {
                evaluate_with(&samples, |_| {
                    Ok(clean_lookup[idx.fetch_add(1, std::sync::atomic::Ordering::SeqCst)].clone())
                })
            })
            .unwrap();
        for (_, r) in &ev.rows {
            assert!(r.psnr.is_infinite());
            assert!((r.ssim - 1.0).abs() < 1e-12);
        }

        let ev = evaluate_with(&samples, |h| Ok(h.clone())).unwrap();
        let mean_psnr = ev.rows.iter().map(|(_, r)| r.psnr).sum::<f64>() / 3.0;
        let mean_ssim = ev.rows.iter().map(|(_, r)| r.ssim).sum::<f64>() / 3.0;
        assert!((ev.mean.psnr - mean_psnr).abs() < 1e-12);
        assert!((ev.mean.ssim - mean_ssim).abs() < 1e-12);
        assert_eq!(ev.to_csv().lines().count(), 5);
    }
}
