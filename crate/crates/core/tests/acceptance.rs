//! End-to-end acceptance checks. Runs as a plain binary so every criterion
//! prints one PASS/FAIL line; exits non-zero when any fails.
//!
//! `cargo test -p hazecraft --test acceptance`

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hazecraft::dcp::{self, DcpConfig};
use hazecraft::gradcheck;
use hazecraft::haze::{self, HazeParams};
use hazecraft::io::{self, DatasetRecord, ImageBuffer};
use hazecraft::metrics;
use hazecraft::model::{self, AodNetParams, ArchVariant};
use hazecraft::train::{self, Evaluation, TrainConfig, TrainLog};
use hazecraft::Tensor;

const SCENE: usize = 64;
const TRAIN_SCENES: usize = 200;
const HELD_OUT: usize = 40;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Synthetic scenes written to disk and pushed through the dataset builder,
/// exactly as the CLI would.
struct DeskData {
    _dir: tempfile::TempDir,
    train: Vec<DatasetRecord>,
    held_out: Vec<DatasetRecord>,
    held_out_beta08: Vec<DatasetRecord>,
    manifest: std::path::PathBuf,
}

fn desk_data() -> &'static DeskData {
    static DATA: OnceLock<DeskData> = OnceLock::new();
    DATA.get_or_init(|| {
        let dir = tempfile::tempdir().expect("tempdir");
        let root = dir.path();
        haze::write_scenes(&root.join("train"), TRAIN_SCENES, SCENE, SCENE, 1_000).expect("train scenes");
        haze::write_scenes(&root.join("test"), HELD_OUT, SCENE, SCENE, 900_000).expect("test scenes");
        let build = |split: &str, out: &str, seed: u64, betas: Option<&[f64]>| {
            let base = root.join(split);
            haze::build_dataset(&base.join("clean"), &base.join("depth"), &root.join(out), seed, betas)
                .expect("dataset")
        };
        let train = build("train", "hazy_train", 11, None);
        let held_out = build("test", "hazy_test", 12, None);
        let beta08 = build("test", "hazy_test_b08", 13, Some(&[0.8]));
        assert_eq!(train.records.len(), TRAIN_SCENES);
        assert_eq!(held_out.records.len(), HELD_OUT);
        DeskData {
            train: train.records,
            held_out: held_out.records,
            held_out_beta08: beta08.records,
            manifest: train.manifest_path,
            _dir: dir,
        }
    })
}

fn desk_config() -> TrainConfig {
    TrainConfig {
        seed: 2024,
        ..TrainConfig::default()
    }
}

struct Trained {
    params: AodNetParams,
    log: TrainLog,
    eval: Evaluation,
    seconds: f64,
}

fn trained(arch: ArchVariant) -> &'static Trained {
    static MULTI: OnceLock<Trained> = OnceLock::new();
    static PLAIN: OnceLock<Trained> = OnceLock::new();
    let cell = match arch {
        ArchVariant::MultiScale => &MULTI,
        ArchVariant::Plain => &PLAIN,
    };
    cell.get_or_init(|| {
        let data = desk_data();
        let records = io::read_manifest(&data.manifest).expect("manifest");
        let started = Instant::now();
        let (params, log) = train::train(&records, &desk_config(), arch).expect("training");
        let seconds = started.elapsed().as_secs_f64();
        let eval = train::evaluate(&params, &data.held_out).expect("evaluation");
        Trained {
            params,
            log,
            eval,
            seconds,
        }
    })
}

fn hazy_baseline(records: &[DatasetRecord]) -> Evaluation {
    let samples = train::named_samples(records).expect("samples");
    train::evaluate_with(&samples, |h| Ok(h.clone())).expect("evaluation")
}

fn gradient_suite() -> Outcome {
    let started = Instant::now();
    let report = gradcheck::run_gradient_suite(0).expect("gradient suite");
    let secs = started.elapsed().as_secs_f64();
    let err = report.max_rel_error();
    outcome(
        err < 1e-5 && secs < 30.0,
        format!(
            "max relative error {err:.3e} over {} checks in {secs:.2}s",
            report.entries.len()
        ),
    )
}

fn k_round_trip() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst: f64 = 0.0;
    let mut masked = 0;
    for i in 0..100u64 {
        let size = rng.random_range(16..=32);
        let (clean, depth) = haze::procedural_scene(i, size, size).expect("scene");
        let params = HazeParams::sample(&mut rng);
        let hazy = haze::synthesize(&clean, &depth, &params).expect("synthesize");
        let t = haze::transmission_from_depth(&depth, params.beta).expect("transmission");
        let gt = model::ground_truth_k(&hazy, &t, params.atmosphere, 1.0, 1e-6).expect("K");
        let back = model::generate_clean(&gt.k, &hazy, 1.0).expect("J");
        masked += gt.masked_count;
        for ((a, b), m) in back.data().iter().zip(clean.data()).zip(&gt.masked) {
            if !m {
                worst = worst.max((a - b).abs());
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        worst < 1e-9 && secs < 10.0,
        format!("max |J - J'| {worst:.3e}, {masked} masked pixels, {secs:.2}s"),
    )
}

fn desk_training() -> Outcome {
    let t = trained(ArchVariant::MultiScale);
    let hazy = hazy_baseline(&desk_data().held_out);
    let d_psnr = t.eval.mean.psnr - hazy.mean.psnr;
    let d_ssim = t.eval.mean.ssim - hazy.mean.ssim;
    let e1 = t.log.epochs[0].mean_loss;
    let e10 = t.log.epochs[9].mean_loss;
    outcome(
        d_psnr >= 2.0 && d_ssim >= 0.05 && e10 < e1,
        format!(
            "PSNR {:.3} -> {:.3} dB ({d_psnr:+.3}), SSIM {:.4} -> {:.4} ({d_ssim:+.4}), \
             epoch loss 1: {e1:.5}, 10: {e10:.5}, 40: {:.5}, trained in {:.0}s",
            hazy.mean.psnr,
            t.eval.mean.psnr,
            hazy.mean.ssim,
            t.eval.mean.ssim,
            t.log.epochs.last().map_or(f64::NAN, |e| e.mean_loss),
            t.seconds
        ),
    )
}

fn ablation() -> Outcome {
    let multi = trained(ArchVariant::MultiScale);
    let plain = trained(ArchVariant::Plain);
    outcome(
        multi.eval.mean.ssim >= plain.eval.mean.ssim,
        format!(
            "SSIM multiscale {:.4} vs plain {:.4} (PSNR {:.3} vs {:.3} dB)",
            multi.eval.mean.ssim, plain.eval.mean.ssim, multi.eval.mean.psnr, plain.eval.mean.psnr
        ),
    )
}

fn determinism() -> Outcome {
    let data = desk_data();
    let records = &data.train[..24];
    let cfg = TrainConfig {
        epochs: 3,
        crop: Some((48, 48)),
        ..desk_config()
    };
    let dir = tempfile::tempdir().expect("tempdir");
    let mut bytes = Vec::new();
    for run in 0..2 {
        let (params, _) = train::train(records, &cfg, ArchVariant::MultiScale).expect("training");
        let path = dir.path().join(format!("run{run}.ckpt"));
        model::save_checkpoint(&params, &path).expect("save");
        bytes.push(std::fs::read(&path).expect("read"));
    }
    let full = trained(ArchVariant::MultiScale);
    let reloaded = {
        let path = dir.path().join("desk.ckpt");
        model::save_checkpoint(&full.params, &path).expect("save");
        model::load_checkpoint(&path).expect("load")
    };
    outcome(
        bytes[0] == bytes[1] && reloaded == full.params,
        format!(
            "two runs -> {} and {} byte checkpoints, identical: {}",
            bytes[0].len(),
            bytes[1].len(),
            bytes[0] == bytes[1]
        ),
    )
}

/// Independent SSIM: every 11×11 window evaluated directly with a 2D
/// Gaussian, on the channel-mean luminance.
fn reference_ssim(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    let (h, w) = (a.height(), a.width());
    let lum = |img: &ImageBuffer| -> Vec<f64> {
        (0..h * w)
            .map(|i| (0..img.channels()).map(|c| img.plane(c)[i]).sum::<f64>() / img.channels() as f64)
            .collect()
    };
    let (x, y) = (lum(a), lum(b));
    let mut kernel = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (i, row) in kernel.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (1e-4, 9e-4);
    let c3 = c2 / 2.0;
    let mut sum = 0.0;
    let mut count = 0usize;
    for top in 0..=h - 11 {
        for left in 0..=w - 11 {
            let (mut mx, mut my) = (0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let k = kernel[i][j] / total;
                    let p = (top + i) * w + left + j;
                    mx += k * x[p];
                    my += k * y[p];
                }
            }
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let k = kernel[i][j] / total;
                    let p = (top + i) * w + left + j;
                    vx += k * (x[p] - mx) * (x[p] - mx);
                    vy += k * (y[p] - my) * (y[p] - my);
                    cxy += k * (x[p] - mx) * (y[p] - my);
                }
            }
            let (sx, sy) = (vx.max(0.0).sqrt(), vy.max(0.0).sqrt());
            let l = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
            let c = (2.0 * sx * sy + c2) / (vx + vy + c2);
            let s = (cxy + c3) / (sx * sy + c3);
            sum += l * c * s;
            count += 1;
        }
    }
    sum / count as f64
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ssim_err: f64 = 0.0;
    let mut identity_err: f64 = 0.0;
    for _ in 0..20 {
        let (h, w) = (rng.random_range(11..=40), rng.random_range(11..=40));
        let c = if rng.random_bool(0.5) { 3 } else { 1 };
        let a: Vec<f64> = (0..h * w * c).map(|_| rng.random_range(0.0..1.0)).collect();
        // Correlated partner so SSIM is far from zero.
        let b: Vec<f64> = a.iter().map(|v| (0.7 * v + 0.3 * rng.random_range(0.0..1.0)).min(1.0)).collect();
        let a = ImageBuffer::new(h, w, c, a).unwrap();
        let b = ImageBuffer::new(h, w, c, b).unwrap();
        let ours = metrics::ssim(&a, &b).unwrap().ssim;
        ssim_err = ssim_err.max((ours - reference_ssim(&a, &b)).abs());
        let d = metrics::mse_decompose(&a, &b).unwrap();
        identity_err = identity_err
            .max((d.total - d.mean_part - d.residual_part).abs())
            .max((d.total - metrics::mse(&a, &b).unwrap()).abs());
    }
    let flat = |v: f64| ImageBuffer::new(16, 16, 3, vec![v; 768]).unwrap();
    let p20 = metrics::psnr(&flat(0.3), &flat(0.4), 1.0).unwrap();
    let p0 = metrics::psnr(&flat(0.0), &flat(1.0), 1.0).unwrap();
    let psnr_err = (p20 - 20.0).abs().max(p0.abs());
    outcome(
        ssim_err < 1e-6 && psnr_err < 1e-9 && identity_err < 1e-9,
        format!(
            "SSIM vs reference {ssim_err:.2e}, PSNR hand cases {psnr_err:.2e}, decomposition {identity_err:.2e}"
        ),
    )
}

fn dcp_baseline() -> Outcome {
    let records = &desk_data().held_out_beta08;
    let samples = train::named_samples(records).expect("samples");
    let config = DcpConfig::default();
    let dcp_eval = train::evaluate_with(&samples, |hazy: &Tensor| {
        let img = ImageBuffer::from_tensor(hazy, 0)?;
        Ok(dcp::dcp_dehaze(&img, &config)?.clean.to_tensor())
    })
    .expect("dcp evaluation");
    let hazy = hazy_baseline(records);
    outcome(
        dcp_eval.mean.psnr > hazy.mean.psnr,
        format!(
            "beta 0.8: PSNR hazy {:.3} dB, dcp {:.3} dB",
            hazy.mean.psnr, dcp_eval.mean.psnr
        ),
    )
}

fn throughput() -> Outcome {
    let params = model::init_params(3, model::DEFAULT_INIT_STD, ArchVariant::MultiScale).unwrap();
    let (clean, depth) = haze::procedural_scene(8, 480, 640).unwrap();
    let hazy = haze::synthesize(
        &clean,
        &depth,
        &HazeParams {
            atmosphere: [0.9, 0.9, 0.9],
            beta: 1.0,
            bias: 1.0,
        },
    )
    .unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let mut best = Duration::MAX;
    pool.install(|| {
        for _ in 0..3 {
            let started = Instant::now();
            let out = model::dehaze(&params, &hazy).unwrap();
            best = best.min(started.elapsed());
            assert_eq!(out.shape(), [1, 3, 480, 640]);
        }
    });
    let secs = best.as_secs_f64();
    outcome(secs < 1.0, format!("480x640 dehaze on one thread: {secs:.3}s (best of 3)"))
}

fn parameter_audit() -> Outcome {
    let n = model::init_params(0, 0.02, ArchVariant::MultiScale).unwrap().param_count();
    let by_shape: usize = ArchVariant::MultiScale.layer_specs().iter().map(|s| s.param_count()).sum();
    outcome(
        n == 1761 && by_shape == 1761,
        format!("multiscale has {n} trainable scalars"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient suite", gradient_suite),
        ("K round trip", k_round_trip),
        ("desk-scale training", desk_training),
        ("multiscale vs plain ablation", ablation),
        ("training determinism", determinism),
        ("metric oracles", metric_oracles),
        ("dark channel prior baseline", dcp_baseline),
        ("inference throughput", throughput),
        ("parameter audit", parameter_audit),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let o = check();
        println!(
            "criterion {} {:<30} {}  {}",
            i + 1,
            name,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        if !o.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
