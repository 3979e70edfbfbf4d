//! AOD-Net: a five-layer K-estimation network followed by the clean image
//! generation step `J = K·I − K + b`.
//!
//! Folding the transmission `t` and atmospheric light `A` of the scattering
//! model into a single per-pixel map
//!
//! ```text
//! K = ((I − A)/t + (A − b)) / (I − 1)
//! ```
//!
//! lets the network predict one quantity and recover the clean image with a
//! multiply and two adds.

mod checkpoint;

pub use checkpoint::{load_checkpoint, load_checkpoint_as, save_checkpoint, CHECKPOINT_MAGIC};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{self, BinaryOp, ConvSpec, GradTape, Tensor, Var};

/// Smallest spatial extent accepted: the largest kernel is 7×7.
pub const MIN_SPATIAL: usize = 7;

/// Default standard deviation of the Gaussian weight initialization.
pub const DEFAULT_INIT_STD: f64 = 0.02;

pub const LAYER_NAMES: [&str; 5] = ["conv1", "conv2", "conv3", "conv4", "conv5"];

const KERNELS: [usize; 5] = [1, 3, 5, 7, 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ArchVariant {
    /// conv3 sees `[c1, c2]`, conv4 sees `[c2, c3]`, conv5 sees `[c1, c2, c3, c4]`.
    MultiScale,
    /// Ablation: a straight `conv1 → … → conv5` chain with no concatenation.
    Plain,
}

impl ArchVariant {
    pub fn name(self) -> &'static str {
        match self {
            ArchVariant::MultiScale => "multiscale",
            ArchVariant::Plain => "plain",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "multiscale" | "multi-scale" => Some(ArchVariant::MultiScale),
            "plain" => Some(ArchVariant::Plain),
            _ => None,
        }
    }

    pub fn layer_specs(self) -> [ConvSpec; 5] {
        let inputs = match self {
            ArchVariant::MultiScale => [3, 3, 6, 6, 12],
            ArchVariant::Plain => [3, 3, 3, 3, 3],
        };
        std::array::from_fn(|i| ConvSpec::same(inputs[i], 3, KERNELS[i]))
    }

    /// Trainable scalars: weights plus biases over the five layers.
    pub fn param_count(self) -> usize {
        self.layer_specs().iter().map(ConvSpec::param_count).sum()
    }
}

impl std::fmt::Display for ArchVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Weights and biases of the five convolutions plus the fixed bias `b`.
///
/// Trainable tensors are stored flat as `[w1, b1, …, w5, b5]`, weights
/// `[Cout, Cin, Kh, Kw]` and biases `[1, Cout, 1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AodNetParams {
    variant: ArchVariant,
    tensors: Vec<Tensor>,
    /// Constant `b` of `J = K·I − K + b`; not trained.
    pub bias_b: f64,
    /// Apply ReLU to conv5 so that `K ≥ 0`.
    pub final_relu: bool,
}

impl AodNetParams {
    /// All-zero parameters.
    pub fn zeros(variant: ArchVariant) -> Self {
        let tensors = variant
            .layer_specs()
            .iter()
            .flat_map(|s| [Tensor::zeros(s.weight_shape()), Tensor::zeros([1, s.out_channels, 1, 1])])
            .collect();
        Self {
            variant,
            tensors,
            bias_b: 1.0,
            final_relu: true,
        }
    }

    /// Builds parameters from `[w1, b1, …, w5, b5]`, checking every shape.
    pub fn from_tensors(variant: ArchVariant, tensors: Vec<Tensor>) -> Result<Self> {
        let specs = variant.layer_specs();
        if tensors.len() != 2 * specs.len() {
            return Err(Error::shape(
                "AodNetParams",
                format!("expected 10 tensors, got {}", tensors.len()),
            ));
        }
        for (i, s) in specs.iter().enumerate() {
            let (w, b) = (&tensors[2 * i], &tensors[2 * i + 1]);
            if w.shape() != s.weight_shape() || b.shape() != [1, s.out_channels, 1, 1] {
                return Err(Error::shape(
                    "AodNetParams",
                    format!(
                        "{}: weights {:?} / bias {:?}, {} expects {:?} / {:?}",
                        LAYER_NAMES[i],
                        w.shape(),
                        b.shape(),
                        variant,
                        s.weight_shape(),
                        [1, s.out_channels, 1, 1]
                    ),
                ));
            }
        }
        Ok(Self {
            variant,
            tensors,
            bias_b: 1.0,
            final_relu: true,
        })
    }

    pub fn variant(&self) -> ArchVariant {
        self.variant
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn weights(&self, layer: usize) -> &Tensor {
        &self.tensors[2 * layer]
    }

    pub fn bias(&self, layer: usize) -> &Tensor {
        &self.tensors[2 * layer + 1]
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Records the parameters on `tape` as trainable leaves.
    pub fn register(&self, tape: &mut GradTape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.param(t.clone())).collect()
    }
}

/// Gaussian `N(0, std²)` weights and zero biases, deterministic under `seed`.
pub fn init_params(seed: u64, std: f64, variant: ArchVariant) -> Result<AodNetParams> {
    if !(std > 0.0) || !std.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "init std must be positive, got {std}"
        )));
    }
    let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = AodNetParams::zeros(variant);
    for (i, t) in params.tensors.iter_mut().enumerate() {
        if i % 2 == 0 {
            for v in t.data_mut() {
                *v = normal.sample(&mut rng);
            }
        }
    }
    Ok(params)
}

fn check_input(hazy: &Tensor) -> Result<()> {
    let [_, c, h, w] = hazy.shape();
    if c != 3 {
        return Err(Error::shape(
            "aod_net",
            format!("expected a 3-channel image, got {c} channels"),
        ));
    }
    if h < MIN_SPATIAL || w < MIN_SPATIAL {
        return Err(Error::shape(
            "aod_net",
            format!("input is {h}x{w}, needs at least {MIN_SPATIAL}x{MIN_SPATIAL}"),
        ));
    }
    Ok(())
}

/// Predicts `K` for a `[N, 3, H, W]` hazy batch.
pub fn estimate_k(params: &AodNetParams, hazy: &Tensor) -> Result<Tensor> {
    check_input(hazy)?;
    let specs = params.variant.layer_specs();
    let conv = |i: usize, x: &Tensor| -> Result<Tensor> {
        tensor::conv2d(x, params.weights(i), params.bias(i).data(), &specs[i])
    };
    let c1 = tensor::relu(&conv(0, hazy)?);
    let c2 = tensor::relu(&conv(1, &c1)?);
    let k = match params.variant {
        ArchVariant::MultiScale => {
            let c3 = tensor::relu(&conv(2, &tensor::concat_channels(&[&c1, &c2])?)?);
            let c4 = tensor::relu(&conv(3, &tensor::concat_channels(&[&c2, &c3])?)?);
            conv(4, &tensor::concat_channels(&[&c1, &c2, &c3, &c4])?)?
        }
        ArchVariant::Plain => {
            let c3 = tensor::relu(&conv(2, &c2)?);
            let c4 = tensor::relu(&conv(3, &c3)?);
            conv(4, &c4)?
        }
    };
    Ok(if params.final_relu { tensor::relu(&k) } else { k })
}

/// `J = K·I − K + b`, pointwise, unclamped.
pub fn generate_clean(k: &Tensor, hazy: &Tensor, b: f64) -> Result<Tensor> {
    k.expect_same_shape(hazy, "generate_clean")?;
    k.zip_map(hazy, |k, i| k * i - k + b)
}

/// Clean-image estimate for a `[N, 3, H, W]` hazy batch.
pub fn dehaze(params: &AodNetParams, hazy: &Tensor) -> Result<Tensor> {
    let k = estimate_k(params, hazy)?;
    generate_clean(&k, hazy, params.bias_b)
}

/// Variables produced by [`record_dehaze`].
#[derive(Clone, Debug)]
pub struct DehazeVars {
    pub params: Vec<Var>,
    pub k: Var,
    pub clean: Var,
}

/// Records the full dehazing graph on `tape` so it can be differentiated.
pub fn record_dehaze(params: &AodNetParams, tape: &mut GradTape, hazy: Var) -> Result<DehazeVars> {
    check_input(tape.value(hazy))?;
    let vars = params.register(tape);
    let specs = params.variant.layer_specs();
    let conv = |tape: &mut GradTape, i: usize, x: Var| -> Result<Var> {
        tape.conv2d(x, vars[2 * i], vars[2 * i + 1], specs[i])
    };
    let c1 = conv(tape, 0, hazy)?;
    let c1 = tape.relu(c1);
    let c2 = conv(tape, 1, c1)?;
    let c2 = tape.relu(c2);
    let pre_k = match params.variant {
        ArchVariant::MultiScale => {
            let cat1 = tape.concat(&[c1, c2])?;
            let c3 = conv(tape, 2, cat1)?;
            let c3 = tape.relu(c3);
            let cat2 = tape.concat(&[c2, c3])?;
            let c4 = conv(tape, 3, cat2)?;
            let c4 = tape.relu(c4);
            let cat3 = tape.concat(&[c1, c2, c3, c4])?;
            conv(tape, 4, cat3)?
        }
        ArchVariant::Plain => {
            let c3 = conv(tape, 2, c2)?;
            let c3 = tape.relu(c3);
            let c4 = conv(tape, 3, c3)?;
            let c4 = tape.relu(c4);
            conv(tape, 4, c4)?
        }
    };
    let k = if params.final_relu { tape.relu(pre_k) } else { pre_k };
    // J = K·I − K + b
    let ki = tape.binary(k, hazy, BinaryOp::Mul)?;
    let diff = tape.sub(ki, k)?;
    let clean = tape.add_scalar(diff, params.bias_b);
    Ok(DehazeVars {
        params: vars,
        k,
        clean,
    })
}

/// Exact `K` recovered from a synthetic hazy image and its generating parameters.
#[derive(Clone, Debug)]
pub struct GroundTruthK {
    /// `K` at valid pixels, 0 at masked ones.
    pub k: Tensor,
    /// `true` where `|I − 1| ≤ eps` and `K` is undefined.
    pub masked: Vec<bool>,
    pub masked_count: usize,
}

/// Default singularity guard for [`ground_truth_k`].
pub const GROUND_TRUTH_EPS: f64 = 1e-6;

/// `K = ((I − A)/t + (A − b)) / (I − 1)` for diagnostics and tests.
///
/// `hazy` is `[N, 3, H, W]`, `t` is `[N, 1, H, W]`. Samples with
/// `|I − 1| ≤ eps` are masked and counted rather than produced.
pub fn ground_truth_k(
    hazy: &Tensor,
    t: &Tensor,
    atmosphere: [f64; 3],
    b: f64,
    eps: f64,
) -> Result<GroundTruthK> {
    let [n, c, h, w] = hazy.shape();
    if c != 3 || t.shape() != [n, 1, h, w] {
        return Err(Error::shape(
            "ground_truth_k",
            format!("hazy {:?}, transmission {:?}", hazy.shape(), t.shape()),
        ));
    }
    if let Some(v) = t.data().iter().find(|&&v| !(v > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "transmission must be positive, found {v}"
        )));
    }
    let mut k = Tensor::zeros(hazy.shape());
    let mut masked = vec![false; hazy.len()];
    let mut masked_count = 0;
    let hw = h * w;
    for bi in 0..n {
        let tp = t.plane(bi, 0);
        for (ch, &a) in atmosphere.iter().enumerate() {
            let offset = (bi * 3 + ch) * hw;
            let ip = hazy.plane(bi, ch);
            let kp = k.plane_mut(bi, ch);
            for i in 0..hw {
                let iv = ip[i];
                if (iv - 1.0).abs() <= eps {
                    masked[offset + i] = true;
                    masked_count += 1;
                    continue;
                }
                kp[i] = ((iv - a) / tp[i] + (a - b)) / (iv - 1.0);
            }
        }
    }
    Ok(GroundTruthK {
        k,
        masked,
        masked_count,
    })
}
