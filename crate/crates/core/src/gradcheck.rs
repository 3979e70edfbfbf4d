//! Central finite-difference checks of every differentiable operation and of
//! the full dehaze + MSE graph.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{self, ArchVariant};
use crate::tensor::{self, BinaryOp, ConvSpec, GradTape, Shape, Tensor};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor of [`relative_error`]: below this magnitude the error
/// is effectively absolute.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

/// Uniform entries on `[-scale, scale]`.
pub fn random_tensor<R: Rng + ?Sized>(rng: &mut R, shape: Shape, scale: f64) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.random_range(-scale..=scale)).collect();
    Tensor::new(shape, data).expect("length matches shape")
}

/// Central differences of `f` with respect to every entry of `x`.
pub fn numeric_gradient(x: &Tensor, step: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// `|a − n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error() < tolerance
    }

    fn push(&mut self, name: impl Into<String>, analytic: &Tensor, numeric: &Tensor) {
        self.entries.push(GradCheckEntry {
            name: name.into(),
            checked: analytic.len(),
            max_rel_error: max_relative_error(analytic, numeric),
        });
    }
}

/// Projects a tensor onto a fixed random direction, giving a scalar loss
/// whose upstream gradient is the direction itself.
fn project(t: &Tensor, dir: &Tensor) -> f64 {
    t.data().iter().zip(dir.data()).map(|(a, b)| a * b).sum()
}

/// Pushes values at least `margin` away from zero, keeping their sign.
fn away_from_zero(t: Tensor, margin: f64) -> Tensor {
    t.map(|v| if v.abs() < margin { if v < 0.0 { v - margin } else { v + margin } } else { v })
}

/// Runs every check on random instances of at most 8×8 pixels.
pub fn run_gradient_suite(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    let h = FD_STEP;

    // conv2d
    let spec = ConvSpec::same(2, 3, 3);
    let x = random_tensor(&mut rng, [1, 2, 5, 5], 1.0);
    let w = random_tensor(&mut rng, spec.weight_shape(), 1.0);
    let b = random_tensor(&mut rng, [1, 3, 1, 1], 1.0);
    let dir = random_tensor(&mut rng, [1, 3, 5, 5], 1.0);
    let conv = |x: &Tensor, w: &Tensor, b: &Tensor| {
        project(&tensor::conv2d(x, w, b.data(), &spec).expect("shapes fixed"), &dir)
    };
    let g = tensor::conv2d_backward(&dir, &x, &w, &spec)?;
    report.push("conv2d/input", &g.input, &numeric_gradient(&x, h, |t| conv(t, &w, &b)));
    report.push("conv2d/weights", &g.weights, &numeric_gradient(&w, h, |t| conv(&x, t, &b)));
    let gb = Tensor::new([1, 3, 1, 1], g.bias)?;
    report.push("conv2d/bias", &gb, &numeric_gradient(&b, h, |t| conv(&x, &w, t)));

    // relu, away from the kink
    let x = away_from_zero(random_tensor(&mut rng, [1, 2, 4, 4], 1.0), 1e-2);
    let dir = random_tensor(&mut rng, [1, 2, 4, 4], 1.0);
    let g = tensor::relu_backward(&x, &dir)?;
    report.push("relu", &g, &numeric_gradient(&x, h, |t| project(&tensor::relu(t), &dir)));

    // concat
    let a = random_tensor(&mut rng, [2, 1, 3, 3], 1.0);
    let c = random_tensor(&mut rng, [2, 2, 3, 3], 1.0);
    let dir = random_tensor(&mut rng, [2, 3, 3, 3], 1.0);
    let parts = tensor::split_channels(&dir, &[1, 2])?;
    let cat = |a: &Tensor, c: &Tensor| project(&tensor::concat_channels(&[a, c]).expect("shapes fixed"), &dir);
    report.push("concat/first", &parts[0], &numeric_gradient(&a, h, |t| cat(t, &c)));
    report.push("concat/second", &parts[1], &numeric_gradient(&c, h, |t| cat(&a, t)));

    // elementwise
    let a = random_tensor(&mut rng, [1, 3, 3, 3], 1.0);
    let c = random_tensor(&mut rng, [1, 3, 3, 3], 1.0);
    let dir = random_tensor(&mut rng, [1, 3, 3, 3], 1.0);
    for (name, op) in [("add", BinaryOp::Add), ("sub", BinaryOp::Sub), ("mul", BinaryOp::Mul)] {
        let (ga, gc) = tensor::elementwise_backward(&a, &c, op, &dir)?;
        let f = |x: &Tensor, y: &Tensor| project(&tensor::elementwise(x, y, op).expect("shapes fixed"), &dir);
        report.push(format!("{name}/lhs"), &ga, &numeric_gradient(&a, h, |t| f(t, &c)));
        report.push(format!("{name}/rhs"), &gc, &numeric_gradient(&c, h, |t| f(&a, t)));
    }
    report.push(
        "add_scalar",
        &dir,
        &numeric_gradient(&a, h, |t| project(&tensor::add_scalar(t, 0.7), &dir)),
    );

    // mse
    let p = random_tensor(&mut rng, [1, 3, 4, 4], 1.0);
    let q = random_tensor(&mut rng, [1, 3, 4, 4], 1.0);
    let g = tensor::mse_loss_backward(&p, &q, 1.0)?;
    report.push(
        "mse_loss",
        &g,
        &numeric_gradient(&p, h, |t| tensor::mse_loss(t, &q).expect("shapes fixed")),
    );

    for variant in [ArchVariant::MultiScale, ArchVariant::Plain] {
        check_dehaze_graph(&mut rng, variant, &mut report)?;
    }
    Ok(report)
}

/// Gradient of `mse(dehaze(params, I), J)` with respect to every parameter
/// on an 8×8 instance. Instances whose ReLU inputs come within `1e-3` of
/// zero are redrawn so no finite-difference probe straddles a kink.
fn check_dehaze_graph(rng: &mut ChaCha8Rng, variant: ArchVariant, report: &mut GradCheckReport) -> Result<()> {
    let (params, hazy, clean) = loop {
        let mut params = model::init_params(rng.random(), 0.3, variant)?;
        for t in params.tensors_mut().iter_mut().skip(1).step_by(2) {
            *t = random_tensor(rng, t.shape(), 0.2);
        }
        let hazy = random_tensor(rng, [1, 3, 8, 8], 0.5).map(|v| v + 0.5);
        let clean = random_tensor(rng, [1, 3, 8, 8], 0.5).map(|v| v + 0.5);
        let mut tape = GradTape::new();
        let input = tape.constant(hazy.clone());
        model::record_dehaze(&params, &mut tape, input)?;
        if tape.relu_margin() > 1e-3 {
            break (params, hazy, clean);
        }
    };

    let loss_of = |p: &model::AodNetParams| -> f64 {
        let out = model::dehaze(p, &hazy).expect("shapes fixed");
        tensor::mse_loss(&out, &clean).expect("shapes fixed")
    };

    let mut tape = GradTape::new();
    let input = tape.constant(hazy.clone());
    let target = tape.constant(clean.clone());
    let vars = model::record_dehaze(&params, &mut tape, input)?;
    let loss = tape.mse_loss(vars.clean, target)?;
    let grads = tape.backward(loss)?;

    for (i, var) in vars.params.iter().enumerate() {
        let analytic = grads.get(*var).cloned().unwrap_or_else(|| Tensor::zeros(params.tensors()[i].shape()));
        let numeric = numeric_gradient(&params.tensors()[i], FD_STEP, |t| {
            let mut p = params.clone();
            p.tensors_mut()[i] = t.clone();
            loss_of(&p)
        });
        let kind = if i % 2 == 0 { "weights" } else { "bias" };
        report.push(
            format!("dehaze[{variant}]/{}/{kind}", model::LAYER_NAMES[i / 2]),
            &analytic,
            &numeric,
        );
    }
    Ok(())
}
