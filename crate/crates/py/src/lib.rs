//! Python bindings.
//!
//! Images cross the boundary as flat planar lists (`C × H × W`, channel
//! major) of floats on `[0, 1]` together with their height and width.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use hazecraft::dcp::{self, DcpConfig};
use hazecraft::haze::{self, DepthMap, HazeParams};
use hazecraft::io::ImageBuffer;
use hazecraft::metrics;
use hazecraft::model::{self, AodNetParams, ArchVariant};
use hazecraft::{gradcheck, Error, Tensor};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn image(data: Vec<f64>, height: usize, width: usize) -> PyResult<ImageBuffer> {
    let plane = height * width;
    if plane == 0 || !data.len().is_multiple_of(plane) {
        return Err(PyValueError::new_err(format!(
            "{} values do not form whole {height}x{width} planes",
            data.len()
        )));
    }
    ImageBuffer::new(height, width, data.len() / plane, data).map_err(to_py)
}

fn rgb_tensor(data: Vec<f64>, height: usize, width: usize) -> PyResult<Tensor> {
    Ok(image(data, height, width)?.to_rgb().to_tensor())
}

fn arch(name: &str) -> PyResult<ArchVariant> {
    ArchVariant::parse(name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown architecture {name:?}")))
}

/// AOD-Net weights.
#[pyclass(name = "AodNet", module = "hazecraft_py", from_py_object)]
#[derive(Clone)]
struct PyAodNet {
    inner: AodNetParams,
}

#[pymethods]
impl PyAodNet {
    /// Gaussian-initialized weights with zero biases.
    #[new]
    #[pyo3(signature = (seed = 0, std = model::DEFAULT_INIT_STD, arch = "multiscale"))]
    fn new(seed: u64, std: f64, arch: &str) -> PyResult<Self> {
        let inner = model::init_params(seed, std, self::arch(arch)?).map_err(to_py)?;
        Ok(Self { inner })
    }

    /// All-zero weights; such a model maps every image to white.
    #[staticmethod]
    #[pyo3(signature = (arch = "multiscale"))]
    fn zeros(arch: &str) -> PyResult<Self> {
        Ok(Self {
            inner: AodNetParams::zeros(self::arch(arch)?),
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: model::load_checkpoint(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        model::save_checkpoint(&self.inner, path).map_err(to_py)
    }

    #[getter]
    fn arch(&self) -> &'static str {
        self.inner.variant().name()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// Predicted `K` for an RGB image, as a flat planar list.
    fn estimate_k(&self, data: Vec<f64>, height: usize, width: usize) -> PyResult<Vec<f64>> {
        let t = rgb_tensor(data, height, width)?;
        Ok(model::estimate_k(&self.inner, &t).map_err(to_py)?.into_data())
    }

    /// Dehazed RGB image, unclamped.
    fn dehaze(&self, data: Vec<f64>, height: usize, width: usize) -> PyResult<Vec<f64>> {
        let t = rgb_tensor(data, height, width)?;
        Ok(model::dehaze(&self.inner, &t).map_err(to_py)?.into_data())
    }

    fn __repr__(&self) -> String {
        format!(
            "AodNet(arch={:?}, params={})",
            self.inner.variant().name(),
            self.inner.param_count()
        )
    }
}

/// PSNR in dB; `inf` for identical images.
#[pyfunction]
#[pyo3(signature = (a, b, height, width, peak = 1.0))]
fn psnr(a: Vec<f64>, b: Vec<f64>, height: usize, width: usize, peak: f64) -> PyResult<f64> {
    metrics::psnr(&image(a, height, width)?, &image(b, height, width)?, peak).map_err(to_py)
}

/// `(ssim, mean_l, mean_c, mean_s)`.
#[pyfunction]
fn ssim(a: Vec<f64>, b: Vec<f64>, height: usize, width: usize) -> PyResult<(f64, f64, f64, f64)> {
    let r = metrics::ssim(&image(a, height, width)?, &image(b, height, width)?).map_err(to_py)?;
    Ok((r.ssim, r.mean_l, r.mean_c, r.mean_s))
}

/// `(total, mean_part, residual_part)`.
#[pyfunction]
fn mse_decompose(a: Vec<f64>, b: Vec<f64>, height: usize, width: usize) -> PyResult<(f64, f64, f64)> {
    let d = metrics::mse_decompose(&image(a, height, width)?, &image(b, height, width)?).map_err(to_py)?;
    Ok((d.total, d.mean_part, d.residual_part))
}

/// Procedural `(clean_rgb, depth)` pair.
#[pyfunction]
fn procedural_scene(seed: u64, height: usize, width: usize) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let (clean, depth) = haze::procedural_scene(seed, height, width).map_err(to_py)?;
    Ok((clean.into_data(), depth.data().to_vec()))
}

/// Hazy image `J·t + A·(1 − t)` with `t = exp(−β·depth)`.
#[pyfunction]
fn synthesize(
    clean: Vec<f64>,
    depth: Vec<f64>,
    height: usize,
    width: usize,
    atmosphere: [f64; 3],
    beta: f64,
) -> PyResult<Vec<f64>> {
    let clean = rgb_tensor(clean, height, width)?;
    let depth = DepthMap::new(height, width, depth).map_err(to_py)?;
    let params = HazeParams {
        atmosphere,
        beta,
        bias: 1.0,
    };
    Ok(haze::synthesize(&clean, &depth, &params).map_err(to_py)?.into_data())
}

/// Dark channel prior dehazing with default settings.
#[pyfunction]
#[pyo3(signature = (data, height, width, refine = true))]
fn dcp_dehaze(data: Vec<f64>, height: usize, width: usize, refine: bool) -> PyResult<Vec<f64>> {
    let config = DcpConfig {
        refine,
        ..Default::default()
    };
    let out = dcp::dcp_dehaze(&image(data, height, width)?, &config).map_err(to_py)?;
    Ok(out.clean.into_data())
}

/// Largest relative error of the finite-difference gradient suite.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn grad_check(seed: u64) -> PyResult<f64> {
    Ok(gradcheck::run_gradient_suite(seed).map_err(to_py)?.max_rel_error())
}

#[pymodule]
fn hazecraft_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyAodNet>()?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(mse_decompose, m)?)?;
    m.add_function(wrap_pyfunction!(procedural_scene, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(dcp_dehaze, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    Ok(())
}
