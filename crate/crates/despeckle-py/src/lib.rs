//! Python bindings over the core speckle-suppression crate. Images cross the
//! boundary as flat row-major f64 lists plus an explicit (h, w) shape.

use despeckle::contrastive;
use despeckle::data;
use despeckle::metrics;
use despeckle::stats;
use ndarray::{Array1, Array2};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn to_image(pixels: Vec<f64>, h: usize, w: usize) -> PyResult<Array2<f64>> {
    Array2::from_shape_vec((h, w), pixels)
        .map_err(|e| PyValueError::new_err(format!("bad shape: {e}")))
}

fn err(e: despeckle::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Multiplicative Gaussian speckle: out = clip(x * (1 + eps)), eps ~ N(0, sigma^2).
#[pyfunction]
#[pyo3(signature = (pixels, h, w, sigma, seed, clip = true))]
fn add_speckle(
    pixels: Vec<f64>,
    h: usize,
    w: usize,
    sigma: f64,
    seed: u64,
    clip: bool,
) -> PyResult<Vec<f64>> {
    let sample = data::ImageSample::new("py", to_image(pixels, h, w)?, "python");
    let noisy = data::add_speckle(&sample, &data::NoiseConfig::new(sigma, seed, clip));
    Ok(noisy.pixels.into_raw_vec())
}

/// (psnr_db, ssim, rmse) of a prediction against a clean reference, both in
/// [0, 1]; metrics are computed on the 0-255 scale.
#[pyfunction]
fn metric_triple(
    pred: Vec<f64>,
    reference: Vec<f64>,
    h: usize,
    w: usize,
) -> PyResult<(f64, f64, f64)> {
    let p = to_image(pred, h, w)?;
    let r = to_image(reference, h, w)?;
    let m = metrics::metric_triple(&p, &r).map_err(err)?;
    Ok((m.psnr, m.ssim, m.rmse))
}

/// Windowed mean-to-std ratio per interior pixel; the border ring is NaN.
#[pyfunction]
fn rho_map(pixels: Vec<f64>, h: usize, w: usize, window: usize) -> PyResult<Vec<f64>> {
    let img = to_image(pixels, h, w)?;
    Ok(stats::rho_map(&img, window).map_err(err)?.into_raw_vec())
}

/// Train/test sizes under a fractional split.
#[pyfunction]
fn split_counts(total: usize, ratio: f64) -> (usize, usize) {
    data::split_counts(total, ratio)
}

/// Deterministic synthetic tissue phantom, flat row-major.
#[pyfunction]
fn phantom(size: usize, seed: u64) -> Vec<f64> {
    data::phantom_image(size, seed).into_raw_vec()
}

#[pyfunction]
fn derive_seed(global_seed: u64, id: &str, salt: u64) -> u64 {
    data::derive_seed(global_seed, id, salt)
}

/// Pixel-level contrastive loss; negatives[k] lists anchor k's negatives.
#[pyfunction]
#[pyo3(signature = (anchors, positives, negatives, temperature = contrastive::DEFAULT_TEMPERATURE))]
fn pixel_contrast_loss(
    anchors: Vec<Vec<f64>>,
    positives: Vec<Vec<f64>>,
    negatives: Vec<Vec<Vec<f64>>>,
    temperature: f64,
) -> PyResult<f64> {
    let batch = contrastive::PixelContrastBatch {
        anchors: anchors.into_iter().map(Array1::from_vec).collect(),
        positives: positives.into_iter().map(Array1::from_vec).collect(),
        negatives: negatives
            .into_iter()
            .map(|ns| ns.into_iter().map(Array1::from_vec).collect())
            .collect(),
        temperature,
    };
    contrastive::pixel_contrast_loss(&batch).map_err(err)
}

/// FIFO queue of unit-norm instance embeddings.
#[pyclass]
struct MemoryBank {
    inner: contrastive::MemoryBank,
}

#[pymethods]
impl MemoryBank {
    #[new]
    fn new(capacity: usize) -> PyResult<Self> {
        if capacity == 0 {
            return Err(PyValueError::new_err("capacity must be positive"));
        }
        Ok(MemoryBank {
            inner: contrastive::MemoryBank::new(capacity),
        })
    }

    fn push_batch(&mut self, vectors: Vec<Vec<f64>>) {
        let arrs: Vec<Array1<f64>> = vectors.into_iter().map(Array1::from_vec).collect();
        self.inner.push_batch(&arrs);
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn capacity(&self) -> usize {
        self.inner.capacity()
    }

    #[getter]
    fn inserted(&self) -> u64 {
        self.inner.inserted()
    }

    fn entries(&self) -> Vec<Vec<f64>> {
        self.inner.entries().map(|a| a.to_vec()).collect()
    }

    /// Instance-level loss of paired noisy/clean embeddings against this
    /// bank; returns (loss, degenerate) where degenerate marks an empty bank.
    #[pyo3(signature = (z_noisy, z_clean, temperature = contrastive::DEFAULT_TEMPERATURE))]
    fn instance_loss(
        &self,
        z_noisy: Vec<Vec<f64>>,
        z_clean: Vec<Vec<f64>>,
        temperature: f64,
    ) -> PyResult<(f64, bool)> {
        let zn: Vec<Array1<f64>> = z_noisy.into_iter().map(Array1::from_vec).collect();
        let zc: Vec<Array1<f64>> = z_clean.into_iter().map(Array1::from_vec).collect();
        let loss =
            contrastive::instance_contrast_loss(&zn, &zc, &self.inner, temperature).map_err(err)?;
        Ok((loss, self.inner.is_empty()))
    }
}

#[pymodule]
fn despeckle_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(add_speckle, m)?)?;
    m.add_function(wrap_pyfunction!(metric_triple, m)?)?;
    m.add_function(wrap_pyfunction!(rho_map, m)?)?;
    m.add_function(wrap_pyfunction!(split_counts, m)?)?;
    m.add_function(wrap_pyfunction!(phantom, m)?)?;
    m.add_function(wrap_pyfunction!(derive_seed, m)?)?;
    m.add_function(wrap_pyfunction!(pixel_contrast_loss, m)?)?;
    m.add_class::<MemoryBank>()?;
    m.add("RAYLEIGH_SNR", stats::RAYLEIGH_SNR)?;
    m.add("DEFAULT_TAU_NOISE", stats::DEFAULT_TAU_NOISE)?;
    m.add("DEFAULT_TEMPERATURE", contrastive::DEFAULT_TEMPERATURE)?;
    Ok(())
}
