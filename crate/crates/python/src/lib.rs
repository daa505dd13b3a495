//! Python bindings: models, log-mel features, the synthetic corpus and training.
//!
//! Waveforms cross the boundary as lists of floats (one item) or lists of
//! lists (a batch); no array library is required on the Python side.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use waveunetd::disc::{WaveUNet, WaveUNetConfig};
use waveunetd::ensemble::{Ensemble, EnsembleConfig};
use waveunetd::generator::{Generator, GeneratorConfig};
use waveunetd::signal::{self, MelConfig};
use waveunetd::train::config::parse_json;
use waveunetd::train::{TrainConfig, Trainer};
use waveunetd::{kernels, Error, Shape, Tensor3};

fn err(e: Error) -> PyErr {
    match e {
        Error::Shape(_) | Error::Config(_) | Error::Usage(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn batch_tensor(items: Vec<Vec<f32>>) -> PyResult<Tensor3<f32>> {
    let time = items.first().map_or(0, Vec::len);
    if time == 0 || items.iter().any(|v| v.len() != time) {
        return Err(PyValueError::new_err("waveforms must be non-empty and equally long"));
    }
    let shape = Shape::new(items.len(), 1, time);
    Tensor3::new(shape, items.concat()).map_err(err)
}

fn rows(t: &Tensor3<f32>) -> Vec<Vec<f32>> {
    (0..t.shape().batch).map(|b| t.item(b).to_vec()).collect()
}

fn config_or_default<T: serde::de::DeserializeOwned + Default>(json: Option<&str>) -> PyResult<T> {
    json.map_or_else(|| Ok(T::default()), |s| parse_json(s).map_err(err))
}

#[pyclass(name = "WaveUNet")]
struct PyWaveUNet {
    inner: WaveUNet<f32>,
}

#[pymethods]
impl PyWaveUNet {
    /// `config` is a JSON object; omitted keys keep their defaults.
    #[new]
    #[pyo3(signature = (seed = 0, config = None))]
    fn new(seed: u64, config: Option<&str>) -> PyResult<Self> {
        let cfg: WaveUNetConfig = config_or_default(config)?;
        Ok(Self {
            inner: WaveUNet::new(cfg, seed).map_err(err)?,
        })
    }

    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    fn feature_count(&self) -> usize {
        self.inner.feature_count()
    }

    /// Score map per batch item, one value per input sample.
    fn score(&self, waves: Vec<Vec<f32>>) -> PyResult<Vec<Vec<f32>>> {
        let out = self.inner.infer(&batch_tensor(waves)?).map_err(err)?;
        Ok(rows(&out.score_map))
    }

    /// `(channels, time)` of every feature map for a waveform of `time` samples.
    fn feature_shapes(&self, time: usize) -> PyResult<Vec<(usize, usize)>> {
        let out = self
            .inner
            .infer(&Tensor3::zeros(Shape::new(1, 1, time)))
            .map_err(err)?;
        Ok(out
            .features
            .iter()
            .map(|f| (f.shape().channels, f.shape().time))
            .collect())
    }
}

#[pyclass(name = "Ensemble")]
struct PyEnsemble {
    inner: Ensemble<f32>,
}

#[pymethods]
impl PyEnsemble {
    #[new]
    #[pyo3(signature = (seed = 0, config = None))]
    fn new(seed: u64, config: Option<&str>) -> PyResult<Self> {
        let cfg: EnsembleConfig = config_or_default(config)?;
        Ok(Self {
            inner: Ensemble::new(cfg, seed).map_err(err)?,
        })
    }

    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// Flattened score of every sub-discriminator for every batch item.
    fn scores(&self, waves: Vec<Vec<f32>>) -> PyResult<Vec<Vec<Vec<f32>>>> {
        let outs = self.inner.forward(&batch_tensor(waves)?).map_err(err)?;
        Ok(outs.iter().map(|o| rows(&o.score_map)).collect())
    }
}

#[pyclass(name = "Generator")]
struct PyGenerator {
    inner: Generator<f32>,
}

#[pymethods]
impl PyGenerator {
    #[new]
    #[pyo3(signature = (seed = 0, config = None))]
    fn new(seed: u64, config: Option<&str>) -> PyResult<Self> {
        let cfg: GeneratorConfig = config_or_default(config)?;
        Ok(Self {
            inner: Generator::new(cfg, seed).map_err(err)?,
        })
    }

    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// Waveform from `[n_mels][frames]` log-mel values.
    fn generate(&self, mel: Vec<Vec<f32>>) -> PyResult<Vec<f32>> {
        let frames = mel.first().map_or(0, Vec::len);
        if frames == 0 || mel.iter().any(|r| r.len() != frames) {
            return Err(PyValueError::new_err("mel rows must be non-empty and equally long"));
        }
        let t = Tensor3::new(Shape::new(1, mel.len(), frames), mel.concat()).map_err(err)?;
        Ok(self.inner.generate(&t).map_err(err)?.into_vec())
    }
}

/// `[n_mels][frames]` log-mel spectrogram with the default analysis settings.
#[pyfunction]
fn log_mel(samples: Vec<f32>) -> PyResult<Vec<Vec<f32>>> {
    let m = signal::log_mel(&samples, &MelConfig::default()).map_err(err)?;
    Ok(m.frames.chunks(m.n_frames).map(<[f32]>::to_vec).collect())
}

/// Divides a feature vector by its RMS.
#[pyfunction]
fn global_norm(values: Vec<f64>) -> Vec<f64> {
    let (out, _) = kernels::global_norm(&Tensor3::from_signal(&values));
    out.into_vec()
}

#[pyfunction]
fn synth_clip(seed: u64, index: u64) -> Vec<f32> {
    signal::synth_clip(seed, index).samples
}

/// Runs the finite-difference suite and returns the largest relative error.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn gradcheck(seed: u64) -> PyResult<f64> {
    Ok(waveunetd::gradcheck::run_suite(seed).map_err(err)?.max_rel_err())
}

/// Default training config as JSON (`preset` is "desk" or "full").
#[pyfunction]
#[pyo3(signature = (preset = "desk"))]
fn default_train_config(preset: &str) -> PyResult<String> {
    match preset {
        "desk" => Ok(TrainConfig::desk().to_json()),
        "full" => Ok(TrainConfig::default().to_json()),
        other => Err(PyValueError::new_err(format!("unknown preset {other:?}"))),
    }
}

/// Trains from a JSON config and returns the run summary as JSON.
#[pyfunction]
#[pyo3(signature = (config, out_dir = None))]
fn train(py: Python<'_>, config: &str, out_dir: Option<std::path::PathBuf>) -> PyResult<String> {
    let cfg = TrainConfig::from_json(config).map_err(err)?;
    let summary = py.allow_threads(|| {
        let mut t = Trainer::new(cfg)?;
        t.run(out_dir.as_deref(), true)
    });
    serde_json::to_string(&summary.map_err(err)?).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pymodule]
fn pywaveunetd(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyWaveUNet>()?;
    m.add_class::<PyEnsemble>()?;
    m.add_class::<PyGenerator>()?;
    m.add_function(wrap_pyfunction!(log_mel, m)?)?;
    m.add_function(wrap_pyfunction!(global_norm, m)?)?;
    m.add_function(wrap_pyfunction!(synth_clip, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(default_train_config, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
