//! Python bindings. Images cross the boundary as flat `float` lists in
//! channel-major order plus a `(channels, height, width)` shape; reports
//! come back as JSON strings.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use oneshot_core::distiller::{read_distillates, Autoencoder as CoreAutoencoder};
use oneshot_core::harness::{self, ExperimentConfig};
use oneshot_core::model::{predict_soft, LocalModel};
use oneshot_core::partition::{dirichlet_partition, LabeledImage, PartitionSpec};
use oneshot_core::raster::Image;
use oneshot_core::{fourier, privacy, seed, synthetic, Error};

type Shape = (usize, usize, usize);

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn image(data: Vec<f32>, (c, h, w): Shape) -> PyResult<Image> {
    Image::new(c, h, w, data).map_err(py_err)
}

fn images(flat: Vec<f32>, n: usize, (c, h, w): Shape) -> PyResult<Vec<Image>> {
    let len = c * h * w;
    if flat.len() != n * len {
        return Err(PyValueError::new_err(format!("expected {n} images of {len} values, got {} values", flat.len())));
    }
    flat.chunks(len.max(1)).take(n).map(|px| image(px.to_vec(), (c, h, w))).collect()
}

/// Experiment configuration. Construct from TOML text or take the defaults.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (toml = None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(t) => ExperimentConfig::from_toml(t).map_err(py_err)?,
            None => ExperimentConfig::default(),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: ExperimentConfig::load(&path).map_err(py_err)? })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    /// Returns a copy with the given keys replaced, validated.
    fn with_overrides(&self, toml: &str) -> PyResult<Self> {
        let mut table: toml::Table = self.inner.to_toml().parse().map_err(|e| PyValueError::new_err(format!("{e}")))?;
        let extra: toml::Table = toml.parse().map_err(|e| PyValueError::new_err(format!("{e}")))?;
        table.extend(extra);
        Ok(Self { inner: ExperimentConfig::from_toml(&table.to_string()).map_err(py_err)? })
    }

    #[getter]
    fn output_dir(&self) -> PathBuf {
        self.inner.output_dir.clone()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }
}

/// Runs the full pipeline; returns the report as JSON.
#[pyfunction]
fn run_pipeline(py: Python<'_>, config: &PyConfig) -> PyResult<String> {
    let cfg = config.inner.clone();
    let report = py.detach(move || harness::run_pipeline(&cfg)).map_err(py_err)?;
    Ok(serde_json::to_string(&report).expect("report serializes"))
}

/// Runs one named stage against the config's run directory.
#[pyfunction]
fn run_stage(py: Python<'_>, config: &PyConfig, stage: String) -> PyResult<()> {
    let cfg = config.inner.clone();
    py.detach(move || harness::run_stage(&cfg, &stage)).map_err(py_err)
}

/// Procedural shape corpus: `(pixels, labels)` with pixels flattened.
#[pyfunction]
fn synthetic_corpus(classes: usize, per_class: usize, size: usize, seed: u64) -> PyResult<(Vec<f32>, Vec<usize>)> {
    let corpus = synthetic::generate(&synthetic::SyntheticSpec { classes, per_class, size, seed }).map_err(py_err)?;
    let labels = corpus.images.iter().map(|li| li.label).collect();
    Ok((corpus.images.into_iter().flat_map(|li| li.image.data).collect(), labels))
}

/// Per-client sample indices of a Dirichlet(alpha) label split.
#[pyfunction]
fn dirichlet_split(labels: Vec<usize>, n_clients: usize, alpha: f64, seed: u64) -> PyResult<Vec<Vec<usize>>> {
    let items: Vec<LabeledImage> = labels.iter().map(|&label| LabeledImage { image: Image::zeros(1, 1, 1), label }).collect();
    let shards = dirichlet_partition(&items, &PartitionSpec { n_clients, alpha, seed }).map_err(py_err)?;
    Ok(shards.into_iter().map(|s| s.indices).collect())
}

/// `(amplitude, phase)` of the per-channel 2-D DFT.
#[pyfunction]
fn fft2(data: Vec<f32>, shape: Shape) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let s = fourier::fft2(&image(data, shape)?).map_err(py_err)?;
    Ok((s.amplitude, s.phase))
}

/// Mixes `reference`'s amplitude spectrum into `x` with weight `lam`,
/// keeping `x`'s phase.
#[pyfunction]
fn perturb_image(x: Vec<f32>, reference: Vec<f32>, shape: Shape, lam: f64) -> PyResult<Vec<f32>> {
    Ok(fourier::perturb_image(&image(x, shape)?, &image(reference, shape)?, lam).map_err(py_err)?.data)
}

#[pyfunction]
fn psnr(a: Vec<f32>, b: Vec<f32>, shape: Shape) -> PyResult<f64> {
    privacy::psnr(&image(a, shape)?, &image(b, shape)?).map_err(py_err)
}

#[pyfunction]
fn ssim(a: Vec<f32>, b: Vec<f32>, shape: Shape) -> PyResult<f64> {
    privacy::ssim(&image(a, shape)?, &image(b, shape)?).map_err(py_err)
}

/// `(1 - p) z + s e` with Laplace or Gaussian `e`.
#[pyfunction]
#[pyo3(signature = (latent, p, s, distribution = "laplace", seed_value = 0))]
fn noise_perturb(latent: Vec<f32>, p: f64, s: f64, distribution: &str, seed_value: u64) -> PyResult<Vec<f32>> {
    let distribution = match distribution {
        "laplace" => privacy::NoiseKind::Laplace,
        "gaussian" => privacy::NoiseKind::Gaussian,
        other => return Err(PyValueError::new_err(format!("unknown noise distribution `{other}`"))),
    };
    let cfg = privacy::NoiseConfig { p, s, distribution, seed: seed_value };
    cfg.validate().map_err(py_err)?;
    Ok(privacy::noise_perturb(&latent, &cfg, &mut seed::rng(seed_value)))
}

/// Upload accounting: `(total payload bytes, mean payload / checkpoint)`.
#[pyfunction]
fn comm_cost(per_client_payload: Vec<u64>, model_checkpoint_bytes: u64) -> (u64, f64) {
    let r = privacy::comm_cost(&per_client_payload, model_checkpoint_bytes);
    (r.total_payload, r.ratio)
}

/// A distillate archive as `(client_id, latent_shape, latents, soft_labels)`.
#[pyfunction]
fn load_distillates(path: PathBuf) -> PyResult<(usize, Shape, Vec<Vec<f32>>, Vec<Vec<f32>>)> {
    let set = read_distillates(&path).map_err(py_err)?;
    let latents = set.distillates.iter().map(|d| d.latent.clone()).collect();
    let labels = set.distillates.into_iter().map(|d| d.soft_label.probs).collect();
    Ok((set.client_id, set.latent_shape, latents, labels))
}

/// A classifier checkpoint.
#[pyclass(name = "Model")]
struct PyModel {
    inner: LocalModel,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: LocalModel::load(&path).map_err(py_err)? })
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }

    #[getter]
    fn arch(&self) -> String {
        self.inner.arch.to_string()
    }

    fn checkpoint_bytes(&self) -> PyResult<u64> {
        self.inner.checkpoint_bytes().map_err(py_err)
    }

    /// Class probabilities for `n` images.
    fn predict(&self, pixels: Vec<f32>, n: usize) -> PyResult<Vec<Vec<f32>>> {
        let batch = images(pixels, n, self.inner.image_shape())?;
        Ok(predict_soft(&self.inner, &batch).map_err(py_err)?.into_iter().map(|s| s.probs).collect())
    }
}

#[pyclass(name = "Autoencoder")]
struct PyAutoencoder {
    inner: CoreAutoencoder,
}

#[pymethods]
impl PyAutoencoder {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: CoreAutoencoder::load(&path).map_err(py_err)? })
    }

    #[getter]
    fn latent_shape(&self) -> Shape {
        self.inner.latent_shape()
    }

    #[getter]
    fn kind(&self) -> String {
        self.inner.kind.to_string()
    }

    fn config_hash(&self) -> String {
        self.inner.config_hash()
    }

    /// Latents of `n` images, flattened.
    fn encode(&self, pixels: Vec<f32>, n: usize) -> PyResult<Vec<f32>> {
        let batch = images(pixels, n, self.inner.image_shape())?;
        let refs: Vec<&Image> = batch.iter().collect();
        Ok(self.inner.encode(&refs).map_err(py_err)?.data().to_vec())
    }

    /// Images decoded from `n` flattened latents, clamped to `[0, 1]`.
    fn decode(&self, latents: Vec<f32>, n: usize) -> PyResult<Vec<f32>> {
        let len = self.inner.latent_len();
        if latents.len() != n * len {
            return Err(PyValueError::new_err(format!("expected {n} latents of {len} values")));
        }
        let rows: Vec<&[f32]> = latents.chunks(len).collect();
        let batch = self.inner.latent_batch(&rows).map_err(py_err)?;
        Ok(self.inner.decode(&batch).map_err(py_err)?.into_iter().flat_map(|i| i.data).collect())
    }
}

#[pymodule]
fn oneshot_fl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyAutoencoder>()?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(run_stage, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(dirichlet_split, m)?)?;
    m.add_function(wrap_pyfunction!(fft2, m)?)?;
    m.add_function(wrap_pyfunction!(perturb_image, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(noise_perturb, m)?)?;
    m.add_function(wrap_pyfunction!(comm_cost, m)?)?;
    m.add_function(wrap_pyfunction!(load_distillates, m)?)?;
    Ok(())
}
