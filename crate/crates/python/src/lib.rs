use std::path::PathBuf;

use hsinas::autodiff::ParamStore;
use hsinas::checkpoint::Checkpoint;
use hsinas::compact::{CompactConfig, CompactNetwork as CoreCompact};
use hsinas::data::{self, SplitSpec, SyntheticSpec};
use hsinas::genotype::Genotype as CoreGenotype;
use hsinas::inference::{self, InferenceConfig, Strategy};
use hsinas::nn::{HeadConfig, StemConfig};
use hsinas::pipeline::{normalize_with, search_stage, train_stage};
use hsinas::search::SearchConfig;
use hsinas::search_space::{self, SearchSpace};
use hsinas::supernet::SupernetConfig;
use hsinas::train::FinalTrainConfig;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: hsinas::Error) -> PyErr {
    use hsinas::Error as E;
    match e {
        E::Io { .. } => PyIOError::new_err(e.to_string()),
        E::Divergence { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// A hyperspectral cube in band-major planes.
#[pyclass(module = "pyhsinas", skip_from_py_object)]
#[derive(Clone)]
struct HsiCube {
    inner: data::HsiCube,
}

#[pymethods]
impl HsiCube {
    #[new]
    fn new(height: usize, width: usize, bands: usize, values: Vec<f32>) -> PyResult<Self> {
        let inner = data::HsiCube::new(height, width, bands, values).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        data::HsiCube::load(&path).map(|inner| Self { inner }).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        (self.inner.height, self.inner.width, self.inner.bands)
    }

    #[getter]
    fn values(&self) -> Vec<f32> {
        self.inner.values.clone()
    }

    fn spectrum(&self, row: usize, col: usize) -> PyResult<Vec<f32>> {
        if row >= self.inner.height || col >= self.inner.width {
            return Err(PyValueError::new_err("pixel outside the cube"));
        }
        Ok(self.inner.spectrum(row, col))
    }

    fn __repr__(&self) -> String {
        format!("HsiCube({}x{}x{})", self.inner.height, self.inner.width, self.inner.bands)
    }
}

/// Per-pixel class ids; 0 is unlabeled.
#[pyclass(module = "pyhsinas", skip_from_py_object)]
#[derive(Clone)]
struct LabelMap {
    inner: data::LabelMap,
}

#[pymethods]
impl LabelMap {
    #[new]
    fn new(height: usize, width: usize, labels: Vec<u16>) -> PyResult<Self> {
        let inner = data::LabelMap::new(height, width, labels).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        data::LabelMap::load(&path).map(|inner| Self { inner }).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.inner.height, self.inner.width)
    }

    #[getter]
    fn labels(&self) -> Vec<u16> {
        self.inner.labels.clone()
    }

    fn labeled_count(&self) -> usize {
        self.inner.labeled_count()
    }

    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn __repr__(&self) -> String {
        format!(
            "LabelMap({}x{}, {} labeled)",
            self.inner.height,
            self.inner.width,
            self.inner.labeled_count()
        )
    }
}

#[pyclass(module = "pyhsinas", skip_from_py_object)]
#[derive(Clone)]
struct Genotype {
    inner: CoreGenotype,
}

#[pymethods]
impl Genotype {
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        CoreGenotype::parse(text).map(|inner| Self { inner }).map_err(py_err)
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn node_widths(&self) -> Vec<usize> {
        self.inner.node_widths()
    }

    #[getter]
    fn space(&self) -> String {
        self.inner.space.to_string()
    }

    /// `(source, op)` pairs of each node, per layer.
    fn edges(&self) -> Vec<Vec<[(usize, String); 2]>> {
        self.inner
            .layers
            .iter()
            .map(|l| {
                l.nodes
                    .iter()
                    .map(|[a, b]| [(a.source, a.op.clone()), (b.source, b.op.clone())])
                    .collect()
            })
            .collect()
    }

    fn __repr__(&self) -> String {
        format!("Genotype({}, widths {:?})", self.inner.space, self.inner.node_widths())
    }
}

/// A trained compact network with the band statistics it was trained on.
#[pyclass(module = "pyhsinas")]
struct CompactNetwork {
    net: CoreCompact,
    store: ParamStore,
    norm: Option<data::NormStats>,
}

#[pymethods]
impl CompactNetwork {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(py_err)?;
        let (net, store) = ck.build_compact().map_err(py_err)?;
        Ok(Self { net, store, norm: ck.norm })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::of_compact(&self.net, &self.store, self.norm.clone())
            .save(&path)
            .map_err(py_err)
    }

    #[getter]
    fn genotype(&self) -> Genotype {
        Genotype {
            inner: self.net.genotype.clone(),
        }
    }

    /// Classify a raw cube; it is standardized with the stored statistics.
    #[pyo3(signature = (cube, strategy = "plain"))]
    fn infer(&mut self, cube: &HsiCube, strategy: &str) -> PyResult<LabelMap> {
        let strategy: Strategy = strategy.parse().map_err(py_err)?;
        let mut c = cube.inner.clone();
        if let Some(n) = &self.norm {
            c.normalize(n).map_err(py_err)?;
        }
        let r = inference::infer(&self.net, &mut self.store, &c, strategy, &InferenceConfig::default()).map_err(py_err)?;
        Ok(LabelMap { inner: r.class_map })
    }
}

#[pyfunction]
#[pyo3(signature = (height, width, bands, classes, noise_sigma = 0.1, seed = 0))]
fn gen_synthetic(height: usize, width: usize, bands: usize, classes: usize, noise_sigma: f64, seed: u64) -> PyResult<(HsiCube, LabelMap)> {
    let spec = SyntheticSpec {
        height,
        width,
        bands,
        classes,
        noise_sigma,
        seed,
    };
    let (cube, labels) = data::gen_synthetic(spec).map_err(py_err)?;
    Ok((HsiCube { inner: cube }, LabelMap { inner: labels }))
}

#[pyfunction]
#[pyo3(signature = (labels, train_per_class = 20, val_per_class = 10, seed = 0))]
fn split_labels(labels: &LabelMap, train_per_class: usize, val_per_class: usize, seed: u64) -> PyResult<(LabelMap, LabelMap, LabelMap)> {
    let spec = SplitSpec {
        train_per_class,
        val_per_class,
        seed,
    };
    let (a, b, c) = data::split_labels(&labels.inner, spec).map_err(py_err)?;
    Ok((LabelMap { inner: a }, LabelMap { inner: b }, LabelMap { inner: c }))
}

/// `(oa, aa, kappa)` over the labeled pixels of `reference`.
#[pyfunction]
fn evaluate(reference: &LabelMap, predicted: &LabelMap, classes: usize) -> PyResult<(f64, f64, f64)> {
    let s = hsinas::metrics::evaluate(&reference.inner, &predicted.inner, classes).map_err(py_err)?;
    Ok((s.oa, s.aa, s.kappa))
}

#[pyfunction]
fn count_params(space: &str, op: &str, cin: usize, cout: usize) -> PyResult<usize> {
    let space: SearchSpace = space.parse().map_err(py_err)?;
    Ok(search_space::count_params(space.op(op).map_err(py_err)?, cin, cout))
}

#[pyfunction]
fn cosine_lr(epoch: f64, lr_max: f64, lr_min: f64, epochs_max: f64) -> f64 {
    hsinas::optim::cosine_lr(epoch, lr_max, lr_min, epochs_max)
}

#[pyfunction]
fn poly_lr(iter: f64, lr_init: f64, max_iter: f64, power: f64) -> f64 {
    hsinas::optim::poly_lr(iter, lr_init, max_iter, power)
}

fn widths(channels: usize) -> (StemConfig, HeadConfig) {
    (
        StemConfig {
            channels,
            ..StemConfig::default()
        },
        HeadConfig {
            compress_channels: channels,
            hidden_channels: channels,
        },
    )
}

/// Run the architecture search and return the derived genotype.
#[pyfunction]
#[pyo3(signature = (cube, train, val, *, seed, space = "3d-asym-d", layers = 2, nodes = 3, base_width = 4,
    final_width = 16, channels = 8, epochs = 30, warmup_epochs = 10, pool_size = 16, patch_size = 16))]
#[allow(clippy::too_many_arguments)]
fn search(
    cube: &HsiCube,
    train: &LabelMap,
    val: &LabelMap,
    seed: u64,
    space: &str,
    layers: usize,
    nodes: usize,
    base_width: usize,
    final_width: usize,
    channels: usize,
    epochs: usize,
    warmup_epochs: usize,
    pool_size: usize,
    patch_size: usize,
) -> PyResult<Genotype> {
    let mut c = cube.inner.clone();
    normalize_with(&mut c, &train.inner).map_err(py_err)?;
    let classes = train.inner.num_classes().max(val.inner.num_classes());
    let (stem, head) = widths(channels);
    let net = SupernetConfig {
        layers,
        nodes,
        base_width,
        space: space.parse().map_err(py_err)?,
        stem,
        head,
        ..SupernetConfig::new(classes, c.bands)
    };
    let config = SearchConfig {
        epochs,
        warmup_epochs,
        pool_size,
        patch_size,
        seed,
        ..SearchConfig::default()
    };
    let run = search_stage(&c, &train.inner, &val.inner, net, &config, final_width, |_, _| {}).map_err(py_err)?;
    Ok(Genotype { inner: run.genotype })
}

/// Train the compact network of `genotype`.
#[pyfunction]
#[pyo3(signature = (cube, train, val, genotype, *, seed, channels = 8, iters = 600, batch_size = 4,
    patch_size = 16, eval_every = 50, patience = 6))]
#[allow(clippy::too_many_arguments)]
fn train(
    cube: &HsiCube,
    train: &LabelMap,
    val: &LabelMap,
    genotype: &Genotype,
    seed: u64,
    channels: usize,
    iters: usize,
    batch_size: usize,
    patch_size: usize,
    eval_every: usize,
    patience: usize,
) -> PyResult<CompactNetwork> {
    let mut c = cube.inner.clone();
    normalize_with(&mut c, &train.inner).map_err(py_err)?;
    let classes = train.inner.num_classes().max(val.inner.num_classes());
    let (stem, head) = widths(channels);
    let net = CompactConfig {
        stem,
        head,
        ..CompactConfig::new(classes, c.bands)
    };
    let config = FinalTrainConfig {
        batch_size,
        max_iters: iters,
        eval_every,
        patience,
        patch_size,
        seed,
        ..FinalTrainConfig::default()
    };
    let run = train_stage(&c, &train.inner, &val.inner, genotype.inner.clone(), net, &config, |_| {}).map_err(py_err)?;
    Ok(CompactNetwork {
        net: run.network,
        store: run.store,
        norm: c.norm,
    })
}

#[pymodule]
fn pyhsinas(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<HsiCube>()?;
    m.add_class::<LabelMap>()?;
    m.add_class::<Genotype>()?;
    m.add_class::<CompactNetwork>()?;
    m.add_function(wrap_pyfunction!(gen_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(split_labels, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(count_params, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_lr, m)?)?;
    m.add_function(wrap_pyfunction!(poly_lr, m)?)?;
    m.add_function(wrap_pyfunction!(search, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
