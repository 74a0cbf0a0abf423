//! Python bindings: scene-pair generation and I/O, models, alignment,
//! training, registration and metrics.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use sg_align::encoder::EncoderConfig;
use sg_align::matcher::{MatcherConfig, SoftAlignment};
use sg_align::metrics::{self, OverlapVariant};
use sg_align::model::{self, ModelError};
use sg_align::registration::{self, RegistrationConfig, Strategy};
use sg_align::scenegraph::{self, CorruptionRegime, GeneratorConfig, SceneGraphError, ScenePreset};
use sg_align::training::{self, TrainConfig, TrainError};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn scene_err(e: SceneGraphError) -> PyErr {
    match e {
        SceneGraphError::Io(_) => PyIOError::new_err(e.to_string()),
        _ => value_err(e),
    }
}

fn model_err(e: ModelError) -> PyErr {
    match e {
        ModelError::Io(_) => PyIOError::new_err(e.to_string()),
        _ => value_err(e),
    }
}

fn train_err(e: TrainError) -> PyErr {
    match e {
        TrainError::DivergenceDetected { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => value_err(e),
    }
}

fn from_name<T: serde::de::DeserializeOwned>(what: &str, name: &str) -> PyResult<T> {
    serde_json::from_value(serde_json::Value::String(name.replace('-', "_")))
        .map_err(|_| value_err(format!("unknown {what} `{name}`")))
}

fn variant(name: &str) -> PyResult<OverlapVariant> {
    from_name("overlap variant", name)
}

fn rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Two scene-graph fragments with their ground-truth alignment and transform.
#[pyclass(name = "ScenePair", frozen, from_py_object)]
#[derive(Clone)]
struct PyScenePair(scenegraph::ScenePair);

#[pymethods]
impl PyScenePair {
    #[staticmethod]
    #[pyo3(signature = (seed, overlap=(0.3, 1.0), nodes=(5, 9), preset="standard", noise_sigma=0.0))]
    fn generate(seed: u64, overlap: (f64, f64), nodes: (usize, usize), preset: &str, noise_sigma: f64) -> PyResult<Self> {
        let cfg = GeneratorConfig {
            overlap,
            nodes_per_fragment: nodes,
            preset: from_name::<ScenePreset>("preset", preset)?,
            noise_sigma,
            ..GeneratorConfig::default()
        };
        scenegraph::generate_scene_pair(&cfg, seed).map(Self).map_err(scene_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        scenegraph::load_pair(&path).map(Self).map_err(scene_err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        scenegraph::io::pair_from_json(text).map(Self).map_err(scene_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        scenegraph::save_pair(&path, &self.0).map_err(scene_err)
    }

    fn to_json(&self) -> String {
        scenegraph::io::pair_to_json(&self.0)
    }

    /// Copy with the source graph corrupted by `regime` at `rate`.
    fn corrupted(&self, regime: &str, rate: f64, seed: u64) -> PyResult<Self> {
        let regime: CorruptionRegime = from_name("corruption regime", regime)?;
        Ok(Self(scenegraph::corrupt_pair(&self.0, regime, rate, seed)))
    }

    #[getter]
    fn overlap_fraction(&self) -> f64 {
        self.0.overlap_fraction
    }

    #[getter]
    fn gt_alignment(&self) -> Vec<(usize, usize)> {
        self.0.gt_alignment.clone()
    }

    /// Row-major 4×4.
    #[getter]
    fn gt_transform(&self) -> Vec<f64> {
        self.0.gt_transform.to_row_major().to_vec()
    }

    #[getter]
    fn num_src_nodes(&self) -> usize {
        self.0.src.graph.len()
    }

    #[getter]
    fn num_ref_nodes(&self) -> usize {
        self.0.reference.graph.len()
    }

    #[getter]
    fn num_src_points(&self) -> usize {
        self.0.src.cloud.len()
    }

    #[getter]
    fn num_ref_points(&self) -> usize {
        self.0.reference.cloud.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "ScenePair(src={} nodes, ref={} nodes, overlap={:.3})",
            self.0.src.graph.len(),
            self.0.reference.graph.len(),
            self.0.overlap_fraction
        )
    }
}

/// Soft node alignment with its similarity score and selected pairs.
#[pyclass(name = "Alignment", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyAlignment(SoftAlignment);

#[pymethods]
impl PyAlignment {
    /// `(M_src+1) × (M_ref+1)`, dummy row and column last.
    #[getter]
    fn soft_matrix(&self) -> Vec<Vec<f64>> {
        rows(&self.0.soft_matrix)
    }

    #[getter]
    fn similarity(&self) -> f64 {
        self.0.similarity
    }

    #[getter]
    fn selected_pairs(&self) -> Vec<(usize, usize, f64)> {
        self.0.selected_pairs.clone()
    }

    fn rankings(&self) -> Vec<Vec<usize>> {
        self.0.rankings()
    }

    #[pyo3(signature = (variant="all"))]
    fn overlap_score(&self, variant: &str) -> PyResult<f64> {
        Ok(metrics::overlap_score(&self.0, self::variant(variant)?))
    }

    /// Hits@1/3/5, MRR and F1 against the pair's ground truth.
    fn evaluate(&self, pair: &PyScenePair) -> PyResult<MatchMetrics> {
        let p = &pair.0;
        if self.0.m_src() != p.src.graph.len() || self.0.m_ref() != p.reference.graph.len() {
            return Err(value_err("alignment and pair differ in node counts"));
        }
        let ranks = metrics::alignment_ranks(&self.0, &p.gt_alignment);
        let pred = metrics::hard_matrix(
            self.0.selected_pairs.iter().map(|s| (s.0, s.1)),
            self.0.m_src(),
            self.0.m_ref(),
        );
        Ok(MatchMetrics {
            hits_1: metrics::hits_at_k(&ranks, 1).map_err(value_err)?,
            hits_3: metrics::hits_at_k(&ranks, 3).map_err(value_err)?,
            hits_5: metrics::hits_at_k(&ranks, 5).map_err(value_err)?,
            mrr: metrics::mean_reciprocal_rank(&ranks).map_err(value_err)?,
            f1: metrics::matching_f1(&pred, &p.gt_matrix()).map_err(value_err)?,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "Alignment({}×{}, similarity={:.3}, {} selected)",
            self.0.m_src(),
            self.0.m_ref(),
            self.0.similarity,
            self.0.selected_pairs.len()
        )
    }
}

#[pyclass(frozen, get_all)]
struct MatchMetrics {
    hits_1: f64,
    hits_3: f64,
    hits_5: f64,
    mrr: f64,
    f1: f64,
}

#[pymethods]
impl MatchMetrics {
    fn __repr__(&self) -> String {
        format!(
            "MatchMetrics(hits_1={:.3}, hits_3={:.3}, hits_5={:.3}, mrr={:.3}, f1={:.3})",
            self.hits_1, self.hits_3, self.hits_5, self.mrr, self.f1
        )
    }
}

#[pyclass(frozen, get_all)]
struct EpochLoss {
    epoch: usize,
    l_s: f64,
    l_k: f64,
    l: f64,
}

/// Scene-graph encoder plus matching head.
#[pyclass(name = "Model", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyModel(model::Model);

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (seed=0, use_geometry=true, temperature=None))]
    fn new(seed: u64, use_geometry: bool, temperature: Option<f64>) -> PyResult<Self> {
        let enc = EncoderConfig {
            use_geometry,
            ..EncoderConfig::default()
        };
        let mut mcfg = MatcherConfig::default();
        if let Some(t) = temperature {
            mcfg.temperature = t;
        }
        model::Model::init(enc, mcfg, seed).map(Self).map_err(model_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        model::Model::load(&path).map(|(m, _)| Self(m)).map_err(model_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path, None).map_err(model_err)
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.0.num_parameters()
    }

    fn align(&self, pair: &PyScenePair) -> PyResult<PyAlignment> {
        self.0.align(&pair.0).map(PyAlignment).map_err(value_err)
    }

    /// Trains a copy of this model; returns it with the loss curve.
    #[pyo3(signature = (pairs, epochs=10, lr=1e-4, seed=0))]
    fn train(&self, py: Python<'_>, pairs: Vec<PyScenePair>, epochs: usize, lr: f64, seed: u64) -> PyResult<(Self, Vec<EpochLoss>)> {
        let cfg = TrainConfig {
            epochs,
            lr,
            seed,
            ..TrainConfig::default()
        };
        let data: Vec<_> = pairs.into_iter().map(|p| p.0).collect();
        let model = self.0.clone();
        let (trained, curve) = py.detach(|| training::train(&data, model, &cfg)).map_err(train_err)?;
        let curve = curve
            .into_iter()
            .map(|e| EpochLoss {
                epoch: e.epoch,
                l_s: e.l_s,
                l_k: e.l_k,
                l: e.l,
            })
            .collect();
        Ok((Self(trained), curve))
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(use_geometry={}, {} parameters)",
            self.0.encoder_config.use_geometry,
            self.0.num_parameters()
        )
    }
}

#[pyclass(frozen, get_all)]
struct RegistrationResult {
    strategy: String,
    /// Row-major 4×4, source into reference frame.
    transform: Vec<f64>,
    correspondences: usize,
    inliers: usize,
    rre_deg: f64,
    rte: f64,
    rmse: Option<f64>,
    scc: Option<f64>,
}

/// Ground-truth alignment of a pair, every pair selected at score 1.
#[pyfunction]
fn oracle_alignment(pair: &PyScenePair) -> PyAlignment {
    PyAlignment(registration::oracle_alignment(&pair.0))
}

/// Registers the source fragment onto the reference fragment.
#[pyfunction]
#[pyo3(signature = (pair, alignment=None, strategy="o2o", gamma=0.2, use_ransac=false, seed=0))]
fn register(
    py: Python<'_>,
    pair: &PyScenePair,
    alignment: Option<&PyAlignment>,
    strategy: &str,
    gamma: f64,
    use_ransac: bool,
    seed: u64,
) -> PyResult<RegistrationResult> {
    let strategy: Strategy = strategy.parse().map_err(value_err)?;
    let cfg = RegistrationConfig {
        gamma,
        use_ransac,
        seed,
        ..RegistrationConfig::default()
    };
    let p = &pair.0;
    let reg = py
        .detach(|| registration::register_pair(p, alignment.map(|a| &a.0), strategy, &cfg))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let gt_corr = registration::gt_correspondences(p);
    Ok(RegistrationResult {
        strategy: strategy.to_string(),
        transform: reg.transform.to_row_major().to_vec(),
        correspondences: reg.correspondences.len(),
        inliers: reg.inliers,
        rre_deg: metrics::rre_deg(&reg.transform, &p.gt_transform),
        rte: metrics::rte(&reg.transform, &p.gt_transform),
        rmse: metrics::rmse(&reg.transform, &gt_corr).ok(),
        scc: metrics::scc(
            &reg.correspondences,
            p.src.cloud.object_ids(),
            p.reference.cloud.object_ids(),
            &p.gt_alignment,
        )
        .ok(),
    })
}

/// Overlap decision for a score under the default thresholds.
#[pyfunction]
#[pyo3(signature = (mu, variant="all"))]
fn overlap_decision(mu: f64, variant: &str) -> PyResult<bool> {
    Ok(metrics::overlap_decision(mu, self::variant(variant)?, &metrics::MetricThresholds::default()))
}

#[pymodule]
#[pyo3(name = "sg_align")]
fn sg_align_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScenePair>()?;
    m.add_class::<PyAlignment>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<MatchMetrics>()?;
    m.add_class::<EpochLoss>()?;
    m.add_class::<RegistrationResult>()?;
    m.add_function(wrap_pyfunction!(oracle_alignment, m)?)?;
    m.add_function(wrap_pyfunction!(register, m)?)?;
    m.add_function(wrap_pyfunction!(overlap_decision, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
