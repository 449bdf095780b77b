//! Python bindings for the distillation dynamics toolkit.
//!
//! Exposes the linear gradient-flow solver, the matched-convergence sweep,
//! the diagnostics scalarizations, the synthetic data generator, the IDX
//! round trip, and the full experiment runner (as a JSON-config call).

use std::fmt::Display;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use kddyn_core::data::{DataError, LabeledSet, Split};
use kddyn_core::diagnostics::{self, SCATTER_EPS};
use kddyn_core::gradflow::{self, GradFlowProblem};
use kddyn_core::nn;
use kddyn_core::numerics::{sym_eigendecompose, Matrix, DEFAULT_EIGEN_TOL};
use kddyn_core::runner::{self, ExperimentConfig};

fn value_err(e: impl Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn data_err(e: DataError) -> PyErr {
    match e {
        DataError::Io(inner) => PyIOError::new_err(inner.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn to_matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(value_err)
}

fn matrix_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

/// Linear gradient-flow problem: teacher trained on labels, student distilled
/// from the teacher's stopped predictions.
#[pyclass(name = "GradFlowProblem")]
struct PyGradFlowProblem {
    inner: GradFlowProblem,
}

#[pymethods]
impl PyGradFlowProblem {
    #[new]
    fn new(x: Vec<Vec<f64>>, y: Vec<f64>, teacher_stop_time: f64) -> PyResult<Self> {
        let inner = GradFlowProblem::new(to_matrix(x)?, y, teacher_stop_time).map_err(value_err)?;
        Ok(Self { inner })
    }

    /// Diagonal problem with the given Gram eigenvalues and unit targets.
    #[staticmethod]
    fn from_spectrum(lambdas: Vec<f64>, teacher_stop_time: f64) -> PyResult<Self> {
        let inner =
            GradFlowProblem::from_spectrum(&lambdas, teacher_stop_time).map_err(value_err)?;
        Ok(Self { inner })
    }

    fn num_directions(&self) -> usize {
        self.inner.num_directions()
    }

    fn teacher_stop_time(&self) -> f64 {
        self.inner.teacher_stop_time()
    }

    fn eigenvalues(&self) -> PyResult<Vec<f64>> {
        (0..self.inner.num_directions())
            .map(|k| self.inner.lambda(k).map_err(value_err))
            .collect()
    }

    fn teacher_weights(&self, t: f64) -> PyResult<Vec<f64>> {
        self.inner.teacher_weights(t).map_err(value_err)
    }

    fn student_weights(&self, t: f64) -> PyResult<Vec<f64>> {
        self.inner.student_weights(t).map_err(value_err)
    }

    /// Times (teacher, student) at which both reach convergence factor
    /// `alpha_target` along direction `k1`.
    fn match_time_on_top(&self, k1: usize, alpha_target: f64) -> PyResult<(f64, f64)> {
        gradflow::match_time_on_top(&self.inner, k1, alpha_target).map_err(value_err)
    }

    /// Student-to-teacher size of direction `k2` when both models match
    /// convergence `alpha_target` along the faster direction `k1`.
    fn matched_ratio(&self, k1: usize, k2: usize, alpha_target: f64) -> PyResult<f64> {
        gradflow::verify_theorem(&self.inner, k1, k2, alpha_target).map_err(value_err)
    }

    /// Component magnitudes along every eigendirection at each time.
    /// Returns (times, teacher, student) with trace[k][i] = |beta_k| at
    /// times[i].
    fn closed_form_traces(
        &self,
        times: Vec<f64>,
    ) -> PyResult<(Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let traces = gradflow::closed_form_traces(&self.inner, &times).map_err(value_err)?;
        Ok((traces.times, traces.teacher, traces.student))
    }
}

/// Temperature softmax of a logit vector.
#[pyfunction]
#[pyo3(signature = (logits, tau = 1.0))]
fn softmax(logits: Vec<f64>, tau: f64) -> Vec<f64> {
    nn::softmax(&logits, tau)
}

/// Log-odds of a clamped probability.
#[pyfunction]
#[pyo3(signature = (u, eps = SCATTER_EPS))]
fn logit_transform(u: f64, eps: f64) -> f64 {
    diagnostics::logit_transform(u, eps)
}

/// Multi-class margin `f_y - logsumexp_{k != y} f_k`.
#[pyfunction]
fn margin_form(f: Vec<f64>, y: usize) -> PyResult<f64> {
    diagnostics::margin_form(&f, y).map_err(value_err)
}

/// The strict-inequality slack `a^kappa + b^kappa - (ab)^kappa -
/// (a + b - ab)^kappa` from the matched-convergence proof.
#[pyfunction]
fn proof_gap(kappa: f64, a: f64, b: f64) -> PyResult<f64> {
    gradflow::proof_gap(kappa, a, b).map_err(value_err)
}

/// Random two-rate problems with their matched-convergence ratios.
/// Returns one dict per tuple.
#[pyfunction]
fn theorem_sweep(py: Python<'_>, count: usize, seed: u64) -> PyResult<Vec<Py<PyDict>>> {
    let samples = gradflow::theorem_sweep(count, seed).map_err(value_err)?;
    samples
        .into_iter()
        .map(|s| {
            let d = PyDict::new(py);
            d.set_item("lambda1", s.lambda1)?;
            d.set_item("lambda2", s.lambda2)?;
            d.set_item("t_stop", s.t_stop)?;
            d.set_item("alpha_target", s.alpha_target)?;
            d.set_item("t", s.t)?;
            d.set_item("t_tilde", s.t_tilde)?;
            d.set_item("ratio", s.ratio)?;
            Ok(d.unbind())
        })
        .collect()
}

/// Eigendecomposition of a symmetric matrix. Returns (eigenvalues,
/// eigenvectors) with eigenvalues descending and eigenvectors[k] the unit
/// vector for eigenvalues[k].
#[pyfunction]
fn eigendecompose(matrix: Vec<Vec<f64>>) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
    let m = to_matrix(matrix)?;
    let eig = sym_eigendecompose(&m, DEFAULT_EIGEN_TOL).map_err(value_err)?;
    let vectors = (0..eig.dim).map(|k| eig.eigenvector(k)).collect();
    Ok((eig.eigenvalues, vectors))
}

/// Mean normalized-progress lead of the student over the teacher for a
/// (top, low) direction pair; positive means the student's bias toward the
/// top direction exceeds the teacher's.
#[pyfunction]
fn exaggeration_score(
    teacher_top: Vec<f64>,
    teacher_low: Vec<f64>,
    student_top: Vec<f64>,
    student_low: Vec<f64>,
) -> PyResult<f64> {
    diagnostics::exaggeration_score(&teacher_top, &teacher_low, &student_top, &student_low)
        .map_err(value_err)
}

/// Unit-sphere Gaussian class clusters. Returns (inputs, labels).
#[pyfunction]
fn make_gaussian_clusters(
    num_classes: usize,
    dim: usize,
    count: usize,
    spread: f64,
    means_seed: u64,
    sample_seed: u64,
) -> PyResult<(Vec<Vec<f64>>, Vec<usize>)> {
    let set = kddyn_core::data::make_gaussian_clusters(
        num_classes,
        dim,
        count,
        spread,
        means_seed,
        sample_seed,
        Split::Train,
    )
    .map_err(data_err)?;
    Ok((matrix_rows(&set.inputs), set.labels))
}

/// Read an IDX image/label pair. Returns (inputs, labels, (h, w, c)) with
/// pixels scaled to [0, 1].
#[pyfunction]
fn load_idx(
    images_path: PathBuf,
    labels_path: PathBuf,
) -> PyResult<(Vec<Vec<f64>>, Vec<usize>, (usize, usize, usize))> {
    let set = kddyn_core::data::load_idx(&images_path, &labels_path, Split::Train)
        .map_err(data_err)?;
    let shape = set
        .image_shape
        .ok_or_else(|| PyValueError::new_err("loaded set has no image shape"))?;
    Ok((matrix_rows(&set.inputs), set.labels, shape))
}

/// Write inputs in [0, 1] as an IDX image/label pair of h-by-w grayscale
/// images.
#[pyfunction]
fn write_idx(
    inputs: Vec<Vec<f64>>,
    labels: Vec<usize>,
    h: usize,
    w: usize,
    images_path: PathBuf,
    labels_path: PathBuf,
) -> PyResult<()> {
    let num_classes = labels.iter().copied().max().map_or(2, |m| (m + 1).max(2));
    let set = LabeledSet::new(to_matrix(inputs)?, labels, Split::Train, num_classes, Some((h, w, 1)))
        .map_err(data_err)?;
    kddyn_core::data::write_idx(&set, &images_path, &labels_path).map_err(data_err)
}

/// Per-stage seed derived from the master seed and a stage name.
#[pyfunction]
fn stage_seed(master: u64, stage: &str) -> u64 {
    runner::stage_seed(master, stage)
}

/// Run a full experiment from a JSON config string. Returns the run
/// manifest as a JSON string; artifacts land in the config's output_dir.
#[pyfunction]
fn run_experiment(config_json: &str) -> PyResult<String> {
    let config: ExperimentConfig = serde_json::from_str(config_json).map_err(value_err)?;
    let manifest = runner::run(&config).map_err(value_err)?;
    serde_json::to_string_pretty(&manifest).map_err(value_err)
}

#[pyfunction]
fn version() -> &'static str {
    env!("CARGO_PKG_VERSION")
}

#[pymodule]
fn kddyn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGradFlowProblem>()?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(logit_transform, m)?)?;
    m.add_function(wrap_pyfunction!(margin_form, m)?)?;
    m.add_function(wrap_pyfunction!(proof_gap, m)?)?;
    m.add_function(wrap_pyfunction!(theorem_sweep, m)?)?;
    m.add_function(wrap_pyfunction!(eigendecompose, m)?)?;
    m.add_function(wrap_pyfunction!(exaggeration_score, m)?)?;
    m.add_function(wrap_pyfunction!(make_gaussian_clusters, m)?)?;
    m.add_function(wrap_pyfunction!(load_idx, m)?)?;
    m.add_function(wrap_pyfunction!(write_idx, m)?)?;
    m.add_function(wrap_pyfunction!(stage_seed, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(version, m)?)?;
    m.add("SCHEMA_VERSION", runner::SCHEMA_VERSION)?;
    Ok(())
}
