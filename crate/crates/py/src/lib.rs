//! Python bindings. Matrices cross the boundary as lists of rows; structured
//! reports come back as JSON strings.

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;

use mgk_core::attention::{self as attn, AttentionOutput, MultiHeadParams};
use mgk_core::training::{self, ModelSpec, OptimizerSpec, TaskKind, TaskSpec, TrainConfig};
use mgk_core::{complexity, diagnostics, em, equivalence, gradcheck, MgkError as CoreError, Tensor};

create_exception!(mgk, MgkError, PyException);

fn py_err(e: CoreError) -> PyErr {
    match e {
        CoreError::Config(_) | CoreError::Domain(_) | CoreError::Dimension { .. } | CoreError::EmptyInput(_) => {
            PyValueError::new_err(e.to_string())
        }
        other => MgkError::new_err(other.to_string()),
    }
}

fn tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(py_err)
}

fn tensors(list: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<Tensor>> {
    list.into_iter().map(tensor).collect()
}

fn json<T: serde::Serialize>(value: &T) -> PyResult<String> {
    serde_json::to_string(value).map_err(|e| MgkError::new_err(e.to_string()))
}

/// Parses a snake_case enum name such as `"shared_shifted"`.
fn named<T: DeserializeOwned>(what: &str, name: &str) -> PyResult<T> {
    serde_json::from_value(serde_json::Value::String(name.to_owned()))
        .map_err(|_| PyValueError::new_err(format!("unknown {what} {name:?}")))
}

/// One head's result: `output`, `scores` (None for linearized variants) and
/// `responsibilities` (soft mixtures only).
#[pyclass(name = "AttentionOutput", frozen, get_all)]
struct PyAttentionOutput {
    output: Vec<Vec<f64>>,
    scores: Option<Vec<Vec<f64>>>,
    responsibilities: Option<Vec<Vec<f64>>>,
}

impl From<AttentionOutput> for PyAttentionOutput {
    fn from(o: AttentionOutput) -> Self {
        Self {
            output: o.output.to_rows(),
            scores: o.scores.map(|s| s.to_rows()),
            responsibilities: o.responsibilities.map(|r| r.to_rows()),
        }
    }
}

#[pyclass(name = "AttentionConfig", frozen)]
struct PyAttentionConfig {
    inner: attn::AttentionConfig,
}

#[pymethods]
impl PyAttentionConfig {
    #[new]
    #[pyo3(signature = (variant, heads, head_dim, input_dim, *, components=None, kernel="gaussian_distance",
                        estep="soft_learned_prior", key_mode="independent_projections", causal=false, sigma2=None))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        variant: &str,
        heads: usize,
        head_dim: usize,
        input_dim: usize,
        components: Option<usize>,
        kernel: &str,
        estep: &str,
        key_mode: &str,
        causal: bool,
        sigma2: Option<Vec<f64>>,
    ) -> PyResult<Self> {
        let mut c = attn::AttentionConfig::new(named("variant", variant)?, heads, head_dim, input_dim);
        if let Some(m) = components {
            c = c.with_components(m);
        }
        c = c
            .with_kernel(named("kernel", kernel)?)
            .with_estep(named("estep", estep)?)
            .with_key_mode(named("key_mode", key_mode)?)
            .with_causal(causal);
        if let Some(s) = sigma2 {
            c = c.with_sigma2(s);
        }
        c.validate().map_err(py_err)?;
        Ok(Self { inner: c })
    }

    #[getter]
    fn components(&self) -> usize {
        self.inner.components
    }

    #[getter]
    fn sigma2(&self) -> Vec<f64> {
        self.inner.sigma2.clone()
    }

    fn to_json(&self) -> PyResult<String> {
        json(&self.inner)
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

/// Multi-head attention layer with randomly initialized parameters.
#[pyclass(name = "MultiHeadAttention", frozen)]
struct PyMultiHead {
    config: attn::AttentionConfig,
    params: MultiHeadParams,
}

#[pymethods]
impl PyMultiHead {
    #[new]
    fn new(config: &PyAttentionConfig, seed: u64) -> PyResult<Self> {
        let mut rng = mgk_core::rng::SplitMix64::new(seed);
        let params = MultiHeadParams::init(&config.inner, &mut rng).map_err(py_err)?;
        Ok(Self {
            config: config.inner.clone(),
            params,
        })
    }

    /// Returns `(output, heads)` for an `N×D_x` input.
    fn forward(&self, x: Vec<Vec<f64>>) -> PyResult<(Vec<Vec<f64>>, Vec<PyAttentionOutput>)> {
        let out = attn::multi_head(&tensor(x)?, &self.params, &self.config).map_err(py_err)?;
        Ok((out.output.to_rows(), out.heads.into_iter().map(Into::into).collect()))
    }
}

#[pyfunction]
#[pyo3(signature = (q, k, v, causal=false))]
fn softmax_attention(q: Vec<Vec<f64>>, k: Vec<Vec<f64>>, v: Vec<Vec<f64>>, causal: bool) -> PyResult<PyAttentionOutput> {
    attn::softmax_attention(&tensor(q)?, &tensor(k)?, &tensor(v)?, causal)
        .map(Into::into)
        .map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (q, k, v, sigma2, causal=false))]
fn gaussian_attention(
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    sigma2: f64,
    causal: bool,
) -> PyResult<PyAttentionOutput> {
    attn::gaussian_attention(&tensor(q)?, &tensor(k)?, &tensor(v)?, sigma2, causal)
        .map(Into::into)
        .map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (q, keys, v, pi, sigma2, estep="soft_learned_prior", kernel="gaussian_distance", causal=false))]
#[allow(clippy::too_many_arguments)]
fn mgk_attention(
    q: Vec<Vec<f64>>,
    keys: Vec<Vec<Vec<f64>>>,
    v: Vec<Vec<f64>>,
    pi: Vec<f64>,
    sigma2: Vec<f64>,
    estep: &str,
    kernel: &str,
    causal: bool,
) -> PyResult<PyAttentionOutput> {
    attn::mgk_attention(
        &tensor(q)?,
        &tensors(keys)?,
        &tensor(v)?,
        &pi,
        &sigma2,
        named("estep", estep)?,
        named("kernel", kernel)?,
        causal,
    )
    .map(Into::into)
    .map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (q, k, v, causal=false))]
fn linear_attention(q: Vec<Vec<f64>>, k: Vec<Vec<f64>>, v: Vec<Vec<f64>>, causal: bool) -> PyResult<PyAttentionOutput> {
    attn::linear_attention(&tensor(q)?, &tensor(k)?, &tensor(v)?, causal)
        .map(Into::into)
        .map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (q, keys, v, pi, causal=false))]
fn mlk_attention(
    q: Vec<Vec<f64>>,
    keys: Vec<Vec<Vec<f64>>>,
    v: Vec<Vec<f64>>,
    pi: Vec<f64>,
    causal: bool,
) -> PyResult<PyAttentionOutput> {
    attn::mlk_attention(&tensor(q)?, &tensors(keys)?, &tensor(v)?, &pi, causal)
        .map(Into::into)
        .map_err(py_err)
}

#[pyfunction]
fn soft_responsibilities(
    q: Vec<Vec<f64>>,
    keys: Vec<Vec<Vec<f64>>>,
    pi: Vec<f64>,
    sigma2: Vec<f64>,
) -> PyResult<Vec<Vec<f64>>> {
    let r = em::soft_responsibilities(&tensor(q)?, &tensors(keys)?, &pi, &sigma2).map_err(py_err)?;
    Ok(r.gamma.to_rows())
}

/// Returns `(pi, nll_trace)`; the trace starts with the initial NLL.
#[pyfunction]
fn em_prior_iterations(
    q: Vec<Vec<f64>>,
    keys: Vec<Vec<Vec<f64>>>,
    pi: Vec<f64>,
    sigma2: Vec<f64>,
    iterations: usize,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let t = em::em_prior_iterations(&tensor(q)?, &tensors(keys)?, &pi, &sigma2, iterations).map_err(py_err)?;
    Ok((t.pi, t.nll))
}

/// Returns `(means, pi, nll)`.
#[pyfunction]
#[pyo3(signature = (q, sigma2, iterations=200, seed=0))]
fn fit_shared_mixture(
    q: Vec<Vec<f64>>,
    sigma2: Vec<f64>,
    iterations: usize,
    seed: u64,
) -> PyResult<(Vec<Vec<f64>>, Vec<f64>, f64)> {
    let f = em::fit_shared_mixture(&tensor(q)?, &sigma2, iterations, seed).map_err(py_err)?;
    Ok((f.means, f.pi, f.nll))
}

#[pyfunction]
fn softmax_flops(n: u64, h: u64, d: u64, dx: u64) -> PyResult<u64> {
    complexity::softmax_flops(n, h, d, dx).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (n, h, d, dx, m=2))]
fn mgk_flops(n: u64, h: u64, d: u64, dx: u64, m: u64) -> PyResult<u64> {
    complexity::mgk_flops(n, h, d, dx, m).map_err(py_err)
}

#[pyfunction]
fn softmax_params(h: u64, d: u64, dx: u64) -> PyResult<u64> {
    complexity::softmax_params(h, d, dx).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (h, d, dx, m=2))]
fn mgk_params(h: u64, d: u64, dx: u64, m: u64) -> PyResult<u64> {
    complexity::mgk_params_general(h, d, dx, m).map_err(py_err)
}

/// The `H/M`-head mixture layer whose cost `mgk_flops(n, h, d, dx, m)` describes.
#[pyfunction]
#[pyo3(signature = (h, d, dx, m=2))]
fn mgk_counting_config(h: usize, d: usize, dx: usize, m: usize) -> PyResult<PyAttentionConfig> {
    Ok(PyAttentionConfig {
        inner: complexity::mgk_counting_config(h, d, dx, m).map_err(py_err)?,
    })
}

/// Tape-instrumented FLOP count of one forward pass of `config` at length `n`.
#[pyfunction]
fn instrumented_flops(config: &PyAttentionConfig, n: usize) -> PyResult<u64> {
    complexity::instrumented_count(&config.inner, n).map_err(py_err)
}

#[pyfunction]
fn singular_values(a: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    diagnostics::singular_values(&tensor(a)?).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (a, threshold=diagnostics::DEFAULT_RANK_THRESHOLD))]
fn matrix_rank(a: Vec<Vec<f64>>, threshold: f64) -> PyResult<usize> {
    diagnostics::matrix_rank(&tensor(a)?, threshold).map_err(py_err)
}

#[pyfunction]
fn gradient_suite(seed: u64) -> PyResult<String> {
    json(&gradcheck::gradient_suite(seed).map_err(py_err)?)
}

#[pyfunction]
fn equivalence_suite(seed: u64) -> PyResult<String> {
    json(&equivalence::equivalence_suite(seed).map_err(py_err)?)
}

/// A trained classifier plus its JSON training report.
#[pyclass(name = "TrainedModel", frozen)]
struct PyTrainedModel {
    model: training::Model,
    task: TaskSpec,
    #[pyo3(get)]
    report: String,
}

#[pymethods]
impl PyTrainedModel {
    fn logits(&self, tokens: Vec<usize>) -> PyResult<Vec<f64>> {
        self.model.logits(&tokens).map_err(py_err)
    }

    /// Per-head rank samples on the test split, as JSON.
    #[pyo3(signature = (count=diagnostics::DEFAULT_SAMPLE_COUNT, threshold=diagnostics::DEFAULT_RANK_THRESHOLD, seed=0))]
    fn rank_distribution(&self, count: usize, threshold: f64, seed: u64) -> PyResult<String> {
        let data = training::generate_task(&self.task).map_err(py_err)?;
        json(&diagnostics::rank_distribution(&self.model, &data.test, count, threshold, seed).map_err(py_err)?)
    }
}

#[pyfunction]
#[pyo3(signature = (attention, *, model_dim, task="associative_recall", vocab=16, seq_len=64, train_size=2000,
                    test_size=500, layers=2, ff_hidden=128, epochs=30, batch_size=8, lr=1e-3, warmup_steps=0, seed=0))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    attention: &PyAttentionConfig,
    model_dim: usize,
    task: &str,
    vocab: usize,
    seq_len: usize,
    train_size: usize,
    test_size: usize,
    layers: usize,
    ff_hidden: usize,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    warmup_steps: usize,
    seed: u64,
) -> PyResult<PyTrainedModel> {
    let task = TaskSpec {
        kind: named::<TaskKind>("task", task)?,
        vocab,
        seq_len,
        train_size,
        test_size,
        seed,
    };
    let mut spec = ModelSpec::new(
        attention.inner.clone(),
        model_dim,
        task.token_count(),
        task.seq_len,
        task.classes(),
    );
    spec.layers = layers;
    spec.ff_hidden = ff_hidden;
    let config = TrainConfig {
        epochs,
        batch_size,
        optimizer: OptimizerSpec {
            lr,
            warmup_steps,
            ..OptimizerSpec::default()
        },
        seed,
    };
    let outcome = py.detach(|| training::train(&spec, &task, &config)).map_err(py_err)?;
    Ok(PyTrainedModel {
        report: json(&outcome.report)?,
        model: outcome.model,
        task,
    })
}

#[pymodule]
fn mgk(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("MgkError", m.py().get_type::<MgkError>())?;
    m.add_class::<PyAttentionConfig>()?;
    m.add_class::<PyAttentionOutput>()?;
    m.add_class::<PyMultiHead>()?;
    m.add_class::<PyTrainedModel>()?;
    m.add_function(wrap_pyfunction!(softmax_attention, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_attention, m)?)?;
    m.add_function(wrap_pyfunction!(mgk_attention, m)?)?;
    m.add_function(wrap_pyfunction!(linear_attention, m)?)?;
    m.add_function(wrap_pyfunction!(mlk_attention, m)?)?;
    m.add_function(wrap_pyfunction!(soft_responsibilities, m)?)?;
    m.add_function(wrap_pyfunction!(em_prior_iterations, m)?)?;
    m.add_function(wrap_pyfunction!(fit_shared_mixture, m)?)?;
    m.add_function(wrap_pyfunction!(softmax_flops, m)?)?;
    m.add_function(wrap_pyfunction!(mgk_flops, m)?)?;
    m.add_function(wrap_pyfunction!(softmax_params, m)?)?;
    m.add_function(wrap_pyfunction!(mgk_params, m)?)?;
    m.add_function(wrap_pyfunction!(mgk_counting_config, m)?)?;
    m.add_function(wrap_pyfunction!(instrumented_flops, m)?)?;
    m.add_function(wrap_pyfunction!(singular_values, m)?)?;
    m.add_function(wrap_pyfunction!(matrix_rank, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_suite, m)?)?;
    m.add_function(wrap_pyfunction!(equivalence_suite, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
