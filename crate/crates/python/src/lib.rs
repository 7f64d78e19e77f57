//! Python bindings. Records cross the boundary as plain dicts and lists with
//! the same field names as the JSONL files.

use std::fmt::Display;
use std::str::FromStr;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

use rollout_eval::annotation::{self, AnnotationPacket, Rating, RatingValue, StudyGrouping};
use rollout_eval::bridge::{self, Prediction};
use rollout_eval::describe::Describer;
use rollout_eval::ingest::Clip;
use rollout_eval::metrics::{self, NgramMode};
use rollout_eval::prompt::{self, PromptParams};
use rollout_eval::qa::{AnswerSpaces, QaBuilder, QaItem, QaMode};
use rollout_eval::sampler::{self, FrameSamplingPolicy, MixConfig, SamplingKind};
use rollout_eval::synthetic::{self, SyntheticConfig};

fn value_err(e: impl Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse<T: FromStr>(s: &str) -> PyResult<T>
where
    T::Err: Display,
{
    s.parse().map_err(value_err)
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(value_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(value_err)
}

fn ngram_mode(mode: &str) -> PyResult<NgramMode> {
    match mode {
        "set" => Ok(NgramMode::Set),
        "clipped" => Ok(NgramMode::Clipped),
        other => Err(value_err(format!("unknown n-gram mode `{other}` (set | clipped)"))),
    }
}

#[pyfunction]
fn exact_match(pred: &str, reference: &str) -> u8 {
    metrics::exact_match(pred, reference)
}

#[pyfunction]
#[pyo3(signature = (pred, reference, n=1, mode="set"))]
fn rouge_f1(pred: &str, reference: &str, n: usize, mode: &str) -> PyResult<f64> {
    metrics::rouge_f1(pred, reference, n, ngram_mode(mode)?).map_err(value_err)
}

/// Frame indices chosen from a clip of `length` frames.
#[pyfunction]
#[pyo3(signature = (length, n, policy="uniform"))]
fn sample_frames(length: usize, n: usize, policy: &str) -> PyResult<Vec<usize>> {
    let policy = match parse::<SamplingKind>(policy)? {
        SamplingKind::First => FrameSamplingPolicy::first(n),
        SamplingKind::Uniform => FrameSamplingPolicy::uniform(n),
    };
    sampler::sample_frames(length, policy).map_err(value_err)
}

/// Per-stratum counts keyed `"<task>-<format>"`. `mix` is `"optimized"`,
/// `"uniform"` or a dict with the mix fields.
#[pyfunction]
#[pyo3(signature = (budget, mix=None))]
fn target_counts(budget: usize, mix: Option<&Bound<'_, PyAny>>) -> PyResult<Vec<(String, usize)>> {
    let mix = match mix {
        None => MixConfig::optimized(),
        Some(m) => match m.extract::<String>() {
            Ok(name) if name == "optimized" => MixConfig::optimized(),
            Ok(name) if name == "uniform" => MixConfig::uniform(),
            Ok(name) => return Err(value_err(format!("unknown mix `{name}`"))),
            Err(_) => {
                let mix: MixConfig = from_py(m)?;
                mix.validate().map_err(value_err)?;
                mix
            }
        },
    };
    Ok(sampler::target_counts(&mix, budget)
        .into_iter()
        .map(|c| (format!("{}-{}", c.task, c.format), c.count))
        .collect())
}

/// The assembled sequence as a dict, plus `length` and `mask_span`.
#[pyfunction]
#[pyo3(signature = (n_frames, question, answer=None, patches_per_frame=None, pad_to=None))]
fn assemble_prompt<'py>(
    py: Python<'py>,
    n_frames: usize,
    question: &str,
    answer: Option<&str>,
    patches_per_frame: Option<usize>,
    pad_to: Option<usize>,
) -> PyResult<Bound<'py, PyAny>> {
    let mut params = PromptParams::new(n_frames, question, answer);
    if let Some(p) = patches_per_frame {
        params.patches_per_frame = p;
    }
    params.pad_to = pad_to;
    let seq = prompt::assemble(&params).map_err(value_err)?;
    let span = prompt::mask_span(&seq).map_err(value_err)?;
    let out = to_py(py, &seq)?;
    out.set_item("length", seq.len())?;
    out.set_item("mask_span", span)?;
    Ok(out)
}

#[pyfunction]
#[pyo3(signature = (sigma, n, confidence=annotation::DEFAULT_CONFIDENCE))]
fn ci_width(sigma: f64, n: usize, confidence: f64) -> PyResult<f64> {
    annotation::ci_width(sigma, n, confidence).map_err(value_err)
}

/// Four-category kappa over rating names (`correct`, `partial`, ...).
#[pyfunction]
fn cohens_kappa(r1: Vec<String>, r2: Vec<String>) -> PyResult<f64> {
    let conv = |v: Vec<String>| v.iter().map(|s| parse::<RatingValue>(s)).collect::<PyResult<Vec<_>>>();
    annotation::cohens_kappa(&conv(r1)?, &conv(r2)?).map_err(value_err)
}

/// Seeded in-memory clips with known labels.
#[pyfunction]
#[pyo3(signature = (n, seed=0))]
fn synthetic_clips<'py>(py: Python<'py>, n: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let cfg = SyntheticConfig { seed, ..SyntheticConfig::default() };
    let (clips, _) = synthetic::clips(n, &cfg);
    to_py(py, &clips)
}

/// Descriptions for the labelable clips; unlabelable ones are dropped.
#[pyfunction]
fn describe<'py>(py: Python<'py>, clips: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyAny>> {
    let clips: Vec<Clip> = from_py(clips)?;
    let (descs, _) = Describer::default().describe_all(&clips).map_err(value_err)?;
    to_py(py, &descs)
}

/// QA items for clips under the default templates and vocabularies.
#[pyfunction]
#[pyo3(signature = (clips, mode="sampled6", seed=0))]
fn build_dataset<'py>(py: Python<'py>, clips: &Bound<'py, PyAny>, mode: &str, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let clips: Vec<Clip> = from_py(clips)?;
    let mode: QaMode = parse(mode)?;
    let (descs, _) = Describer::default().describe_all(&clips).map_err(value_err)?;
    let items = QaBuilder::default()
        .build_dataset(&descs, &AnswerSpaces::default(), mode, seed)
        .map_err(value_err)?;
    to_py(py, &items)
}

#[pyfunction]
#[pyo3(signature = (predictions, items, mode="set"))]
fn score<'py>(
    py: Python<'py>,
    predictions: &Bound<'py, PyAny>,
    items: &Bound<'py, PyAny>,
    mode: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let preds: Vec<Prediction> = from_py(predictions)?;
    let items: Vec<QaItem> = from_py(items)?;
    let scores = metrics::score(&preds, &items, ngram_mode(mode)?).map_err(value_err)?;
    to_py(py, &scores)
}

#[pyfunction]
#[pyo3(signature = (packets, ratings, group="model_env", sigma=annotation::DEFAULT_SIGMA, confidence=annotation::DEFAULT_CONFIDENCE))]
fn study_report<'py>(
    py: Python<'py>,
    packets: &Bound<'py, PyAny>,
    ratings: &Bound<'py, PyAny>,
    group: &str,
    sigma: f64,
    confidence: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let packets: Vec<AnnotationPacket> = from_py(packets)?;
    let ratings: Vec<Rating> = from_py(ratings)?;
    let group: StudyGrouping = parse(group)?;
    let reports = annotation::study_report(&packets, &ratings, group, sigma, confidence).map_err(value_err)?;
    to_py(py, &reports)
}

/// Ground-truth evaluator that corrupts a seeded fraction of answers.
#[pyclass]
struct MockOracle {
    inner: bridge::MockOracle,
}

#[pymethods]
impl MockOracle {
    #[new]
    #[pyo3(signature = (items, epsilon=0.0, seed=0))]
    fn new(items: &Bound<'_, PyAny>, epsilon: f64, seed: u64) -> PyResult<Self> {
        let items: Vec<QaItem> = from_py(items)?;
        let inner = bridge::MockOracle::new(items, bridge::MockOracleConfig { epsilon, seed }).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn model_tag(&self) -> String {
        self.inner.model_tag.clone()
    }

    fn answer(&self, item: &Bound<'_, PyAny>) -> PyResult<String> {
        let item: QaItem = from_py(item)?;
        Ok(self.inner.mock_answer(&item))
    }
}

#[pymodule]
fn rollout_eval_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(exact_match, m)?)?;
    m.add_function(wrap_pyfunction!(rouge_f1, m)?)?;
    m.add_function(wrap_pyfunction!(sample_frames, m)?)?;
    m.add_function(wrap_pyfunction!(target_counts, m)?)?;
    m.add_function(wrap_pyfunction!(assemble_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(ci_width, m)?)?;
    m.add_function(wrap_pyfunction!(cohens_kappa, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_clips, m)?)?;
    m.add_function(wrap_pyfunction!(describe, m)?)?;
    m.add_function(wrap_pyfunction!(build_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    m.add_function(wrap_pyfunction!(study_report, m)?)?;
    m.add_class::<MockOracle>()?;
    Ok(())
}
