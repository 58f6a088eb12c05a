//! Python module `defend`: thin wrappers over the command implementations.
//! Structured results come back as JSON strings.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use defend_cli::{AttnArgs, Common, EvalArgs, GenerateArgs, Task, TrainArgs};
use defend_core::Error;

fn to_py(e: Error) -> PyErr {
    let msg = format!("{e} (exit code {})", e.exit_code());
    match e.exit_code() {
        1 => PyValueError::new_err(msg),
        2 => PyIOError::new_err(msg),
        _ => PyRuntimeError::new_err(msg),
    }
}

fn common(out: PathBuf, seed: Option<u64>, preset: Option<String>, set: Vec<String>) -> Common {
    Common { out, seed, preset, set, config: None }
}

/// Errors of one annotation record given as a JSON string; empty when valid.
#[pyfunction]
fn validate_record(record_json: &str) -> PyResult<Vec<String>> {
    let v: serde_json::Value = serde_json::from_str(record_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(defend_core::data::validate_record(&v).err().unwrap_or_default())
}

#[pyfunction]
#[pyo3(signature = (out, classes=8, per_class=60, image_size=64, seed=None))]
fn generate_data(out: PathBuf, classes: usize, per_class: usize, image_size: usize, seed: Option<u64>) -> PyResult<usize> {
    let a = GenerateArgs {
        common: common(out, seed, None, Vec::new()),
        classes: Some(classes),
        per_class: Some(per_class),
        image_size: Some(image_size),
    };
    defend_cli::cmd_generate_data(&a).map(|o| o.samples).map_err(to_py)
}

/// Trains and returns the path of the final checkpoint.
#[pyfunction]
#[pyo3(signature = (data, out, preset="desk-smoke".to_string(), max_steps=None, seed=None, set=Vec::new()))]
fn train(py: Python<'_>, data: PathBuf, out: PathBuf, preset: String, max_steps: Option<usize>, seed: Option<u64>, set: Vec<String>) -> PyResult<String> {
    let a = TrainArgs { common: common(out, seed, Some(preset), set), data, resume: None, max_steps, quiet: true };
    py.detach(|| defend_cli::cmd_train(&a))
        .map(|o| o.final_checkpoint.display().to_string())
        .map_err(to_py)
}

/// Runs evaluation and returns metrics.json as a string.
#[pyfunction]
#[pyo3(signature = (data, checkpoint, out, task="all"))]
fn evaluate(py: Python<'_>, data: PathBuf, checkpoint: PathBuf, out: PathBuf, task: &str) -> PyResult<String> {
    let task = match task {
        "probe" => Task::Probe,
        "zeroshot" => Task::Zeroshot,
        "vqa" => Task::Vqa,
        "describe" => Task::Describe,
        "attention" => Task::Attention,
        "all" => Task::All,
        other => return Err(PyValueError::new_err(format!("unknown task {other:?}"))),
    };
    let a = EvalArgs { common: common(out, None, None, Vec::new()), data, checkpoint, task };
    py.detach(|| defend_cli::cmd_eval(&a)).map(|v| v.to_string()).map_err(to_py)
}

/// Writes attention overlays and returns their paths.
#[pyfunction]
fn attn_map(data: PathBuf, checkpoint: PathBuf, out: PathBuf, ids: Vec<String>) -> PyResult<Vec<String>> {
    let a = AttnArgs { common: common(out, None, None, Vec::new()), data, checkpoint, ids };
    defend_cli::cmd_attn_map(&a)
        .map(|ps| ps.iter().map(|p| p.display().to_string()).collect())
        .map_err(to_py)
}

/// Header of a checkpoint file as a JSON string.
#[pyfunction]
fn checkpoint_header(path: PathBuf) -> PyResult<String> {
    let h = defend_core::checkpoint::read_header(&path).map_err(to_py)?;
    serde_json::to_string(&h).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pymodule]
fn defend(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(validate_record, m)?)?;
    m.add_function(wrap_pyfunction!(generate_data, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(attn_map, m)?)?;
    m.add_function(wrap_pyfunction!(checkpoint_header, m)?)?;
    Ok(())
}
