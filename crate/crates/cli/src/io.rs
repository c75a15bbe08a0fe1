//! Whole-file atomic writes, JSON reports and model checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use primal_attention::model::{Model, ModelConfig, ModelShape};
use primal_attention::optim::OptimizerState;
use primal_attention::task::TaskSpec;
use primal_attention::Matrix;

use crate::config::SCHEMA;
use crate::error::CliError;

pub fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

/// Writes `contents` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    let name = path
        .file_name()
        .ok_or_else(|| CliError::Usage(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, contents).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

/// Writes `value` as pretty JSON with `"schema": 1` as its first key.
pub fn write_report(path: &Path, value: serde_json::Value) -> Result<(), CliError> {
    let mut doc = serde_json::Map::new();
    doc.insert("schema".into(), SCHEMA.into());
    match value {
        serde_json::Value::Object(fields) => doc.extend(fields),
        other => {
            doc.insert("report".into(), other);
        }
    }
    let mut text = serde_json::to_string_pretty(&serde_json::Value::Object(doc)).expect("reports serialize");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub shape: [usize; 2],
    pub file: String,
}

/// `manifest.json` of a checkpoint directory. Tensor names are prefixed by
/// their role: `param/`, `adam_m/` or `adam_v/`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema: u32,
    pub step: u64,
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub tensors: BTreeMap<String, TensorEntry>,
}

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub task: TaskSpec,
    pub optimizer: OptimizerState,
}

fn tensor_file(key: &str) -> String {
    format!("{}.csv", key.replace('/', "."))
}

pub fn save_checkpoint(dir: &Path, model: &Model, task: &TaskSpec, state: &OptimizerState) -> Result<(), CliError> {
    create_dir(dir)?;
    let mut tensors = BTreeMap::new();
    let groups = [("param", &model.params), ("adam_m", &state.m), ("adam_v", &state.v)];
    for (role, map) in groups {
        for (name, m) in map {
            let key = format!("{role}/{name}");
            let file = tensor_file(&key);
            write_atomic(&dir.join(&file), m.to_csv().as_bytes())?;
            tensors.insert(
                key,
                TensorEntry {
                    shape: [m.rows(), m.cols()],
                    file,
                },
            );
        }
    }
    let manifest = Manifest {
        schema: SCHEMA,
        step: state.step,
        model: model.config.clone(),
        task: task.clone(),
        tensors,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifests serialize");
    write_atomic(&dir.join(MANIFEST), text.as_bytes())
}

fn read_tensor(dir: &Path, entry: &TensorEntry) -> Result<Matrix, CliError> {
    let path: PathBuf = dir.join(&entry.file);
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let m = Matrix::from_csv(&text)?;
    if [m.rows(), m.cols()] != entry.shape {
        return Err(CliError::Usage(format!(
            "{}: shape {:?} does not match the manifest's {:?}",
            path.display(),
            m.shape(),
            entry.shape
        )));
    }
    Ok(m)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint, CliError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    if manifest.schema != SCHEMA {
        return Err(CliError::Usage(format!(
            "{}: unsupported schema {}",
            path.display(),
            manifest.schema
        )));
    }
    let mut model = Model::new(manifest.model.clone(), ModelShape::for_task(&manifest.task))?;
    let mut state = OptimizerState {
        step: manifest.step,
        ..OptimizerState::default()
    };
    let mut loaded = 0;
    for (key, entry) in &manifest.tensors {
        let m = read_tensor(dir, entry)?;
        match key.split_once('/') {
            Some(("param", name)) => {
                model.set_param(name, m)?;
                loaded += 1;
            }
            Some(("adam_m", name)) => {
                state.m.insert(name.into(), m);
            }
            Some(("adam_v", name)) => {
                state.v.insert(name.into(), m);
            }
            _ => return Err(CliError::Usage(format!("{}: unknown tensor {key}", path.display()))),
        }
    }
    if loaded != model.params.len() {
        return Err(CliError::Usage(format!(
            "{}: {loaded} of {} model tensors present",
            path.display(),
            model.params.len()
        )));
    }
    Ok(Checkpoint {
        model,
        task: manifest.task,
        optimizer: state,
    })
}
