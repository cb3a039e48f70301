//! Model persistence: a self-describing JSON document with full
//! double-precision round-tripping.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::{GatingNetwork, Layer};
use crate::kernel::KernelParams;
use crate::model::MoeModel;
use crate::sparse_gp::SparseGpExpert;

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelDoc {
    format_version: u32,
    input_dim: usize,
    num_experts: usize,
    experts: Vec<ExpertDoc>,
    gate: GateDoc,
}

#[derive(Serialize, Deserialize)]
struct ExpertDoc {
    mean: f64,
    log_lengthscale: f64,
    log_signal_variance: f64,
    log_noise_variance: f64,
    /// Row-major `M x d`.
    pseudo_inputs: Vec<Vec<f64>>,
    pseudo_targets: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct GateDoc {
    input_dim: usize,
    layers: Vec<LayerDoc>,
}

#[derive(Serialize, Deserialize)]
struct LayerDoc {
    /// Row-major `d_j x d_{j-1}`.
    weights: Vec<Vec<f64>>,
    biases: Vec<f64>,
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

fn rows_to_matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        return Err(Error::invalid(format!("{what}: empty matrix")));
    }
    let cols = rows[0].len();
    if cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(Error::invalid(format!("{what}: ragged or empty rows")));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |r, c| rows[r][c]))
}

pub fn model_to_json(model: &MoeModel) -> String {
    let doc = ModelDoc {
        format_version: MODEL_FORMAT_VERSION,
        input_dim: model.input_dim(),
        num_experts: model.num_experts(),
        experts: model
            .experts
            .iter()
            .map(|e| ExpertDoc {
                mean: e.mean,
                log_lengthscale: e.kernel.log_lengthscale(),
                log_signal_variance: e.kernel.log_signal_variance(),
                log_noise_variance: e.log_noise_variance(),
                pseudo_inputs: matrix_to_rows(&e.pseudo_inputs),
                pseudo_targets: e.pseudo_targets.iter().copied().collect(),
            })
            .collect(),
        gate: GateDoc {
            input_dim: model.gate.input_dim,
            layers: model
                .gate
                .layers
                .iter()
                .map(|l| LayerDoc {
                    weights: matrix_to_rows(&l.weights),
                    biases: l.biases.iter().copied().collect(),
                })
                .collect(),
        },
    };
    serde_json::to_string_pretty(&doc).expect("model serialization cannot fail")
}

pub fn model_from_json(text: &str) -> Result<MoeModel> {
    let doc: ModelDoc = serde_json::from_str(text)
        .map_err(|e| Error::Parse { line: e.line(), message: e.to_string() })?;
    if doc.format_version != MODEL_FORMAT_VERSION {
        return Err(Error::invalid(format!(
            "unsupported model format version {}",
            doc.format_version
        )));
    }
    if doc.experts.len() != doc.num_experts {
        return Err(Error::invalid("expert count does not match the document header"));
    }
    let experts = doc
        .experts
        .iter()
        .map(|e| {
            let pseudo = rows_to_matrix(&e.pseudo_inputs, "pseudo_inputs")?;
            if pseudo.ncols() != doc.input_dim {
                return Err(Error::invalid("pseudo-input dimension mismatch"));
            }
            let mut expert = SparseGpExpert::new(
                e.mean,
                KernelParams::from_logs(e.log_lengthscale, e.log_signal_variance),
                1.0,
                pseudo,
                DVector::from_column_slice(&e.pseudo_targets),
            )?;
            expert.set_log_noise_variance(e.log_noise_variance);
            Ok(expert)
        })
        .collect::<Result<Vec<_>>>()?;
    let layers = doc
        .gate
        .layers
        .iter()
        .map(|l| {
            let weights = rows_to_matrix(&l.weights, "gate weights")?;
            if l.biases.len() != weights.nrows() {
                return Err(Error::invalid("gate bias length mismatch"));
            }
            Ok(Layer { weights, biases: DVector::from_column_slice(&l.biases) })
        })
        .collect::<Result<Vec<_>>>()?;
    if layers.is_empty() {
        return Err(Error::invalid("gate has no layers"));
    }
    for pair in layers.windows(2) {
        if pair[1].weights.ncols() != pair[0].weights.nrows() {
            return Err(Error::invalid("gate layer dimensions do not chain"));
        }
    }
    if layers[0].weights.ncols() != doc.input_dim {
        return Err(Error::invalid("gate input dimension mismatch"));
    }
    let gate = GatingNetwork { layers, input_dim: doc.input_dim };
    MoeModel::new(experts, gate)
}

pub fn save_model(model: &MoeModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, model_to_json(model))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<MoeModel> {
    let text = std::fs::read_to_string(path)?;
    model_from_json(&text)
}
