//! Copying pretrained weights into a freshly initialised model.

use serde::Serialize;
use thiserror::Error;

use super::checkpoint::Checkpoint;
use crate::models::{InputLayout, Model, ModelKind};
use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum TransferError {
    #[error("cannot transfer {source_kind} weights into a {target} model")]
    KindMismatch {
        source_kind: ModelKind,
        target: ModelKind,
    },
    #[error("tensor {name}: source shape {source_shape:?} cannot fill target shape {target:?}")]
    ShapeMismatch {
        name: String,
        source_shape: Vec<usize>,
        target: Vec<usize>,
    },
}

/// What happened to each target tensor.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TransferReport {
    /// Copied unchanged.
    pub copied: Vec<String>,
    /// Input weights grown to a wider embedding, new rows zero.
    pub extended: Vec<String>,
    /// Absent from the source; left at the target's initial values.
    pub skipped: Vec<String>,
}

impl TransferReport {
    pub fn all_copied(&self) -> bool {
        self.extended.is_empty() && self.skipped.is_empty()
    }
}

/// Embed `src` rows into a taller zero matrix following `layout`.
fn extend_rows(src: &Tensor, target_shape: &[usize], layout: InputLayout) -> Option<Tensor> {
    let (rows, cols) = (src.shape()[0], src.shape()[1]);
    let (t_rows, t_cols) = (target_shape[0], target_shape[1]);
    if cols != t_cols || layout.blocks == 0 || rows < layout.tail || t_rows < layout.tail {
        return None;
    }
    let (src_in, tgt_in) = (rows - layout.tail, t_rows - layout.tail);
    if src_in % layout.blocks != 0 || tgt_in % layout.blocks != 0 {
        return None;
    }
    let (d_src, d_tgt) = (src_in / layout.blocks, tgt_in / layout.blocks);
    if d_src > d_tgt {
        return None;
    }
    let mut out = Tensor::zeros(target_shape).ok()?;
    let copy = |out: &mut Tensor, from: usize, to: usize, n: usize| {
        let data = out.data_mut();
        data[to * cols..(to + n) * cols].copy_from_slice(&src.data()[from * cols..(from + n) * cols]);
    };
    for b in 0..layout.blocks {
        copy(&mut out, b * d_src, b * d_tgt, d_src);
    }
    copy(&mut out, layout.blocks * d_src, layout.blocks * d_tgt, layout.tail);
    Some(out)
}

/// Overwrite `target`'s parameters with those in `source`.
///
/// Same-shape tensors are copied. Input weight matrices may grow when the
/// target embedding is wider: each embedding block keeps its leading rows and
/// the new rows start at zero, so inputs padded with zeros score exactly as
/// before. Tensors missing from the source keep their initial values.
pub fn transfer_weights(
    source: &Checkpoint,
    mut target: Model,
) -> Result<(Model, TransferReport), TransferError> {
    if source.kind != target.kind() {
        return Err(TransferError::KindMismatch {
            source_kind: source.kind,
            target: target.kind(),
        });
    }
    let layouts = target.input_layouts();
    let mut report = TransferReport::default();
    let mut params = target.params().clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let tgt_shape = params.get(&name).expect("listed").shape().to_vec();
        let Some(src) = source.params.get(&name) else {
            report.skipped.push(name);
            continue;
        };
        let mismatch = || TransferError::ShapeMismatch {
            name: name.clone(),
            source_shape: src.shape().to_vec(),
            target: tgt_shape.clone(),
        };
        let value = if src.shape() == tgt_shape.as_slice() {
            report.copied.push(name.clone());
            src.clone()
        } else {
            let layout = layouts.get(&name).ok_or_else(mismatch)?;
            if src.rank() != 2 {
                return Err(mismatch());
            }
            let grown = extend_rows(src, &tgt_shape, *layout).ok_or_else(mismatch)?;
            report.extended.push(name.clone());
            grown
        };
        params.set(&name, value).expect("name exists");
    }
    target
        .set_params(params)
        .expect("transferred shapes match the target");
    Ok((target, report))
}
