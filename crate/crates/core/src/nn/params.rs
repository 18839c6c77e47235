use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Maps a flat scalar index to (tensor, offset).
    pub fn locate(&self, mut flat: usize) -> (ParamId, usize) {
        for (i, t) in self.tensors.iter().enumerate() {
            if flat < t.len() {
                return (ParamId(i), flat);
            }
            flat -= t.len();
        }
        panic!("flat parameter index out of range");
    }

    pub(crate) fn to_records(&self) -> Vec<TensorRecord> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(name, t)| TensorRecord {
                name: name.clone(),
                shape: [t.rows(), t.cols()],
                data: t.data().to_vec(),
            })
            .collect()
    }

    /// Overwrites every tensor from `records`; names and shapes must match.
    pub(crate) fn load_records(&mut self, records: &[TensorRecord]) -> Result<()> {
        if records.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.len(),
                records.len()
            )));
        }
        for rec in records {
            let id = self
                .id_of(&rec.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor `{}`", rec.name)))?;
            let t = self.get_mut(id);
            if [t.rows(), t.cols()] != rec.shape || rec.data.len() != t.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    rec.name,
                    rec.shape,
                    [t.rows(), t.cols()]
                )));
            }
            if rec.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Checkpoint(format!("tensor `{}` is not finite", rec.name)));
            }
            t.data_mut().copy_from_slice(&rec.data);
        }
        Ok(())
    }
}

/// Gradients aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads(pub Vec<Tensor>);

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self(
            store
                .ids()
                .map(|id| {
                    let t = store.get(id);
                    Tensor::zeros(t.rows(), t.cols())
                })
                .collect(),
        )
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.0 {
            t.scale_assign(s);
        }
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
    }

    pub fn flat(&self, flat: usize, store: &ParamStore) -> f64 {
        let (id, off) = store.locate(flat);
        self.0[id.0].data()[off]
    }
}

pub const CHECKPOINT_FORMAT: &str = "airtrack-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

/// On-disk checkpoint: a version header, the model kind, its
/// hyperparameters, and an ordered name → tensor list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: String,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn new(model: &str, config: serde_json::Value, params: &ParamStore) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            model: model.to_string(),
            config,
            tensors: params.to_records(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format `{}`", ckpt.format)));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {}",
                ckpt.version
            )));
        }
        Ok(ckpt)
    }

    pub fn expect_model(&self, model: &str) -> Result<()> {
        if self.model == model {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!(
                "checkpoint holds a `{}` model, expected `{model}`",
                self.model
            )))
        }
    }
}
