//! Model checkpoints as JSON.
//!
//! Parameters are stored as base64 of little-endian IEEE-754 doubles, row-major,
//! so a save/load cycle is bit-exact.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::network::{DenseLayer, Model};
use super::train::TrainConfig;
use crate::error::{Error, Result};
use crate::synthetic::NormStats;

pub const CHECKPOINT_FORMAT: &str = "obsimpact-model/1";
pub const PARAM_ENCODING: &str = "base64-f64-le";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub train_config: Option<TrainConfig>,
    /// Statistics of the dataset the model was trained on.
    pub norm_stats: Option<NormStats>,
}

#[derive(Serialize, Deserialize)]
struct LayerDoc {
    name: String,
    rows: usize,
    cols: usize,
    weight: String,
    bias: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    format: String,
    encoding: String,
    dims: Vec<usize>,
    layers: Vec<LayerDoc>,
    train_config: Option<TrainConfig>,
    norm_stats: Option<NormStats>,
}

fn encode(values: impl Iterator<Item = f64>) -> String {
    let bytes: Vec<u8> = values.flat_map(f64::to_le_bytes).collect();
    STANDARD.encode(bytes)
}

fn decode(text: &str, expected: usize, what: &str) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| Error::Checkpoint(format!("{what}: {e}")))?;
    if bytes.len() != expected * 8 {
        return Err(Error::Checkpoint(format!("{what}: expected {expected} values, got {} bytes", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

fn layer_doc(name: String, l: &DenseLayer) -> LayerDoc {
    LayerDoc {
        name,
        rows: l.d_in(),
        cols: l.d_out(),
        weight: encode(l.weight.iter().copied()),
        bias: encode(l.bias.iter().copied()),
    }
}

fn layer_from_doc(d: &LayerDoc) -> Result<DenseLayer> {
    let w = decode(&d.weight, d.rows * d.cols, &d.name)?;
    let b = decode(&d.bias, d.cols, &d.name)?;
    Ok(DenseLayer {
        weight: Array2::from_shape_vec((d.rows, d.cols), w).map_err(|e| Error::Checkpoint(e.to_string()))?,
        bias: Array1::from(b),
    })
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Checkpoint {
            model,
            train_config: None,
            norm_stats: None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let m = &self.model;
        let mut layers: Vec<LayerDoc> = m
            .gcn
            .iter()
            .enumerate()
            .map(|(i, l)| layer_doc(format!("gcn{i}"), l))
            .collect();
        layers.push(layer_doc("recon_head".into(), &m.recon_head));
        layers.push(layer_doc("regress_head".into(), &m.regress_head));
        let doc = CheckpointDoc {
            format: CHECKPOINT_FORMAT.into(),
            encoding: PARAM_ENCODING.into(),
            dims: m.dims(),
            layers,
            train_config: self.train_config.clone(),
            norm_stats: self.norm_stats,
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: CheckpointDoc = serde_json::from_str(text)?;
        if doc.format != CHECKPOINT_FORMAT || doc.encoding != PARAM_ENCODING {
            return Err(Error::Checkpoint(format!("unsupported format {} / {}", doc.format, doc.encoding)));
        }
        if doc.layers.len() < 3 {
            return Err(Error::Checkpoint("need at least one GCN layer and two heads".into()));
        }
        let mut layers = doc.layers.iter().map(layer_from_doc).collect::<Result<Vec<_>>>()?;
        let regress_head = layers.pop().expect("len >= 3");
        let recon_head = layers.pop().expect("len >= 3");
        let model = Model {
            gcn: layers,
            recon_head,
            regress_head,
        };
        model.check_shapes()?;
        if model.dims() != doc.dims {
            return Err(Error::Checkpoint(format!("dims {:?} disagree with layers {:?}", doc.dims, model.dims())));
        }
        Ok(Checkpoint {
            model,
            train_config: doc.train_config,
            norm_stats: doc.norm_stats,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::network::DEFAULT_HIDDEN;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut ck = Checkpoint::new(Model::new(&DEFAULT_HIDDEN, 11));
        ck.model.regress_head.bias[1] = 1.0 / 3.0;
        ck.train_config = Some(TrainConfig::default());
        ck.norm_stats = Some(NormStats::identity());
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.model.content_hash(), ck.model.content_hash());
    }

    #[test]
    fn truncated_weights_rejected() {
        let ck = Checkpoint::new(Model::new(&[4], 1));
        let mut v: serde_json::Value = serde_json::from_str(&ck.to_json().unwrap()).unwrap();
        v["layers"][0]["weight"] = serde_json::json!(STANDARD.encode([0u8; 16]));
        assert!(Checkpoint::from_json(&v.to_string()).is_err());
    }
}
