//! Per-layer activation dumps on disk.
//!
//! One container per (model, dataset). Each weight layer is stored as
//! `[n, features]` with conv outputs flattened channel-major after the ReLU
//! and before pooling. The header meta carries the model id, split, layer
//! shapes, labels and the correctness bitmap used for subset selection.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::cka::ActivationSource;
use crate::container::{ContainerReader, ContainerWriter};
use crate::data::{BatchIterator, Dataset, Split};
use crate::error::{Error, Result};
use crate::network::Network;
use crate::tensor::Tensor;
use crate::trainer::evaluate;

pub const DUMP_KIND: &str = "activation_dump";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpMeta {
    pub model: String,
    pub split: Split,
    pub layers: Vec<String>,
    /// Per-sample output shape of each layer.
    pub shapes: Vec<Vec<usize>>,
    /// Position of each sample in its source file set.
    pub samples: Vec<usize>,
    pub labels: Vec<usize>,
    pub correct: Vec<bool>,
}

/// Evaluates `net` on `dataset` and writes every weight layer's activations to `path`.
pub fn write_activation_dump(
    net: &Network<f32>,
    dataset: &Dataset,
    model: &str,
    path: &Path,
    batch_size: usize,
) -> Result<DumpMeta> {
    let eval = evaluate(net, dataset, batch_size)?;
    let layers = net.layer_names();
    let shapes: Vec<Vec<usize>> = net.param_layers().map(|l| l.out_shape()).collect();
    let meta = DumpMeta {
        model: model.to_string(),
        split: dataset.split,
        layers: layers.clone(),
        shapes: shapes.clone(),
        samples: (0..dataset.len()).map(|i| dataset.origin(i)).collect(),
        labels: dataset.labels(),
        correct: eval.correct,
    };
    let n = dataset.len();
    let entries: Vec<(String, Vec<usize>)> = layers
        .iter()
        .zip(&shapes)
        .map(|(name, s)| (name.clone(), vec![n, s.iter().product()]))
        .collect();
    let json = serde_json::to_value(&meta).expect("meta serializes");
    let mut writer = ContainerWriter::create(path, DUMP_KIND, json, &entries)?;
    let mut scratch = net.clone();
    let mut row = 0;
    for batch in BatchIterator::eval(dataset, batch_size) {
        scratch.forward(&batch.images)?;
        for (i, name) in layers.iter().enumerate() {
            writer.write_rows(name, row, scratch.activation(i)?.data())?;
        }
        row += batch.indices.len();
    }
    writer.finish()?;
    Ok(meta)
}

/// Read side of an activation dump; rows are loaded on demand.
pub struct ActivationDump {
    reader: ContainerReader,
    meta: DumpMeta,
}

impl ActivationDump {
    pub fn open(path: &Path) -> Result<Self> {
        let reader = ContainerReader::open(path)?;
        let bad = |reason: String| Error::format(path, reason);
        let header = reader.header();
        if header.kind != DUMP_KIND {
            return Err(bad(format!("expected an activation dump, found {:?}", header.kind)));
        }
        let meta: DumpMeta = serde_json::from_value(header.meta.clone())
            .map_err(|e| bad(format!("dump meta: {e}")))?;
        let n = meta.samples.len();
        if meta.labels.len() != n || meta.correct.len() != n || meta.shapes.len() != meta.layers.len() {
            return Err(bad("dump meta lengths disagree".into()));
        }
        for (name, shape) in meta.layers.iter().zip(&meta.shapes) {
            let e = header.entry(name).map_err(|e| bad(e.to_string()))?;
            let features: usize = shape.iter().product();
            if e.shape != [n, features] {
                return Err(bad(format!("{name} stored as {:?}, meta says [{n}, {features}]", e.shape)));
            }
        }
        Ok(ActivationDump { reader, meta })
    }

    pub fn meta(&self) -> &DumpMeta {
        &self.meta
    }
}

impl ActivationSource for ActivationDump {
    fn layer_names(&self) -> Vec<String> {
        self.meta.layers.clone()
    }

    fn correct(&self) -> &[bool] {
        &self.meta.correct
    }

    fn sample_ids(&self) -> &[usize] {
        &self.meta.samples
    }

    fn rows(&mut self, layer: usize, rows: &[usize]) -> Result<Tensor<f32>> {
        let name = self
            .meta
            .layers
            .get(layer)
            .ok_or_else(|| Error::Config(format!("no layer {layer}")))?
            .clone();
        self.reader.read_rows(&name, rows)
    }
}
