//! Training snapshots stored in the tensor container format.
//!
//! Tensors are named `<layer>.weight`, `<layer>.bias`, `<layer>.feedback`
//! (where present) and `adam.m.<i>` / `adam.v.<i>` in parameter order. Every
//! scalar setting lives in the JSON header.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::feedback::FeedbackRule;
use crate::network::{Architecture, Network};
use crate::optim::{Adam, AdamConfig};
use crate::rng::RngState;
use crate::trainer::TrainConfig;

pub const CHECKPOINT_KIND: &str = "checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub network: Network<f32>,
    pub adam: Adam<f32>,
    /// Completed epochs.
    pub epoch: usize,
    pub val_acc: Option<f64>,
    /// Source of the per-epoch seeds.
    pub rng: RngState,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    version: u32,
    config: TrainConfig,
    architecture: Architecture,
    rule: FeedbackRule,
    adam: AdamConfig,
    step: u64,
    epoch: usize,
    val_acc: Option<f64>,
    rng: RngState,
}

impl Checkpoint {
    /// Optimizer steps taken.
    pub fn step(&self) -> u64 {
        self.adam.step_count()
    }

    pub fn to_container(&self) -> Container {
        let meta = Meta {
            version: VERSION,
            config: self.config.clone(),
            architecture: self.network.architecture().clone(),
            rule: self.network.rule(),
            adam: self.adam.config,
            step: self.adam.step_count(),
            epoch: self.epoch,
            val_acc: self.val_acc,
            rng: self.rng.clone(),
        };
        let mut c = Container::new(CHECKPOINT_KIND, serde_json::to_value(meta).expect("meta serializes"));
        for l in self.network.param_layers() {
            c.push(format!("{}.weight", l.name), l.weight.clone());
            c.push(format!("{}.bias", l.name), l.bias.clone());
            if let Some(b) = l.feedback() {
                c.push(format!("{}.feedback", l.name), b.clone());
            }
        }
        let (m, v) = self.adam.moments();
        for (i, t) in m.iter().enumerate() {
            c.push(format!("adam.m.{i}"), t.clone());
        }
        for (i, t) in v.iter().enumerate() {
            c.push(format!("adam.v.{i}"), t.clone());
        }
        c
    }

    pub fn from_container(mut c: Container) -> Result<Self> {
        if c.kind != CHECKPOINT_KIND {
            return Err(Error::Decode(format!("expected a checkpoint, found {:?}", c.kind)));
        }
        let meta: Meta = serde_json::from_value(c.meta.clone())
            .map_err(|e| Error::Decode(format!("checkpoint meta: {e}")))?;
        if meta.version != VERSION {
            return Err(Error::Decode(format!("unsupported checkpoint version {}", meta.version)));
        }
        // Checked before allocating so a hostile header cannot request huge tensors.
        let stored: usize = c.tensors.iter().map(|(_, t)| t.len()).sum();
        match meta.architecture.param_count() {
            Some(n) if n <= stored => {}
            _ => return Err(Error::Decode("architecture is larger than the stored tensors".into())),
        }
        let mut network = Network::<f32>::skeleton(meta.architecture, meta.rule)
            .map_err(|e| Error::Decode(e.to_string()))?;
        for layer in network.param_layers_mut() {
            for (slot, suffix) in [(&mut layer.weight, "weight"), (&mut layer.bias, "bias")] {
                let t = c.take(&format!("{}.{suffix}", layer.name))?;
                if t.shape() != slot.shape() {
                    return Err(Error::Decode(format!(
                        "{}.{suffix} has shape {:?}, expected {:?}",
                        layer.name,
                        t.shape(),
                        slot.shape()
                    )));
                }
                *slot = t;
            }
            if let Ok(b) = c.take(&format!("{}.feedback", layer.name)) {
                layer.replace_feedback(b).map_err(|e| Error::Decode(e.to_string()))?;
            }
        }
        let count = network.params().len();
        let mut m = Vec::with_capacity(count);
        let mut v = Vec::with_capacity(count);
        for i in 0..count {
            m.push(c.take(&format!("adam.m.{i}"))?);
            v.push(c.take(&format!("adam.v.{i}"))?);
        }
        if m.iter().zip(network.params()).any(|(a, p)| a.shape() != p.shape()) {
            return Err(Error::Decode("optimizer state does not match the parameters".into()));
        }
        let adam = Adam::from_parts(meta.adam, meta.step, m, v).map_err(|e| Error::Decode(e.to_string()))?;
        if let Some((name, _)) = c.tensors.first() {
            return Err(Error::Decode(format!("unexpected tensor {name:?}")));
        }
        Ok(Checkpoint {
            config: meta.config,
            network,
            adam,
            epoch: meta.epoch,
            val_acc: meta.val_acc,
            rng: meta.rng,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_container().to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(Container::from_bytes(bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path)?).map_err(|e| match e {
            Error::Decode(reason) => Error::format(path, reason),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic, Split, Splits};
    use crate::trainer::train;

    fn trained(rule: FeedbackRule) -> Checkpoint {
        let splits = Splits {
            train: synthetic::dataset(24, 1, Split::Train),
            val: synthetic::dataset(8, 2, Split::Val),
            test: synthetic::dataset(8, 3, Split::Test),
        };
        let cfg = TrainConfig {
            sigma: Some(0.05),
            epochs: 1,
            batch_size: 8,
            probe_every: 0,
            ..TrainConfig::new(rule, 1e-3)
        };
        train(&cfg, &splits).unwrap().last
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        for rule in FeedbackRule::ALL {
            let ck = trained(rule);
            let bytes = ck.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back, ck, "{rule}");
            assert_eq!(back.to_bytes(), bytes, "{rule}");
            assert_eq!(back.step(), 3);
        }
    }

    #[test]
    fn file_roundtrip_and_errors() {
        let ck = trained(FeedbackRule::FaRandom);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);

        let mut c = ck.to_container();
        c.tensors.retain(|(n, _)| n != "fc1.bias");
        assert!(matches!(Checkpoint::from_container(c), Err(Error::Decode(_))));

        let mut bytes = ck.to_bytes();
        bytes.truncate(bytes.len() - 4);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Format { .. })));
        assert!(matches!(Checkpoint::load(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
