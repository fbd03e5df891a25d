//! Writes the seed corpora for the fuzz targets.
//!
//! Usage: `cargo run -p credassign --example fuzz_seeds -- fuzz/corpus`

use std::fs;
use std::path::{Path, PathBuf};

use credassign::analysis::write_activation_dump;
use credassign::container::Container;
use credassign::data::{synthetic, Split};
use credassign::network::{Architecture, InitConfig, LayerSpec, Network};
use credassign::optim::{Adam, AdamConfig};
use credassign::rng::Rng;
use credassign::{Checkpoint, FeedbackRule, Tensor, TrainConfig};

fn tiny_arch() -> Architecture {
    Architecture {
        input: [3, 24, 24],
        layers: vec![
            LayerSpec::Conv { out_channels: 2, kernel: 5, relu: true },
            LayerSpec::MaxPool,
            LayerSpec::Dense { out_features: 3, relu: true },
            LayerSpec::Dense { out_features: 10, relu: false },
        ],
    }
}

fn put(dir: &Path, name: &str, bytes: &[u8]) {
    fs::create_dir_all(dir).unwrap();
    fs::write(dir.join(name), bytes).unwrap();
}

fn main() {
    let root = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "fuzz/corpus".into()));

    let dir = root.join("cifar_records");
    let two = synthetic::records(2, 1);
    put(&dir, "two_records", &two);
    put(&dir, "one_record", &two[..3073]);
    put(&dir, "truncated", &two[..4000]);

    let dir = root.join("tensor_bytes");
    put(&dir, "scalar", &Tensor::new(vec![], vec![1.5f32]).unwrap().to_bytes());
    put(&dir, "matrix", &Tensor::from_fn(&[2, 3], |i| i as f32 - 2.5).to_bytes());
    put(&dir, "rank4", &Tensor::from_fn(&[1, 2, 2, 2], |i| (i as f32).sin()).to_bytes());

    let dir = root.join("container");
    let mut c = Container::new("logits", serde_json::json!({ "split": "test", "correct": [true, false] }));
    c.push("logits", Tensor::from_fn(&[2, 3], |i| i as f32 * 0.25));
    put(&dir, "small", &c.to_bytes());
    put(&dir, "empty", &Container::new("empty", serde_json::Value::Null).to_bytes());
    let init = InitConfig { seed: 3, sigma: Some(0.05) };
    let network = Network::<f32>::new(tiny_arch(), FeedbackRule::FaToeplitz, &init).unwrap();
    let adam = Adam::new(AdamConfig::new(1e-3, 1e-4), network.params());
    let ck = Checkpoint {
        config: TrainConfig { sigma: Some(0.05), ..TrainConfig::new(FeedbackRule::FaToeplitz, 1e-3) },
        network: network.clone(),
        adam,
        epoch: 0,
        val_acc: None,
        rng: Rng::new(3).state(),
    };
    put(&dir, "checkpoint", &ck.to_bytes());

    let dir = root.join("activation_dump");
    fs::create_dir_all(&dir).unwrap();
    let ds = synthetic::dataset(3, 4, Split::Test);
    write_activation_dump(&network, &ds, "tiny", &dir.join("three_samples"), 2).unwrap();
}
