//! Grad-CAM style channel importance and top-activating exemplars.
//!
//! For image `i` with predicted class `y`, channel `c` of a conv layer scores
//! `|mean(d f_y / d A_c) * mean(A_c)|`, both means spatial, with `A_c` the
//! post-ReLU map. The gradient always flows through the exact backward pass,
//! whatever rule trained the weights.

use std::path::Path;

use serde::Serialize;

use crate::data::{subset_by_class, BatchIterator, Dataset, CHANNELS, CLASS_NAMES, SIDE};
use crate::error::{Error, Result};
use crate::feedback::FeedbackRule;
use crate::network::Network;
use crate::tensor::{Scalar, Tensor};
use crate::trainer::argmax;

/// `|mean(grad) * mean(act)|` over one channel's spatial map.
pub fn channel_alpha<T: Scalar>(grad: &[T], act: &[T]) -> f64 {
    let mean = |v: &[T]| v.iter().map(|x| x.as_f64()).sum::<f64>() / v.len() as f64;
    (mean(grad) * mean(act)).abs()
}

/// Per image, per channel scores of weight layer `layer` for one batch.
pub fn importance_scores<T: Scalar>(
    net: &mut Network<T>,
    images: &Tensor<T>,
    layer: usize,
) -> Result<Vec<Vec<f64>>> {
    let logits = net.forward(images)?;
    let n = logits.shape()[0];
    let classes = logits.shape()[1];
    let mut onehot = Tensor::<T>::zeros(&[n, classes]);
    for i in 0..n {
        let y = argmax(logits.row(i));
        onehot.data_mut()[i * classes + y] = T::one();
    }
    let back = net.backward(&onehot, FeedbackRule::Bp)?;
    let grad = back
        .output_grads
        .get(layer)
        .ok_or_else(|| Error::Config(format!("no weight layer {layer}")))?;
    let act = net.activation(layer)?;
    let channels = act.shape()[1];
    let per_channel = act.row_len() / channels;
    Ok((0..n)
        .map(|i| {
            let (g, a) = (grad.row(i), act.row(i));
            (0..channels)
                .map(|c| {
                    let span = c * per_channel..(c + 1) * per_channel;
                    channel_alpha(&g[span.clone()], &a[span])
                })
                .collect()
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChannelImportance {
    pub layer: String,
    pub class_id: usize,
    pub images: usize,
    /// Mean score per channel.
    pub scores: Vec<f64>,
    /// Channels by descending score, ties by channel index.
    pub ranking: Vec<usize>,
}

impl ChannelImportance {
    pub fn top(&self, k: usize) -> &[usize] {
        &self.ranking[..k.min(self.ranking.len())]
    }

    /// `rank,channel,score` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("rank,channel,score\n");
        for (r, &c) in self.ranking.iter().enumerate() {
            s.push_str(&format!("{},{c},{:.9e}\n", r + 1, self.scores[c]));
        }
        s
    }
}

fn conv_layer_index(net: &Network<f32>, layer: &str) -> Result<usize> {
    let i = net.layer_index(layer)?;
    if !net.layer(layer)?.is_conv() {
        return Err(Error::Config(format!("{layer} is not a conv layer")));
    }
    Ok(i)
}

/// Channel importance of conv layer `layer`, averaged over the images of `class_id` in `dataset`.
pub fn channel_importance(
    net: &Network<f32>,
    dataset: &Dataset,
    class_id: usize,
    layer: &str,
    batch_size: usize,
) -> Result<ChannelImportance> {
    let idx = conv_layer_index(net, layer)?;
    let subset = subset_by_class(dataset, class_id);
    if subset.is_empty() {
        let name = CLASS_NAMES.get(class_id).copied().unwrap_or("?");
        return Err(Error::EmptySubset(format!("no images of class {class_id} ({name})")));
    }
    let mut scratch = net.clone();
    let mut sums: Vec<f64> = Vec::new();
    for batch in BatchIterator::eval(&subset, batch_size) {
        for per_image in importance_scores(&mut scratch, &batch.images, idx)? {
            sums.resize(per_image.len(), 0.0);
            for (s, v) in sums.iter_mut().zip(per_image) {
                *s += v;
            }
        }
    }
    let images = subset.len();
    let scores: Vec<f64> = sums.iter().map(|s| s / images as f64).collect();
    let mut ranking: Vec<usize> = (0..scores.len()).collect();
    ranking.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(ChannelImportance { layer: layer.to_string(), class_id, images, scores, ranking })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Exemplar {
    pub index: usize,
    pub mean_activation: f64,
}

/// The `k` images of `dataset` with the highest spatial-mean activation of
/// `channel` in `layer`, descending, ties by index.
pub fn top_exemplars(
    net: &Network<f32>,
    dataset: &Dataset,
    layer: &str,
    channel: usize,
    k: usize,
    batch_size: usize,
) -> Result<Vec<Exemplar>> {
    if k > dataset.len() {
        return Err(Error::Config(format!("k = {k} exceeds {} images", dataset.len())));
    }
    let idx = net.layer_index(layer)?;
    let channels = net.layer(layer)?.out_shape()[0];
    if channel >= channels {
        return Err(Error::Config(format!("{layer} has {channels} channels, asked for {channel}")));
    }
    let mut scratch = net.clone();
    let mut all = Vec::with_capacity(dataset.len());
    for batch in BatchIterator::eval(dataset, batch_size) {
        scratch.forward(&batch.images)?;
        let act = scratch.activation(idx)?;
        let per_channel = act.row_len() / channels;
        for (j, &i) in batch.indices.iter().enumerate() {
            let map = &act.row(j)[channel * per_channel..(channel + 1) * per_channel];
            let mean = map.iter().map(|&v| v as f64).sum::<f64>() / per_channel as f64;
            all.push(Exemplar { index: i, mean_activation: mean });
        }
    }
    all.sort_by(|a, b| {
        b.mean_activation
            .total_cmp(&a.mean_activation)
            .then(a.index.cmp(&b.index))
    });
    all.truncate(k);
    Ok(all)
}

/// Binary PPM (P6) of the raw 32x32 images tiled row-major, 3 per row; empty
/// tiles stay black.
pub fn montage_ppm(dataset: &Dataset, indices: &[usize]) -> Vec<u8> {
    const COLS: usize = 3;
    let rows = indices.len().div_ceil(COLS).max(1);
    let (w, h) = (COLS * SIDE, rows * SIDE);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let header = out.len();
    out.resize(header + w * h * 3, 0);
    let plane = SIDE * SIDE;
    for (t, &i) in indices.iter().enumerate() {
        let raw = dataset.raw_image(i);
        let (ty, tx) = (t / COLS, t % COLS);
        for y in 0..SIDE {
            for x in 0..SIDE {
                let px = header + ((ty * SIDE + y) * w + tx * SIDE + x) * 3;
                for c in 0..CHANNELS {
                    out[px + c] = raw[c * plane + y * SIDE + x];
                }
            }
        }
    }
    out
}

pub fn write_montage(dataset: &Dataset, indices: &[usize], path: &Path) -> Result<()> {
    std::fs::write(path, montage_ppm(dataset, indices)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tests::tiny_dataset;
    use crate::data::{Split, IMAGE_BYTES};
    use crate::network::{Architecture, InitConfig, LayerSpec};

    /// Conv(1->1, 1x1) on a 1x2x2 input, then a 4->2 dense layer.
    fn micro_net(dense_row0: f64) -> Network<f64> {
        let arch = Architecture {
            input: [1, 2, 2],
            layers: vec![
                LayerSpec::Conv { out_channels: 1, kernel: 1, relu: true },
                LayerSpec::Dense { out_features: 2, relu: false },
            ],
        };
        let mut net = Network::<f64>::skeleton(arch, FeedbackRule::Bp).unwrap();
        {
            let mut layers = net.param_layers_mut();
            layers.next().unwrap().weight.data_mut()[0] = 1.0;
            layers.next().unwrap().weight.data_mut()[..4].fill(dense_row0);
        }
        net
    }

    #[test]
    fn micro_fixture_alpha_is_one() {
        // A = 2 everywhere, d f_0 / d A = 0.5 everywhere, class 0 predicted.
        let mut net = micro_net(0.5);
        let x = Tensor::<f64>::full(&[1, 1, 2, 2], 2.0);
        let s = importance_scores(&mut net, &x, 0).unwrap();
        assert_eq!(s, vec![vec![1.0]]);
        assert_eq!(channel_alpha(&[0.5f64; 4], &[2.0; 4]), 1.0);
    }

    #[test]
    fn zero_gradient_gives_zero_importance() {
        assert_eq!(channel_alpha(&[0.0f32; 9], &[3.0; 9]), 0.0);
        // Dense row 0 all zero and row 1 zero: both logits 0, class 0 wins the tie, gradient 0.
        let mut net = micro_net(0.0);
        let x = Tensor::<f64>::full(&[1, 1, 2, 2], 2.0);
        assert_eq!(importance_scores(&mut net, &x, 0).unwrap(), vec![vec![0.0]]);
    }

    fn cifar_net(rule: FeedbackRule) -> Network<f32> {
        Network::new(Architecture::cifar(), rule, &InitConfig { seed: 3, sigma: Some(0.05) }).unwrap()
    }

    #[test]
    fn importance_ignores_training_rule() {
        let ds = tiny_dataset(20, 1);
        let bp = cifar_net(FeedbackRule::Bp);
        let mut fa = cifar_net(FeedbackRule::FaToeplitz);
        assert_eq!(fa.params(), bp.params());
        fa.param_layers_mut().nth(1).unwrap().replace_feedback(Tensor::zeros(&[64, 64, 5, 5])).unwrap();
        let a = channel_importance(&bp, &ds, 2, "conv2", 7).unwrap();
        let b = channel_importance(&fa, &ds, 2, "conv2", 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.images, 2);
        assert!(a.scores.iter().all(|&s| s >= 0.0));
        assert!(a.ranking.windows(2).all(|w| a.scores[w[0]] >= a.scores[w[1]]));
        assert!(channel_importance(&bp, &ds, 2, "fc1", 7).is_err());
    }

    #[test]
    fn empty_class_is_an_error() {
        let ds = tiny_dataset(5, 1);
        let err = channel_importance(&cifar_net(FeedbackRule::Bp), &ds, 9, "conv1", 8).unwrap_err();
        assert!(matches!(err, Error::EmptySubset(_)));
    }

    #[test]
    fn white_image_tops_positive_filter() {
        let mut pixels = vec![0u8; 5 * IMAGE_BYTES];
        pixels[2 * IMAGE_BYTES..3 * IMAGE_BYTES].fill(255);
        let ds = Dataset::from_parts(pixels, vec![0; 5], Split::Test).unwrap();
        let mut net = cifar_net(FeedbackRule::Bp);
        let conv1 = net.param_layers_mut().next().unwrap();
        conv1.weight.data_mut()[..75].fill(0.01);
        let top = top_exemplars(&net, &ds, "conv1", 0, 3, 2).unwrap();
        assert_eq!(top.len(), 3);
        assert_eq!(top[0].index, 2);
        assert!(top.windows(2).all(|w| w[0].mean_activation >= w[1].mean_activation));
        // The four black images tie, so the index order decides.
        assert_eq!((top[1].index, top[2].index), (0, 1));
        assert!(top_exemplars(&net, &ds, "conv1", 0, 6, 2).is_err());
    }

    #[test]
    fn montage_layout() {
        let ds = tiny_dataset(4, 2);
        let ppm = montage_ppm(&ds, &[3, 1]);
        let header = b"P6\n96 32\n255\n";
        assert_eq!(&ppm[..header.len()], header);
        assert_eq!(ppm.len(), header.len() + 96 * 32 * 3);
        let body = &ppm[header.len()..];
        // Tile 1, pixel (0, 0) is image 1's first red/green/blue bytes.
        let raw = ds.raw_image(1);
        assert_eq!(&body[32 * 3..32 * 3 + 3], &[raw[0], raw[1024], raw[2048]]);
        assert!(body[64 * 3..96 * 3].iter().all(|&b| b == 0));
    }
}
