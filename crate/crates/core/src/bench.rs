//! Backward-pass timing for the five rules on the CIFAR architecture.

use std::time::Instant;

use serde::Serialize;

use crate::error::Result;
use crate::feedback::FeedbackRule;
use crate::network::{Architecture, InitConfig, Network};
use crate::rng::Rng;
use crate::tensor::{randn, softmax_cross_entropy};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BackwardTiming {
    pub rule: FeedbackRule,
    pub batch_size: usize,
    /// Wall time of each repetition, seconds.
    pub samples: Vec<f64>,
    pub median: f64,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Times `reps` backward passes (after one warm-up) from a single cached
/// forward pass on a random batch. Only the backward call is timed.
pub fn time_backward(rule: FeedbackRule, batch_size: usize, reps: usize, seed: u64) -> Result<BackwardTiming> {
    let init = InitConfig { seed, sigma: Some(0.05) };
    let mut net = Network::<f32>::new(Architecture::cifar(), rule, &init)?;
    let mut rng = Rng::for_component(seed, "bench");
    let [c, h, w] = net.architecture().input;
    let x = randn(&mut rng, &[batch_size, c, h, w], 1.0)?;
    let labels: Vec<usize> = (0..batch_size).map(|i| i % net.num_classes()).collect();
    let logits = net.forward(&x)?;
    let (_, dlogits) = softmax_cross_entropy(&logits, &labels)?;
    net.backward(&dlogits, rule)?;
    let mut samples = Vec::with_capacity(reps.max(1));
    for _ in 0..reps.max(1) {
        let t = Instant::now();
        let back = net.backward(&dlogits, rule)?;
        samples.push(t.elapsed().as_secs_f64());
        drop(back);
    }
    let med = median(&mut samples.clone());
    Ok(BackwardTiming { rule, batch_size, samples, median: med })
}

/// One timing per rule, interleaved round-robin so drift in machine load
/// affects every rule alike.
pub fn time_all(batch_size: usize, reps: usize, seed: u64) -> Result<Vec<BackwardTiming>> {
    let mut out: Vec<BackwardTiming> = FeedbackRule::ALL
        .iter()
        .map(|&rule| BackwardTiming { rule, batch_size, samples: Vec::new(), median: 0.0 })
        .collect();
    for _ in 0..reps.max(1) {
        for t in out.iter_mut() {
            let one = time_backward(t.rule, batch_size, 1, seed)?;
            t.samples.extend(one.samples);
        }
    }
    for t in out.iter_mut() {
        t.median = median(&mut t.samples.clone());
    }
    Ok(out)
}
