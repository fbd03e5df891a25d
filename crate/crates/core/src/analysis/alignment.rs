use serde::Serialize;

use crate::error::{Error, Result};
use crate::feedback::FeedbackRule;
use crate::network::Network;
use crate::tensor::{sign0, softmax_cross_entropy, Scalar, Tensor};

/// Angle in degrees between two equally shaped tensors viewed as flat vectors.
/// `None` when either has zero norm.
pub fn angle_degrees<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Option<f64>> {
    let dot = a.dot(b)?;
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Ok(None);
    }
    let cos = (dot / (na * nb)).clamp(-1.0, 1.0);
    Ok(Some(cos.acos().to_degrees()))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerValue {
    pub layer: String,
    pub value: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AngleReport {
    pub rule: FeedbackRule,
    pub layers: Vec<LayerValue>,
}

impl AngleReport {
    pub fn get(&self, layer: &str) -> Option<f64> {
        self.layers.iter().find(|l| l.layer == layer).and_then(|l| l.value)
    }

    /// Mean over the named layers that have a defined angle.
    pub fn mean_over(&self, prefix: &str) -> Option<f64> {
        let vals: Vec<f64> = self
            .layers
            .iter()
            .filter(|l| l.layer.starts_with(prefix))
            .filter_map(|l| l.value)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Angle between the backpropagated error and the error delivered by `rule`
/// at the pre-activation of every weight layer below the top one, for one
/// batch. Both signals come from the same forward pass.
pub fn gradient_angle<T: Scalar>(
    net: &mut Network<T>,
    images: &Tensor<T>,
    labels: &[usize],
    rule: FeedbackRule,
) -> Result<AngleReport> {
    let logits = net.forward(images)?;
    let (_, dlogits) = softmax_cross_entropy(&logits, labels)?;
    let bp = net.backward(&dlogits, FeedbackRule::Bp)?;
    let fb = if rule == FeedbackRule::Bp {
        bp.clone()
    } else {
        net.backward(&dlogits, rule)?
    };
    let names = net.layer_names();
    let below_top = names.len().saturating_sub(1);
    let layers = (0..below_top)
        .map(|i| {
            Ok(LayerValue {
                layer: names[i].clone(),
                value: angle_degrees(&bp.deltas[i], &fb.deltas[i])?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(AngleReport { rule, layers })
}

/// Fraction of entries where `sign(w) == sign(b0)`, with `sign(0) = 0`.
pub fn sign_concordance<T: Scalar>(w: &Tensor<T>, b0: &Tensor<T>) -> Result<f64> {
    if w.shape() != b0.shape() {
        return Err(Error::dim(format!(
            "sign concordance needs equal shapes, got {:?} and {:?}",
            w.shape(),
            b0.shape()
        )));
    }
    let agree = w
        .data()
        .iter()
        .zip(b0.data())
        .filter(|(&a, &b)| sign0(a) == sign0(b))
        .count();
    Ok(agree as f64 / w.len() as f64)
}

/// Concordance of every layer that can carry feedback (all but the first);
/// `None` where `B0` is absent or not weight-shaped.
pub fn concordance_report<T: Scalar>(net: &Network<T>) -> Vec<LayerValue> {
    net.param_layers()
        .skip(1)
        .map(|l| LayerValue {
            layer: l.name.clone(),
            value: l.feedback().and_then(|b| sign_concordance(&l.weight, b).ok()),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Architecture, InitConfig};
    use crate::rng::Rng;
    use crate::tensor::randn;

    #[test]
    fn angle_fixtures() {
        let a: Tensor<f64> = randn(&mut Rng::new(1), &[50], 1.0).unwrap();
        assert!(angle_degrees(&a, &a).unwrap().unwrap().abs() < 1e-6);
        assert!((angle_degrees(&a, &a.scale(-1.0)).unwrap().unwrap() - 180.0).abs() < 1e-6);
        assert_eq!(angle_degrees(&a, &Tensor::zeros(&[50])).unwrap(), None);
    }

    #[test]
    fn concordance_fixtures() {
        let w: Tensor<f64> = randn(&mut Rng::new(2), &[400], 1.0).unwrap();
        assert_eq!(sign_concordance(&w, &w).unwrap(), 1.0);
        assert_eq!(sign_concordance(&w, &w.scale(-1.0)).unwrap(), 0.0);
        assert!(sign_concordance(&w, &Tensor::zeros(&[2, 200])).is_err());
        let z = Tensor::<f64>::zeros(&[4]);
        assert_eq!(sign_concordance(&z, &z).unwrap(), 1.0);
    }

    #[test]
    fn independent_signs_near_half() {
        // Binomial std at n = 1e5 is 0.0016, so 0.01 is over six sigma.
        let mut rng = Rng::new(42);
        let a: Tensor<f32> = randn(&mut rng, &[100_000], 1.0).unwrap();
        let b: Tensor<f32> = randn(&mut rng, &[100_000], 1.0).unwrap();
        assert!((sign_concordance(&a, &b).unwrap() - 0.5).abs() < 0.01);
    }

    #[test]
    fn bp_angle_is_zero() {
        let init = InitConfig { seed: 42, sigma: None };
        let mut net = Network::<f32>::new(Architecture::cifar(), FeedbackRule::Bp, &init).unwrap();
        let x: Tensor<f32> = randn(&mut Rng::new(3), &[8, 3, 24, 24], 1.0).unwrap();
        let report = gradient_angle(&mut net, &x, &[0, 1, 2, 3, 4, 5, 6, 7], FeedbackRule::Bp).unwrap();
        assert_eq!(report.layers.len(), 4);
        for l in &report.layers {
            assert_eq!(l.value, Some(0.0), "{}", l.layer);
        }
    }

    #[test]
    fn concordance_report_marks_dense_conv_feedback_undefined() {
        let init = InitConfig { seed: 42, sigma: Some(0.05) };
        let net = Network::<f32>::new(Architecture::cifar(), FeedbackRule::FaRandom, &init).unwrap();
        let rep = concordance_report(&net);
        assert_eq!(rep[0].layer, "conv2");
        assert_eq!(rep[0].value, None);
        assert!(rep[1..].iter().all(|l| l.value.is_some()));
    }
}
