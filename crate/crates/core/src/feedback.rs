//! Credit-assignment rules: which operator carries the error signal from a
//! layer's output back to its input.

use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{LayerKind, LayerState};
use crate::tensor::{sign0, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackRule {
    /// Exact backpropagation through the forward weights.
    Bp,
    /// Fixed random feedback; conv layers get a dense `[d_out, d_in]` matrix.
    FaRandom,
    /// Fixed random feedback; conv layers get a kernel-shaped transposed convolution.
    FaToeplitz,
    /// `|B0| * sign(W_t)`.
    UsfInit,
    /// `||W_t|| * sign(W_t) / ||sign(W_t)||`.
    UsfSn,
}

impl FeedbackRule {
    pub const ALL: [FeedbackRule; 5] = [
        FeedbackRule::Bp,
        FeedbackRule::FaRandom,
        FeedbackRule::FaToeplitz,
        FeedbackRule::UsfInit,
        FeedbackRule::UsfSn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FeedbackRule::Bp => "bp",
            FeedbackRule::FaRandom => "fa_random",
            FeedbackRule::FaToeplitz => "fa_toeplitz",
            FeedbackRule::UsfInit => "usf_init",
            FeedbackRule::UsfSn => "usf_sn",
        }
    }

    /// Whether the rule reads a fixed random matrix drawn at initialization.
    pub fn uses_initial_feedback(self) -> bool {
        matches!(
            self,
            FeedbackRule::FaRandom | FeedbackRule::FaToeplitz | FeedbackRule::UsfInit
        )
    }

    /// The feedback scale only matters for rules that draw `B0`.
    pub fn uses_sigma(self) -> bool {
        self.uses_initial_feedback()
    }

    /// Conv feedback is a dense matrix rather than a kernel.
    pub fn dense_conv_feedback(self) -> bool {
        self == FeedbackRule::FaRandom
    }

    pub fn is_pure_fa(self) -> bool {
        matches!(self, FeedbackRule::FaRandom | FeedbackRule::FaToeplitz)
    }

    pub fn is_usf(self) -> bool {
        matches!(self, FeedbackRule::UsfInit | FeedbackRule::UsfSn)
    }
}

impl fmt::Display for FeedbackRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeedbackRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FeedbackRule::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown method {s:?}; expected one of bp, fa_random, fa_toeplitz, usf_init, usf_sn"
                ))
            })
    }
}

/// The operator `B_t` a layer uses to send its error signal downward under `rule`.
///
/// The result is always shaped like the forward weights except for
/// [`FeedbackRule::FaRandom`] on conv layers, where it is the dense
/// `[d_out, d_in]` matrix. It is applied in adjoint position, so `B_t == W`
/// reproduces backpropagation.
pub fn effective_feedback<T: Scalar>(
    layer: &LayerState<T>,
    rule: FeedbackRule,
) -> Result<Cow<'_, Tensor<T>>> {
    let w = &layer.weight;
    let b0 = || {
        layer.feedback().ok_or_else(|| {
            Error::Config(format!(
                "{} has no initial feedback matrix but rule {rule} needs one",
                layer.name
            ))
        })
    };
    let expect_weight_shape = |b: &Tensor<T>| {
        if b.shape() != w.shape() {
            return Err(Error::Config(format!(
                "{}: rule {rule} needs feedback shaped {:?}, found {:?}",
                layer.name,
                w.shape(),
                b.shape()
            )));
        }
        Ok(())
    };
    match rule {
        FeedbackRule::Bp => Ok(Cow::Borrowed(w)),
        FeedbackRule::FaRandom => {
            let b = b0()?;
            let want = layer.dense_feedback_shape();
            if b.shape() != want {
                return Err(Error::Config(format!(
                    "{}: fa_random needs feedback shaped {want:?}, found {:?}",
                    layer.name,
                    b.shape()
                )));
            }
            Ok(Cow::Borrowed(b))
        }
        FeedbackRule::FaToeplitz => {
            let b = b0()?;
            expect_weight_shape(b)?;
            Ok(Cow::Borrowed(b))
        }
        FeedbackRule::UsfInit => {
            let b = b0()?;
            expect_weight_shape(b)?;
            Ok(Cow::Owned(b.zip_map(w, |b, w| b.abs() * sign0(w))?))
        }
        FeedbackRule::UsfSn => Ok(Cow::Owned(sign_normalized(w))),
    }
}

/// `||W||_F * sign(W) / ||sign(W)||_F`; all zeros when `W` is all zeros.
///
/// The ratio of norms is the root-mean-square of the nonzero entries. It is
/// evaluated relative to the largest magnitude, so weights of one constant
/// magnitude come back exactly.
pub fn sign_normalized<T: Scalar>(w: &Tensor<T>) -> Tensor<T> {
    let signs = w.signum0();
    let max = w.data().iter().map(|v| v.abs().as_f64()).fold(0.0, f64::max);
    if max == 0.0 {
        return signs;
    }
    let (mut sq, mut nonzero) = (0.0f64, 0usize);
    for v in w.data() {
        if *v != T::zero() {
            let r = v.as_f64() / max;
            sq += r * r;
            nonzero += 1;
        }
    }
    signs.scale(T::from_f64(max * (sq / nonzero as f64).sqrt()))
}

impl<T: Scalar> LayerState<T> {
    /// Shape of the dense feedback matrix used by fa_random: `[d_out, d_in]`
    /// for conv layers, the weight shape for dense layers.
    pub fn dense_feedback_shape(&self) -> Vec<usize> {
        match &self.kind {
            LayerKind::Conv(g) => vec![g.out_features(), g.in_features()],
            LayerKind::Dense { .. } => self.weight.shape().to_vec(),
        }
    }
}
