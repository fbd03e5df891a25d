//! Linear centered kernel alignment.
//!
//! With column-centered activations `Xc [n, p1]` and `Yc [n, p2]`,
//!
//! ```text
//! CKA = ||Yc^T Xc||_F^2 / (||Xc^T Xc||_F * ||Yc^T Yc||_F)
//!     = <Kx, Ky>_F / (||Kx||_F * ||Ky||_F),   K = Xc Xc^T
//! ```
//!
//! The Gram form is used when samples are fewer than features (conv layers);
//! the covariance form otherwise. Products run in the tensor's precision,
//! reductions in `f64`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{dot_f64, gemm, Op, Scalar, Tensor};

fn as_matrix<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize)> {
    if x.rank() < 2 {
        return Err(Error::dim(format!("activations need [n, features], got {:?}", x.shape())));
    }
    Ok((x.shape()[0], x.row_len()))
}

/// Copy of `x` as `[n, p]` with every column's mean removed.
pub fn center_columns<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, p) = as_matrix(x)?;
    let mut means = vec![0.0f64; p];
    for row in x.data().chunks_exact(p) {
        for (m, v) in means.iter_mut().zip(row) {
            *m += v.as_f64();
        }
    }
    let means: Vec<T> = means.iter().map(|m| T::from_f64(m / n as f64)).collect();
    let data = x
        .data()
        .chunks_exact(p)
        .flat_map(|row| row.iter().zip(&means).map(|(&v, &m)| v - m))
        .collect();
    Tensor::new(vec![n, p], data)
}

/// `Xc Xc^T` of column-centered activations; already double-centered.
#[derive(Clone, Debug)]
pub struct CenteredGram<T: Scalar = f32> {
    n: usize,
    data: Vec<T>,
    norm: f64,
}

impl<T: Scalar> CenteredGram<T> {
    pub fn from_activations(x: &Tensor<T>) -> Result<Self> {
        let xc = center_columns(x)?;
        let (n, p) = (xc.shape()[0], xc.shape()[1]);
        let mut data = vec![T::zero(); n * n];
        gemm(n, p, n, T::one(), xc.data(), Op::N, xc.data(), Op::T, T::zero(), &mut data);
        let norm = dot_f64(&data, &data).sqrt();
        Ok(CenteredGram { n, data, norm })
    }

    pub fn samples(&self) -> usize {
        self.n
    }

    /// CKA between the two representations; `None` if either has zero variance.
    pub fn cka(&self, other: &Self) -> Result<Option<f64>> {
        if self.n != other.n {
            return Err(Error::dim(format!("{} vs {} samples", self.n, other.n)));
        }
        if self.norm == 0.0 || other.norm == 0.0 {
            return Ok(None);
        }
        Ok(Some(dot_f64(&self.data, &other.data) / (self.norm * other.norm)))
    }
}

/// Linear CKA between `x [n, ...]` and `y [n, ...]`; trailing dims are flattened into features.
pub fn linear_cka<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<Option<f64>> {
    let (n, p1) = as_matrix(x)?;
    let (ny, p2) = as_matrix(y)?;
    if n != ny {
        return Err(Error::dim(format!("{n} vs {ny} samples")));
    }
    if n < 2 {
        return Err(Error::dim("linear CKA needs at least two samples"));
    }
    let gram_cost = n * n * (p1 + p2);
    let cov_cost = n * (p1 * p2 + p1 * p1 + p2 * p2);
    if gram_cost <= cov_cost {
        return CenteredGram::from_activations(x)?.cka(&CenteredGram::from_activations(y)?);
    }
    let (xc, yc) = (center_columns(x)?, center_columns(y)?);
    let cross = |a: &Tensor<T>, pa: usize, b: &Tensor<T>, pb: usize| {
        let mut out = vec![T::zero(); pa * pb];
        gemm(pa, n, pb, T::one(), a.data(), Op::T, b.data(), Op::N, T::zero(), &mut out);
        dot_f64(&out, &out)
    };
    let xy = cross(&xc, p1, &yc, p2);
    let xx = cross(&xc, p1, &xc, p1).sqrt();
    let yy = cross(&yc, p2, &yc, p2).sqrt();
    if xx == 0.0 || yy == 0.0 {
        return Ok(None);
    }
    Ok(Some(xy / (xx * yy)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    All,
    BothCorrect,
    ACorrectBWrong,
}

impl Subset {
    pub const ALL: [Subset; 3] = [Subset::All, Subset::BothCorrect, Subset::ACorrectBWrong];

    pub fn name(self) -> &'static str {
        match self {
            Subset::All => "all",
            Subset::BothCorrect => "both_correct",
            Subset::ACorrectBWrong => "a_correct_b_wrong",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Subset::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown subset {s:?}")))
    }

    /// Sample indices selected from the two models' correctness bitmaps.
    pub fn select(self, a_correct: &[bool], b_correct: &[bool]) -> Vec<usize> {
        a_correct
            .iter()
            .zip(b_correct)
            .enumerate()
            .filter(|(_, (&a, &b))| match self {
                Subset::All => true,
                Subset::BothCorrect => a && b,
                Subset::ACorrectBWrong => a && !b,
            })
            .map(|(i, _)| i)
            .collect()
    }
}

/// Anything that can hand out per-layer activation rows for a fixed sample set.
pub trait ActivationSource {
    fn layer_names(&self) -> Vec<String>;
    fn correct(&self) -> &[bool];
    /// Identifies the sample set so two sources can be checked for agreement.
    fn sample_ids(&self) -> &[usize];
    /// `[rows.len(), features]` for layer `layer`.
    fn rows(&mut self, layer: usize, rows: &[usize]) -> Result<Tensor<f32>>;
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CkaMatrix {
    pub subset: Subset,
    pub samples: usize,
    pub layers_a: Vec<String>,
    pub layers_b: Vec<String>,
    /// `values[i][j]` compares layer `i` of model A with layer `j` of model B.
    pub values: Vec<Vec<Option<f64>>>,
}

impl CkaMatrix {
    pub fn diagonal(&self) -> Vec<Option<f64>> {
        (0..self.values.len().min(self.layers_b.len()))
            .map(|i| self.values[i][i])
            .collect()
    }

    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.layers_a.iter().position(|l| l == a)?;
        let j = self.layers_b.iter().position(|l| l == b)?;
        self.values[i][j]
    }

    /// Header row of B's layer names, then one row per A layer.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer");
        for l in &self.layers_b {
            s.push(',');
            s.push_str(l);
        }
        s.push('\n');
        for (la, row) in self.layers_a.iter().zip(&self.values) {
            s.push_str(la);
            for v in row {
                s.push(',');
                if let Some(v) = v {
                    s.push_str(&format!("{v:.6}"));
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Layer-by-layer CKA between two models on the chosen subset of shared samples.
pub fn cka_grid(
    a: &mut dyn ActivationSource,
    b: &mut dyn ActivationSource,
    subset: Subset,
) -> Result<CkaMatrix> {
    if a.sample_ids() != b.sample_ids() {
        return Err(Error::Config("activation dumps cover different samples".into()));
    }
    let rows = subset.select(a.correct(), b.correct());
    if rows.len() < 2 {
        let sizes: Vec<String> = Subset::ALL
            .iter()
            .map(|s| format!("{}={}", s.name(), s.select(a.correct(), b.correct()).len()))
            .collect();
        return Err(Error::EmptySubset(format!(
            "subset {} has {} samples ({})",
            subset.name(),
            rows.len(),
            sizes.join(", ")
        )));
    }
    let (names_a, names_b) = (a.layer_names(), b.layer_names());
    let grams_a = (0..names_a.len())
        .map(|i| CenteredGram::from_activations(&a.rows(i, &rows)?))
        .collect::<Result<Vec<_>>>()?;
    let mut values = vec![vec![None; names_b.len()]; names_a.len()];
    for j in 0..names_b.len() {
        let gb = CenteredGram::from_activations(&b.rows(j, &rows)?)?;
        for (i, ga) in grams_a.iter().enumerate() {
            values[i][j] = ga.cka(&gb)?;
        }
    }
    Ok(CkaMatrix { subset, samples: rows.len(), layers_a: names_a, layers_b: names_b, values })
}

/// Activations held in memory, e.g. for tests or small evaluation sets.
pub struct InMemoryActivations {
    pub names: Vec<String>,
    pub layers: Vec<Tensor<f32>>,
    pub correct: Vec<bool>,
    pub ids: Vec<usize>,
}

impl ActivationSource for InMemoryActivations {
    fn layer_names(&self) -> Vec<String> {
        self.names.clone()
    }

    fn correct(&self) -> &[bool] {
        &self.correct
    }

    fn sample_ids(&self) -> &[usize] {
        &self.ids
    }

    fn rows(&mut self, layer: usize, rows: &[usize]) -> Result<Tensor<f32>> {
        let t = self
            .layers
            .get(layer)
            .ok_or_else(|| Error::Config(format!("no layer {layer}")))?;
        let r = t.row_len();
        let mut data = Vec::with_capacity(rows.len() * r);
        for &i in rows {
            data.extend_from_slice(t.row(i));
        }
        Tensor::new(vec![rows.len(), r], data)
    }
}
