//! Dense feed-forward classifier with ReLU hidden layers and a softmax output.
//!
//! Parameters live in one flat [`ParamVector`] so that clients and the server
//! can exchange, average and compare them directly. Layer `l` occupies
//! `fan_out * fan_in` row-major weights followed by `fan_out` biases.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::seed;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArchitecture {
    input_dim: usize,
    hidden_dims: Vec<usize>,
    output_dim: usize,
}

impl MlpArchitecture {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, output_dim: usize) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 || hidden_dims.contains(&0) {
            return Err(Error::InvalidArchitecture(format!(
                "all dimensions must be >= 1 (input {input_dim}, hidden {hidden_dims:?}, output {output_dim})"
            )));
        }
        Ok(Self {
            input_dim,
            hidden_dims,
            output_dim,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dims(&self) -> &[usize] {
        &self.hidden_dims
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn layer_count(&self) -> usize {
        self.hidden_dims.len() + 1
    }

    /// `(fan_in, fan_out)` for each layer, input side first.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.layer_count());
        let mut fan_in = self.input_dim;
        for &h in self.hidden_dims.iter().chain(std::iter::once(&self.output_dim)) {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims()
            .iter()
            .map(|&(fan_in, fan_out)| (fan_in + 1) * fan_out)
            .sum()
    }
}

/// Flattened model parameters tied to the architecture they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    arch: MlpArchitecture,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn from_values(arch: MlpArchitecture, values: Vec<f64>) -> Result<Self> {
        let expected = arch.param_count();
        if values.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter construction"));
        }
        Ok(Self { arch, values })
    }

    pub fn zeros(arch: MlpArchitecture) -> Self {
        let values = vec![0.0; arch.param_count()];
        Self { arch, values }
    }

    pub fn arch(&self) -> &MlpArchitecture {
        &self.arch
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Bias entries of every layer, in layer order.
    pub fn biases(&self) -> Vec<f64> {
        self.layers().flat_map(|l| l.bias.iter().copied()).collect()
    }

    fn layers(&self) -> impl Iterator<Item = LayerView<'_>> {
        let mut offset = 0;
        self.arch.layer_dims().into_iter().map(move |(fan_in, fan_out)| {
            let w_end = offset + fan_in * fan_out;
            let b_end = w_end + fan_out;
            let view = LayerView {
                fan_in,
                fan_out,
                weights: &self.values[offset..w_end],
                bias: &self.values[w_end..b_end],
            };
            offset = b_end;
            view
        })
    }
}

struct LayerView<'a> {
    fan_in: usize,
    fan_out: usize,
    weights: &'a [f64],
    bias: &'a [f64],
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// Copies the listed rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }
}

/// Borrowed labelled mini-batch: row-major features and one label per row.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    features: &'a [f64],
    labels: &'a [usize],
    dim: usize,
}

impl<'a> Batch<'a> {
    pub fn new(features: &'a [f64], labels: &'a [usize], dim: usize) -> Result<Self> {
        if dim == 0 || features.len() != labels.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: labels.len() * dim,
                actual: features.len(),
            });
        }
        Ok(Self {
            features,
            labels,
            dim,
        })
    }

    pub fn from_matrix(features: &'a Matrix, labels: &'a [usize]) -> Result<Self> {
        Self::new(features.as_slice(), labels, features.cols())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn features(&self) -> &'a [f64] {
        self.features
    }

    pub fn labels(&self) -> &'a [usize] {
        self.labels
    }

    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

/// He-style uniform initialisation: weights in `±sqrt(6 / fan_in)`, zero biases.
pub fn init_params(arch: &MlpArchitecture, seed: u64) -> ParamVector {
    let mut rng = seed::rng(seed);
    let mut values = Vec::with_capacity(arch.param_count());
    for (fan_in, fan_out) in arch.layer_dims() {
        let bound = (6.0 / fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        values.extend((0..fan_in * fan_out).map(|_| dist.sample(&mut rng)));
        values.extend(std::iter::repeat_n(0.0, fan_out));
    }
    ParamVector {
        arch: arch.clone(),
        values,
    }
}

fn check_input(params: &ParamVector, batch: &Batch<'_>) -> Result<()> {
    if batch.dim() != params.arch.input_dim {
        return Err(Error::DimensionMismatch {
            expected: params.arch.input_dim,
            actual: batch.dim(),
        });
    }
    Ok(())
}

fn check_labels(params: &ParamVector, batch: &Batch<'_>) -> Result<()> {
    let k = params.arch.output_dim;
    if let Some(&label) = batch.labels().iter().find(|&&y| y >= k) {
        return Err(Error::LabelOutOfRange {
            label,
            class_count: k,
        });
    }
    Ok(())
}

fn dense_forward(layer: &LayerView<'_>, input: &[f64], rows: usize, relu: bool) -> Vec<f64> {
    let mut out = vec![0.0; rows * layer.fan_out];
    for s in 0..rows {
        let x = &input[s * layer.fan_in..(s + 1) * layer.fan_in];
        let o = &mut out[s * layer.fan_out..(s + 1) * layer.fan_out];
        for (j, oj) in o.iter_mut().enumerate() {
            let w = &layer.weights[j * layer.fan_in..(j + 1) * layer.fan_in];
            let z = layer.bias[j] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            *oj = if relu { z.max(0.0) } else { z };
        }
    }
    out
}

/// Post-activation outputs of every layer; the last entry holds raw logits.
fn activations(params: &ParamVector, features: &[f64], rows: usize) -> Vec<Vec<f64>> {
    let n_layers = params.arch.layer_count();
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
    for (l, layer) in params.layers().enumerate() {
        let input = if l == 0 { features } else { &acts[l - 1] };
        let out = dense_forward(&layer, input, rows, l + 1 < n_layers);
        acts.push(out);
    }
    acts
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `logsumexp(z) - z[y]`, the per-sample cross-entropy from raw logits.
fn cross_entropy(logits: &[f64], y: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[y]
}

/// Class probabilities, one row per sample.
pub fn forward(params: &ParamVector, batch: &Batch<'_>) -> Result<Matrix> {
    check_input(params, batch)?;
    let k = params.arch.output_dim;
    let mut acts = activations(params, batch.features(), batch.len());
    let mut probs = acts.pop().unwrap_or_default();
    for row in probs.chunks_exact_mut(k) {
        softmax_in_place(row);
    }
    Matrix::new(batch.len(), k, probs)
}

/// Mean categorical cross-entropy.
pub fn loss(params: &ParamVector, batch: &Batch<'_>) -> Result<f64> {
    check_input(params, batch)?;
    check_labels(params, batch)?;
    if batch.is_empty() {
        return Err(Error::EmptyDataset("loss of an empty batch".into()));
    }
    let k = params.arch.output_dim;
    let acts = activations(params, batch.features(), batch.len());
    let logits = acts.last().expect("at least one layer");
    let total: f64 = logits
        .chunks_exact(k)
        .zip(batch.labels())
        .map(|(z, &y)| cross_entropy(z, y))
        .sum();
    Ok(total / batch.len() as f64)
}

/// Backpropagates `delta` (d loss / d logits, one row per sample) through the
/// network, filling `grad` with parameter gradients. Returns d loss / d input.
fn backprop(
    params: &ParamVector,
    features: &[f64],
    acts: &[Vec<f64>],
    mut delta: Vec<f64>,
    rows: usize,
    mut grad: Option<&mut [f64]>,
) -> Vec<f64> {
    let layers: Vec<LayerView<'_>> = params.layers().collect();
    let mut offsets = Vec::with_capacity(layers.len());
    let mut offset = 0;
    for l in &layers {
        offsets.push(offset);
        offset += (l.fan_in + 1) * l.fan_out;
    }

    for l in (0..layers.len()).rev() {
        let layer = &layers[l];
        let input = if l == 0 { features } else { &acts[l - 1] };
        let (fi, fo) = (layer.fan_in, layer.fan_out);

        if let Some(g) = grad.as_deref_mut() {
            let (gw, gb) = g[offsets[l]..offsets[l] + (fi + 1) * fo].split_at_mut(fi * fo);
            for s in 0..rows {
                let d = &delta[s * fo..(s + 1) * fo];
                let x = &input[s * fi..(s + 1) * fi];
                for (j, &dj) in d.iter().enumerate() {
                    if dj == 0.0 {
                        continue;
                    }
                    gb[j] += dj;
                    for (gwi, &xi) in gw[j * fi..(j + 1) * fi].iter_mut().zip(x) {
                        *gwi += dj * xi;
                    }
                }
            }
        }

        let mut prev = vec![0.0; rows * fi];
        for s in 0..rows {
            let d = &delta[s * fo..(s + 1) * fo];
            let p = &mut prev[s * fi..(s + 1) * fi];
            for (j, &dj) in d.iter().enumerate() {
                if dj == 0.0 {
                    continue;
                }
                for (pi, &w) in p.iter_mut().zip(&layer.weights[j * fi..(j + 1) * fi]) {
                    *pi += dj * w;
                }
            }
        }
        if l > 0 {
            // ReLU mask: the post-activation is positive exactly where z > 0.
            for (p, &a) in prev.iter_mut().zip(input) {
                if a <= 0.0 {
                    *p = 0.0;
                }
            }
        }
        delta = prev;
    }
    delta
}

fn output_delta(logits: &[f64], labels: &[usize], k: usize, scale: f64) -> (f64, Vec<f64>) {
    let mut delta = logits.to_vec();
    let mut total = 0.0;
    for (row, &y) in delta.chunks_exact_mut(k).zip(labels) {
        total += cross_entropy(row, y);
        softmax_in_place(row);
        row[y] -= 1.0;
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    (total, delta)
}

/// Mean cross-entropy and its gradient with respect to every parameter.
pub fn backward(params: &ParamVector, batch: &Batch<'_>) -> Result<(f64, ParamVector)> {
    check_input(params, batch)?;
    check_labels(params, batch)?;
    if batch.is_empty() {
        return Err(Error::EmptyDataset("gradient of an empty batch".into()));
    }
    let mut grad = vec![0.0; params.len()];
    let loss = accumulate_gradient(params, batch.features(), batch.labels(), &mut grad);
    Ok((
        loss,
        ParamVector {
            arch: params.arch.clone(),
            values: grad,
        },
    ))
}

fn accumulate_gradient(
    params: &ParamVector,
    features: &[f64],
    labels: &[usize],
    grad: &mut [f64],
) -> f64 {
    let rows = labels.len();
    let k = params.arch.output_dim;
    let acts = activations(params, features, rows);
    let scale = 1.0 / rows as f64;
    let (total, delta) = output_delta(acts.last().expect("layer"), labels, k, scale);
    backprop(params, features, &acts, delta, rows, Some(grad));
    total * scale
}

/// Gradient of the single-sample cross-entropy with respect to the input row.
pub fn input_gradient(params: &ParamVector, x: &[f64], y: usize) -> Result<Vec<f64>> {
    let labels = [y];
    let batch = Batch::new(x, &labels, x.len())?;
    check_input(params, &batch)?;
    check_labels(params, &batch)?;
    let k = params.arch.output_dim;
    let acts = activations(params, x, 1);
    let (_, delta) = output_delta(acts.last().expect("layer"), &labels, k, 1.0);
    Ok(backprop(params, x, &acts, delta, 1, None))
}

/// Shuffled mini-batch SGD for `epochs` passes. The final partial batch is
/// kept. Deterministic given `seed`.
pub fn sgd_epochs(
    params: &ParamVector,
    data: &Batch<'_>,
    hp: &TrainParams,
    seed: u64,
) -> Result<ParamVector> {
    check_input(params, data)?;
    check_labels(params, data)?;
    if data.is_empty() {
        return Err(Error::EmptyDataset("cannot train on an empty dataset".into()));
    }
    if !(hp.lr.is_finite() && hp.lr >= 0.0) {
        return Err(Error::InvalidParameter(format!("learning rate {}", hp.lr)));
    }
    if hp.epochs == 0 || hp.batch_size == 0 {
        return Err(Error::InvalidParameter(
            "epochs and batch_size must be >= 1".into(),
        ));
    }

    let mut rng = seed::rng(seed);
    let mut current = params.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let dim = data.dim();
    let mut grad = vec![0.0; params.len()];
    let mut feats = Vec::with_capacity(hp.batch_size * dim);
    let mut labels = Vec::with_capacity(hp.batch_size);

    for _ in 0..hp.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(hp.batch_size) {
            feats.clear();
            labels.clear();
            for &i in chunk {
                feats.extend_from_slice(data.row(i));
                labels.push(data.labels()[i]);
            }
            grad.iter_mut().for_each(|g| *g = 0.0);
            accumulate_gradient(&current, &feats, &labels, &mut grad);
            for (p, g) in current.values.iter_mut().zip(&grad) {
                *p -= hp.lr * g;
            }
        }
    }
    if !current.is_finite() {
        return Err(Error::NonFinite("sgd"));
    }
    Ok(current)
}

fn argmax(row: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    (best, row[best])
}

/// Argmax of each probability row; ties go to the lowest class index.
pub fn predict(params: &ParamVector, batch: &Batch<'_>) -> Result<Vec<usize>> {
    Ok(forward(params, batch)?.iter_rows().map(|r| argmax(r).0).collect())
}

/// Maximum class probability of each row.
pub fn softmax_confidence(params: &ParamVector, batch: &Batch<'_>) -> Result<Vec<f64>> {
    Ok(forward(params, batch)?.iter_rows().map(|r| argmax(r).1).collect())
}

/// Predicted label and its probability for each row.
pub fn predict_with_confidence(
    params: &ParamVector,
    batch: &Batch<'_>,
) -> Result<Vec<(usize, f64)>> {
    Ok(forward(params, batch)?.iter_rows().map(argmax).collect())
}
