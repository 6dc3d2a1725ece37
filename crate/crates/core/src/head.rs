//! Classification head over a stack of backbone hidden states.
//!
//! The forward pass is
//!
//! ```text
//! wls    = Σ_l w_l · hidden[l]                  (T × D)
//! query  = q_proj(mean_t wls)                   (1 × D)
//! keys   = k_proj(wls), values = v_proj(wls)    (T × D)
//! pooled = attention(query, keys, values)       (D)
//! main   = σ(main_linear(pooled))               (C, multi-label)
//! aux    = aux_linear(pooled)                   (2, softmax logits)
//! ```
//!
//! Hidden states are inputs, never parameters: the backward pass returns
//! gradients for [`HeadParams`] only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{self, axpy, dot};
use crate::tensor::Tensor;

/// Number of transformer blocks in a base-size speech backbone.
pub const BACKBONE_LAYERS: usize = 12;
/// Hidden size of a base-size speech backbone.
pub const BACKBONE_DIM: usize = 768;
/// Outputs of the auxiliary branch.
pub const AUX_OUTPUTS: usize = 2;

/// Shape of a head: backbone depth and width, class count, and whether the
/// attention pooling has learned Q/K/V projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadDims {
    pub layers: usize,
    pub dim: usize,
    pub classes: usize,
    pub projections: bool,
}

impl HeadDims {
    pub fn new(layers: usize, dim: usize, classes: usize) -> Self {
        Self {
            layers,
            dim,
            classes,
            projections: true,
        }
    }

    pub fn backbone(classes: usize) -> Self {
        Self::new(BACKBONE_LAYERS, BACKBONE_DIM, classes)
    }

    pub fn without_projections(mut self) -> Self {
        self.projections = false;
        self
    }
}

/// Affine map `y = W x + b` with `W` stored `out × in`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
            in_dim,
            out_dim,
        }
    }

    /// Weights uniform in ±sqrt(1/fan_in), zero bias.
    fn init(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (1.0 / in_dim as f64).sqrt();
        let weight = (0..in_dim * out_dim)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Self {
            weight,
            bias: vec![0.0; out_dim],
            in_dim,
            out_dim,
        }
    }

    pub fn row(&self, o: usize) -> &[f64] {
        &self.weight[o * self.in_dim..(o + 1) * self.in_dim]
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        (0..self.out_dim)
            .map(|o| dot(self.row(o), x) + self.bias[o])
            .collect()
    }

    fn forward_no_bias(&self, x: &[f64]) -> Vec<f64> {
        (0..self.out_dim).map(|o| dot(self.row(o), x)).collect()
    }

    /// `Wᵀ dy`
    fn backward_input(&self, dy: &[f64]) -> Vec<f64> {
        let mut dx = vec![0.0; self.in_dim];
        for (o, &g) in dy.iter().enumerate() {
            axpy(g, self.row(o), &mut dx);
        }
        dx
    }

    /// Accumulates `dW += dy ⊗ x`, and `db += dy` when `with_bias`.
    fn accumulate(&mut self, dy: &[f64], x: &[f64], with_bias: bool) {
        for (o, &g) in dy.iter().enumerate() {
            axpy(g, x, &mut self.weight[o * self.in_dim..(o + 1) * self.in_dim]);
            if with_bias {
                self.bias[o] += g;
            }
        }
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projections {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
}

/// Every trainable value of the head. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub layer_weights: Vec<f64>,
    pub projections: Option<Projections>,
    pub main: Linear,
    pub aux: Linear,
}

/// Gradients are congruent with parameters.
pub type HeadGrads = HeadParams;

/// A named contiguous block of parameters in canonical order.
#[derive(Debug)]
pub struct Segment<'a> {
    pub name: &'static str,
    pub values: &'a [f64],
}

#[derive(Debug)]
pub struct SegmentMut<'a> {
    pub name: &'static str,
    pub values: &'a mut [f64],
}

pub const LAYER_WEIGHTS: &str = "layer_weights";

impl HeadParams {
    /// All-zero parameters of the given shape.
    pub fn zeros(dims: HeadDims) -> Self {
        let d = dims.dim;
        Self {
            layer_weights: vec![0.0; dims.layers],
            projections: dims.projections.then(|| Projections {
                query: Linear::zeros(d, d),
                key: Linear::zeros(d, d),
                value: Linear::zeros(d, d),
            }),
            main: Linear::zeros(d, dims.classes),
            aux: Linear::zeros(d, AUX_OUTPUTS),
        }
    }

    pub fn dims(&self) -> HeadDims {
        HeadDims {
            layers: self.layer_weights.len(),
            dim: self.main.in_dim,
            classes: self.main.out_dim,
            projections: self.projections.is_some(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.segments().iter().map(|s| s.values.len()).sum()
    }

    /// Parameter blocks in canonical order: layer weights, then weight and
    /// bias of the query, key and value projections, the main linear layer
    /// and the auxiliary linear layer.
    pub fn segments(&self) -> Vec<Segment<'_>> {
        let mut out = vec![Segment {
            name: LAYER_WEIGHTS,
            values: &self.layer_weights,
        }];
        if let Some(p) = &self.projections {
            out.extend([
                Segment { name: "q_proj.weight", values: &p.query.weight },
                Segment { name: "q_proj.bias", values: &p.query.bias },
                Segment { name: "k_proj.weight", values: &p.key.weight },
                Segment { name: "k_proj.bias", values: &p.key.bias },
                Segment { name: "v_proj.weight", values: &p.value.weight },
                Segment { name: "v_proj.bias", values: &p.value.bias },
            ]);
        }
        out.extend([
            Segment { name: "main.weight", values: &self.main.weight },
            Segment { name: "main.bias", values: &self.main.bias },
            Segment { name: "aux.weight", values: &self.aux.weight },
            Segment { name: "aux.bias", values: &self.aux.bias },
        ]);
        out
    }

    pub fn segments_mut(&mut self) -> Vec<SegmentMut<'_>> {
        let mut out = vec![SegmentMut {
            name: LAYER_WEIGHTS,
            values: &mut self.layer_weights,
        }];
        if let Some(p) = &mut self.projections {
            out.extend([
                SegmentMut { name: "q_proj.weight", values: &mut p.query.weight },
                SegmentMut { name: "q_proj.bias", values: &mut p.query.bias },
                SegmentMut { name: "k_proj.weight", values: &mut p.key.weight },
                SegmentMut { name: "k_proj.bias", values: &mut p.key.bias },
                SegmentMut { name: "v_proj.weight", values: &mut p.value.weight },
                SegmentMut { name: "v_proj.bias", values: &mut p.value.bias },
            ]);
        }
        out.extend([
            SegmentMut { name: "main.weight", values: &mut self.main.weight },
            SegmentMut { name: "main.bias", values: &mut self.main.bias },
            SegmentMut { name: "aux.weight", values: &mut self.aux.weight },
            SegmentMut { name: "aux.bias", values: &mut self.aux.bias },
        ]);
        out
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.segments()
            .iter()
            .flat_map(|s| s.values.iter().copied())
            .collect()
    }

    pub fn from_flat(dims: HeadDims, flat: &[f64]) -> Result<Self> {
        let mut params = Self::zeros(dims);
        let n = params.num_params();
        if flat.len() != n {
            return Err(Error::Shape(format!(
                "head of {dims:?} has {n} parameters, got {}",
                flat.len()
            )));
        }
        let mut offset = 0;
        for seg in params.segments_mut() {
            let len = seg.values.len();
            seg.values.copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        Ok(params)
    }

    pub fn is_finite(&self) -> bool {
        self.segments()
            .iter()
            .all(|s| s.values.iter().all(|v| v.is_finite()))
    }

    /// `self += scale · other`; shapes must agree.
    pub fn add_scaled(&mut self, scale: f64, other: &HeadParams) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Shape(format!(
                "cannot combine {:?} with {:?}",
                self.dims(),
                other.dims()
            )));
        }
        for (dst, src) in self.segments_mut().into_iter().zip(other.segments()) {
            axpy(scale, src.values, dst.values);
        }
        Ok(())
    }
}

/// Deterministic initialisation: layer weights `1/L`, projection and linear
/// weights uniform in ±sqrt(1/fan_in), biases zero.
pub fn init_params(seed: u64, dims: HeadDims) -> HeadParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = dims.dim;
    let projections = dims.projections.then(|| Projections {
        query: Linear::init(d, d, &mut rng),
        key: Linear::init(d, d, &mut rng),
        value: Linear::init(d, d, &mut rng),
    });
    HeadParams {
        layer_weights: vec![1.0 / dims.layers as f64; dims.layers],
        projections,
        main: Linear::init(d, dims.classes, &mut rng),
        aux: Linear::init(d, AUX_OUTPUTS, &mut rng),
    }
}

/// One freshly initialised row for a linear layer with `in_dim` inputs,
/// drawn the same way as [`init_params`].
pub fn init_row(seed: u64, in_dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Linear::init(in_dim, 1, &mut rng).weight
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub main_probs: Vec<f64>,
    pub main_logits: Vec<f64>,
    pub aux_logits: Vec<f64>,
    pub pooled: Vec<f64>,
}

/// `WLS[t, d] = Σ_l w_l · hidden[l, t, d]`.
pub fn weighted_layer_sum(hidden: &Tensor, weights: &[f64]) -> Result<Tensor> {
    let (l, t, d) = hidden.dims3()?;
    if weights.len() != l {
        return Err(Error::Shape(format!(
            "{} layer weights for {l} hidden layers",
            weights.len()
        )));
    }
    let mut out = vec![0.0; t * d];
    for (layer, &w) in weights.iter().enumerate() {
        axpy(w, hidden.row(layer), &mut out);
    }
    Tensor::new(vec![t, d], out)
}

fn time_mean(wls: &Tensor) -> Vec<f64> {
    let (t, d) = (wls.shape()[0], wls.shape()[1]);
    let mut mean = vec![0.0; d];
    for frame in 0..t {
        axpy(1.0, wls.row(frame), &mut mean);
    }
    mean.iter_mut().for_each(|v| *v /= t as f64);
    mean
}

/// Pooling state kept for the backward pass.
enum PoolState {
    /// With one query, `q·(W_k x + b_k) = (W_kᵀ q)·x + q·b_k` and
    /// `Σ_t a_t (W_v x_t + b_v) = W_v (Σ_t a_t x_t) + b_v`, so neither the
    /// keys nor the values are materialised. The `q·b_k` term is the same for
    /// every frame and cancels in the softmax.
    Projected {
        query: Vec<f64>,
        key_query: Vec<f64>,
        context: Vec<f64>,
    },
    Plain {
        query: Tensor,
        attention: numeric::Attention,
    },
}

struct Pooling {
    mean: Vec<f64>,
    weights: Vec<f64>,
    output: Vec<f64>,
    state: PoolState,
}

fn pool(wls: &Tensor, params: &HeadParams) -> Result<Pooling> {
    let (t, d) = wls.dims2()?;
    if d != params.main.in_dim {
        return Err(Error::Shape(format!(
            "hidden size {d} does not match head width {}",
            params.main.in_dim
        )));
    }
    let mean = time_mean(wls);
    match &params.projections {
        Some(p) => {
            let query = p.query.forward(&mean);
            let key_query = p.key.backward_input(&query);
            let scale = 1.0 / (d as f64).sqrt();
            let scores: Vec<f64> = (0..t).map(|f| dot(wls.row(f), &key_query) * scale).collect();
            let weights = numeric::softmax(&scores);
            let mut context = vec![0.0; d];
            for (f, &a) in weights.iter().enumerate() {
                axpy(a, wls.row(f), &mut context);
            }
            let output = p.value.forward(&context);
            Ok(Pooling {
                mean,
                weights,
                output,
                state: PoolState::Projected {
                    query,
                    key_query,
                    context,
                },
            })
        }
        None => {
            let query = Tensor::new(vec![1, d], mean.clone())?;
            let attention = numeric::scaled_dot_attention(&query, wls, wls)?;
            Ok(Pooling {
                mean,
                weights: attention.weights.data().to_vec(),
                output: attention.output.data().to_vec(),
                state: PoolState::Plain { query, attention },
            })
        }
    }
}

/// Mean-query attention pooling of a `T×D` sequence into one `D` vector.
pub fn attention_pool(wls: &Tensor, params: &HeadParams) -> Result<Vec<f64>> {
    Ok(pool(wls, params)?.output)
}

fn check_hidden(hidden: &Tensor, params: &HeadParams) -> Result<()> {
    let (l, _, d) = hidden.dims3()?;
    let dims = params.dims();
    if l != dims.layers || d != dims.dim {
        return Err(Error::Shape(format!(
            "hidden states {:?} do not fit a head with {} layers of width {}",
            hidden.shape(),
            dims.layers,
            dims.dim
        )));
    }
    Ok(())
}

/// Intermediate values of one forward pass, borrowed from its inputs.
pub struct ForwardPass<'a> {
    hidden: &'a Tensor,
    params: &'a HeadParams,
    wls: Tensor,
    pooling: Pooling,
    output: HeadOutput,
}

impl<'a> ForwardPass<'a> {
    pub fn run(hidden: &'a Tensor, params: &'a HeadParams) -> Result<Self> {
        check_hidden(hidden, params)?;
        let wls = weighted_layer_sum(hidden, &params.layer_weights)?;
        let pooling = pool(&wls, params)?;
        let pooled = pooling.output.clone();
        let main_logits = params.main.forward(&pooled);
        let main_probs = main_logits.iter().map(|&z| numeric::sigmoid(z)).collect();
        let aux_logits = params.aux.forward(&pooled);
        Ok(Self {
            hidden,
            params,
            wls,
            pooling,
            output: HeadOutput {
                main_probs,
                main_logits,
                aux_logits,
                pooled,
            },
        })
    }

    pub fn output(&self) -> &HeadOutput {
        &self.output
    }

    pub fn into_output(self) -> HeadOutput {
        self.output
    }

    pub fn wls(&self) -> &Tensor {
        &self.wls
    }

    /// Attention weights over the time frames.
    pub fn attention_weights(&self) -> &[f64] {
        &self.pooling.weights
    }

    /// Parameter gradients given upstream gradients on the main and
    /// auxiliary logits.
    pub fn backward(&self, d_main: &[f64], d_aux: &[f64]) -> Result<HeadGrads> {
        let params = self.params;
        let dims = params.dims();
        if d_main.len() != dims.classes || d_aux.len() != AUX_OUTPUTS {
            return Err(Error::Shape(format!(
                "upstream gradients of length {} and {} for {} classes",
                d_main.len(),
                d_aux.len(),
                dims.classes
            )));
        }
        let mut grads = HeadParams::zeros(dims);
        let pooled = &self.output.pooled;
        grads.main.accumulate(d_main, pooled, true);
        grads.aux.accumulate(d_aux, pooled, true);
        let mut d_pooled = params.main.backward_input(d_main);
        axpy(1.0, &params.aux.backward_input(d_aux), &mut d_pooled);

        let pooling = &self.pooling;
        let (t, d) = self.wls.dims2()?;
        let mut d_wls = vec![0.0; t * d];
        let d_mean = match (&pooling.state, &params.projections, &mut grads.projections) {
            (
                PoolState::Projected {
                    query,
                    key_query,
                    context,
                },
                Some(p),
                Some(g),
            ) => {
                g.value.accumulate(&d_pooled, context, true);
                let d_context = p.value.backward_input(&d_pooled);
                let d_weights: Vec<f64> = (0..t).map(|f| dot(self.wls.row(f), &d_context)).collect();
                let scale = 1.0 / (d as f64).sqrt();
                let d_scores: Vec<f64> = numeric::softmax_vjp(&pooling.weights, &d_weights)
                    .into_iter()
                    .map(|v| v * scale)
                    .collect();
                let mut d_key_query = vec![0.0; d];
                for frame in 0..t {
                    let dx = &mut d_wls[frame * d..(frame + 1) * d];
                    axpy(pooling.weights[frame], &d_context, dx);
                    axpy(d_scores[frame], key_query, dx);
                    axpy(d_scores[frame], self.wls.row(frame), &mut d_key_query);
                }
                // key_query = W_kᵀ query
                g.key.accumulate(query, &d_key_query, false);
                let d_query = p.key.forward_no_bias(&d_key_query);
                g.query.accumulate(&d_query, &pooling.mean, true);
                p.query.backward_input(&d_query)
            }
            (PoolState::Plain { query, attention }, None, None) => {
                let attn = numeric::scaled_dot_attention_vjp(
                    query,
                    &self.wls,
                    &self.wls,
                    &attention.weights,
                    &Tensor::new(vec![1, d], d_pooled)?,
                )?;
                axpy(1.0, attn.keys.data(), &mut d_wls);
                axpy(1.0, attn.values.data(), &mut d_wls);
                attn.query.data().to_vec()
            }
            _ => unreachable!("pooling state follows the parameters"),
        };
        let inv_t = 1.0 / t as f64;
        for frame in 0..t {
            axpy(inv_t, &d_mean, &mut d_wls[frame * d..(frame + 1) * d]);
        }
        for (l, g) in grads.layer_weights.iter_mut().enumerate() {
            *g = dot(&d_wls, self.hidden.row(l));
        }
        Ok(grads)
    }
}

pub fn head_forward(hidden: &Tensor, params: &HeadParams) -> Result<HeadOutput> {
    ForwardPass::run(hidden, params).map(ForwardPass::into_output)
}

/// Stateful wrapper for callers that separate the forward and backward
/// calls; backward on an empty tape is a state error.
#[derive(Default)]
pub struct HeadTape<'a> {
    pass: Option<ForwardPass<'a>>,
}

impl<'a> HeadTape<'a> {
    pub fn new() -> Self {
        Self { pass: None }
    }

    pub fn forward(&mut self, hidden: &'a Tensor, params: &'a HeadParams) -> Result<&HeadOutput> {
        let pass = ForwardPass::run(hidden, params)?;
        Ok(self.pass.insert(pass).output())
    }

    pub fn backward(&self, d_main: &[f64], d_aux: &[f64]) -> Result<HeadGrads> {
        self.pass
            .as_ref()
            .ok_or_else(|| Error::State("backward called before forward".into()))?
            .backward(d_main, d_aux)
    }

    pub fn clear(&mut self) {
        self.pass = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::finite_difference_check;

    fn rand_tensor(seed: u64, shape: Vec<usize>) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)).unwrap()
    }

    fn linear_oracle(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
        let n_in = x.len();
        (0..b.len())
            .map(|o| b[o] + (0..n_in).map(|i| w[o * n_in + i] * x[i]).sum::<f64>())
            .collect()
    }

    // Pooling written out from the definition, with the key bias included.
    fn pool_oracle(wls: &Tensor, p: &HeadParams) -> Vec<f64> {
        let (t, d) = wls.dims2().unwrap();
        let proj = p.projections.as_ref().unwrap();
        let mut mean = vec![0.0; d];
        for f in 0..t {
            for c in 0..d {
                mean[c] += wls.data()[f * d + c] / t as f64;
            }
        }
        let q = linear_oracle(&proj.query.weight, &proj.query.bias, &mean);
        let ks: Vec<Vec<f64>> = (0..t)
            .map(|f| linear_oracle(&proj.key.weight, &proj.key.bias, wls.row(f)))
            .collect();
        let vs: Vec<Vec<f64>> = (0..t)
            .map(|f| linear_oracle(&proj.value.weight, &proj.value.bias, wls.row(f)))
            .collect();
        let s: Vec<f64> = ks
            .iter()
            .map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let m = s.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
        let mut out = vec![0.0; d];
        for f in 0..t {
            for c in 0..d {
                out[c] += (s[f] - m).exp() / z * vs[f][c];
            }
        }
        out
    }

    #[test]
    fn one_hot_layer_weight_selects_layer() {
        let h = rand_tensor(1, vec![12, 4, 8]);
        let mut w = vec![0.0; 12];
        w[5] = 1.0;
        let out = weighted_layer_sum(&h, &w).unwrap();
        assert_eq!(out.data(), h.row(5));
    }

    #[test]
    fn uniform_layer_weights_average_layers() {
        let h = rand_tensor(2, vec![12, 3, 5]);
        let out = weighted_layer_sum(&h, &[1.0 / 12.0; 12]).unwrap();
        for i in 0..15 {
            let mean = (0..12).map(|l| h.row(l)[i]).sum::<f64>() / 12.0;
            assert!((out.data()[i] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_count_mismatch_is_shape_error() {
        let h = rand_tensor(3, vec![12, 2, 3]);
        assert!(matches!(weighted_layer_sum(&h, &[0.1; 11]), Err(Error::Shape(_))));
    }

    #[test]
    fn pooling_single_frame_is_value_projection() {
        let p = init_params(4, HeadDims::new(12, 16, 7));
        let wls = rand_tensor(5, vec![1, 16]);
        let pooled = attention_pool(&wls, &p).unwrap();
        let expected = p.projections.as_ref().unwrap().value.forward(wls.row(0));
        assert_eq!(pooled, expected);
    }

    #[test]
    fn pooling_identical_frames_is_value_projection() {
        let p = init_params(6, HeadDims::new(12, 16, 7));
        let frame = rand_tensor(7, vec![1, 16]);
        let wls = Tensor::from_fn(vec![5, 16], |i| frame.data()[i % 16]).unwrap();
        let pooled = attention_pool(&wls, &p).unwrap();
        let expected = p.projections.as_ref().unwrap().value.forward(frame.data());
        for (a, b) in pooled.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pooling_matches_definition() {
        let mut p = init_params(8, HeadDims::new(12, 16, 6));
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        for seg in p.segments_mut() {
            if seg.name.ends_with("bias") {
                seg.values.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
            }
        }
        let wls = rand_tensor(9, vec![5, 16]);
        let pooled = attention_pool(&wls, &p).unwrap();
        for (a, b) in pooled.iter().zip(pool_oracle(&wls, &p)) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_input_gives_half_probabilities() {
        let p = init_params(10, HeadDims::new(12, 16, 7));
        let h = Tensor::zeros(vec![12, 3, 16]).unwrap();
        let out = head_forward(&h, &p).unwrap();
        assert_eq!(out.main_probs, vec![0.5; 7]);
    }

    #[test]
    fn backbone_sized_forward_shapes() {
        let p = init_params(0, HeadDims::backbone(7));
        let h = rand_tensor(11, vec![12, 149, 768]);
        let out = head_forward(&h, &p).unwrap();
        assert_eq!(out.main_probs.len(), 7);
        assert_eq!(out.aux_logits.len(), 2);
        assert_eq!(out.pooled.len(), 768);
        for (p, z) in out.main_probs.iter().zip(&out.main_logits) {
            assert!((p - numeric::sigmoid(*z)).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_matches_step_by_step_composition() {
        let p = init_params(12, HeadDims::new(12, 8, 7));
        let h = rand_tensor(13, vec![12, 4, 8]);
        let out = head_forward(&h, &p).unwrap();
        let mut wls = vec![0.0; 32];
        for l in 0..12 {
            for i in 0..32 {
                wls[i] += p.layer_weights[l] * h.data()[l * 32 + i];
            }
        }
        let pooled = pool_oracle(&Tensor::new(vec![4, 8], wls).unwrap(), &p);
        let logits = linear_oracle(&p.main.weight, &p.main.bias, &pooled);
        for (a, b) in out.main_logits.iter().zip(&logits) {
            assert!((a - b).abs() < 1e-10);
        }
        for (a, b) in out.main_probs.iter().zip(&logits) {
            assert!((a - 1.0 / (1.0 + (-b).exp())).abs() < 1e-10);
        }
        let aux = linear_oracle(&p.aux.weight, &p.aux.bias, &pooled);
        for (a, b) in out.aux_logits.iter().zip(&aux) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn init_is_deterministic_and_counts_params() {
        let dims = HeadDims::backbone(7);
        let a = init_params(0, dims);
        let b = init_params(0, dims);
        assert_eq!(a, b);
        // 12 + 3·(768·768 + 768) + (7·768 + 7) + (2·768 + 2)
        assert_eq!(a.num_params(), 1_778_709);
        assert!((a.layer_weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(a.main.bias.iter().all(|&v| v == 0.0));
        let bound = (1.0f64 / 768.0).sqrt();
        assert!(a.main.weight.iter().all(|v| v.abs() <= bound));
        assert_ne!(init_params(1, dims), a);
    }

    #[test]
    fn flat_round_trip() {
        let p = init_params(14, HeadDims::new(3, 4, 6));
        let q = HeadParams::from_flat(p.dims(), &p.to_flat()).unwrap();
        assert_eq!(p, q);
        assert!(HeadParams::from_flat(p.dims(), &[0.0; 3]).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let p = init_params(15, HeadDims::new(12, 8, 6));
        let h = rand_tensor(16, vec![12, 3, 8]);
        let pass = ForwardPass::run(&h, &p).unwrap();
        let g = pass.backward(&[0.0; 6], &[0.0; 2]).unwrap();
        assert!(g.to_flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sum_of_logits_main_weight_grad_is_pooled() {
        let p = init_params(17, HeadDims::new(12, 8, 7));
        let h = rand_tensor(18, vec![12, 1, 8]);
        let pass = ForwardPass::run(&h, &p).unwrap();
        let g = pass.backward(&[1.0; 7], &[0.0; 2]).unwrap();
        let pooled = &pass.output().pooled;
        for c in 0..7 {
            assert_eq!(g.main.row(c), &pooled[..]);
        }
        assert_eq!(g.main.bias, vec![1.0; 7]);
    }

    #[test]
    fn backward_without_forward_is_state_error() {
        let tape = HeadTape::new();
        assert!(matches!(tape.backward(&[0.0; 7], &[0.0; 2]), Err(Error::State(_))));
    }

    #[test]
    fn tape_records_and_backpropagates() {
        let p = init_params(19, HeadDims::new(12, 4, 6));
        let h = rand_tensor(20, vec![12, 2, 4]);
        let mut tape = HeadTape::new();
        tape.forward(&h, &p).unwrap();
        assert!(tape.backward(&[1.0; 6], &[0.5, -0.5]).is_ok());
        tape.clear();
        assert!(tape.backward(&[1.0; 6], &[0.5, -0.5]).is_err());
    }

    fn linear_objective_check(dims: HeadDims, t: usize, seed: u64) {
        let p = init_params(seed, dims);
        let h = rand_tensor(seed + 1, vec![dims.layers, t, dims.dim]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
        let cm: Vec<f64> = (0..dims.classes).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ca: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let objective = |flat: &[f64]| {
            let q = HeadParams::from_flat(dims, flat).unwrap();
            let o = head_forward(&h, &q).unwrap();
            dot(&o.main_logits, &cm) + dot(&o.aux_logits, &ca)
        };
        let g = ForwardPass::run(&h, &p).unwrap().backward(&cm, &ca).unwrap();
        let check = finite_difference_check(objective, &p.to_flat(), &g.to_flat(), 1e-5).unwrap();
        assert!(check.max_rel_error < 1e-4, "{dims:?} t={t}: {check:?}");
    }

    #[test]
    fn backward_matches_central_differences() {
        linear_objective_check(HeadDims::new(12, 6, 7), 3, 30);
        linear_objective_check(HeadDims::new(12, 6, 6), 1, 31);
        linear_objective_check(HeadDims::new(4, 5, 6).without_projections(), 4, 32);
    }

    #[test]
    fn projection_free_variant_has_fewer_params() {
        let dims = HeadDims::new(12, 16, 7).without_projections();
        let p = init_params(1, dims);
        assert_eq!(p.num_params(), 12 + 7 * 17 + 2 * 17);
        let h = rand_tensor(2, vec![12, 1, 16]);
        let out = head_forward(&h, &p).unwrap();
        let wls = weighted_layer_sum(&h, &p.layer_weights).unwrap();
        assert_eq!(out.pooled, wls.data());
    }

    #[test]
    fn hidden_states_are_not_mutated() {
        let p = init_params(21, HeadDims::new(12, 4, 6));
        let h = rand_tensor(22, vec![12, 3, 4]);
        let copy = h.clone();
        let pass = ForwardPass::run(&h, &p).unwrap();
        pass.backward(&[1.0; 6], &[1.0, 0.0]).unwrap();
        drop(pass);
        assert_eq!(h, copy);
    }
}
