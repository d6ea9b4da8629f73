//! Fully connected denoiser over the flattened `[context, window]` span.
//!
//! Each span position contributes `[frame, time_embed(level), cond]`; the
//! style one-hot is appended once at the end. The output predicts a frame for
//! every span position and only the window positions are read back, so the
//! context/window split can change between fine-tuning stages while the
//! parameter shapes stay fixed.

use ndarray::{Array1, Array2, Axis};

use super::embed::time_embed_into;
use super::{Denoiser, DenoiserInput, ModelError};
use crate::diffusion::Frame;
use crate::rng::CounterRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpConfig {
    pub frame_dim: usize,
    pub cond_dim: usize,
    pub n_styles: usize,
    /// Context plus window length.
    pub span: usize,
    pub time_dim: usize,
    pub hidden: usize,
    /// Number of hidden layers.
    pub depth: usize,
}

impl MlpConfig {
    fn position_width(&self) -> usize {
        self.frame_dim + self.time_dim + self.cond_dim
    }

    pub fn input_dim(&self) -> usize {
        self.span * self.position_width() + self.n_styles
    }

    pub fn output_dim(&self) -> usize {
        self.span * self.frame_dim
    }

    pub(crate) fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.depth + 1);
        let mut fan_in = self.input_dim();
        for _ in 0..self.depth {
            shapes.push((self.hidden, fan_in));
            fan_in = self.hidden;
        }
        shapes.push((self.output_dim(), fan_in));
        shapes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Dense {
    pub(crate) w: Array2<f64>,
    pub(crate) b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpDenoiser {
    pub config: MlpConfig,
    pub(crate) layers: Vec<Dense>,
    /// Optimizer steps taken so far.
    pub steps: u64,
}

/// Activations kept from a training forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Array2<f64>,
    pre: Vec<Array2<f64>>,
    post: Vec<Array2<f64>>,
    masks: Vec<Option<Array2<f64>>>,
}

/// Parameter gradients, shaped like the layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w: Vec<Array2<f64>>,
    pub b: Vec<Array1<f64>>,
}

impl Gradients {
    /// Flattened in the same order as [`MlpDenoiser::params_mut`].
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.w.iter().zip(&self.b) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

impl MlpDenoiser {
    /// LeCun-normal hidden weights, zero biases. With `zero_output` the final
    /// layer starts at zero so the initial prediction is `x0 = 0`.
    pub fn new(config: MlpConfig, rng: &mut CounterRng, zero_output: bool) -> Self {
        let shapes = config.layer_shapes();
        let last = shapes.len() - 1;
        let layers = shapes
            .into_iter()
            .enumerate()
            .map(|(i, (out, inp))| {
                let scale = (1.0 / inp as f64).sqrt();
                let w = if i == last && zero_output {
                    Array2::zeros((out, inp))
                } else {
                    Array2::from_shape_fn((out, inp), |_| rng.standard_normal() * scale)
                };
                Dense { w, b: Array1::zeros(out) }
            })
            .collect();
        MlpDenoiser { config, layers, steps: 0 }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.w.iter().chain(l.b.iter()))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| l.w.iter_mut().chain(l.b.iter_mut()))
    }

    pub fn param(&self, i: usize) -> f64 {
        *self.params().nth(i).expect("parameter index in range")
    }

    pub fn set_param(&mut self, i: usize, v: f64) {
        *self.params_mut().nth(i).expect("parameter index in range") = v;
    }

    pub(crate) fn set_flat_params(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.param_count());
        for (p, &v) in self.params_mut().zip(values) {
            *p = v;
        }
    }

    pub(crate) fn shapes(&self) -> Vec<(usize, usize)> {
        self.config.layer_shapes()
    }

    /// Write the flattened encoding of `input` into `row`.
    pub fn encode_into(&self, input: &DenoiserInput, row: &mut [f64]) -> Result<(), ModelError> {
        let cfg = &self.config;
        input.validate(cfg.frame_dim, cfg.cond_dim)?;
        if input.span() != cfg.span {
            return Err(ModelError::Dim { what: "span", got: input.span(), expected: cfg.span });
        }
        debug_assert_eq!(row.len(), cfg.input_dim());
        let mut buf = Vec::with_capacity(cfg.position_width());
        let n_cont = input.context.len();
        for p in 0..cfg.span {
            buf.clear();
            let (frame, level) = if p < n_cont {
                // Context frames always carry the level-1 embedding.
                (&input.context[p], 1)
            } else {
                (&input.window[p - n_cont], input.levels[p - n_cont])
            };
            buf.extend_from_slice(frame);
            time_embed_into(level, cfg.time_dim, &mut buf);
            buf.extend_from_slice(&input.cond[p]);
            let w = cfg.position_width();
            row[p * w..(p + 1) * w].copy_from_slice(&buf);
        }
        let style_base = cfg.span * cfg.position_width();
        row[style_base..].iter_mut().for_each(|v| *v = 0.0);
        if let Some(s) = input.style {
            if cfg.n_styles > 0 {
                if s >= cfg.n_styles {
                    return Err(ModelError::Style { style: s, count: cfg.n_styles });
                }
                row[style_base + s] = 1.0;
            }
        }
        Ok(())
    }

    pub fn encode_batch(&self, inputs: &[DenoiserInput]) -> Result<Array2<f64>, ModelError> {
        let mut x = Array2::zeros((inputs.len(), self.config.input_dim()));
        for (mut row, input) in x.axis_iter_mut(Axis(0)).zip(inputs) {
            let slice = row.as_slice_mut().expect("row-major batch");
            self.encode_into(input, slice)?;
        }
        Ok(x)
    }

    /// Forward pass keeping activations for [`backward`](Self::backward).
    ///
    /// Inverted dropout with rate `dropout` is applied after every hidden
    /// activation when a mask source is supplied.
    pub fn forward_train(
        &self,
        x: Array2<f64>,
        dropout: f64,
        mut mask_rng: Option<&mut CounterRng>,
    ) -> (Array2<f64>, ForwardCache) {
        let depth = self.layers.len() - 1;
        let mut pre = Vec::with_capacity(depth);
        let mut post: Vec<Array2<f64>> = Vec::with_capacity(depth);
        let mut masks = Vec::with_capacity(depth);
        for (i, layer) in self.layers.iter().enumerate() {
            let a_prev = if i == 0 { &x } else { &post[i - 1] };
            let mut z = a_prev.dot(&layer.w.t());
            z += &layer.b;
            if i == depth {
                let cache = ForwardCache { input: x, pre, post, masks };
                return (z, cache);
            }
            let mut a = z.mapv(silu);
            let mask = match mask_rng.as_deref_mut() {
                Some(rng) if dropout > 0.0 => {
                    let keep = 1.0 - dropout;
                    let m = Array2::from_shape_fn(a.raw_dim(), |_| if rng.uniform() < keep { 1.0 / keep } else { 0.0 });
                    a *= &m;
                    Some(m)
                }
                _ => None,
            };
            pre.push(z);
            post.push(a);
            masks.push(mask);
        }
        unreachable!("network has an output layer")
    }

    /// Inference forward pass on an encoded batch.
    pub fn forward(&self, x: Array2<f64>) -> Array2<f64> {
        self.forward_train(x, 0.0, None).0
    }

    /// Reverse-mode gradients of a scalar loss given `d_out = dL/d(output)`.
    pub fn backward(&self, cache: &ForwardCache, d_out: &Array2<f64>) -> Gradients {
        let n = self.layers.len();
        let mut gw = vec![Array2::zeros((0, 0)); n];
        let mut gb = vec![Array1::zeros(0); n];
        let mut delta = d_out.clone();
        for i in (0..n).rev() {
            let a_prev = if i == 0 { &cache.input } else { &cache.post[i - 1] };
            gw[i] = delta.t().dot(a_prev);
            gb[i] = delta.sum_axis(Axis(0));
            if i > 0 {
                let mut da = delta.dot(&self.layers[i].w);
                if let Some(m) = &cache.masks[i - 1] {
                    da *= m;
                }
                da.zip_mut_with(&cache.pre[i - 1], |d, &z| *d *= silu_grad(z));
                delta = da;
            }
        }
        Gradients { w: gw, b: gb }
    }

    /// Split one output row into per-frame window predictions.
    pub(crate) fn window_frames(&self, out_row: ndarray::ArrayView1<f64>, n_cont: usize) -> Vec<Frame> {
        let d = self.config.frame_dim;
        (n_cont..self.config.span)
            .map(|p| (0..d).map(|k| out_row[p * d + k]).collect())
            .collect()
    }
}

impl Denoiser for MlpDenoiser {
    fn frame_dim(&self) -> usize {
        self.config.frame_dim
    }

    fn denoise(&self, input: &DenoiserInput) -> Result<Vec<Frame>, ModelError> {
        let x = self.encode_batch(std::slice::from_ref(input))?;
        let out = self.forward(x);
        Ok(self.window_frames(out.row(0), input.context.len()))
    }
}
