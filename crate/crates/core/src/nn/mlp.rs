use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

static NEXT_TAG: AtomicU64 = AtomicU64::new(1);

fn fresh_tag() -> u64 {
    NEXT_TAG.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, output_dim: usize, activation: Activation) -> Self {
        Self {
            input_dim,
            hidden_dims,
            output_dim,
            activation,
        }
    }

    /// `(fan_in, fan_out)` of every affine layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut prev = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.output_dim));
        dims
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Layout("MLP dimensions must be at least 1".into()));
        }
        Ok(())
    }
}

/// Placement of one affine layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub fan_in: usize,
    pub fan_out: usize,
    /// Start of the `fan_in × fan_out` row-major weight block; the bias follows it.
    pub offset: usize,
}

impl LayerShape {
    fn weight_range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.fan_in * self.fan_out
    }

    fn bias_range(&self) -> std::ops::Range<usize> {
        let start = self.offset + self.fan_in * self.fan_out;
        start..start + self.fan_out
    }
}

/// Flat parameter (or gradient) storage with per-layer shape metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub values: Vec<f64>,
    pub layers: Vec<LayerShape>,
}

impl ParamTensor {
    pub fn zeros(spec: &MlpSpec) -> Self {
        let mut layers = Vec::new();
        let mut offset = 0;
        for (fan_in, fan_out) in spec.layer_dims() {
            layers.push(LayerShape { fan_in, fan_out, offset });
            offset += fan_in * fan_out + fan_out;
        }
        Self {
            values: vec![0.0; offset],
            layers,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn weights(&self, layer: usize) -> ArrayView2<'_, f64> {
        let l = self.layers[layer];
        ArrayView2::from_shape((l.fan_in, l.fan_out), &self.values[l.weight_range()]).unwrap()
    }

    pub fn bias(&self, layer: usize) -> ArrayView1<'_, f64> {
        let l = self.layers[layer];
        ArrayView1::from(&self.values[l.bias_range()])
    }

    pub fn weights_mut(&mut self, layer: usize) -> ArrayViewMut2<'_, f64> {
        let l = self.layers[layer];
        ArrayViewMut2::from_shape((l.fan_in, l.fan_out), &mut self.values[l.weight_range()]).unwrap()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Intermediate activations from a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    tag: u64,
    /// `activations[0]` is the input; `activations[i]` the output of hidden layer `i`.
    activations: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.activations[0].nrows()
    }
}

/// Multilayer perceptron: affine layers with a shared hidden activation and
/// a linear output layer.
#[derive(Debug, Clone)]
pub struct Mlp {
    spec: MlpSpec,
    params: ParamTensor,
    tag: u64,
}

impl Mlp {
    /// Glorot-uniform weights (He for ReLU), zero biases; the output layer is
    /// scaled by `output_scale`.
    pub fn new<R: Rng>(spec: MlpSpec, output_scale: f64, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamTensor::zeros(&spec);
        let n_layers = params.layers.len();
        for (i, l) in params.layers.clone().into_iter().enumerate() {
            let bound = match spec.activation {
                Activation::Tanh => (6.0 / (l.fan_in + l.fan_out) as f64).sqrt(),
                Activation::Relu => (6.0 / l.fan_in as f64).sqrt(),
            };
            let scale = if i + 1 == n_layers { output_scale } else { 1.0 };
            for v in &mut params.values[l.weight_range()] {
                *v = rng.gen_range(-bound..bound) * scale;
            }
        }
        Ok(Self {
            spec,
            params,
            tag: fresh_tag(),
        })
    }

    pub fn from_params(spec: MlpSpec, params: ParamTensor) -> Result<Self> {
        spec.validate()?;
        let expected = ParamTensor::zeros(&spec);
        if expected.layers != params.layers || expected.len() != params.len() {
            return Err(Error::DimensionMismatch {
                expected: expected.len(),
                got: params.len(),
            });
        }
        Ok(Self {
            spec,
            params,
            tag: fresh_tag(),
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamTensor {
        &self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Mutable access to the flat parameters. Invalidates outstanding caches.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.tag = fresh_tag();
        &mut self.params.values
    }

    /// `self ← (1 − rate)·self + rate·source`.
    pub fn soft_update_from(&mut self, source: &Mlp, rate: f64) {
        for (t, s) in self.params_mut().iter_mut().zip(&source.params.values) {
            *t += rate * (s - *t);
        }
    }

    fn check_input(&self, input: &ArrayView2<f64>) -> Result<()> {
        if input.ncols() != self.spec.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.spec.input_dim,
                got: input.ncols(),
            });
        }
        Ok(())
    }

    fn affine(&self, layer: usize, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut out = x.dot(&self.params.weights(layer));
        out += &self.params.bias(layer);
        out
    }

    fn activate(&self, z: &mut Array2<f64>) {
        match self.spec.activation {
            Activation::Tanh => z.mapv_inplace(f64::tanh),
            Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
        }
    }

    /// Batched forward pass; rows are samples.
    pub fn forward(&self, input: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(&input)?;
        let n_layers = self.params.layers.len();
        let mut activations = Vec::with_capacity(n_layers);
        activations.push(input.to_owned());
        for layer in 0..n_layers - 1 {
            let mut z = self.affine(layer, &activations[layer].view());
            self.activate(&mut z);
            activations.push(z);
        }
        let out = self.affine(n_layers - 1, &activations[n_layers - 1].view());
        Ok((
            out,
            ForwardCache {
                tag: self.tag,
                activations,
            },
        ))
    }

    /// Forward pass without keeping activations.
    pub fn predict(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&input)?;
        let n_layers = self.params.layers.len();
        let mut x = input.to_owned();
        for layer in 0..n_layers - 1 {
            x = self.affine(layer, &x.view());
            self.activate(&mut x);
        }
        Ok(self.affine(n_layers - 1, &x.view()))
    }

    pub fn predict_one(&self, input: &[f64]) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, input.len()), input).unwrap();
        Ok(self.predict(view)?.into_raw_vec_and_offset().0)
    }

    /// Gradient of `Σ upstream ⊙ output` with respect to every parameter.
    pub fn backward(&self, cache: &ForwardCache, upstream: ArrayView2<f64>) -> Result<ParamTensor> {
        let mut grad = ParamTensor::zeros(&self.spec);
        self.backward_into(cache, upstream, &mut grad)?;
        Ok(grad)
    }

    /// Like [`Mlp::backward`] but accumulates into `grad`.
    pub fn backward_into(&self, cache: &ForwardCache, upstream: ArrayView2<f64>, grad: &mut ParamTensor) -> Result<()> {
        if cache.tag != self.tag {
            return Err(Error::StaleCache);
        }
        if upstream.dim() != (cache.batch_size(), self.spec.output_dim) {
            return Err(Error::DimensionMismatch {
                expected: self.spec.output_dim,
                got: upstream.ncols(),
            });
        }
        let n_layers = self.params.layers.len();
        let mut delta = upstream.to_owned();
        for layer in (0..n_layers).rev() {
            let a_prev = &cache.activations[layer];
            {
                let mut gw = grad.weights_mut(layer);
                general_mat_mul(1.0, &a_prev.t(), &delta, 1.0, &mut gw);
            }
            let l = grad.layers[layer];
            let db = delta.sum_axis(Axis(0));
            for (g, d) in grad.values[l.bias_range()].iter_mut().zip(db.iter()) {
                *g += d;
            }
            if layer > 0 {
                let mut prev = delta.dot(&self.params.weights(layer).t());
                match self.spec.activation {
                    Activation::Tanh => prev.zip_mut_with(a_prev, |d, &a| *d *= 1.0 - a * a),
                    Activation::Relu => prev.zip_mut_with(a_prev, |d, &a| {
                        if a <= 0.0 {
                            *d = 0.0
                        }
                    }),
                }
                delta = prev;
            }
        }
        Ok(())
    }
}
