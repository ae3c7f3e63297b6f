//! Sequential networks built from a small set of layer kinds.
//!
//! A `Network` owns its parameter tensors and knows how to unroll itself
//! onto a [`Tape`]. The dense block follows the dense-connectivity rule:
//! layer `i` of a block sees `c0 + i * growth` input channels and all
//! block outputs are concatenated, so a block maps `c0 -> c0 + L * growth`
//! channels.

use serde::{Deserialize, Serialize};

use super::tape::{Tape, ValueId};
use super::{Tensor, TensorError};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize, stride: usize },
    Dense { in_features: usize, out_features: usize },
    Relu,
    GlobalAvgPool,
    DenseBlock { in_channels: usize, growth: usize, layers: usize },
    Flatten,
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Relu => "relu",
            LayerSpec::GlobalAvgPool => "global-avg-pool",
            LayerSpec::DenseBlock { .. } => "dense-block",
            LayerSpec::Flatten => "flatten",
        }
    }

    /// Shapes of the parameter tensors this layer owns, in storage order.
    fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Conv2d { in_channels, out_channels, kernel, .. } => {
                vec![vec![out_channels, in_channels, kernel, kernel], vec![out_channels]]
            }
            LayerSpec::Dense { in_features, out_features } => {
                vec![vec![in_features, out_features], vec![out_features]]
            }
            LayerSpec::DenseBlock { in_channels, growth, layers } => {
                let mut shapes = Vec::with_capacity(layers * 2);
                for i in 0..layers {
                    let c_in = in_channels + i * growth;
                    shapes.push(vec![growth, c_in, 3, 3]);
                    shapes.push(vec![growth]);
                }
                shapes
            }
            _ => Vec::new(),
        }
    }

    fn validate(&self) -> Result<(), TensorError> {
        let bad = |msg: String| Err(TensorError::BadSpec(msg));
        match *self {
            LayerSpec::Conv2d { in_channels, out_channels, kernel, stride } => {
                if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 {
                    return bad(format!("conv2d with zero extent: {self:?}"));
                }
            }
            LayerSpec::Dense { in_features, out_features } => {
                if in_features == 0 || out_features == 0 {
                    return bad(format!("dense with zero extent: {self:?}"));
                }
            }
            LayerSpec::DenseBlock { in_channels, growth, layers } => {
                if in_channels == 0 || growth == 0 || layers == 0 {
                    return bad(format!("dense-block with zero extent: {self:?}"));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Output shape for a given input shape (batch dim first).
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, TensorError> {
        let mismatch = |detail: String| {
            Err(TensorError::ShapeMismatch { op: "output_shape", detail })
        };
        match *self {
            LayerSpec::Conv2d { in_channels, out_channels, stride, .. } => {
                if input.len() != 4 || input[1] != in_channels {
                    return mismatch(format!("conv2d expects [N,{in_channels},H,W], got {input:?}"));
                }
                Ok(vec![input[0], out_channels, input[2].div_ceil(stride), input[3].div_ceil(stride)])
            }
            LayerSpec::Dense { in_features, out_features } => {
                if input.len() != 2 || input[1] != in_features {
                    return mismatch(format!("dense expects [N,{in_features}], got {input:?}"));
                }
                Ok(vec![input[0], out_features])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::GlobalAvgPool => {
                if input.len() != 4 {
                    return mismatch(format!("global-avg-pool expects 4-d input, got {input:?}"));
                }
                Ok(vec![input[0], input[1]])
            }
            LayerSpec::DenseBlock { in_channels, growth, layers } => {
                if input.len() != 4 || input[1] != in_channels {
                    return mismatch(format!(
                        "dense-block expects [N,{in_channels},H,W], got {input:?}"
                    ));
                }
                Ok(vec![input[0], in_channels + layers * growth, input[2], input[3]])
            }
            LayerSpec::Flatten => {
                if input.is_empty() {
                    return mismatch("flatten on rank-0 input".into());
                }
                Ok(vec![input[0], input[1..].iter().product()])
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub spec: LayerSpec,
    pub params: Vec<Tensor>,
}

/// A sequential stack of layers with owned, trainable parameters.
#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<Layer>,
}

impl Network {
    /// Create with Glorot-uniform weights and zero biases from a seeded
    /// generator: `U(-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out)))`.
    pub fn init(specs: Vec<LayerSpec>, rng: &mut ChaCha8Rng) -> Result<Self, TensorError> {
        let mut layers = Vec::with_capacity(specs.len());
        for spec in specs {
            spec.validate()?;
            let mut params = Vec::new();
            for shape in spec.param_shapes() {
                let tensor = if shape.len() == 1 {
                    Tensor::zeros(shape).with_grad()
                } else {
                    let (fan_in, fan_out) = fans(&shape);
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let numel: usize = shape.iter().product();
                    let data: Vec<f64> =
                        (0..numel).map(|_| rng.random_range(-bound..bound)).collect();
                    Tensor::new(shape, data)?.with_grad()
                };
                params.push(tensor);
            }
            layers.push(Layer { spec, params });
        }
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| l.params.iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params.iter_mut())
    }

    pub fn param_count(&self) -> usize {
        self.params().map(Tensor::numel).sum()
    }

    /// Shape produced for `input` shape, validating the whole chain.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, TensorError> {
        let mut shape = input.to_vec();
        for (index, layer) in self.layers.iter().enumerate() {
            shape = layer.spec.output_shape(&shape).map_err(|e| TensorError::InLayer {
                index,
                kind: layer.spec.kind_name().to_string(),
                source: Box::new(e),
            })?;
        }
        Ok(shape)
    }

    /// Unroll onto a tape. Returns the output id plus the leaf ids of every
    /// parameter, in `params()` order, for gradient readback.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        x: ValueId,
    ) -> Result<(ValueId, Vec<ValueId>), TensorError> {
        let mut cur = x;
        let mut param_ids = Vec::new();
        for (index, layer) in self.layers.iter().enumerate() {
            let wrap = |e: TensorError| TensorError::InLayer {
                index,
                kind: layer.spec.kind_name().to_string(),
                source: Box::new(e),
            };
            cur = match layer.spec {
                LayerSpec::Conv2d { stride, .. } => {
                    let w = tape.leaf(&layer.params[0]);
                    let b = tape.leaf(&layer.params[1]);
                    param_ids.push(w);
                    param_ids.push(b);
                    tape.conv2d(cur, w, b, stride).map_err(wrap)?
                }
                LayerSpec::Dense { .. } => {
                    let w = tape.leaf(&layer.params[0]);
                    let b = tape.leaf(&layer.params[1]);
                    param_ids.push(w);
                    param_ids.push(b);
                    tape.dense(cur, w, b).map_err(wrap)?
                }
                LayerSpec::Relu => tape.relu(cur),
                LayerSpec::GlobalAvgPool => tape.global_avg_pool(cur).map_err(wrap)?,
                LayerSpec::DenseBlock { layers, .. } => {
                    let mut features = cur;
                    for i in 0..layers {
                        let w = tape.leaf(&layer.params[2 * i]);
                        let b = tape.leaf(&layer.params[2 * i + 1]);
                        param_ids.push(w);
                        param_ids.push(b);
                        let conv = tape.conv2d(features, w, b, 1).map_err(wrap)?;
                        let act = tape.relu(conv);
                        features = tape.concat_channels(features, act).map_err(wrap)?;
                    }
                    features
                }
                LayerSpec::Flatten => tape.flatten(cur).map_err(wrap)?,
            };
        }
        Ok((cur, param_ids))
    }

    /// Read gradients from the tape back into the owned parameter tensors
    /// (accumulating), in the order produced by [`Network::forward_on`].
    pub fn accumulate_grads(&mut self, tape: &Tape, param_ids: &[ValueId]) {
        let mut ids = param_ids.iter();
        for p in self.params_mut() {
            let id = ids.next().expect("param id list matches param order");
            if let Some(g) = tape.grad(*id) {
                p.accumulate_grad(g);
            }
        }
    }

    /// Untracked forward pass for inference.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        let mut tape = Tape::new();
        let mut input = x.clone();
        input.requires_grad = false;
        let id = tape.leaf(&input);
        let (out, _) = self.forward_on(&mut tape, id)?;
        Tensor::new(tape.shape(out).to_vec(), tape.data(out).to_vec())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Copy parameter values (not grads) from another network with an
    /// identical architecture.
    pub fn copy_params_from(&mut self, other: &Network) -> Result<(), TensorError> {
        if self.specs() != other.specs() {
            return Err(TensorError::BadSpec("architecture mismatch in copy_params_from".into()));
        }
        for (dst, src) in self.params_mut().zip(other.params()) {
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

/// (fan_in, fan_out) for a weight shape: conv `[Co,Ci,Kh,Kw]` or dense `[F,G]`.
fn fans(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        4 => {
            let rf = shape[2] * shape[3];
            (shape[1] * rf, shape[0] * rf)
        }
        2 => (shape[0], shape[1]),
        _ => (1, 1),
    }
}
