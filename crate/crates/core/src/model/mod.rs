//! Internal CNN representation with neuron-level structure.
//!
//! A [`Model`] is an ordered chain of layers. Conv and linear layers are the
//! splittable units; residual adds, global average pooling and (unfused)
//! batch norm are glue executed by the coordinator or removed by fusion.
//! Construction validates that every adjacent pair of layers chains.

mod file;
mod fuse;
pub(crate) mod quant;
pub(crate) mod receptive;
pub mod synth;

pub use file::{reinterpret, reinterpret_str};
pub use fuse::fuse_conv_bn_relu;
pub use quant::{quantize, quantize_tensor, QuantizedTensor};
pub use receptive::ReceptiveField;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bytes per activation or weight element at a given precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Float32,
    Int8,
}

impl Precision {
    pub const fn element_bytes(self) -> usize {
        match self {
            Precision::Float32 => 4,
            Precision::Int8 => 1,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "float32" | "f32" => Ok(Precision::Float32),
            "int8" | "i8" => Ok(Precision::Int8),
            other => Err(Error::Parse(format!("unknown precision `{other}`"))),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::Float32 => "float32",
            Precision::Int8 => "int8",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 3]", into = "[usize; 3]")]
pub struct TensorShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl From<[usize; 3]> for TensorShape {
    fn from([channels, height, width]: [usize; 3]) -> Self {
        Self { channels, height, width }
    }
}

impl From<TensorShape> for [usize; 3] {
    fn from(s: TensorShape) -> Self {
        [s.channels, s.height, s.width]
    }
}

impl TensorShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Result<Self> {
        let shape = Self { channels, height, width };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Domain(format!("tensor shape {self} has a zero dimension")));
        }
        Ok(())
    }

    pub const fn neuron_count(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Channel-major linear index of `(c, h, w)`.
    pub const fn index(&self, c: usize, h: usize, w: usize) -> usize {
        (c * self.height + h) * self.width + w
    }

    pub const fn coords(&self, i: usize) -> (usize, usize, usize) {
        let plane = self.plane();
        (i / plane, (i % plane) / self.width, i % self.width)
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    None,
    Relu,
    Relu6,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::None => x,
            Activation::Relu => x.max(0.0),
            Activation::Relu6 => x.clamp(0.0, 6.0),
        }
    }
}

/// Weight storage at the model's active precision.
#[derive(Debug, Clone, PartialEq)]
pub enum Weights {
    F32(Vec<f32>),
    /// Symmetric per-tensor int8, zero point 0.
    I8 { values: Vec<i8>, scale: f32 },
}

impl Weights {
    pub fn len(&self) -> usize {
        match self {
            Weights::F32(v) => v.len(),
            Weights::I8 { values, .. } => values.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn precision(&self) -> Precision {
        match self {
            Weights::F32(_) => Precision::Float32,
            Weights::I8 { .. } => Precision::Int8,
        }
    }

    /// Dequantized value of element `i`.
    #[inline]
    pub fn get(&self, i: usize) -> f64 {
        match self {
            Weights::F32(v) => v[i] as f64,
            Weights::I8 { values, scale } => values[i] as f64 * *scale as f64,
        }
    }

    pub fn max_abs(&self) -> f64 {
        (0..self.len()).map(|i| self.get(i).abs()).fold(0.0, f64::max)
    }
}

/// Activation scales for an int8 layer: the coordinator quantizes the
/// layer's input with `input_scale`; workers return outputs quantized with
/// `output_scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivationScales {
    pub input_scale: f32,
    pub output_scale: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub in_shape: TensorShape,
    pub out_shape: TensorShape,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub depthwise: bool,
    /// Layout `[out_channel][kernel_in_channel][kh][kw]`.
    pub weights: Weights,
    pub bias: Vec<f32>,
    pub activation: Activation,
    pub scales: Option<ActivationScales>,
}

/// Output spatial size of a convolution, or `None` if the window does not fit.
pub fn conv_output_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || input + 2 * padding < kernel {
        return None;
    }
    Some((input + 2 * padding - kernel) / stride + 1)
}

impl ConvLayer {
    /// Builds a float conv layer, deriving the output shape.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_shape: TensorShape,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
        depthwise: bool,
        weights: Vec<f32>,
        bias: Vec<f32>,
        activation: Activation,
    ) -> Result<Self> {
        let oh = conv_output_dim(in_shape.height, kernel.0, stride, padding);
        let ow = conv_output_dim(in_shape.width, kernel.1, stride, padding);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(Error::Domain(format!(
                "kernel {}x{} stride {stride} padding {padding} does not fit input {in_shape}",
                kernel.0, kernel.1
            )));
        };
        let layer = Self {
            in_shape,
            out_shape: TensorShape::new(out_channels, oh, ow)?,
            kernel,
            stride,
            padding,
            depthwise,
            weights: Weights::F32(weights),
            bias,
            activation,
            scales: None,
        };
        layer.check_params()?;
        Ok(layer)
    }

    /// Input channels each kernel spans.
    pub const fn kernel_in_channels(&self) -> usize {
        if self.depthwise {
            1
        } else {
            self.in_shape.channels
        }
    }

    /// Number of weights in one output channel's kernel.
    pub const fn kernel_len(&self) -> usize {
        self.kernel_in_channels() * self.kernel.0 * self.kernel.1
    }

    #[inline]
    pub const fn weight_index(&self, oc: usize, kc: usize, ky: usize, kx: usize) -> usize {
        ((oc * self.kernel_in_channels() + kc) * self.kernel.0 + ky) * self.kernel.1 + kx
    }

    fn check_params(&self) -> Result<()> {
        let oc = self.out_shape.channels;
        if self.depthwise && oc != self.in_shape.channels {
            return Err(Error::Domain(format!(
                "depthwise conv needs out channels == in channels ({oc} vs {})",
                self.in_shape.channels
            )));
        }
        if self.weights.len() != oc * self.kernel_len() {
            return Err(Error::Domain(format!(
                "conv weights have {} elements, expected {}",
                self.weights.len(),
                oc * self.kernel_len()
            )));
        }
        if self.bias.len() != oc {
            return Err(Error::Domain(format!("conv bias has {} elements, expected {oc}", self.bias.len())));
        }
        Ok(())
    }

    /// Multiply-accumulates needed for output neuron `index` (padding taps skipped).
    pub fn neuron_macs(&self, index: usize) -> u64 {
        let (c, h, w) = self.out_shape.coords(index);
        let rf = receptive::conv_field(self, c, h, w);
        rf.len() as u64
    }
}

/// Fully connected layer. The input tensor is flattened channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub in_shape: TensorShape,
    pub out_features: usize,
    /// Row-major `in_features x out_features`: column `j` produces output `j`.
    pub weights: Weights,
    pub bias: Vec<f32>,
    pub activation: Activation,
    pub scales: Option<ActivationScales>,
}

impl LinearLayer {
    pub fn new(
        in_shape: TensorShape,
        out_features: usize,
        weights: Vec<f32>,
        bias: Vec<f32>,
        activation: Activation,
    ) -> Result<Self> {
        let layer = Self {
            in_shape,
            out_features,
            weights: Weights::F32(weights),
            bias,
            activation,
            scales: None,
        };
        layer.check_params()?;
        Ok(layer)
    }

    pub const fn in_features(&self) -> usize {
        self.in_shape.neuron_count()
    }

    pub fn out_shape(&self) -> TensorShape {
        TensorShape { channels: self.out_features, height: 1, width: 1 }
    }

    #[inline]
    pub const fn weight_index(&self, row: usize, col: usize) -> usize {
        row * self.out_features + col
    }

    fn check_params(&self) -> Result<()> {
        if self.out_features == 0 {
            return Err(Error::Domain("linear layer with zero outputs".into()));
        }
        if self.weights.len() != self.in_features() * self.out_features {
            return Err(Error::Domain(format!(
                "linear weights have {} elements, expected {}x{}",
                self.weights.len(),
                self.in_features(),
                self.out_features
            )));
        }
        if self.bias.len() != self.out_features {
            return Err(Error::Domain(format!(
                "linear bias has {} elements, expected {}",
                self.bias.len(),
                self.out_features
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormLayer {
    pub shape: TensorShape,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub eps: f32,
    /// Activation applied after normalization; absorbed by fusion.
    pub activation: Activation,
}

pub const DEFAULT_BN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(ConvLayer),
    Linear(LinearLayer),
    /// Adds the output of layer `from` to the previous layer's output.
    ResidualAdd { from: usize, shape: TensorShape },
    GlobalAvgPool { in_shape: TensorShape },
    BatchNorm(BatchNormLayer),
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::Linear(_) => "linear",
            Layer::ResidualAdd { .. } => "residual_add",
            Layer::GlobalAvgPool { .. } => "gap",
            Layer::BatchNorm(_) => "batchnorm",
        }
    }

    pub fn in_shape(&self) -> TensorShape {
        match self {
            Layer::Conv(c) => c.in_shape,
            Layer::Linear(l) => l.in_shape,
            Layer::ResidualAdd { shape, .. } => *shape,
            Layer::GlobalAvgPool { in_shape } => *in_shape,
            Layer::BatchNorm(b) => b.shape,
        }
    }

    pub fn out_shape(&self) -> TensorShape {
        match self {
            Layer::Conv(c) => c.out_shape,
            Layer::Linear(l) => l.out_shape(),
            Layer::ResidualAdd { shape, .. } => *shape,
            Layer::GlobalAvgPool { in_shape } => TensorShape {
                channels: in_shape.channels,
                height: 1,
                width: 1,
            },
            Layer::BatchNorm(b) => b.shape,
        }
    }

    /// Conv and linear layers are partitioned across workers.
    pub fn is_splittable(&self) -> bool {
        matches!(self, Layer::Conv(_) | Layer::Linear(_))
    }

    pub fn weights(&self) -> Option<&Weights> {
        match self {
            Layer::Conv(c) => Some(&c.weights),
            Layer::Linear(l) => Some(&l.weights),
            _ => None,
        }
    }

    pub fn bias(&self) -> Option<&[f32]> {
        match self {
            Layer::Conv(c) => Some(&c.bias),
            Layer::Linear(l) => Some(&l.bias),
            _ => None,
        }
    }

    pub fn activation(&self) -> Activation {
        match self {
            Layer::Conv(c) => c.activation,
            Layer::Linear(l) => l.activation,
            Layer::BatchNorm(b) => b.activation,
            _ => Activation::None,
        }
    }

    pub fn scales(&self) -> Option<ActivationScales> {
        match self {
            Layer::Conv(c) => c.scales,
            Layer::Linear(l) => l.scales,
            _ => None,
        }
    }

    /// Receptive field of output neuron `(c, h, w)`; only defined for splittable layers.
    pub fn get_input(&self, c: usize, h: usize, w: usize) -> Result<ReceptiveField> {
        match self {
            Layer::Conv(conv) => receptive::get_input_conv(conv, c, h, w),
            Layer::Linear(lin) => receptive::get_input_linear(lin, c, h, w),
            other => Err(Error::Domain(format!("{} layers have no receptive field", other.kind()))),
        }
    }

    /// MACs for output neurons `range` of a splittable layer.
    pub fn range_macs(&self, range: std::ops::Range<usize>) -> u64 {
        match self {
            Layer::Conv(c) => {
                let (os, is) = (c.out_shape, c.in_shape);
                let taps: Vec<u64> = (0..os.plane())
                    .map(|p| {
                        let rows = receptive::window(p / os.width, c.kernel.0, c.stride, c.padding, is.height);
                        let cols = receptive::window(p % os.width, c.kernel.1, c.stride, c.padding, is.width);
                        (rows.len() * cols.len() * c.kernel_in_channels()) as u64
                    })
                    .collect();
                range.map(|i| taps[i % os.plane()]).sum()
            }
            Layer::Linear(l) => range.len() as u64 * l.in_features() as u64,
            _ => 0,
        }
    }

    /// MACs for output neuron `index` of a splittable layer.
    pub fn neuron_macs(&self, index: usize) -> u64 {
        match self {
            Layer::Conv(c) => c.neuron_macs(index),
            Layer::Linear(l) => l.in_features() as u64,
            _ => 0,
        }
    }
}

/// Dense activation tensor, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: TensorShape,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: TensorShape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.neuron_count() {
            return Err(Error::Bounds(format!(
                "tensor data has {} elements, shape {shape} needs {}",
                data.len(),
                shape.neuron_count()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: TensorShape) -> Self {
        Self { shape, data: vec![0.0; shape.neuron_count()] }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs() as f64))
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub input_shape: TensorShape,
    pub precision: Precision,
    pub layers: Vec<Layer>,
}

impl Model {
    /// Validates shape chaining and per-layer parameters.
    pub fn new(input_shape: TensorShape, precision: Precision, layers: Vec<Layer>) -> Result<Self> {
        let model = Self { input_shape, precision, layers };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        self.input_shape.validate()?;
        if self.layers.is_empty() {
            return Err(Error::Structural { layer: 0, message: "model has no layers".into() });
        }
        let mut prev = self.input_shape;
        for (i, layer) in self.layers.iter().enumerate() {
            let structural = |message: String| Error::Structural { layer: i, message };
            if layer.in_shape() != prev {
                return Err(structural(format!(
                    "{} expects input {} but previous output is {prev}",
                    layer.kind(),
                    layer.in_shape()
                )));
            }
            match layer {
                Layer::Conv(c) => {
                    c.check_params().map_err(|e| structural(e.to_string()))?;
                    let oh = conv_output_dim(c.in_shape.height, c.kernel.0, c.stride, c.padding);
                    let ow = conv_output_dim(c.in_shape.width, c.kernel.1, c.stride, c.padding);
                    if oh != Some(c.out_shape.height) || ow != Some(c.out_shape.width) {
                        return Err(structural(format!(
                            "conv output {} inconsistent with kernel/stride/padding (expected {:?}x{:?})",
                            c.out_shape, oh, ow
                        )));
                    }
                }
                Layer::Linear(l) => l.check_params().map_err(|e| structural(e.to_string()))?,
                Layer::ResidualAdd { from, shape } => {
                    if *from >= i {
                        return Err(structural(format!("residual_add references layer {from} which is not earlier")));
                    }
                    let src = self.layers[*from].out_shape();
                    if src != *shape {
                        return Err(structural(format!("residual_add operands differ: {src} vs {shape}")));
                    }
                }
                Layer::GlobalAvgPool { .. } => {}
                Layer::BatchNorm(b) => {
                    let n = b.shape.channels;
                    if [b.gamma.len(), b.beta.len(), b.mean.len(), b.var.len()].iter().any(|&l| l != n) {
                        return Err(structural(format!("batchnorm parameters must have {n} channels")));
                    }
                }
            }
            if let Some(w) = layer.weights() {
                if w.precision() != self.precision {
                    return Err(structural(format!(
                        "weights are {} but model precision is {}",
                        w.precision(),
                        self.precision
                    )));
                }
                if self.precision == Precision::Int8 && layer.scales().is_none() {
                    return Err(structural("int8 layer without activation scales".into()));
                }
            }
            prev = layer.out_shape();
        }
        Ok(())
    }

    pub fn output_shape(&self) -> TensorShape {
        self.layers.last().map(Layer::out_shape).unwrap_or(self.input_shape)
    }

    /// Shape of the tensor feeding layer `i`.
    pub fn layer_input_shape(&self, i: usize) -> TensorShape {
        if i == 0 {
            self.input_shape
        } else {
            self.layers[i - 1].out_shape()
        }
    }

    pub fn splittable_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.layers[i].is_splittable()).collect()
    }

    pub fn count_kind(&self, kind: &str) -> usize {
        self.layers.iter().filter(|l| l.kind() == kind).count()
    }

    /// Bytes of weights plus 4-byte biases at the active precision.
    pub fn weight_bytes(&self) -> usize {
        let eb = self.precision.element_bytes();
        self.layers
            .iter()
            .filter_map(|l| Some(l.weights()?.len() * eb + l.bias()?.len() * 4))
            .sum()
    }

    /// Indices of layers whose outputs feed a residual add.
    pub fn skip_sources(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .layers
            .iter()
            .filter_map(|l| match l {
                Layer::ResidualAdd { from, .. } => Some(*from),
                _ => None,
            })
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Bytes of all splittable-layer outputs at the active precision.
    pub fn splittable_output_bytes(&self) -> usize {
        let eb = self.precision.element_bytes();
        self.layers.iter().filter(|l| l.is_splittable()).map(|l| l.out_shape().neuron_count() * eb).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.layers
            .iter()
            .filter(|l| l.is_splittable())
            .map(|l| l.range_macs(0..l.out_shape().neuron_count()))
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(in_shape: TensorShape, oc: usize, k: usize, s: usize, p: usize) -> ConvLayer {
        let kl = in_shape.channels * k * k;
        ConvLayer::new(in_shape, oc, (k, k), s, p, false, vec![0.1; oc * kl], vec![0.0; oc], Activation::None)
            .unwrap()
    }

    #[test]
    fn conv_output_shape_follows_formula() {
        let c = conv(TensorShape::new(3, 8, 8).unwrap(), 16, 3, 1, 1);
        assert_eq!(c.out_shape, TensorShape::new(16, 8, 8).unwrap());
        let c = conv(TensorShape::new(3, 112, 112).unwrap(), 32, 3, 2, 1);
        assert_eq!(c.out_shape, TensorShape::new(32, 56, 56).unwrap());
    }

    #[test]
    fn index_roundtrip() {
        let s = TensorShape::new(3, 5, 7).unwrap();
        for i in 0..s.neuron_count() {
            let (c, h, w) = s.coords(i);
            assert_eq!(s.index(c, h, w), i);
        }
    }

    #[test]
    fn chain_mismatch_is_structural() {
        let a = conv(TensorShape::new(3, 8, 8).unwrap(), 4, 3, 1, 1);
        let b = conv(TensorShape::new(5, 8, 8).unwrap(), 4, 3, 1, 1);
        let err = Model::new(a.in_shape, Precision::Float32, vec![Layer::Conv(a), Layer::Conv(b)]).unwrap_err();
        assert!(matches!(err, Error::Structural { layer: 1, .. }), "{err}");
    }

    #[test]
    fn declared_bad_out_shape_rejected() {
        let mut a = conv(TensorShape::new(3, 8, 8).unwrap(), 4, 3, 1, 1);
        a.out_shape.height = 9;
        let err = Model::new(a.in_shape, Precision::Float32, vec![Layer::Conv(a)]).unwrap_err();
        assert!(matches!(err, Error::Structural { layer: 0, .. }));
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(TensorShape::new(0, 1, 1).is_err());
    }

    #[test]
    fn activations() {
        assert_eq!(Activation::Relu6.apply(9.0), 6.0);
        assert_eq!(Activation::Relu6.apply(-1.0), 0.0);
        assert_eq!(Activation::Relu.apply(9.0), 9.0);
        assert_eq!(Activation::None.apply(-2.5), -2.5);
    }
}
