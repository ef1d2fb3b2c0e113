//! Self-contained JSON model description.
//!
//! Tensors are either inline number arrays or base64 blocks of little-endian
//! `f32` / `i8` values. Large tensors are written as blocks.

use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{
    conv_output_dim, Activation, ActivationScales, BatchNormLayer, ConvLayer, Layer, LinearLayer, Model, Precision,
    TensorShape, Weights, DEFAULT_BN_EPS,
};
use crate::error::{Error, Result};

const KNOWN_KINDS: [&str; 5] = ["conv", "linear", "residual_add", "gap", "batchnorm"];

/// Tensors above this many elements are written as base64 blocks.
const INLINE_LIMIT: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Dtype {
    F32,
    I8,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum TensorData {
    Inline(Vec<f32>),
    Blob { b64: String, dtype: Dtype },
}

impl TensorData {
    fn decode(&self) -> Result<Vec<f32>> {
        match self {
            TensorData::Inline(v) => Ok(v.clone()),
            TensorData::Blob { b64, dtype } => {
                let bytes = B64.decode(b64).map_err(|e| Error::Parse(format!("bad base64 tensor: {e}")))?;
                match dtype {
                    Dtype::F32 => {
                        if bytes.len() % 4 != 0 {
                            return Err(Error::Parse("f32 block length is not a multiple of 4".into()));
                        }
                        Ok(bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect())
                    }
                    Dtype::I8 => Ok(bytes.iter().map(|&b| b as i8 as f32).collect()),
                }
            }
        }
    }

    fn from_f32(v: &[f32]) -> Self {
        if v.len() <= INLINE_LIMIT {
            TensorData::Inline(v.to_vec())
        } else {
            let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
            TensorData::Blob { b64: B64.encode(bytes), dtype: Dtype::F32 }
        }
    }

    fn from_i8(v: &[i8]) -> Self {
        if v.len() <= INLINE_LIMIT {
            TensorData::Inline(v.iter().map(|&q| q as f32).collect())
        } else {
            TensorData::Blob { b64: B64.encode(v.iter().map(|&q| q as u8).collect::<Vec<_>>()), dtype: Dtype::I8 }
        }
    }
}

fn default_stride() -> usize {
    1
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LayerDoc {
    Conv {
        kernel: [usize; 2],
        #[serde(default = "default_stride")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default)]
        depthwise: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        out_channels: Option<usize>,
        #[serde(default)]
        activation: Activation,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        out_shape: Option<TensorShape>,
        weights: TensorData,
        bias: TensorData,
        #[serde(flatten)]
        quant: QuantDoc,
    },
    Linear {
        out_features: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        in_features: Option<usize>,
        #[serde(default)]
        activation: Activation,
        weights: TensorData,
        bias: TensorData,
        #[serde(flatten)]
        quant: QuantDoc,
    },
    ResidualAdd {
        from: usize,
    },
    Gap,
    Batchnorm {
        gamma: Vec<f32>,
        beta: Vec<f32>,
        mean: Vec<f32>,
        var: Vec<f32>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        eps: Option<f32>,
        #[serde(default)]
        activation: Activation,
    },
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct QuantDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight_scale: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    input_scale: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    output_scale: Option<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelDoc {
    input_shape: TensorShape,
    #[serde(default)]
    quantization: Precision,
    layers: Vec<Value>,
}

/// Reads a model description file into the internal representation.
pub fn reinterpret(path: impl AsRef<Path>) -> Result<Model> {
    let text = std::fs::read_to_string(path)?;
    reinterpret_str(&text)
}

pub fn reinterpret_str(text: &str) -> Result<Model> {
    let doc: ModelDoc = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    doc.input_shape.validate()?;
    let mut layers: Vec<Layer> = Vec::with_capacity(doc.layers.len());
    let mut prev = doc.input_shape;
    for (i, raw) in doc.layers.into_iter().enumerate() {
        let kind = raw.get("kind").and_then(Value::as_str).unwrap_or("<missing>").to_string();
        if !KNOWN_KINDS.contains(&kind.as_str()) {
            return Err(Error::UnsupportedOperator { layer: i, kind });
        }
        let parsed: LayerDoc =
            serde_json::from_value(raw).map_err(|e| Error::Parse(format!("layer {i} ({kind}): {e}")))?;
        let layer = build_layer(i, parsed, prev, doc.quantization, &layers)?;
        prev = layer.out_shape();
        layers.push(layer);
    }
    Model::new(doc.input_shape, doc.quantization, layers)
}

fn weights_for(data: &TensorData, precision: Precision, scale: Option<f32>, layer: usize) -> Result<Weights> {
    let values = data.decode()?;
    match precision {
        Precision::Float32 => Ok(Weights::F32(values)),
        Precision::Int8 => {
            let scale = scale.ok_or_else(|| Error::Structural { layer, message: "int8 weights need weight_scale".into() })?;
            let q = values
                .iter()
                .map(|&v| {
                    if v.fract() == 0.0 && (-127.0..=127.0).contains(&v) {
                        Ok(v as i8)
                    } else {
                        Err(Error::Structural { layer, message: format!("{v} is not an int8 weight") })
                    }
                })
                .collect::<Result<Vec<i8>>>()?;
            Ok(Weights::I8 { values: q, scale })
        }
    }
}

fn scales_for(q: &QuantDoc, precision: Precision, layer: usize) -> Result<Option<ActivationScales>> {
    match (precision, q.input_scale, q.output_scale) {
        (Precision::Float32, _, _) => Ok(None),
        (Precision::Int8, Some(input_scale), Some(output_scale)) => Ok(Some(ActivationScales { input_scale, output_scale })),
        _ => Err(Error::Structural { layer, message: "int8 layer needs input_scale and output_scale".into() }),
    }
}

fn build_layer(i: usize, doc: LayerDoc, prev: TensorShape, precision: Precision, built: &[Layer]) -> Result<Layer> {
    let structural = |message: String| Error::Structural { layer: i, message };
    Ok(match doc {
        LayerDoc::Conv { kernel, stride, padding, depthwise, out_channels, activation, out_shape, weights, bias, quant } => {
            let oc = match (depthwise, out_channels) {
                (true, Some(n)) if n != prev.channels => {
                    return Err(structural(format!("depthwise conv declares {n} channels, input has {}", prev.channels)))
                }
                (true, _) => prev.channels,
                (false, Some(n)) => n,
                (false, None) => return Err(structural("conv needs out_channels".into())),
            };
            let oh = conv_output_dim(prev.height, kernel[0], stride, padding);
            let ow = conv_output_dim(prev.width, kernel[1], stride, padding);
            let (Some(oh), Some(ow)) = (oh, ow) else {
                return Err(structural(format!("kernel {kernel:?} stride {stride} padding {padding} does not fit {prev}")));
            };
            let derived = TensorShape::new(oc, oh, ow)?;
            if let Some(declared) = out_shape {
                if declared != derived {
                    return Err(structural(format!("declared output {declared} but shape formula gives {derived}")));
                }
            }
            Layer::Conv(ConvLayer {
                in_shape: prev,
                out_shape: derived,
                kernel: (kernel[0], kernel[1]),
                stride,
                padding,
                depthwise,
                weights: weights_for(&weights, precision, quant.weight_scale, i)?,
                bias: bias.decode()?,
                activation,
                scales: scales_for(&quant, precision, i)?,
            })
        }
        LayerDoc::Linear { out_features, in_features, activation, weights, bias, quant } => {
            if let Some(n) = in_features {
                if n != prev.neuron_count() {
                    return Err(structural(format!("linear declares {n} inputs, previous layer yields {}", prev.neuron_count())));
                }
            }
            Layer::Linear(LinearLayer {
                in_shape: prev,
                out_features,
                weights: weights_for(&weights, precision, quant.weight_scale, i)?,
                bias: bias.decode()?,
                activation,
                scales: scales_for(&quant, precision, i)?,
            })
        }
        LayerDoc::ResidualAdd { from } => {
            if from >= built.len() {
                return Err(structural(format!("residual_add references layer {from} which is not earlier")));
            }
            Layer::ResidualAdd { from, shape: prev }
        }
        LayerDoc::Gap => Layer::GlobalAvgPool { in_shape: prev },
        LayerDoc::Batchnorm { gamma, beta, mean, var, eps, activation } => Layer::BatchNorm(BatchNormLayer {
            shape: prev,
            gamma,
            beta,
            mean,
            var,
            eps: eps.unwrap_or(DEFAULT_BN_EPS),
            activation,
        }),
    })
}

fn weights_doc(w: &Weights) -> (TensorData, Option<f32>) {
    match w {
        Weights::F32(v) => (TensorData::from_f32(v), None),
        Weights::I8 { values, scale } => (TensorData::from_i8(values), Some(*scale)),
    }
}

fn quant_doc(weight_scale: Option<f32>, scales: Option<ActivationScales>) -> QuantDoc {
    QuantDoc {
        weight_scale,
        input_scale: scales.map(|s| s.input_scale),
        output_scale: scales.map(|s| s.output_scale),
    }
}

impl Model {
    /// Serializes to the model description format read by [`reinterpret`].
    pub fn to_json(&self) -> Result<String> {
        let layers = self
            .layers
            .iter()
            .map(|layer| {
                let doc = match layer {
                    Layer::Conv(c) => {
                        let (weights, ws) = weights_doc(&c.weights);
                        LayerDoc::Conv {
                            kernel: [c.kernel.0, c.kernel.1],
                            stride: c.stride,
                            padding: c.padding,
                            depthwise: c.depthwise,
                            out_channels: Some(c.out_shape.channels),
                            activation: c.activation,
                            out_shape: None,
                            weights,
                            bias: TensorData::from_f32(&c.bias),
                            quant: quant_doc(ws, c.scales),
                        }
                    }
                    Layer::Linear(l) => {
                        let (weights, ws) = weights_doc(&l.weights);
                        LayerDoc::Linear {
                            out_features: l.out_features,
                            in_features: None,
                            activation: l.activation,
                            weights,
                            bias: TensorData::from_f32(&l.bias),
                            quant: quant_doc(ws, l.scales),
                        }
                    }
                    Layer::ResidualAdd { from, .. } => LayerDoc::ResidualAdd { from: *from },
                    Layer::GlobalAvgPool { .. } => LayerDoc::Gap,
                    Layer::BatchNorm(b) => LayerDoc::Batchnorm {
                        gamma: b.gamma.clone(),
                        beta: b.beta.clone(),
                        mean: b.mean.clone(),
                        var: b.var.clone(),
                        eps: Some(b.eps),
                        activation: b.activation,
                    },
                };
                serde_json::to_value(doc)
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let doc = ModelDoc { input_shape: self.input_shape, quantization: self.precision, layers };
        Ok(serde_json::to_string(&doc)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::synth;

    const ONE_CONV: &str = r#"{
        "input_shape": [3, 8, 8],
        "quantization": "float32",
        "layers": [
            {"kind": "conv", "kernel": [3, 3], "stride": 1, "padding": 1, "depthwise": false,
             "out_channels": 16, "activation": "relu6",
             "weights": {"b64": "", "dtype": "f32"}, "bias": []}
        ]
    }"#;

    fn one_conv_doc() -> String {
        let w = vec![0.25f32; 16 * 27];
        let bytes: Vec<u8> = w.iter().flat_map(|x| x.to_le_bytes()).collect();
        ONE_CONV
            .replace(r#""b64": """#, &format!(r#""b64": "{}""#, B64.encode(bytes)))
            .replace(r#""bias": []"#, &format!(r#""bias": {:?}"#, vec![0.0f32; 16]))
    }

    #[test]
    fn one_conv_layer_shape() {
        let m = reinterpret_str(&one_conv_doc()).unwrap();
        assert_eq!(m.output_shape(), TensorShape::new(16, 8, 8).unwrap());
        assert_eq!(m.layers[0].activation(), Activation::Relu6);
        assert_eq!(m.layers[0].weights().unwrap().get(5), 0.25);
    }

    #[test]
    fn declared_out_shape_mismatch() {
        let doc = one_conv_doc().replace(r#""out_channels": 16,"#, r#""out_channels": 16, "out_shape": [16, 9, 8],"#);
        let err = reinterpret_str(&doc).unwrap_err();
        assert!(matches!(err, Error::Structural { layer: 0, .. }), "{err}");
    }

    #[test]
    fn unknown_kind_is_unsupported() {
        let doc = r#"{"input_shape":[1,2,2],"layers":[{"kind":"lstm"}]}"#;
        assert!(matches!(reinterpret_str(doc), Err(Error::UnsupportedOperator { layer: 0, .. })));
    }

    #[test]
    fn linear_input_mismatch() {
        let doc = r#"{"input_shape":[1,2,2],"layers":[{"kind":"linear","in_features":5,"out_features":1,"weights":[1,1,1,1,1],"bias":[0]}]}"#;
        assert!(matches!(reinterpret_str(doc), Err(Error::Structural { layer: 0, .. })));
    }

    #[test]
    fn roundtrip_preserves_model() {
        for m in [synth::tiny_cnn(7), crate::model::quantize(&synth::tiny_cnn(7)).unwrap()] {
            let back = reinterpret_str(&m.to_json().unwrap()).unwrap();
            assert_eq!(back, m);
        }
    }

    #[test]
    fn missing_bn_eps_defaults() {
        let doc = r#"{"input_shape":[1,1,1],"layers":[
            {"kind":"conv","kernel":[1,1],"out_channels":1,"weights":[1],"bias":[0]},
            {"kind":"batchnorm","gamma":[1],"beta":[0],"mean":[0],"var":[1]}]}"#;
        let m = reinterpret_str(doc).unwrap();
        let Layer::BatchNorm(bn) = &m.layers[1] else { panic!() };
        assert_eq!(bn.eps, DEFAULT_BN_EPS);
    }
}
