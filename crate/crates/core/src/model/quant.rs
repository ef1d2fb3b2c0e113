use super::{synth, ActivationScales, Layer, Model, Precision, Tensor, Weights};
use crate::error::{Error, Result};
use crate::oracle;

/// Symmetric per-tensor int8 values with zero point 0.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub values: Vec<i8>,
    pub scale: f32,
}

impl QuantizedTensor {
    pub fn dequantize(&self) -> Vec<f32> {
        self.values.iter().map(|&q| q as f32 * self.scale).collect()
    }
}

/// `scale = max_abs / 127`; an all-zero tensor gets scale 1.
pub fn scale_for(max_abs: f64) -> f32 {
    if max_abs > 0.0 && max_abs.is_finite() {
        (max_abs / 127.0) as f32
    } else {
        1.0
    }
}

#[inline]
pub(crate) fn quantize_value(x: f64, scale: f32) -> i8 {
    (x / scale as f64).round().clamp(-127.0, 127.0) as i8
}

pub fn quantize_tensor(values: &[f32]) -> QuantizedTensor {
    let max_abs = values.iter().fold(0.0f64, |m, v| m.max(v.abs() as f64));
    let scale = scale_for(max_abs);
    QuantizedTensor { values: values.iter().map(|&v| quantize_value(v as f64, scale)).collect(), scale }
}

/// Quantizes weights to int8 and calibrates activation scales on a seeded
/// synthetic input drawn uniformly from [-1, 1].
pub fn quantize(model: &Model) -> Result<Model> {
    let input = synth::random_input(model.input_shape, 0);
    quantize_with_calibration(model, &[input])
}

/// Quantizes weights and calibrates per-layer activation scales as the max
/// magnitude observed over `calibration` inputs in a float forward pass.
pub fn quantize_with_calibration(model: &Model, calibration: &[Tensor]) -> Result<Model> {
    if model.precision != Precision::Float32 {
        return Err(Error::Domain("model is already quantized".into()));
    }
    if calibration.is_empty() {
        return Err(Error::Domain("quantization needs at least one calibration input".into()));
    }
    let n = model.layers.len();
    let mut in_max = vec![0.0f64; n];
    let mut out_max = vec![0.0f64; n];
    for input in calibration {
        let dense = oracle::reference_forward(model, input)?;
        for i in 0..n {
            let inp = if i == 0 { &dense.input } else { &dense.activations[i - 1] };
            in_max[i] = in_max[i].max(inp.iter().fold(0.0, |m, v| m.max(v.abs())));
            out_max[i] = out_max[i].max(dense.activations[i].iter().fold(0.0, |m, v| m.max(v.abs())));
        }
    }

    let mut layers = model.layers.clone();
    for (i, layer) in layers.iter_mut().enumerate() {
        let scales = ActivationScales { input_scale: scale_for(in_max[i]), output_scale: scale_for(out_max[i]) };
        let (weights, slot) = match layer {
            Layer::Conv(c) => (&mut c.weights, &mut c.scales),
            Layer::Linear(l) => (&mut l.weights, &mut l.scales),
            _ => continue,
        };
        let Weights::F32(w) = weights else { unreachable!("float model holds float weights") };
        let q = quantize_tensor(w);
        *weights = Weights::I8 { values: q.values, scale: q.scale };
        *slot = Some(scales);
    }
    Model::new(model.input_shape, Precision::Int8, layers)
}
