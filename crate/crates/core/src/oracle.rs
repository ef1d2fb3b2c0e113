//! Dense single-node reference inference and brute-force checkers.
//!
//! Everything here is written from the textbook definitions of each operator,
//! independently of the receptive-field and routing code it is used to check.
//! Int8 models have two references: [`reference_forward`] evaluates them
//! with dequantized weights and unquantized activations, with
//! [`int8_error_bound`] bounding the drift of quantized execution from it,
//! and [`quantized_forward`] emulates the quantized arithmetic densely so a
//! distributed int8 run can be checked to within one output step.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::quant::quantize_value;
use crate::model::{Activation, ConvLayer, Layer, LinearLayer, Model, Precision, Tensor, TensorShape, Weights};

/// Every intermediate tensor of a dense forward pass, in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseActivations {
    pub input: Vec<f64>,
    /// `activations[i]` is the output of layer `i`.
    pub activations: Vec<Vec<f64>>,
    pub shapes: Vec<TensorShape>,
}

impl DenseActivations {
    pub fn output(&self) -> &[f64] {
        self.activations.last().map(Vec::as_slice).unwrap_or(&self.input)
    }

    pub fn output_tensor(&self) -> Tensor {
        let shape = *self.shapes.last().expect("model has layers");
        Tensor { shape, data: self.output().iter().map(|&v| v as f32).collect() }
    }
}

pub fn conv_forward(conv: &ConvLayer, x: &[f64]) -> Vec<f64> {
    let (is, os) = (conv.in_shape, conv.out_shape);
    let mut y = vec![0.0; os.neuron_count()];
    let kic = conv.kernel_in_channels();
    for oc in 0..os.channels {
        for oh in 0..os.height {
            for ow in 0..os.width {
                let mut acc = conv.bias[oc] as f64;
                for kc in 0..kic {
                    let ic = if conv.depthwise { oc } else { kc };
                    for ky in 0..conv.kernel.0 {
                        for kx in 0..conv.kernel.1 {
                            let iy = (oh * conv.stride + ky) as isize - conv.padding as isize;
                            let ix = (ow * conv.stride + kx) as isize - conv.padding as isize;
                            if iy < 0 || ix < 0 || iy as usize >= is.height || ix as usize >= is.width {
                                continue;
                            }
                            let w = conv.weights.get(conv.weight_index(oc, kc, ky, kx));
                            acc += w * x[is.index(ic, iy as usize, ix as usize)];
                        }
                    }
                }
                y[os.index(oc, oh, ow)] = conv.activation.apply(acc);
            }
        }
    }
    y
}

pub fn linear_forward(lin: &LinearLayer, x: &[f64]) -> Vec<f64> {
    (0..lin.out_features)
        .map(|o| {
            let acc = (0..lin.in_features()).fold(lin.bias[o] as f64, |a, r| a + lin.weights.get(lin.weight_index(r, o)) * x[r]);
            lin.activation.apply(acc)
        })
        .collect()
}

/// Evaluates layer `i` given its input and all earlier outputs.
pub(crate) fn layer_forward(layer: &Layer, x: &[f64], earlier: &[Vec<f64>]) -> Vec<f64> {
    match layer {
        Layer::Conv(c) => conv_forward(c, x),
        Layer::Linear(l) => linear_forward(l, x),
        Layer::ResidualAdd { from, .. } => x.iter().zip(&earlier[*from]).map(|(a, b)| a + b).collect(),
        Layer::GlobalAvgPool { in_shape } => {
            let plane = in_shape.plane();
            x.chunks(plane).map(|ch| ch.iter().sum::<f64>() / plane as f64).collect()
        }
        Layer::BatchNorm(bn) => {
            let plane = bn.shape.plane();
            x.iter()
                .enumerate()
                .map(|(i, &v)| {
                    let c = i / plane;
                    let norm = (v - bn.mean[c] as f64) / (bn.var[c] as f64 + bn.eps as f64).sqrt();
                    bn.activation.apply(norm * bn.gamma[c] as f64 + bn.beta[c] as f64)
                })
                .collect()
        }
    }
}

/// Dense evaluation of the whole model with f64 accumulation.
pub fn reference_forward(model: &Model, input: &Tensor) -> Result<DenseActivations> {
    let x0 = checked_input(model, input)?;
    let mut activations: Vec<Vec<f64>> = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let x = activations.last().unwrap_or(&x0);
        let y = layer_forward(layer, x, &activations);
        activations.push(y);
    }
    let shapes = model.layers.iter().map(Layer::out_shape).collect();
    Ok(DenseActivations { input: x0, activations, shapes })
}

/// Dense emulation of int8 inference: every splittable layer quantizes its
/// input with its input scale, accumulates integer products, rescales, adds
/// the bias, applies the activation and quantizes with its output scale.
/// Glue layers run on dequantized values. Returns the dequantized output.
pub fn quantized_forward(model: &Model, input: &Tensor) -> Result<Vec<f64>> {
    if model.precision != Precision::Int8 {
        return Err(Error::Domain("quantized_forward needs an int8 model".into()));
    }
    let dense_input = checked_input(model, input)?;
    let mut outputs: Vec<Vec<f64>> = Vec::with_capacity(model.layers.len());
    for (i, layer) in model.layers.iter().enumerate() {
        let x = outputs.last().unwrap_or(&dense_input);
        let y = match layer {
            Layer::Conv(_) | Layer::Linear(_) => {
                let scales = layer
                    .scales()
                    .ok_or_else(|| Error::Domain(format!("layer {i} has no int8 activation scales")))?;
                let Some(Weights::I8 { values, scale }) = layer.weights() else {
                    return Err(Error::Domain(format!("layer {i} weights are not int8")));
                };
                let xq: Vec<i64> = x.iter().map(|&v| quantize_value(v, scales.input_scale) as i64).collect();
                let acc = match layer {
                    Layer::Conv(c) => conv_accumulate_int(c, values, &xq),
                    Layer::Linear(l) => (0..l.out_features)
                        .map(|o| (0..l.in_features()).map(|r| values[l.weight_index(r, o)] as i64 * xq[r]).sum())
                        .collect(),
                    _ => unreachable!(),
                };
                let rescale = *scale as f64 * scales.input_scale as f64;
                let bias = layer.bias().expect("splittable layer has a bias");
                let plane = layer.out_shape().plane();
                acc.iter()
                    .enumerate()
                    .map(|(o, &a)| {
                        let b = bias[if matches!(layer, Layer::Conv(_)) { o / plane } else { o }] as f64;
                        let q = quantize_value(layer.activation().apply(a as f64 * rescale + b), scales.output_scale);
                        q as f64 * scales.output_scale as f64
                    })
                    .collect()
            }
            _ => layer_forward(layer, x, &outputs),
        };
        outputs.push(y);
    }
    Ok(outputs.pop().unwrap_or(dense_input))
}

fn checked_input(model: &Model, input: &Tensor) -> Result<Vec<f64>> {
    if input.shape != model.input_shape || input.data.len() != model.input_shape.neuron_count() {
        return Err(Error::Bounds(format!(
            "input has shape {} ({} values), model expects {}",
            input.shape,
            input.data.len(),
            model.input_shape
        )));
    }
    Ok(input.to_f64())
}

fn conv_accumulate_int(conv: &ConvLayer, w: &[i8], x: &[i64]) -> Vec<i64> {
    let (is, os) = (conv.in_shape, conv.out_shape);
    let mut y = vec![0i64; os.neuron_count()];
    let kic = conv.kernel_in_channels();
    for oc in 0..os.channels {
        for oh in 0..os.height {
            for ow in 0..os.width {
                let mut acc = 0i64;
                for kc in 0..kic {
                    let ic = if conv.depthwise { oc } else { kc };
                    for ky in 0..conv.kernel.0 {
                        for kx in 0..conv.kernel.1 {
                            let iy = (oh * conv.stride + ky) as isize - conv.padding as isize;
                            let ix = (ow * conv.stride + kx) as isize - conv.padding as isize;
                            if iy < 0 || ix < 0 || iy as usize >= is.height || ix as usize >= is.width {
                                continue;
                            }
                            acc += w[conv.weight_index(oc, kc, ky, kx)] as i64 * x[is.index(ic, iy as usize, ix as usize)];
                        }
                    }
                }
                y[os.index(oc, oh, ow)] = acc;
            }
        }
    }
    y
}

/// One output quantization step of the last splittable layer: the int8
/// tolerance between a distributed run and [`quantized_forward`].
pub fn int8_output_step(model: &Model) -> f64 {
    model.layers.iter().rev().find_map(|l| l.scales()).map_or(0.0, |s| s.output_scale as f64)
}

/// How a split output is compared with the oracle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum EquivalenceMode {
    /// `max|a - b| / max|b| <= rel_tol` (absolute when the reference is all zero).
    Float { rel_tol: f64 },
    /// `|a - b| <= bound` for every element.
    Int8 { bound: f64 },
}

impl EquivalenceMode {
    pub const FLOAT_DEFAULT: Self = EquivalenceMode::Float { rel_tol: 1e-5 };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub pass: bool,
    /// Relative error in float mode, absolute error in int8 mode.
    pub max_error: f64,
    /// Element where the largest absolute difference occurs.
    pub worst_index: Option<usize>,
    pub tolerance: f64,
    pub message: String,
}

pub fn check_equivalence(split: &[f64], oracle: &[f64], mode: EquivalenceMode) -> Verdict {
    if split.len() != oracle.len() {
        return Verdict {
            pass: false,
            max_error: f64::INFINITY,
            worst_index: None,
            tolerance: 0.0,
            message: format!("structural mismatch: {} values vs {} expected", split.len(), oracle.len()),
        };
    }
    let mut worst = (-1.0f64, None);
    for (i, (a, b)) in split.iter().zip(oracle).enumerate() {
        let d = (a - b).abs();
        let d = if d.is_nan() { f64::INFINITY } else { d };
        if d > worst.0 {
            worst = (d, Some(i));
        }
    }
    let worst = (worst.0.max(0.0), worst.1);
    let (abs_err, worst_index) = worst;
    let (max_error, tolerance) = match mode {
        EquivalenceMode::Float { rel_tol } => {
            let scale = oracle.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            (if scale > 0.0 { abs_err / scale } else { abs_err }, rel_tol)
        }
        EquivalenceMode::Int8 { bound } => (abs_err, bound),
    };
    let pass = max_error <= tolerance;
    let message = if pass {
        format!("equivalent: max error {max_error:.3e} <= {tolerance:.3e}")
    } else {
        format!("mismatch at index {}: error {max_error:.3e} > {tolerance:.3e}", worst_index.unwrap_or(0))
    };
    Verdict { pass, max_error, worst_index, tolerance, message }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Extra error when values up to `magnitude` are clamped at `±127·scale`.
fn clip_excess(magnitude: f64, scale: f64) -> f64 {
    (magnitude - 127.0 * scale).max(0.0)
}

/// Worst-case absolute error of an int8 distributed execution relative to
/// [`reference_forward`] of the same quantized model, per layer output.
///
/// Each splittable layer adds half an input step (re-quantization at the
/// coordinator), amplified by the largest kernel L1 norm, plus half an output
/// step; residual adds sum their operands' errors and pooling does not grow
/// them. Clamping beyond the calibrated range is accounted for explicitly.
pub fn int8_error_bound(model: &Model, reference: &DenseActivations) -> Result<Vec<f64>> {
    let mut errors: Vec<f64> = Vec::with_capacity(model.layers.len());
    for (i, layer) in model.layers.iter().enumerate() {
        let e_prev = errors.last().copied().unwrap_or(0.0);
        let x = if i == 0 { &reference.input } else { &reference.activations[i - 1] };
        let e = match layer {
            Layer::Conv(_) | Layer::Linear(_) => {
                let scales = layer
                    .scales()
                    .ok_or_else(|| Error::Domain(format!("layer {i} has no int8 activation scales")))?;
                let (s_in, s_out) = (scales.input_scale as f64, scales.output_scale as f64);
                let e_in = e_prev + s_in / 2.0 + clip_excess(max_abs(x) + e_prev, s_in);
                let gain = kernel_l1_max(layer);
                let e_pre = gain * e_in;
                let y = &reference.activations[i];
                // Rescaling with f32 scales and storing dequantized values in f32.
                let rounding = 1e-6 * (max_abs(y) + e_pre);
                e_pre + s_out / 2.0 + clip_excess(max_abs(y) + e_pre, s_out) + rounding
            }
            Layer::ResidualAdd { from, .. } => e_prev + errors[*from],
            Layer::GlobalAvgPool { .. } => e_prev,
            Layer::BatchNorm(bn) => {
                let gain = (0..bn.shape.channels)
                    .map(|c| (bn.gamma[c] as f64 / (bn.var[c] as f64 + bn.eps as f64).sqrt()).abs())
                    .fold(0.0, f64::max);
                e_prev * gain
            }
        };
        errors.push(e);
    }
    Ok(errors)
}

/// Largest L1 norm of the weights feeding one output neuron.
fn kernel_l1_max(layer: &Layer) -> f64 {
    match layer {
        Layer::Conv(c) => {
            let kl = c.kernel_len();
            (0..c.out_shape.channels)
                .map(|oc| (oc * kl..(oc + 1) * kl).map(|k| c.weights.get(k).abs()).sum::<f64>())
                .fold(0.0, f64::max)
        }
        Layer::Linear(l) => (0..l.out_features)
            .map(|o| (0..l.in_features()).map(|r| l.weights.get(l.weight_index(r, o)).abs()).sum::<f64>())
            .fold(0.0, f64::max),
        _ => 1.0,
    }
}

/// Copy of a splittable layer with generic weights: magnitudes in [0.5, 1]
/// with random sign, zero bias, no activation. Exact cancellation is then
/// vanishingly unlikely, so every true dependency shows up as a change.
fn probe_layer(layer: &Layer, rng: &mut ChaCha8Rng) -> Result<Layer> {
    let mut generic = |n: usize| -> Weights {
        Weights::F32(
            (0..n)
                .map(|_| {
                    let m: f32 = rng.random_range(0.5..=1.0);
                    if rng.random_bool(0.5) {
                        m
                    } else {
                        -m
                    }
                })
                .collect(),
        )
    };
    match layer {
        Layer::Conv(c) => {
            let mut p = c.clone();
            p.weights = generic(c.weights.len());
            p.bias.iter_mut().for_each(|b| *b = 0.0);
            p.activation = Activation::None;
            Ok(Layer::Conv(p))
        }
        Layer::Linear(l) => {
            let mut p = l.clone();
            p.weights = generic(l.weights.len());
            p.bias.iter_mut().for_each(|b| *b = 0.0);
            p.activation = Activation::None;
            Ok(Layer::Linear(p))
        }
        other => Err(Error::Domain(format!("{} layers have no neuron dependencies", other.kind()))),
    }
}

const PROBE_SEEDS: [u64; 2] = [0x5eed_0001, 0x5eed_0002];

/// Input-neuron sets of every output neuron of `layer`, found by perturbing
/// one input at a time and watching which outputs move. Union over two
/// weight seeds.
pub fn brute_force_layer_dependencies(model: &Model, layer: usize) -> Result<Vec<BTreeSet<usize>>> {
    let target = model
        .layers
        .get(layer)
        .ok_or_else(|| Error::Bounds(format!("layer {layer} not in model ({} layers)", model.layers.len())))?;
    let n_in = target.in_shape().neuron_count();
    let n_out = target.out_shape().neuron_count();
    let mut deps = vec![BTreeSet::new(); n_out];
    for seed in PROBE_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let probe = probe_layer(target, &mut rng)?;
        let base_in: Vec<f64> = (0..n_in).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let base_out = layer_forward(&probe, &base_in, &[]);
        let mut x = base_in.clone();
        for j in 0..n_in {
            x[j] = base_in[j] + 1.0;
            let y = layer_forward(&probe, &x, &[]);
            for (o, (a, b)) in y.iter().zip(&base_out).enumerate() {
                if a != b {
                    deps[o].insert(j);
                }
            }
            x[j] = base_in[j];
        }
    }
    Ok(deps)
}

/// Input-neuron set of one output neuron; see [`brute_force_layer_dependencies`].
pub fn brute_force_dependencies(model: &Model, layer: usize, neuron: usize) -> Result<BTreeSet<usize>> {
    let mut all = brute_force_layer_dependencies(model, layer)?;
    if neuron >= all.len() {
        return Err(Error::Bounds(format!("neuron {neuron} outside layer {layer} ({} outputs)", all.len())));
    }
    Ok(all.swap_remove(neuron))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{fuse_conv_bn_relu, synth, BatchNormLayer, Precision};

    fn shape(c: usize, h: usize, w: usize) -> TensorShape {
        TensorShape::new(c, h, w).unwrap()
    }

    #[test]
    fn identity_conv_passes_input_through() {
        let s = shape(1, 4, 4);
        let conv = ConvLayer::new(s, 1, (1, 1), 1, 0, false, vec![1.0], vec![0.0], Activation::None).unwrap();
        let m = Model::new(s, Precision::Float32, vec![Layer::Conv(conv)]).unwrap();
        let input = synth::random_input(s, 5);
        let out = reference_forward(&m, &input).unwrap();
        assert_eq!(out.output(), out.input.as_slice());
    }

    #[test]
    fn zero_weights_give_bias() {
        let s = shape(2, 3, 3);
        let conv = ConvLayer::new(s, 2, (3, 3), 1, 1, false, vec![0.0; 36], vec![0.25, -0.5], Activation::None).unwrap();
        let m = Model::new(s, Precision::Float32, vec![Layer::Conv(conv)]).unwrap();
        let out = reference_forward(&m, &synth::random_input(s, 1)).unwrap();
        assert!(out.output()[..9].iter().all(|&v| v == 0.25));
        assert!(out.output()[9..].iter().all(|&v| v == -0.5));
    }

    #[test]
    fn shape_mismatch_is_bounds_error() {
        let m = synth::tiny_cnn(0);
        let bad = synth::random_input(shape(1, 4, 4), 0);
        assert!(matches!(reference_forward(&m, &bad), Err(Error::Bounds(_))));
    }

    /// Hand-written nested loops over a 1x4x4 input for a fixed 3-layer CNN.
    #[test]
    fn matches_hand_coded_loops() {
        let s = shape(1, 4, 4);
        let w1: Vec<f32> = (0..18).map(|i| (i as f32 - 9.0) / 10.0).collect(); // 2x1x3x3
        let c1 = ConvLayer::new(s, 2, (3, 3), 1, 1, false, w1.clone(), vec![0.1, -0.1], Activation::Relu).unwrap();
        let w2: Vec<f32> = (0..8).map(|i| (i as f32) / 8.0 - 0.4).collect(); // 1x2x2x2
        let c2 = ConvLayer::new(c1.out_shape, 1, (2, 2), 2, 0, false, w2.clone(), vec![0.05], Activation::None).unwrap();
        let w3: Vec<f32> = vec![0.5, -1.0, 0.25, 2.0, 1.5, -0.5, 1.0, 0.0]; // 4x2
        let l3 = LinearLayer::new(c2.out_shape, 2, w3.clone(), vec![0.0, 1.0], Activation::None).unwrap();
        let m = Model::new(s, Precision::Float32, vec![Layer::Conv(c1), Layer::Conv(c2), Layer::Linear(l3)]).unwrap();
        let input = synth::random_input(s, 9);
        let x: Vec<f64> = input.data.iter().map(|&v| v as f64).collect();

        let mut a1 = [[[0.0f64; 4]; 4]; 2];
        for (oc, plane) in a1.iter_mut().enumerate() {
            for (y, row) in plane.iter_mut().enumerate() {
                for (xx, out) in row.iter_mut().enumerate() {
                    let mut acc = if oc == 0 { 0.1f32 as f64 } else { -0.1f32 as f64 };
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (iy, ix) = (y as i32 + ky as i32 - 1, xx as i32 + kx as i32 - 1);
                            if (0..4).contains(&iy) && (0..4).contains(&ix) {
                                acc += w1[oc * 9 + ky * 3 + kx] as f64 * x[(iy * 4 + ix) as usize];
                            }
                        }
                    }
                    *out = acc.max(0.0);
                }
            }
        }
        let mut a2 = [0.0f64; 4];
        for oy in 0..2 {
            for ox in 0..2 {
                let mut acc = 0.05f32 as f64;
                for (ic, plane) in a1.iter().enumerate() {
                    for ky in 0..2 {
                        for kx in 0..2 {
                            acc += w2[ic * 4 + ky * 2 + kx] as f64 * plane[oy * 2 + ky][ox * 2 + kx];
                        }
                    }
                }
                a2[oy * 2 + ox] = acc;
            }
        }
        let expected: Vec<f64> = (0..2)
            .map(|o| (0..4).fold([0.0f64, 1.0][o], |acc, r| acc + w3[r * 2 + o] as f64 * a2[r]))
            .collect();
        let got = reference_forward(&m, &input).unwrap();
        for (g, e) in got.output().iter().zip(&expected) {
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
    }

    #[test]
    fn fused_and_unfused_agree() {
        let s = shape(2, 5, 5);
        let conv = ConvLayer::new(s, 3, (3, 3), 1, 1, false, (0..54).map(|i| (i % 7) as f32 / 7.0 - 0.4).collect(), vec![0.1, 0.2, 0.3], Activation::None)
            .unwrap();
        let bn = BatchNormLayer {
            shape: conv.out_shape,
            gamma: vec![1.5, 0.5, -1.0],
            beta: vec![0.1, 0.0, 0.2],
            mean: vec![0.3, -0.2, 0.0],
            var: vec![2.0, 0.5, 1.0],
            eps: 1e-5,
            activation: Activation::Relu,
        };
        let m = Model::new(s, Precision::Float32, vec![Layer::Conv(conv), Layer::BatchNorm(bn)]).unwrap();
        let f = fuse_conv_bn_relu(&m).unwrap();
        let input = synth::random_input(s, 3);
        let a = reference_forward(&m, &input).unwrap();
        let b = reference_forward(&f, &input).unwrap();
        assert!(check_equivalence(b.output(), a.output(), EquivalenceMode::FLOAT_DEFAULT).pass);
    }

    #[test]
    fn equivalence_verdicts() {
        let a = vec![1.0, -2.0, 3.0];
        let v = check_equivalence(&a, &a, EquivalenceMode::FLOAT_DEFAULT);
        assert!(v.pass);
        assert_eq!(v.max_error, 0.0);
        let mut b = a.clone();
        b[1] += 1e-2;
        let v = check_equivalence(&b, &a, EquivalenceMode::FLOAT_DEFAULT);
        assert!(!v.pass);
        assert_eq!(v.worst_index, Some(1));
        assert!(!check_equivalence(&a[..2], &a, EquivalenceMode::FLOAT_DEFAULT).pass);
        assert!(check_equivalence(&b, &a, EquivalenceMode::Int8 { bound: 0.02 }).pass);
    }

    #[test]
    fn probe_matches_receptive_field_on_strided_layer() {
        let s = shape(1, 6, 6);
        let conv = ConvLayer::new(s, 2, (3, 3), 2, 1, false, vec![1.0; 18], vec![0.0; 2], Activation::Relu).unwrap();
        let m = Model::new(s, Precision::Float32, vec![Layer::Conv(conv)]).unwrap();
        let deps = brute_force_layer_dependencies(&m, 0).unwrap();
        for (o, set) in deps.iter().enumerate() {
            let (c, h, w) = m.layers[0].out_shape().coords(o);
            let rf: BTreeSet<usize> = m.layers[0].get_input(c, h, w).unwrap().indices().collect();
            assert_eq!(*set, rf, "neuron {o}");
        }
    }

    #[test]
    fn probe_linear_and_depthwise() {
        let s = shape(3, 4, 4);
        let lin = LinearLayer::new(s, 2, vec![0.0; 96], vec![0.0; 2], Activation::None).unwrap();
        let m = Model::new(s, Precision::Float32, vec![Layer::Linear(lin)]).unwrap();
        assert_eq!(brute_force_dependencies(&m, 0, 1).unwrap(), (0..48).collect());

        let dw = ConvLayer::new(s, 3, (3, 3), 1, 1, true, vec![1.0; 27], vec![0.0; 3], Activation::None).unwrap();
        let m = Model::new(s, Precision::Float32, vec![Layer::Conv(dw)]).unwrap();
        let deps = brute_force_dependencies(&m, 0, s.index(2, 1, 1)).unwrap();
        assert_eq!(deps.len(), 9);
        assert!(deps.iter().all(|&j| s.coords(j).0 == 2));
    }

    #[test]
    fn quantized_emulation_within_float_bound() {
        let m = crate::model::quantize(&synth::tiny_cnn(6)).unwrap();
        let input = synth::random_input(m.input_shape, 2);
        let dense = reference_forward(&m, &input).unwrap();
        let bound = *int8_error_bound(&m, &dense).unwrap().last().unwrap();
        let q = quantized_forward(&m, &input).unwrap();
        let v = check_equivalence(&q, dense.output(), EquivalenceMode::Int8 { bound });
        assert!(v.pass, "{}", v.message);
        assert!(v.max_error > 0.0);
        assert!(quantized_forward(&synth::tiny_cnn(6), &input).is_err());
    }

    #[test]
    fn probe_rejects_glue_layers() {
        let m = synth::tiny_cnn(0);
        let gap = m.layers.iter().position(|l| l.kind() == "gap").unwrap();
        assert!(brute_force_layer_dependencies(&m, gap).is_err());
    }
}
