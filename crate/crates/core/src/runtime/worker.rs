//! Worker-side state: stored fragments, the RAM gauge, and neuron compute.

use std::ops::Range;

use super::message::{NeuronSet, Payload};
use crate::allocator::{Ownership, WorkerShare};
use crate::error::{Error, Result};
use crate::model::receptive::window;
use crate::model::{ActivationScales, Layer, Weights};
use crate::model::quant::quantize_value;

/// Weights of one fragment at the model's precision.
#[derive(Debug, Clone, PartialEq)]
pub enum FragmentWeights {
    F32(Vec<f32>),
    I8 { values: Vec<i8>, scale: f32 },
}

/// The kernels or columns one worker stores for one layer. Units (kernels
/// or columns) are contiguous; each unit's weights are stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct Fragment {
    pub layer: usize,
    pub range: Range<usize>,
    pub first_unit: usize,
    pub units: usize,
    pub unit_len: usize,
    pub weights: FragmentWeights,
    pub bias: Vec<f32>,
}

impl Fragment {
    /// Copies the weights `share` owns out of `layer`.
    pub fn extract(layer_index: usize, layer: &Layer, share: &WorkerShare) -> Result<Self> {
        let (first_unit, units) = match &share.ownership {
            Ownership::Kernels(k) => match (k.keys().next(), k.keys().next_back()) {
                (Some(&lo), Some(&hi)) => (lo, hi - lo + 1),
                _ => (0, 0),
            },
            Ownership::Columns(c) => (c.start, c.len()),
        };
        let pick = |indices: &mut dyn Iterator<Item = usize>, w: &Weights| -> FragmentWeights {
            match w {
                Weights::F32(v) => FragmentWeights::F32(indices.map(|i| v[i]).collect()),
                Weights::I8 { values, scale } => {
                    FragmentWeights::I8 { values: indices.map(|i| values[i]).collect(), scale: *scale }
                }
            }
        };
        let (unit_len, weights, bias) = match layer {
            Layer::Conv(c) => {
                let kl = c.kernel_len();
                let w = pick(&mut (first_unit * kl..(first_unit + units) * kl), &c.weights);
                (kl, w, c.bias[first_unit..first_unit + units].to_vec())
            }
            Layer::Linear(l) => {
                let n_in = l.in_features();
                // column-major so each output's weights are contiguous
                let mut idx = (first_unit..first_unit + units).flat_map(|col| (0..n_in).map(move |row| l.weight_index(row, col)));
                (n_in, pick(&mut idx, &l.weights), l.bias[first_unit..first_unit + units].to_vec())
            }
            other => return Err(Error::Domain(format!("{} layers have no fragments", other.kind()))),
        };
        Ok(Self { layer: layer_index, range: share.range.clone(), first_unit, units, unit_len, weights, bias })
    }

    /// Weights plus 4-byte biases.
    pub fn bytes(&self) -> usize {
        let w = match &self.weights {
            FragmentWeights::F32(v) => v.len() * 4,
            FragmentWeights::I8 { values, .. } => values.len(),
        };
        w + self.bias.len() * 4
    }

    #[inline]
    fn weight(&self, i: usize) -> f64 {
        match &self.weights {
            FragmentWeights::F32(v) => v[i] as f64,
            FragmentWeights::I8 { values, scale } => values[i] as f64 * *scale as f64,
        }
    }
}

/// Current and peak RAM use against a limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MemoryGauge {
    pub limit: u64,
    pub current: u64,
    pub peak: u64,
}

impl MemoryGauge {
    pub fn new(limit: u64) -> Self {
        Self { limit, current: 0, peak: 0 }
    }

    /// Reserves `bytes`, or returns the total that would have been needed.
    pub fn alloc(&mut self, bytes: u64) -> std::result::Result<(), u64> {
        let needed = self.current + bytes;
        if needed > self.limit {
            return Err(needed);
        }
        self.current = needed;
        self.peak = self.peak.max(needed);
        Ok(())
    }

    pub fn free(&mut self, bytes: u64) {
        debug_assert!(bytes <= self.current, "freeing more than allocated");
        self.current -= bytes.min(self.current);
    }

    /// Starts a new peak-tracking window.
    pub fn reset_peak(&mut self) {
        self.peak = self.current;
    }
}

/// Activations a worker holds for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ReceivedInputs {
    pub layer: usize,
    present: Vec<u64>,
    values: Payload,
}

impl ReceivedInputs {
    /// Scatters `payload` (values for `neurons`, in order) into a buffer
    /// covering `tensor_len` neurons.
    pub fn new(layer: usize, tensor_len: usize, neurons: &NeuronSet, payload: &Payload) -> Result<Self> {
        if neurons.len() != payload.len() {
            return Err(Error::Protocol {
                worker: usize::MAX,
                layer,
                message: format!("{} neuron indices for {} values", neurons.len(), payload.len()),
            });
        }
        let mut present = vec![0u64; tensor_len.div_ceil(64)];
        let mut values = match payload {
            Payload::F32(_) => Payload::F32(vec![0.0; tensor_len]),
            Payload::I8(_) => Payload::I8(vec![0; tensor_len]),
        };
        for (k, n) in neurons.iter().enumerate() {
            if n >= tensor_len {
                return Err(Error::Protocol { worker: usize::MAX, layer, message: format!("neuron {n} out of range") });
            }
            present[n / 64] |= 1 << (n % 64);
            match (&mut values, payload) {
                (Payload::F32(dst), Payload::F32(src)) => dst[n] = src[k],
                (Payload::I8(dst), Payload::I8(src)) => dst[n] = src[k],
                _ => unreachable!("buffer matches payload type"),
            }
        }
        Ok(Self { layer, present, values })
    }

    #[inline]
    fn has(&self, n: usize) -> bool {
        self.present[n / 64] & (1 << (n % 64)) != 0
    }
}

/// Computes the outputs of `frag.range` from `inputs`, returning the output
/// payload and the MACs performed. A needed input that was never received
/// is a protocol error.
pub fn compute_assigned(worker: usize, layer: &Layer, frag: &Fragment, inputs: &ReceivedInputs) -> Result<(Payload, u64)> {
    let missing = |n: usize| Error::Protocol {
        worker,
        layer: frag.layer,
        message: format!("input neuron {n} needed but not received"),
    };
    let scales = layer.scales();
    let activation = layer.activation();
    let mut macs = 0u64;

    // Visits (weight index within the fragment, input neuron) for output `i`.
    let mut for_each_tap = |i: usize, f: &mut dyn FnMut(usize, usize)| -> Result<()> {
        match layer {
            Layer::Conv(c) => {
                let (is, os) = (c.in_shape, c.out_shape);
                let (oc, oh, ow) = os.coords(i);
                let unit = oc - frag.first_unit;
                let rows = window(oh, c.kernel.0, c.stride, c.padding, is.height);
                let cols = window(ow, c.kernel.1, c.stride, c.padding, is.width);
                let kic = c.kernel_in_channels();
                for kc in 0..kic {
                    let ic = if c.depthwise { oc } else { kc };
                    for y in rows.clone() {
                        let ky = y + c.padding - oh * c.stride;
                        for x in cols.clone() {
                            let kx = x + c.padding - ow * c.stride;
                            let n = is.index(ic, y, x);
                            if !inputs.has(n) {
                                return Err(missing(n));
                            }
                            f(((unit * kic + kc) * c.kernel.0 + ky) * c.kernel.1 + kx, n);
                            macs += 1;
                        }
                    }
                }
            }
            Layer::Linear(_) => {
                let unit = i - frag.first_unit;
                for row in 0..frag.unit_len {
                    if !inputs.has(row) {
                        return Err(missing(row));
                    }
                    f(unit * frag.unit_len + row, row);
                }
                macs += frag.unit_len as u64;
            }
            other => return Err(Error::Domain(format!("{} layers are not computed by workers", other.kind()))),
        }
        Ok(())
    };

    let bias_of = |i: usize| -> f64 {
        let unit = match layer {
            Layer::Conv(c) => c.out_shape.coords(i).0,
            _ => i,
        };
        frag.bias[unit - frag.first_unit] as f64
    };

    let payload = match (&inputs.values, &frag.weights) {
        (Payload::F32(x), FragmentWeights::F32(_)) => {
            let mut out = Vec::with_capacity(frag.range.len());
            for i in frag.range.clone() {
                let mut acc = bias_of(i);
                for_each_tap(i, &mut |wi, n| acc += frag.weight(wi) * x[n] as f64)?;
                out.push(activation.apply(acc) as f32);
            }
            Payload::F32(out)
        }
        (Payload::I8(x), FragmentWeights::I8 { values: w, scale }) => {
            let ActivationScales { input_scale, output_scale } = scales.ok_or_else(|| Error::Protocol {
                worker,
                layer: frag.layer,
                message: "int8 layer without activation scales".into(),
            })?;
            let rescale = *scale as f64 * input_scale as f64;
            let mut out = Vec::with_capacity(frag.range.len());
            for i in frag.range.clone() {
                let mut acc: i64 = 0;
                for_each_tap(i, &mut |wi, n| acc += w[wi] as i64 * x[n] as i64)?;
                let y = activation.apply(acc as f64 * rescale + bias_of(i));
                out.push(quantize_value(y, output_scale));
            }
            Payload::I8(out)
        }
        _ => {
            return Err(Error::Protocol {
                worker,
                layer: frag.layer,
                message: "activation precision does not match fragment precision".into(),
            })
        }
    };
    Ok((payload, macs))
}
