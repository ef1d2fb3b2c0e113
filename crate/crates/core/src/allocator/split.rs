//! Splitting conv and linear layers into per-worker output-neuron ranges and
//! the weight fragments each worker must hold.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ConvLayer, Layer, LinearLayer, Model, Precision};

/// Contiguous shares of `total` items proportional to `ratings`.
///
/// Boundaries are rounded cumulatively (`end_r = round(total·ΣR_{≤r}/ΣR)`), so
/// every worker is within one item of its exact share and rounding leftovers
/// do not pile up on the last worker. Workers may receive empty ranges.
pub fn partition_ranges(total: usize, ratings: &[f64]) -> Result<Vec<Range<usize>>> {
    if ratings.is_empty() {
        return Err(Error::Allocation("no workers to partition across".into()));
    }
    if ratings.iter().any(|r| !(*r >= 0.0 && r.is_finite())) {
        return Err(Error::Allocation(format!("ratings must be finite and non-negative: {ratings:?}")));
    }
    let sum: f64 = ratings.iter().sum();
    if sum <= 0.0 {
        return Err(Error::Allocation("ratings sum to zero".into()));
    }
    let mut ranges = Vec::with_capacity(ratings.len());
    let (mut prefix, mut start) = (0.0, 0usize);
    for (r, rating) in ratings.iter().enumerate() {
        prefix += rating;
        let end = if r + 1 == ratings.len() {
            total
        } else {
            ((total as f64 * prefix / sum + 0.5).floor() as usize).clamp(start, total)
        };
        ranges.push(start..end);
        start = end;
    }
    Ok(ranges)
}

/// The weights a worker stores for one layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ownership {
    /// Conv kernels by output channel, with how many of the worker's output
    /// positions use each.
    Kernels(BTreeMap<usize, usize>),
    /// Linear weight columns `[start, end)`.
    Columns(Range<usize>),
}

impl Ownership {
    pub fn unit_count(&self) -> usize {
        match self {
            Ownership::Kernels(k) => k.len(),
            Ownership::Columns(c) => c.len(),
        }
    }
}

/// One worker's slice of a layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerShare {
    pub worker: usize,
    /// Output neurons `[start, end)` in channel-major order.
    pub range: Range<usize>,
    pub ownership: Ownership,
    /// Weights at the model's precision plus 4-byte biases.
    pub fragment_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPartition {
    pub layer: usize,
    pub ratings: Vec<f64>,
    pub shares: Vec<WorkerShare>,
}

impl LayerPartition {
    pub fn worker_count(&self) -> usize {
        self.shares.len()
    }

    /// Worker computing output neuron `index`.
    pub fn owner_of(&self, index: usize) -> Option<usize> {
        let pos = self.shares.partition_point(|s| s.range.end <= index);
        self.shares.get(pos).filter(|s| s.range.contains(&index)).map(|s| s.worker)
    }

    pub fn ranges(&self) -> Vec<Range<usize>> {
        self.shares.iter().map(|s| s.range.clone()).collect()
    }
}

/// Channel-major split of a conv layer's outputs; a kernel is owned by every
/// worker with at least one output position in its channel.
pub fn split_conv(conv: &ConvLayer, layer: usize, ratings: &[f64], precision: Precision) -> Result<LayerPartition> {
    let plane = conv.out_shape.plane();
    let ranges = partition_ranges(conv.out_shape.neuron_count(), ratings)?;
    let per_kernel = conv.kernel_len() * precision.element_bytes() + 4;
    let shares = ranges
        .into_iter()
        .enumerate()
        .map(|(worker, range)| {
            let mut kernels = BTreeMap::new();
            if !range.is_empty() {
                for c in range.start / plane..=(range.end - 1) / plane {
                    let used = range.end.min((c + 1) * plane) - range.start.max(c * plane);
                    kernels.insert(c, used);
                }
            }
            let fragment_bytes = kernels.len() * per_kernel;
            WorkerShare { worker, range, ownership: Ownership::Kernels(kernels), fragment_bytes }
        })
        .collect();
    Ok(LayerPartition { layer, ratings: ratings.to_vec(), shares })
}

/// Column split of a linear layer; each column has exactly one owner.
pub fn split_linear(lin: &LinearLayer, layer: usize, ratings: &[f64], precision: Precision) -> Result<LayerPartition> {
    let ranges = partition_ranges(lin.out_features, ratings)?;
    let per_column = lin.in_features() * precision.element_bytes() + 4;
    let shares = ranges
        .into_iter()
        .enumerate()
        .map(|(worker, range)| WorkerShare {
            worker,
            fragment_bytes: range.len() * per_column,
            ownership: Ownership::Columns(range.clone()),
            range,
        })
        .collect();
    Ok(LayerPartition { layer, ratings: ratings.to_vec(), shares })
}

pub fn split_layer(model: &Model, layer: usize, ratings: &[f64]) -> Result<LayerPartition> {
    let partition = match model.layers.get(layer) {
        Some(Layer::Conv(c)) => split_conv(c, layer, ratings, model.precision)?,
        Some(Layer::Linear(l)) => split_linear(l, layer, ratings, model.precision)?,
        Some(other) => return Err(Error::Domain(format!("layer {layer} ({}) is not splittable", other.kind()))),
        None => return Err(Error::Bounds(format!("layer {layer} not in model"))),
    };
    let idle: Vec<usize> = partition.shares.iter().filter(|s| s.range.is_empty()).map(|s| s.worker).collect();
    if !idle.is_empty() {
        log::debug!("layer {layer}: workers {idle:?} receive no neurons");
    }
    Ok(partition)
}

/// Partitions of every splittable layer of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub worker_count: usize,
    pub precision: Precision,
    /// Ascending by layer index; glue layers have no entry.
    pub layers: Vec<LayerPartition>,
}

impl PartitionPlan {
    /// Splits every splittable layer with the same ratings.
    pub fn uniform(model: &Model, ratings: &[f64]) -> Result<Self> {
        Self::per_layer(model, |_| ratings.to_vec())
    }

    /// Splits layer `l` with `ratings_for(l)`.
    pub fn per_layer(model: &Model, mut ratings_for: impl FnMut(usize) -> Vec<f64>) -> Result<Self> {
        let mut layers = Vec::new();
        let mut worker_count = 0;
        for l in model.splittable_layers() {
            let p = split_layer(model, l, &ratings_for(l))?;
            if worker_count != 0 && p.worker_count() != worker_count {
                return Err(Error::Consistency(format!(
                    "layer {l} split across {} workers, earlier layers across {worker_count}",
                    p.worker_count()
                )));
            }
            worker_count = p.worker_count();
            layers.push(p);
        }
        Ok(Self { worker_count, precision: model.precision, layers })
    }

    pub fn partition(&self, layer: usize) -> Option<&LayerPartition> {
        self.layers.binary_search_by_key(&layer, |p| p.layer).ok().map(|i| &self.layers[i])
    }

    /// Total fragment bytes each worker stores across all layers.
    pub fn worker_fragment_bytes(&self) -> Vec<usize> {
        let mut totals = vec![0; self.worker_count];
        for p in &self.layers {
            for s in &p.shares {
                totals[s.worker] += s.fragment_bytes;
            }
        }
        totals
    }

    /// Checks the plan matches `model`: one partition per splittable layer,
    /// each exactly covering that layer's outputs.
    pub fn validate(&self, model: &Model) -> Result<()> {
        let expected = model.splittable_layers();
        let got: Vec<usize> = self.layers.iter().map(|p| p.layer).collect();
        if expected != got {
            return Err(Error::Consistency(format!("plan covers layers {got:?}, model splits {expected:?}")));
        }
        if model.precision != self.precision {
            return Err(Error::Consistency(format!("plan is {} but model is {}", self.precision, model.precision)));
        }
        for p in &self.layers {
            let n = model.layers[p.layer].out_shape().neuron_count();
            let mut next = 0;
            for (r, s) in p.shares.iter().enumerate() {
                if s.worker != r || s.range.start != next {
                    return Err(Error::Consistency(format!("layer {}: shares are not contiguous", p.layer)));
                }
                next = s.range.end;
            }
            if next != n || p.shares.len() != self.worker_count {
                return Err(Error::Consistency(format!("layer {}: shares do not cover {n} outputs", p.layer)));
            }
        }
        Ok(())
    }
}
