//! Cross-layer activation maps.
//!
//! For every splittable layer an [`AssignMap`] records, per input neuron,
//! which of the layer's workers need it. A [`RouteMap`] pairs every neuron of
//! a tensor with the entity that produces it and the workers that consume it;
//! the coordinator relays all activations along these routes.

mod bits;
mod serial;

pub use bits::BitMatrix;
pub use serial::{AssignMapDoc, RouteMapDoc, RouteRun};

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::allocator::{partition_ranges, LayerPartition, PartitionPlan};
use crate::error::{Error, Result};
use crate::model::receptive::window;
use crate::model::{ConvLayer, Layer, Model};

/// Which workers of layer `layer` need each neuron of that layer's input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssignMap {
    pub layer: usize,
    pub bits: BitMatrix,
}

impl AssignMap {
    pub fn neuron_count(&self) -> usize {
        self.bits.rows()
    }

    pub fn worker_count(&self) -> usize {
        self.bits.width()
    }

    /// Number of input neurons worker `r` must receive.
    pub fn demand(&self, worker: usize) -> usize {
        self.bits.column_count(worker)
    }

    /// Input neurons worker `r` needs, ascending.
    pub fn needed_by(&self, worker: usize) -> Vec<usize> {
        (0..self.neuron_count()).filter(|&n| self.bits.get(n, worker)).collect()
    }

    /// Total activation copies sent to workers for this layer.
    pub fn total_deliveries(&self) -> usize {
        (0..self.neuron_count()).map(|n| self.bits.row_count_ones(n)).sum()
    }
}

/// Who produces a neuron of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Producer {
    /// The coordinator: the model input or the result of a glue layer.
    Coordinator,
    Worker(usize),
}

/// Producer/consumer routes for one tensor. Tensor 0 is the model input and
/// tensor `i + 1` is the output of layer `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RouteMap {
    pub tensor: usize,
    /// Contiguous producer ranges covering the tensor in index order.
    pub producers: Vec<(Producer, Range<usize>)>,
    /// Consuming workers of the next layer; all empty when the next layer is
    /// glue or the tensor is the final output.
    pub consumers: BitMatrix,
    /// The coordinator keeps this tensor after relaying it: it is the final
    /// output, feeds a glue layer, or is a residual skip source.
    pub retain_at_coordinator: bool,
}

impl RouteMap {
    pub fn neuron_count(&self) -> usize {
        self.consumers.rows()
    }

    /// `(producer, consumer bitset)` per neuron, in producer range order.
    pub fn entries(&self) -> impl Iterator<Item = (Producer, &[u64])> + '_ {
        self.producers
            .iter()
            .flat_map(move |(p, range)| range.clone().map(move |n| (*p, self.consumers.row(n))))
    }
}

/// A product set of input rows x input columns.
#[derive(Clone)]
struct Rect {
    rows: Vec<bool>,
    cols: Vec<bool>,
}

/// Input region needed by one worker of a conv layer: a set of input
/// channels, each needing the same spatial region (a union of rectangles).
struct Need {
    channels: Range<usize>,
    rects: Vec<Rect>,
}

impl Need {
    /// Spatial positions in the union, by inclusion-exclusion over the
    /// rectangles (intersections of product sets are product sets).
    fn spatial_count(&self) -> usize {
        let k = self.rects.len();
        let mut total: isize = 0;
        for subset in 1u32..(1 << k) {
            let members: Vec<&Rect> = (0..k).filter(|i| subset & (1 << i) != 0).map(|i| &self.rects[i]).collect();
            let both = |pick: fn(&Rect) -> &Vec<bool>| -> usize {
                let first = pick(members[0]);
                (0..first.len()).filter(|&y| members.iter().all(|r| pick(r)[y])).count()
            };
            let n = (both(|r| &r.rows) * both(|r| &r.cols)) as isize;
            total += if members.len() % 2 == 1 { n } else { -n };
        }
        total as usize
    }

    fn count(&self) -> usize {
        self.channels.len() * self.spatial_count()
    }

    fn mask(&self, width: usize, plane: usize) -> Vec<bool> {
        let mut mask = vec![false; plane];
        for r in &self.rects {
            for (y, _) in r.rows.iter().enumerate().filter(|(_, on)| **on) {
                for (x, _) in r.cols.iter().enumerate().filter(|(_, on)| **on) {
                    mask[y * width + x] = true;
                }
            }
        }
        mask
    }
}

/// Input rows (or columns) read by output rows `outs` along one axis.
fn axis_union(outs: Range<usize>, kernel: usize, stride: usize, padding: usize, size: usize) -> Vec<bool> {
    let mut on = vec![false; size];
    for o in outs {
        on[window(o, kernel, stride, padding, size)].iter_mut().for_each(|v| *v = true);
    }
    on
}

/// Splits the raster run `positions` of an output plane into at most three
/// rectangles and maps each to the input region it reads.
fn run_rects(conv: &ConvLayer, positions: Range<usize>, out: &mut Vec<Rect>) {
    if positions.is_empty() {
        return;
    }
    let (is, w) = (conv.in_shape, conv.out_shape.width);
    let (r0, c0) = (positions.start / w, positions.start % w);
    let (r1, c1) = ((positions.end - 1) / w, (positions.end - 1) % w);
    let mut boxes: Vec<(Range<usize>, Range<usize>)> = Vec::with_capacity(3);
    if r0 == r1 {
        boxes.push((r0..r0 + 1, c0..c1 + 1));
    } else {
        let mid_start = if c0 == 0 { r0 } else { r0 + 1 };
        let mid_end = if c1 == w - 1 { r1 + 1 } else { r1 };
        if c0 != 0 {
            boxes.push((r0..r0 + 1, c0..w));
        }
        if mid_start < mid_end {
            boxes.push((mid_start..mid_end, 0..w));
        }
        if c1 != w - 1 {
            boxes.push((r1..r1 + 1, 0..c1 + 1));
        }
    }
    for (rows, cols) in boxes {
        out.push(Rect {
            rows: axis_union(rows, conv.kernel.0, conv.stride, conv.padding, is.height),
            cols: axis_union(cols, conv.kernel.1, conv.stride, conv.padding, is.width),
        });
    }
}

/// The channel-wise segments of an output range: `(channel, positions)`.
fn channel_segments(range: &Range<usize>, plane: usize) -> impl Iterator<Item = (usize, Range<usize>)> + '_ {
    let first = range.start / plane;
    let last = if range.is_empty() { first } else { (range.end - 1) / plane + 1 };
    (first..last).map(move |c| {
        let lo = range.start.max(c * plane) - c * plane;
        let hi = range.end.min((c + 1) * plane) - c * plane;
        (c, lo..hi)
    })
}

/// Input regions a conv worker with output `range` must receive.
fn conv_needs(conv: &ConvLayer, range: &Range<usize>) -> Vec<Need> {
    let plane = conv.out_shape.plane();
    if range.is_empty() {
        return Vec::new();
    }
    let region = |segments: &mut dyn Iterator<Item = Range<usize>>| {
        let mut rects = Vec::new();
        segments.for_each(|p| run_rects(conv, p, &mut rects));
        rects
    };
    if conv.depthwise {
        let mut needs: Vec<Need> = Vec::new();
        let mut full_channels: Option<Range<usize>> = None;
        for (c, positions) in channel_segments(range, plane) {
            if positions.len() == plane {
                full_channels = Some(full_channels.map_or(c..c + 1, |r| r.start..c + 1));
            } else {
                needs.push(Need { channels: c..c + 1, rects: region(&mut std::iter::once(positions)) });
            }
        }
        if let Some(channels) = full_channels {
            needs.push(Need { channels, rects: region(&mut std::iter::once(0..plane)) });
        }
        needs
    } else {
        let rects = if range.len() >= plane {
            region(&mut std::iter::once(0..plane))
        } else {
            region(&mut channel_segments(range, plane).map(|(_, p)| p))
        };
        vec![Need { channels: 0..conv.in_shape.channels, rects }]
    }
}

fn check_partition<'m>(model: &'m Model, partition: &LayerPartition) -> Result<&'m Layer> {
    let layer = model
        .layers
        .get(partition.layer)
        .ok_or_else(|| Error::Bounds(format!("layer {} not in model", partition.layer)))?;
    let expected = partition_ranges(layer.out_shape().neuron_count(), &partition.ratings)?;
    if expected != partition.ranges() {
        return Err(Error::Consistency(format!(
            "layer {}: partition ranges disagree with its ratings",
            partition.layer
        )));
    }
    Ok(layer)
}

/// Marks, for every input neuron of `partition.layer`, the workers whose
/// assigned outputs read it. Linear layers mark every input for every
/// worker with work.
pub fn build_assign_map(model: &Model, partition: &LayerPartition) -> Result<AssignMap> {
    let layer = check_partition(model, partition)?;
    let in_shape = layer.in_shape();
    let mut bits = BitMatrix::new(in_shape.neuron_count(), partition.worker_count());
    for share in &partition.shares {
        match layer {
            Layer::Linear(_) if !share.range.is_empty() => {
                (0..in_shape.neuron_count()).for_each(|n| bits.set(n, share.worker));
            }
            Layer::Linear(_) => {}
            Layer::Conv(conv) => {
                for need in conv_needs(conv, &share.range) {
                    let mask = need.mask(in_shape.width, in_shape.plane());
                    for c in need.channels {
                        for (p, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
                            bits.set(c * in_shape.plane() + p, share.worker);
                        }
                    }
                }
            }
            other => return Err(Error::Domain(format!("{} layers are not split", other.kind()))),
        }
    }
    Ok(AssignMap { layer: partition.layer, bits })
}

/// Per-worker count of input neurons needed by `partition`, computed from
/// spatial masks without materializing the map.
pub fn demand_counts(model: &Model, partition: &LayerPartition) -> Result<Vec<usize>> {
    let layer = check_partition(model, partition)?;
    Ok(partition
        .shares
        .iter()
        .map(|share| match layer {
            Layer::Linear(l) if !share.range.is_empty() => l.in_features(),
            Layer::Conv(conv) => conv_needs(conv, &share.range).iter().map(Need::count).sum(),
            _ => 0,
        })
        .collect())
}

/// Routes for tensor `tensor`: producers from the partition of the layer
/// that wrote it (or the coordinator), consumers from the next layer's
/// assign map.
pub fn build_route_map(
    model: &Model,
    tensor: usize,
    producer: Option<&LayerPartition>,
    next: Option<&AssignMap>,
) -> Result<RouteMap> {
    let shape = if tensor == 0 { model.input_shape } else { model.layers[tensor - 1].out_shape() };
    let n = shape.neuron_count();
    let producers = match producer {
        Some(p) => p
            .shares
            .iter()
            .filter(|s| !s.range.is_empty())
            .map(|s| (Producer::Worker(s.worker), s.range.clone()))
            .collect(),
        None => vec![(Producer::Coordinator, 0..n)],
    };
    let consumers = match next {
        Some(a) if a.neuron_count() != n => {
            return Err(Error::Consistency(format!(
                "assign map of layer {} covers {} neurons, tensor {tensor} has {n}",
                a.layer,
                a.neuron_count()
            )))
        }
        Some(a) => a.bits.clone(),
        None => BitMatrix::new(n, producer.map_or(1, LayerPartition::worker_count)),
    };
    let is_final = tensor == model.layers.len();
    let feeds_glue = model.layers.get(tensor).is_some_and(|l| !l.is_splittable());
    let skip_source = tensor > 0 && model.skip_sources().contains(&(tensor - 1));
    Ok(RouteMap { tensor, producers, consumers, retain_at_coordinator: is_final || feeds_glue || skip_source })
}

/// A partition plan together with the assign map of every splittable layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingPlan {
    pub partitions: PartitionPlan,
    /// Indexed by layer; `None` for glue layers.
    pub assign: Vec<Option<AssignMap>>,
}

impl RoutingPlan {
    pub fn assign_map(&self, layer: usize) -> Option<&AssignMap> {
        self.assign.get(layer).and_then(Option::as_ref)
    }

    /// Routes for every tensor, model input first.
    pub fn route_maps(&self, model: &Model) -> Result<Vec<RouteMap>> {
        (0..=model.layers.len())
            .map(|t| {
                let producer = t.checked_sub(1).and_then(|l| self.partitions.partition(l));
                build_route_map(model, t, producer, self.assign_map(t))
            })
            .collect()
    }
}

/// Builds assign maps for every splittable layer of `plan`.
pub fn plan_all_boundaries(model: &Model, plan: PartitionPlan) -> Result<RoutingPlan> {
    plan.validate(model)?;
    let mut assign: Vec<Option<AssignMap>> = vec![None; model.layers.len()];
    for p in &plan.layers {
        assign[p.layer] = Some(build_assign_map(model, p)?);
    }
    Ok(RoutingPlan { partitions: plan, assign })
}
