//! Compact JSON forms of the routing maps.

use serde::{Deserialize, Serialize};

use super::bits::{blocks_from_b64, blocks_to_b64};
use super::{AssignMap, BitMatrix, Producer, RouteMap};
use crate::error::{Error, Result};

/// An assign map with its rows packed at exactly `width` bits each.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignMapDoc {
    pub layer: usize,
    pub width: usize,
    pub rows: usize,
    pub bits_b64: String,
}

impl From<&AssignMap> for AssignMapDoc {
    fn from(a: &AssignMap) -> Self {
        Self { layer: a.layer, width: a.bits.width(), rows: a.bits.rows(), bits_b64: a.bits.to_packed_b64() }
    }
}

impl TryFrom<&AssignMapDoc> for AssignMap {
    type Error = Error;

    fn try_from(doc: &AssignMapDoc) -> Result<Self> {
        Ok(AssignMap { layer: doc.layer, bits: BitMatrix::from_packed_b64(doc.rows, doc.width, &doc.bits_b64)? })
    }
}

/// `[producer, count, consumer_bits]`: `count` consecutive neurons sharing a
/// producer (`-1` for the coordinator) and a consumer bitset (little-endian
/// 64-bit blocks, base64).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteRun(pub i64, pub usize, pub String);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteMapDoc {
    pub tensor: usize,
    pub retain_at_coordinator: bool,
    pub width: usize,
    pub runs: Vec<RouteRun>,
}

fn producer_code(p: Producer) -> i64 {
    match p {
        Producer::Coordinator => -1,
        Producer::Worker(r) => r as i64,
    }
}

impl From<&RouteMap> for RouteMapDoc {
    fn from(route: &RouteMap) -> Self {
        let mut runs: Vec<RouteRun> = Vec::new();
        let mut current: Option<(Producer, &[u64], usize)> = None;
        for (p, bits) in route.entries() {
            match &mut current {
                Some((cp, cb, n)) if *cp == p && *cb == bits => *n += 1,
                _ => {
                    if let Some((cp, cb, n)) = current.take() {
                        runs.push(RouteRun(producer_code(cp), n, blocks_to_b64(cb)));
                    }
                    current = Some((p, bits, 1));
                }
            }
        }
        if let Some((cp, cb, n)) = current {
            runs.push(RouteRun(producer_code(cp), n, blocks_to_b64(cb)));
        }
        Self { tensor: route.tensor, retain_at_coordinator: route.retain_at_coordinator, width: route.consumers.width(), runs }
    }
}

impl TryFrom<&RouteMapDoc> for RouteMap {
    type Error = Error;

    fn try_from(doc: &RouteMapDoc) -> Result<Self> {
        let rows: usize = doc.runs.iter().map(|r| r.1).sum();
        let mut consumers = BitMatrix::new(rows, doc.width);
        let mut producers: Vec<(Producer, std::ops::Range<usize>)> = Vec::new();
        let mut next = 0;
        for RouteRun(code, count, bits) in &doc.runs {
            let producer = match *code {
                -1 => Producer::Coordinator,
                r if r >= 0 => Producer::Worker(r as usize),
                r => return Err(Error::Parse(format!("invalid producer {r} in route map"))),
            };
            let blocks = blocks_from_b64(bits, consumers.blocks_per_row())?;
            for n in next..next + count {
                for (bi, &block) in blocks.iter().enumerate() {
                    for b in 0..64 {
                        if block & (1 << b) != 0 {
                            let bit = bi * 64 + b;
                            if bit >= doc.width {
                                return Err(Error::Parse(format!("consumer bit {bit} beyond width {}", doc.width)));
                            }
                            consumers.set(n, bit);
                        }
                    }
                }
            }
            match producers.last_mut() {
                Some((p, range)) if *p == producer => range.end = next + count,
                _ => producers.push((producer, next..next + count)),
            }
            next += count;
        }
        Ok(RouteMap { tensor: doc.tensor, producers, consumers, retain_at_coordinator: doc.retain_at_coordinator })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocator::PartitionPlan;
    use crate::model::synth;
    use crate::routing::plan_all_boundaries;

    #[test]
    fn maps_roundtrip_through_json() {
        let m = synth::tiny_cnn(2);
        let plan = plan_all_boundaries(&m, PartitionPlan::uniform(&m, &[1.0, 3.0, 2.0]).unwrap()).unwrap();
        for a in plan.assign.iter().flatten() {
            let doc = AssignMapDoc::from(a);
            let text = serde_json::to_string(&doc).unwrap();
            let back: AssignMapDoc = serde_json::from_str(&text).unwrap();
            assert_eq!(AssignMap::try_from(&back).unwrap(), *a);
        }
        for r in plan.route_maps(&m).unwrap() {
            let doc = RouteMapDoc::from(&r);
            assert!(doc.runs.len() <= r.neuron_count());
            let back: RouteMapDoc = serde_json::from_str(&serde_json::to_string(&doc).unwrap()).unwrap();
            assert_eq!(RouteMap::try_from(&back).unwrap(), r);
        }
    }
}
