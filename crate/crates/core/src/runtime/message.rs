//! Messages exchanged between the coordinator and workers.

use serde::{Deserialize, Serialize};

use crate::allocator::PACKET_BYTES;

/// An endpoint of the star topology.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Node {
    Coordinator,
    Worker(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    /// Layer inputs relayed by the coordinator to a worker.
    Activations,
    /// A worker's computed outputs returned to the coordinator.
    PartialOutput,
}

/// Activation values in transit, at the model's precision.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    I8(Vec<i8>),
}

impl Payload {
    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::I8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bytes(&self) -> usize {
        match self {
            Payload::F32(v) => v.len() * 4,
            Payload::I8(v) => v.len(),
        }
    }
}

/// Neuron indices a payload carries, in order.
#[derive(Debug, Clone, PartialEq)]
pub enum NeuronSet {
    Range(std::ops::Range<usize>),
    List(Vec<u32>),
}

impl NeuronSet {
    pub fn len(&self) -> usize {
        match self {
            NeuronSet::Range(r) => r.len(),
            NeuronSet::List(l) => l.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> Box<dyn Iterator<Item = usize> + '_> {
        match self {
            NeuronSet::Range(r) => Box::new(r.clone()),
            NeuronSet::List(l) => Box::new(l.iter().map(|&i| i as usize)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub kind: MessageKind,
    pub layer: usize,
    pub src: Node,
    pub dst: Node,
    pub neurons: NeuronSet,
    pub payload: Payload,
}

impl Message {
    pub fn payload_bytes(&self) -> usize {
        self.payload.bytes()
    }

    pub fn packets(&self) -> usize {
        packet_count(self.payload_bytes())
    }
}

/// Packets needed for `bytes` of payload: `ceil(bytes / 1400)`.
pub fn packet_count(bytes: usize) -> usize {
    bytes.div_ceil(PACKET_BYTES)
}
