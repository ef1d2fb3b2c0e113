//! Turning a fleet into per-worker ratings under a distribution strategy.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::profile::{rating_with_kc, Fleet, K1Table};
use super::sizing::redistribute_overflow;
use super::split::PartitionPlan;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::routing::demand_counts;

/// Rounds of rate → split → estimate K_c → re-rate.
pub const DEFAULT_KC_ROUNDS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Equal ratings.
    Evenly,
    /// Ratings proportional to clock frequency.
    FreqOnly,
    /// Capability ratings with estimated communication coefficients.
    #[default]
    Optimized,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Evenly, Strategy::FreqOnly, Strategy::Optimized];
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Evenly => "evenly",
            Strategy::FreqOnly => "freq_only",
            Strategy::Optimized => "optimized",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "evenly" | "even" => Ok(Strategy::Evenly),
            "freq_only" | "freq" => Ok(Strategy::FreqOnly),
            "optimized" | "optimised" => Ok(Strategy::Optimized),
            other => Err(Error::Parse(format!("unknown strategy `{other}`"))),
        }
    }
}

/// Per-worker communication coefficient: KB sent and received over the plan
/// divided by the KB of output its assigned work represents (`K1·W`).
///
/// The output-equivalent of a worker's work is its share of the model's MACs
/// times the model's output KB per MAC, so `K_c` is independent of clock
/// speed. A single worker runs locally and has `K_c = 0`.
pub fn estimate_kc(model: &Model, plan: &PartitionPlan) -> Result<Vec<f64>> {
    if plan.worker_count <= 1 {
        return Ok(vec![0.0; plan.worker_count]);
    }
    let eb = model.precision.element_bytes();
    let mut traffic = vec![0usize; plan.worker_count];
    let mut macs = vec![0u64; plan.worker_count];
    for p in &plan.layers {
        let layer = &model.layers[p.layer];
        for (share, demand) in p.shares.iter().zip(demand_counts(model, p)?) {
            traffic[share.worker] += (demand + share.range.len()) * eb;
            macs[share.worker] += layer.range_macs(share.range.clone());
        }
    }
    let kb_per_mac = model.splittable_output_bytes() as f64 / 1024.0 / model.total_macs().max(1) as f64;
    Ok(traffic
        .iter()
        .zip(&macs)
        .map(|(&t, &m)| if m == 0 { 0.0 } else { (t as f64 / 1024.0) / (m as f64 * kb_per_mac) })
        .collect())
}

/// Ratings for a fleet, with the coefficients that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatedFleet {
    pub strategy: Strategy,
    pub k1: Vec<f64>,
    pub k_c: Vec<f64>,
    pub ratings: Vec<f64>,
    /// Whether flash limits forced rating redistribution.
    pub redistributed: bool,
}

/// Rates every worker under `strategy`, then redistributes any overflow of
/// the model's weight bytes beyond worker flash limits.
pub fn rate_fleet(
    model: &Model,
    fleet: &Fleet,
    k1_table: &K1Table,
    strategy: Strategy,
    kc_rounds: usize,
) -> Result<RatedFleet> {
    fleet.validate()?;
    let n = fleet.len();
    let k1: Vec<f64> = fleet.workers.iter().map(|w| k1_table.for_worker(w)).collect();
    let mut k_c = vec![0.0; n];
    let ratings = match strategy {
        Strategy::Evenly => vec![1.0; n],
        Strategy::FreqOnly => fleet.workers.iter().map(|w| w.frequency_mhz).collect(),
        Strategy::Optimized => {
            if n > 1 {
                k_c = fleet.workers.iter().map(|w| w.k_c.unwrap_or(0.0)).collect();
            }
            let rate = |k_c: &[f64]| -> Vec<f64> {
                (0..n).map(|r| rating_with_kc(&fleet.workers[r], k1[r], k_c[r]).value).collect()
            };
            let mut ratings = rate(&k_c);
            if n > 1 && fleet.workers.iter().any(|w| w.k_c.is_none()) {
                for _ in 0..kc_rounds {
                    let plan = PartitionPlan::uniform(model, &ratings)?;
                    let estimated = estimate_kc(model, &plan)?;
                    for (r, w) in fleet.workers.iter().enumerate() {
                        k_c[r] = w.k_c.unwrap_or(estimated[r]);
                    }
                    ratings = rate(&k_c);
                }
            }
            ratings
        }
    };
    let limits: Vec<u64> = fleet.workers.iter().map(|w| w.flash_limit_bytes()).collect();
    let adjusted = redistribute_overflow(&ratings, &limits, model.weight_bytes() as u64)?;
    let redistributed = adjusted != ratings;
    if redistributed {
        log::info!("flash limits moved rating: {ratings:?} -> {adjusted:?}");
    }
    Ok(RatedFleet { strategy, k1, k_c, ratings: adjusted, redistributed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocator::WorkerProfile;
    use crate::model::{synth, Activation, ConvLayer, Layer, Precision, TensorShape};

    #[test]
    fn single_worker_has_no_communication() {
        let m = synth::tiny_cnn(0);
        let plan = PartitionPlan::uniform(&m, &[1.0]).unwrap();
        assert_eq!(estimate_kc(&m, &plan).unwrap(), vec![0.0]);
        let rated = rate_fleet(&m, &Fleet::homogeneous(1, 600.0), &K1Table::default(), Strategy::Optimized, 2).unwrap();
        assert!((rated.ratings[0] - 600.0 * 0.133).abs() < 1e-9);
    }

    #[test]
    fn symmetric_workers_get_equal_kc() {
        let s = TensorShape::new(2, 6, 6).unwrap();
        let conv = ConvLayer::new(s, 4, (3, 3), 1, 1, false, vec![0.1; 72], vec![0.0; 4], Activation::Relu).unwrap();
        let m = Model::new(s, Precision::Float32, vec![Layer::Conv(conv)]).unwrap();
        let kc = estimate_kc(&m, &PartitionPlan::uniform(&m, &[1.0, 1.0]).unwrap()).unwrap();
        assert_eq!(kc[0], kc[1]);
        assert!(kc[0] > 0.0);
    }

    #[test]
    fn strategies() {
        let m = synth::tiny_cnn(0);
        let mut fleet = Fleet::homogeneous(3, 600.0);
        fleet.workers[1].frequency_mhz = 150.0;
        fleet.workers[2].message_delay_ms = 10.0;
        let table = K1Table::default();
        let even = rate_fleet(&m, &fleet, &table, Strategy::Evenly, 2).unwrap();
        assert_eq!(even.ratings, vec![1.0; 3]);
        let freq = rate_fleet(&m, &fleet, &table, Strategy::FreqOnly, 2).unwrap();
        assert_eq!(freq.ratings, vec![600.0, 150.0, 600.0]);
        let opt = rate_fleet(&m, &fleet, &table, Strategy::Optimized, 2).unwrap();
        assert!(opt.k_c.iter().all(|&k| k > 0.0));
        assert!(opt.ratings[2] < opt.ratings[0], "delayed worker should rate lower: {:?}", opt.ratings);
        let again = rate_fleet(&m, &fleet, &table, Strategy::Optimized, 2).unwrap();
        assert_eq!(opt, again);
    }

    #[test]
    fn explicit_kc_is_used() {
        let m = synth::tiny_cnn(0);
        let mut fleet = Fleet::homogeneous(2, 600.0);
        fleet.workers.iter_mut().for_each(|w| w.k_c = Some(1.0));
        let opt = rate_fleet(&m, &fleet, &K1Table::constant(0.133), Strategy::Optimized, 2).unwrap();
        assert_eq!(opt.k_c, vec![1.0, 1.0]);
        assert!((opt.ratings[0] - 79.8 / 1.006384).abs() < 1e-9);
    }

    #[test]
    fn flash_limits_redistribute() {
        let m = synth::tiny_cnn(0);
        let bytes = m.weight_bytes() as f64;
        let mut fleet = Fleet::homogeneous(2, 600.0);
        fleet.workers[0].flash_limit_kb = bytes * 0.3 / 1024.0;
        let rated = rate_fleet(&m, &fleet, &K1Table::default(), Strategy::Evenly, 2).unwrap();
        assert!(rated.redistributed);
        assert!(rated.ratings[0] < rated.ratings[1]);
        fleet.workers[1].flash_limit_kb = bytes * 0.3 / 1024.0;
        assert!(matches!(
            rate_fleet(&m, &fleet, &K1Table::default(), Strategy::Evenly, 2),
            Err(Error::InfeasibleCapacity { .. })
        ));
    }

    #[test]
    fn parse_strategy() {
        assert_eq!("freq-only".parse::<Strategy>().unwrap(), Strategy::FreqOnly);
        assert!("fastest".parse::<Strategy>().is_err());
        let _ = WorkerProfile::new(0, 1.0);
    }
}
