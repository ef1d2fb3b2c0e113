//! Worker profiles, K1 calibration and the capability rating.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bytes per transport packet; per-message delays apply to each packet.
pub const PACKET_BYTES: usize = 1400;

/// One worker of the fleet, as described in a fleet JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerProfile {
    pub id: usize,
    /// Clock frequency in MHz (MCycles per second).
    pub frequency_mhz: f64,
    /// Link delay per KB transferred, in milliseconds.
    #[serde(default)]
    pub delay_ms_per_kb: f64,
    pub bandwidth_kb_s: f64,
    pub flash_limit_kb: f64,
    pub ram_limit_kb: f64,
    /// Communication coefficient; `None` asks the planner to estimate it.
    #[serde(default)]
    pub k_c: Option<f64>,
    /// Fixed delay per send/receive operation (one per packet), in milliseconds.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub message_delay_ms: f64,
    /// Explicit K1 for this worker, overriding the frequency lookup.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k1: Option<f64>,
}

fn is_zero(v: &f64) -> bool {
    *v == 0.0
}

impl WorkerProfile {
    /// A worker with the evaluation defaults: 12.5 MB/s link, 8 MB flash, 512 KB RAM.
    pub fn new(id: usize, frequency_mhz: f64) -> Self {
        Self {
            id,
            frequency_mhz,
            delay_ms_per_kb: 0.0,
            bandwidth_kb_s: 12_500.0,
            flash_limit_kb: 8192.0,
            ram_limit_kb: 512.0,
            k_c: None,
            message_delay_ms: 0.0,
            k1: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Domain(format!("worker {}: {what}", self.id)));
        if !(self.frequency_mhz > 0.0 && self.frequency_mhz.is_finite()) {
            return bad("frequency must be positive");
        }
        if self.bandwidth_kb_s.is_nan() || self.bandwidth_kb_s <= 0.0 {
            return bad("bandwidth must be positive");
        }
        if !(self.delay_ms_per_kb >= 0.0 && self.message_delay_ms >= 0.0) {
            return bad("delays must be non-negative");
        }
        if !(self.flash_limit_kb > 0.0 && self.ram_limit_kb > 0.0) {
            return bad("storage limits must be positive");
        }
        if self.k_c.is_some_and(|k| !(k >= 0.0 && k.is_finite())) {
            return bad("k_c must be non-negative");
        }
        if self.k1.is_some_and(|k| !(k > 0.0 && k.is_finite())) {
            return bad("k1 must be positive");
        }
        Ok(())
    }

    /// Seconds per KB on this worker's link, folding the per-packet delay in
    /// at its average rate (1024 / 1400 packets per KB).
    pub fn effective_delay_s_per_kb(&self) -> f64 {
        self.delay_ms_per_kb / 1000.0 + self.message_delay_ms / 1000.0 * 1024.0 / PACKET_BYTES as f64
    }

    pub fn flash_limit_bytes(&self) -> u64 {
        (self.flash_limit_kb * 1024.0).floor() as u64
    }

    pub fn ram_limit_bytes(&self) -> u64 {
        (self.ram_limit_kb * 1024.0).floor() as u64
    }
}

/// An ordered set of workers; worker `r` is `workers[r]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Fleet {
    pub workers: Vec<WorkerProfile>,
}

impl Fleet {
    pub fn new(workers: Vec<WorkerProfile>) -> Result<Self> {
        let fleet = Self { workers };
        fleet.validate()?;
        Ok(fleet)
    }

    /// `count` identical workers with the evaluation defaults.
    pub fn homogeneous(count: usize, frequency_mhz: f64) -> Self {
        Self { workers: (0..count).map(|id| WorkerProfile::new(id, frequency_mhz)).collect() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers.is_empty() {
            return Err(Error::Domain("fleet has no workers".into()));
        }
        self.workers.iter().try_for_each(WorkerProfile::validate)
    }

    pub fn len(&self) -> usize {
        self.workers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.workers.is_empty()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let workers: Vec<WorkerProfile> =
            serde_json::from_str(text).map_err(|e| Error::Parse(format!("fleet: {e}")))?;
        Self::new(workers)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// One profiling measurement: output volume produced at a clock frequency
/// and the time it took.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub frequency_mhz: f64,
    pub workload_kb: f64,
    pub time_s: f64,
}

/// K1 in KB of output per MCycle.
pub fn calibrate_k1(rec: &CalibrationRecord) -> Result<f64> {
    let fields = [rec.frequency_mhz, rec.workload_kb, rec.time_s];
    if fields.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::Domain(format!("calibration record fields must be positive: {rec:?}")));
    }
    Ok(rec.workload_kb / (rec.frequency_mhz * rec.time_s))
}

/// Reads calibration records from CSV with a
/// `frequency_mhz,workload_kb,time_s` header. Errors name the offending line.
pub fn read_calibration_csv(text: &str) -> Result<Vec<CalibrationRecord>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut records = Vec::new();
    for row in reader.deserialize::<CalibrationRecord>() {
        let rec = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::Parse(format!("calibration line {line}: {e}"))
        })?;
        records.push(rec);
    }
    if records.is_empty() {
        return Err(Error::Parse("calibration file has no records".into()));
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct K1Entry {
    pub frequency_mhz: f64,
    pub k1: f64,
    /// Number of records averaged into this entry.
    #[serde(default = "one")]
    pub samples: usize,
}

fn one() -> usize {
    1
}

/// K1 keyed by frequency. Lookups at an uncalibrated frequency use the
/// nearest calibrated one and log a warning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct K1Table {
    pub entries: Vec<K1Entry>,
}

impl Default for K1Table {
    /// Profiled values for the evaluation board at 600/450/150 MHz.
    fn default() -> Self {
        Self::from_pairs(&[(150.0, 0.211), (450.0, 0.150), (600.0, 0.133)])
    }
}

impl K1Table {
    pub fn from_pairs(pairs: &[(f64, f64)]) -> Self {
        let mut entries: Vec<K1Entry> =
            pairs.iter().map(|&(frequency_mhz, k1)| K1Entry { frequency_mhz, k1, samples: 1 }).collect();
        entries.sort_by(|a, b| a.frequency_mhz.total_cmp(&b.frequency_mhz));
        Self { entries }
    }

    /// A table with one constant K1 for every frequency.
    pub fn constant(k1: f64) -> Self {
        Self::from_pairs(&[(1.0, k1)])
    }

    /// Per-frequency mean K1 over the records.
    pub fn from_records(records: &[CalibrationRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Domain("calibration needs at least one record".into()));
        }
        let mut entries: Vec<K1Entry> = Vec::new();
        for rec in records {
            let k1 = calibrate_k1(rec)?;
            match entries.iter_mut().find(|e| e.frequency_mhz == rec.frequency_mhz) {
                Some(e) => {
                    e.k1 += k1;
                    e.samples += 1;
                }
                None => entries.push(K1Entry { frequency_mhz: rec.frequency_mhz, k1, samples: 1 }),
            }
        }
        for e in &mut entries {
            e.k1 /= e.samples as f64;
        }
        entries.sort_by(|a, b| a.frequency_mhz.total_cmp(&b.frequency_mhz));
        Ok(Self { entries })
    }

    /// Nearest-frequency entry; ties go to the higher frequency.
    pub fn nearest(&self, frequency_mhz: f64) -> &K1Entry {
        self.entries
            .iter()
            .min_by(|a, b| {
                let da = (a.frequency_mhz - frequency_mhz).abs();
                let db = (b.frequency_mhz - frequency_mhz).abs();
                da.total_cmp(&db).then(b.frequency_mhz.total_cmp(&a.frequency_mhz))
            })
            .expect("K1 table is never empty")
    }

    pub fn lookup(&self, frequency_mhz: f64) -> f64 {
        let entry = self.nearest(frequency_mhz);
        if entry.frequency_mhz != frequency_mhz && self.entries.len() > 1 && first_fallback(frequency_mhz) {
            log::warn!(
                "no K1 calibrated at {frequency_mhz} MHz; using {} from {} MHz",
                entry.k1,
                entry.frequency_mhz
            );
        }
        entry.k1
    }

    /// K1 of `worker`: its explicit override, else the table lookup.
    pub fn for_worker(&self, worker: &WorkerProfile) -> f64 {
        worker.k1.unwrap_or_else(|| self.lookup(worker.frequency_mhz))
    }
}

/// Whether this is the first fallback lookup at `frequency_mhz` in this
/// process, so each missing frequency is reported once.
fn first_fallback(frequency_mhz: f64) -> bool {
    static SEEN: Mutex<BTreeSet<u64>> = Mutex::new(BTreeSet::new());
    SEEN.lock().map_or(true, |mut seen| seen.insert(frequency_mhz.to_bits()))
}

/// Capability rating of one worker: KB of output it can produce per second
/// once its communication overhead is accounted for.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rating {
    pub worker: usize,
    pub value: f64,
}

/// `R = f·K1 / ((d + 1/B)·f·K1·K_c + 1)`, with `d` the effective per-KB delay
/// and `K_c` taken from the profile (0 when unset).
pub fn compute_rating(profile: &WorkerProfile, k1: f64) -> Rating {
    rating_with_kc(profile, k1, profile.k_c.unwrap_or(0.0))
}

pub fn rating_with_kc(profile: &WorkerProfile, k1: f64, k_c: f64) -> Rating {
    let throughput = profile.frequency_mhz * k1;
    let per_kb = profile.effective_delay_s_per_kb() + 1.0 / profile.bandwidth_kb_s;
    Rating { worker: profile.id, value: throughput / (per_kb * throughput * k_c + 1.0) }
}
