//! Experiment configuration: command-line flags layered over an optional
//! JSON config file with the same field names.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use mcusplit::allocator::{Fleet, K1Table, Strategy};
use mcusplit::harness::EmulatedCase;
use mcusplit::model::{quantize, reinterpret, synth, Model, Precision};
use mcusplit::runtime::LinkPolicy;

/// Flags shared by the planning and simulation commands.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// JSON file holding any of these options; flags given on the command line win.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,

    /// Model description file, or a preset name (tiny_cnn, mobilenet_v2_like).
    #[arg(long)]
    pub model: Option<String>,

    /// Fleet description file (JSON list of worker profiles).
    #[arg(long)]
    pub fleet: Option<PathBuf>,

    /// Homogeneous 600 MHz fleet of this size when no fleet file is given.
    #[arg(long)]
    pub workers: Option<usize>,

    /// Use the three-worker fleet of an emulated heterogeneity case (1-8).
    #[arg(long)]
    pub emulate_table2: Option<u8>,

    /// Per-worker per-message delay overrides in ms, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub message_delay_ms: Option<Vec<f64>>,

    /// K1 table file produced by `calibrate`.
    #[arg(long)]
    pub k1_table: Option<PathBuf>,

    /// evenly, freq_only or optimized.
    #[arg(long)]
    pub strategy: Option<Strategy>,

    /// f32 or i8; an f32 model is quantized when i8 is requested.
    #[arg(long)]
    pub precision: Option<String>,

    /// Worker counts to sweep, e.g. `1,2,4,8,20-120`.
    #[arg(long)]
    pub sweep: Option<String>,

    /// Seed for generated inputs and models.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,

    /// Send coordinator messages one at a time instead of concurrently.
    #[arg(long)]
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub serialize_coordinator_sends: bool,
}

impl ExperimentConfig {
    /// Fills options missing on the command line from `--config`.
    pub fn resolve(self) -> Result<Self> {
        let Some(path) = &self.config else { return Ok(self) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let file: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| mcusplit::Error::Parse(format!("config {}: {e}", path.display())))?;
        Ok(Self {
            config: self.config,
            model: self.model.or(file.model),
            fleet: self.fleet.or(file.fleet),
            workers: self.workers.or(file.workers),
            emulate_table2: self.emulate_table2.or(file.emulate_table2),
            message_delay_ms: self.message_delay_ms.or(file.message_delay_ms),
            k1_table: self.k1_table.or(file.k1_table),
            strategy: self.strategy.or(file.strategy),
            precision: self.precision.or(file.precision),
            sweep: self.sweep.or(file.sweep),
            seed: self.seed.or(file.seed),
            out: self.out.or(file.out),
            serialize_coordinator_sends: self.serialize_coordinator_sends || file.serialize_coordinator_sends,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy.unwrap_or_default()
    }

    pub fn out_dir(&self) -> Result<PathBuf> {
        let dir = self.out.clone().unwrap_or_else(|| PathBuf::from("out"));
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }

    pub fn policy(&self) -> LinkPolicy {
        if self.serialize_coordinator_sends {
            LinkPolicy::Serialized
        } else {
            LinkPolicy::Concurrent
        }
    }

    /// The model at the requested precision.
    pub fn load_model(&self) -> Result<Model> {
        let name = self.model.as_deref().unwrap_or("tiny_cnn");
        let model = if Path::new(name).exists() {
            reinterpret(name)?
        } else {
            match name {
                "tiny_cnn" => synth::tiny_cnn(self.seed()),
                "mobilenet_v2_like" => synth::mobilenet_v2_like(self.seed()),
                _ => bail!(mcusplit::Error::Parse(format!("model `{name}` is neither a file nor a preset"))),
            }
        };
        match (self.precision.as_deref().map(Precision::parse).transpose()?, model.precision) {
            (Some(Precision::Int8), Precision::Float32) => Ok(quantize(&model)?),
            (Some(Precision::Float32), Precision::Int8) => {
                bail!(mcusplit::Error::Parse("an int8 model cannot be run at f32".into()))
            }
            _ => Ok(model),
        }
    }

    /// The fleet: a fleet file, an emulated case, or a homogeneous fleet,
    /// with any per-message delay overrides applied.
    pub fn load_fleet(&self) -> Result<Fleet> {
        let mut fleet = match (&self.fleet, self.emulate_table2) {
            (Some(path), _) => Fleet::load(path)?,
            (None, Some(case)) => EmulatedCase::get(case)
                .ok_or_else(|| mcusplit::Error::Parse(format!("no emulated case {case}; cases are 1-8")))?
                .fleet(),
            (None, None) => Fleet::homogeneous(self.workers.unwrap_or(3), 600.0),
        };
        if let Some(delays) = &self.message_delay_ms {
            if delays.len() != fleet.len() {
                bail!(mcusplit::Error::Parse(format!(
                    "{} message delays for {} workers",
                    delays.len(),
                    fleet.len()
                )));
            }
            for (w, &d) in fleet.workers.iter_mut().zip(delays) {
                w.message_delay_ms = d;
            }
        }
        fleet.validate()?;
        Ok(fleet)
    }

    pub fn load_k1(&self) -> Result<K1Table> {
        match &self.k1_table {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                Ok(serde_json::from_str(&text).map_err(|e| mcusplit::Error::Parse(format!("K1 table: {e}")))?)
            }
            None => Ok(K1Table::default()),
        }
    }

    /// Worker counts from `--sweep`, defaulting to 1-8.
    pub fn sweep_counts(&self) -> Result<Vec<usize>> {
        parse_sweep(self.sweep.as_deref().unwrap_or("1-8"))
    }
}

/// Parses `1,2,4,20-120` into a list of worker counts.
pub fn parse_sweep(text: &str) -> Result<Vec<usize>> {
    let bad = |part: &str| mcusplit::Error::Parse(format!("bad sweep entry `{part}`"));
    let mut counts = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (usize, usize) = (a.parse().map_err(|_| bad(part))?, b.parse().map_err(|_| bad(part))?);
                if a > b {
                    bail!(bad(part));
                }
                counts.extend(a..=b);
            }
            None => counts.push(part.parse().map_err(|_| bad(part))?),
        }
    }
    if counts.is_empty() || counts.contains(&0) {
        bail!(mcusplit::Error::Parse("sweep values must be at least 1".into()));
    }
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_ranges() {
        assert_eq!(parse_sweep("1,3-5, 8").unwrap(), vec![1, 3, 4, 5, 8]);
        assert!(parse_sweep("0,1").is_err());
        assert!(parse_sweep("5-2").is_err());
        assert!(parse_sweep("x").is_err());
    }

    #[test]
    fn flags_override_config_file() {
        let dir = std::env::temp_dir().join(format!("mcusplit-config-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("c.json");
        std::fs::write(&path, r#"{"workers": 5, "strategy": "evenly", "seed": 9}"#).unwrap();
        let cfg = ExperimentConfig { config: Some(path), seed: Some(1), ..Default::default() }.resolve().unwrap();
        assert_eq!((cfg.workers, cfg.strategy(), cfg.seed()), (Some(5), Strategy::Evenly, 1));
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn emulated_fleet_with_overrides() {
        let cfg = ExperimentConfig { emulate_table2: Some(7), message_delay_ms: Some(vec![1.0, 2.0, 3.0]), ..Default::default() };
        let fleet = cfg.load_fleet().unwrap();
        assert_eq!(fleet.workers[2].frequency_mhz, 150.0);
        assert_eq!(fleet.workers[2].message_delay_ms, 3.0);
        let bad = ExperimentConfig { message_delay_ms: Some(vec![1.0]), ..Default::default() };
        assert!(bad.load_fleet().is_err());
    }
}
