//! Run configuration: one JSON document, overridden by command-line flags.
//!
//! Precedence, lowest first: built-in defaults, `--config` file, flags.

use std::path::{Path, PathBuf};

use eoslab::datagen::{default_scales, SpikeSpec};
use eoslab::dynamics::Mode;
use eoslab::error::Error;
use eoslab::experiment::{CentralFlowConfig, SweepConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelMode {
    /// Full weights for the whole run.
    FullLinear,
    /// Full weights until the rank-1 fit is tight, then `(c, v)` coordinates.
    Reduced,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n: usize,
    pub d: usize,
    /// Defaults to `(3, 1.5, 1.2, 0.8, ...)`.
    pub column_scales: Option<Vec<f64>>,
    /// Defaults to all ones.
    pub beta: Option<Vec<f64>>,
    pub outlier_ratio: f64,
    /// Datasets written by `generate`, seeds `seed, seed+1, ...`.
    pub count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { n: 200, d: 400, column_scales: None, beta: None, outlier_ratio: 1.5, count: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StopConfig {
    /// Steps for the smallest learning rate; its final loss is the shared target.
    pub reference_steps: usize,
    pub max_steps: usize,
}

impl Default for StopConfig {
    fn default() -> Self {
        StopConfig { reference_steps: 400, max_steps: 20_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    pub phase1_rel_tol: f64,
    /// Modes with `|<E,q_i>| < phase1_sign_floor * |Y|` are ignored when locating the Phase I onset.
    pub phase1_sign_floor: f64,
    pub growth_tol: f64,
    pub tail_tol: f64,
    pub e1_floor_mult: f64,
    /// Defaults to `max(1, 1/(eta n^{a/4}))`.
    pub delta_floor: Option<f64>,
    pub cos_tol: f64,
    pub sign_dead_zone: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            phase1_rel_tol: 1e-10,
            phase1_sign_floor: 1e-2,
            growth_tol: 10.0,
            tail_tol: 0.1,
            e1_floor_mult: 1.0,
            delta_floor: None,
            cos_tol: 10.0,
            sign_dead_zone: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarmupConfig {
    pub n: usize,
    pub spikes: Vec<f64>,
    pub bulk: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub points: usize,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        WarmupConfig { n: 100, spikes: vec![300.0, 150.0], bulk: 100.0, alpha_min: 1.0, alpha_max: 1000.0, points: 400 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelMode,
    pub hidden: usize,
    pub init_scale: f64,
    pub etas: Vec<f64>,
    pub stop: StopConfig,
    pub switch_residual: f64,
    pub record_stride: usize,
    pub vector_stride: Option<usize>,
    pub phase_window: usize,
    pub tolerances: Tolerances,
    pub central_flow: CentralFlowConfig,
    pub warmup: WarmupConfig,
    /// Block size for averaged KTA curves in plots; 1 plots every record.
    pub decimate: usize,
    /// Block size for the GD vs central-flow KTA comparison.
    pub central_block: usize,
    pub out: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::default(),
            model: ModelMode::Reduced,
            hidden: 400,
            init_scale: 1e-2,
            etas: vec![0.005, 0.010, 0.014],
            stop: StopConfig::default(),
            switch_residual: 0.05,
            record_stride: 1,
            vector_stride: Some(10),
            phase_window: eoslab::dynamics::DEFAULT_PHASE_WINDOW,
            tolerances: Tolerances::default(),
            central_flow: CentralFlowConfig::default(),
            warmup: WarmupConfig::default(),
            decimate: 1,
            central_block: 50,
            out: PathBuf::from("runs"),
            seed: 0,
        }
    }
}

fn bad(msg: String) -> Error {
    Error::Validation(msg)
}

impl RunConfig {
    /// Reads a config file, or the `config` section of a run manifest.
    pub fn load(path: &Path) -> Result<Self, Error> {
        let v: serde_json::Value = eoslab::io::read_json(path)?;
        let inner = match v.get("config") {
            Some(c) if v.get("command").is_some() => c.clone(),
            _ => v,
        };
        Ok(serde_json::from_value(inner)?)
    }

    pub fn spec(&self, seed: u64) -> SpikeSpec {
        SpikeSpec {
            n: self.data.n,
            d: self.data.d,
            column_scales: self.data.column_scales.clone().unwrap_or_else(|| default_scales(self.data.n)),
            seed,
            beta: self.data.beta.clone(),
        }
    }

    pub fn mode(&self) -> Mode {
        match self.model {
            ModelMode::Reduced => Mode::Hybrid { switch_residual: self.switch_residual },
            _ => Mode::Full,
        }
    }

    pub fn sweep(&self) -> SweepConfig {
        SweepConfig {
            etas: self.etas.clone(),
            hidden: self.hidden,
            init_scale: self.init_scale,
            reference_steps: self.stop.reference_steps,
            max_steps: self.stop.max_steps,
            mode: self.mode(),
            record_stride: self.record_stride,
            vector_stride: self.vector_stride,
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.spec(self.seed).validate()?;
        if self.etas.is_empty() || self.etas.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
            return Err(bad(format!("etas must be positive, got {:?}", self.etas)));
        }
        if self.hidden == 0 || !(self.init_scale > 0.0) {
            return Err(bad("hidden and init_scale must be positive".into()));
        }
        if self.record_stride == 0 || self.vector_stride == Some(0) || self.decimate == 0 || self.central_block == 0 {
            return Err(bad("strides must be positive".into()));
        }
        if self.phase_window == 0 {
            return Err(bad("phase_window must be positive".into()));
        }
        if !(self.switch_residual > 0.0 && self.switch_residual < 1.0) {
            return Err(bad(format!("switch_residual must lie in (0, 1), got {}", self.switch_residual)));
        }
        if self.data.count == 0 {
            return Err(bad("data.count must be at least 1".into()));
        }
        if !(self.data.outlier_ratio > 0.0) {
            return Err(bad("outlier_ratio must be positive".into()));
        }
        let cf = &self.central_flow;
        if !(cf.eta > 0.0 && cf.dt > 0.0 && cf.horizon >= 0.0 && cf.branch_length >= 0.0) {
            return Err(bad("central flow needs eta, dt > 0 and non-negative horizon and branch length".into()));
        }
        if let Some(b) = cf.branch_times.iter().find(|&&b| b < 0.0 || b + cf.branch_length > cf.horizon) {
            return Err(bad(format!("branch at {b} runs past the central horizon {}", cf.horizon)));
        }
        let w = &self.warmup;
        if w.points == 0 || !(w.alpha_min > 0.0 && w.alpha_max >= w.alpha_min) {
            return Err(bad("warm-up sweep needs points > 0 and 0 < alpha_min <= alpha_max".into()));
        }
        Ok(())
    }
}

/// Comma-separated numbers such as `0.005,0.01,0.014`.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatList(pub Vec<f64>);

pub fn parse_float_list(s: &str) -> Result<FloatList, String> {
    s.split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("bad number {x:?}: {e}")))
        .collect::<Result<Vec<_>, _>>()
        .map(FloatList)
}
