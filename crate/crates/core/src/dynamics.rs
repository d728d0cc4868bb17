//! Trajectory engines: discrete GD, RK4 gradient flow, the rank-1 central flow, phase
//! detection and per-interval KTA accounting.
//!
//! Flows integrate `d theta/dt = -eta grad L`, so one unit of time corresponds to one GD step.

use std::fmt;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::datagen::DataSet;
use crate::error::{invalid, Error, Result};
use crate::io::{content_hash, read_json, read_table, write_json, write_table};
use crate::metrics::{cosine, kta, kta_reduced, reduced_kernel_eigen, sharpness_reduced};
use crate::models::{
    extract_reduced, generalized_alpha, ntk_from_features, relu_grads, relu_loss, relu_ntk_components, LinearNet,
    ReducedState, ReluNet,
};
use crate::spectral::sym_eigh;

pub const DIVERGENCE_FACTOR: f64 = 1e12;
pub const ACTIVATION_HYSTERESIS: f64 = 1e-9;
pub const ENERGY_TOL: f64 = 1e-8;
pub const DEFAULT_PHASE_WINDOW: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ModelState {
    Full(LinearNet),
    Reduced(ReducedState),
}

impl ModelState {
    pub fn coords(&self) -> Coords {
        match self {
            ModelState::Full(_) => Coords::Full,
            ModelState::Reduced(_) => Coords::Reduced,
        }
    }

    pub fn loss(&self, ds: &DataSet) -> Result<f64> {
        match self {
            ModelState::Full(net) => crate::models::linear_loss(net, ds),
            ModelState::Reduced(s) => Ok(s.loss(ds)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Coords {
    Full,
    Reduced,
}

/// Coordinates GD runs in. `Hybrid` trains the full weights until the rank-1 fit residual
/// drops below `switch_residual`, then continues on the extracted `(c, v)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Mode {
    Full,
    Reduced,
    Hybrid { switch_residual: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunKind {
    GradientDescent,
    GradientFlow,
    CentralFlow,
    Branch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    TargetLoss,
    MaxSteps,
    Horizon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryConfig {
    pub kind: RunKind,
    pub eta: f64,
    pub mode: Mode,
    pub seed: u64,
    /// Content hash of the dataset spec.
    pub data: String,
    pub max_steps: Option<usize>,
    pub target_loss: Option<f64>,
    pub record_stride: usize,
    pub vector_stride: Option<usize>,
    pub dt: Option<f64>,
    pub horizon: Option<f64>,
    pub branch_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub time: f64,
    pub coords: Coords,
    pub loss: f64,
    pub sharpness_exact: f64,
    pub sharpness_approx: f64,
    pub kta: f64,
    /// NaN when `|c| < 1e-12`.
    pub alpha: f64,
    pub c: f64,
    pub c2: f64,
    pub v2: f64,
    /// `lambda_1 c^2 / n - 2/eta`.
    pub delta_t: f64,
    pub e_q1: f64,
    /// `sum_{i>=2} <E, q_i>^2`.
    pub e_tail: f64,
    pub e_dot_f: f64,
    pub cos_vy: f64,
    pub fit_residual: f64,
    pub sigma: f64,
    pub e_proj: Option<Vec<f64>>,
    pub individual: Option<Vec<f64>>,
    pub v: Option<Vec<f64>>,
}

const SCALAR_COLUMNS: [&str; 19] = [
    "step",
    "time",
    "reduced",
    "loss",
    "sharpness_exact",
    "sharpness_approx",
    "kta",
    "alpha",
    "c",
    "c2",
    "v2",
    "delta_t",
    "e_q1",
    "e_tail",
    "e_dot_f",
    "cos_vy",
    "fit_residual",
    "sigma",
    "vectors",
];

impl StepRecord {
    fn scalar_row(&self) -> Vec<f64> {
        vec![
            self.step as f64,
            self.time,
            (self.coords == Coords::Reduced) as u8 as f64,
            self.loss,
            self.sharpness_exact,
            self.sharpness_approx,
            self.kta,
            self.alpha,
            self.c,
            self.c2,
            self.v2,
            self.delta_t,
            self.e_q1,
            self.e_tail,
            self.e_dot_f,
            self.cos_vy,
            self.fit_residual,
            self.sigma,
            self.v.is_some() as u8 as f64,
        ]
    }

    fn from_row(r: &[f64]) -> Result<Self> {
        if r.len() != SCALAR_COLUMNS.len() {
            return invalid(format!("trajectory row has {} cells, expected {}", r.len(), SCALAR_COLUMNS.len()));
        }
        Ok(StepRecord {
            step: r[0] as usize,
            time: r[1],
            coords: if r[2] != 0.0 { Coords::Reduced } else { Coords::Full },
            loss: r[3],
            sharpness_exact: r[4],
            sharpness_approx: r[5],
            kta: r[6],
            alpha: r[7],
            c: r[8],
            c2: r[9],
            v2: r[10],
            delta_t: r[11],
            e_q1: r[12],
            e_tail: r[13],
            e_dot_f: r[14],
            cos_vy: r[15],
            fit_residual: r[16],
            sigma: r[17],
            e_proj: None,
            individual: None,
            v: None,
        })
    }

    pub fn reduced_state(&self) -> Option<ReducedState> {
        self.v.as_ref().map(|v| ReducedState::new(self.c, DVector::from_column_slice(v)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSummary {
    pub activation_time: Option<f64>,
    pub projections: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub config: TrajectoryConfig,
    pub provenance: Provenance,
    pub stop: StopReason,
    pub flow: Option<FlowSummary>,
    #[serde(skip)]
    pub records: Vec<StepRecord>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    #[serde(flatten)]
    trajectory: Trajectory,
    records: usize,
    scalars: String,
    vectors: Option<String>,
    columns: Vec<String>,
}

impl Trajectory {
    fn new(config: TrajectoryConfig, records: Vec<StepRecord>, stop: StopReason) -> Result<Self> {
        for w in records.windows(2) {
            if w[1].step <= w[0].step {
                return invalid(format!("record steps not increasing at {}", w[1].step));
            }
        }
        if let Some(r) = records.iter().find(|r| !r.loss.is_finite()) {
            return invalid(format!("non-finite loss recorded at step {}", r.step));
        }
        let provenance = Provenance { seed: config.seed, config_hash: content_hash(&config) };
        Ok(Trajectory { config, provenance, stop, flow: None, records })
    }

    pub fn two_over_eta(&self) -> f64 {
        2.0 / self.config.eta
    }

    pub fn last(&self) -> &StepRecord {
        self.records.last().expect("trajectories hold at least one record")
    }

    pub fn kta_series(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.kta).collect()
    }

    pub fn sharpness_series(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.sharpness_approx).collect()
    }

    pub fn index_of_step(&self, step: usize) -> Option<usize> {
        self.records.binary_search_by_key(&step, |r| r.step).ok()
    }

    /// Record closest to `time`, if within `tol`.
    pub fn at_time(&self, time: f64, tol: f64) -> Option<&StepRecord> {
        self.records
            .iter()
            .min_by(|a, b| (a.time - time).abs().total_cmp(&(b.time - time).abs()))
            .filter(|r| (r.time - time).abs() <= tol)
    }

    /// Phase intervals of the recorded sharpness (record indices).
    pub fn phases(&self, w: usize) -> Result<Vec<PhaseInterval>> {
        detect_phases(&self.sharpness_series(), self.two_over_eta(), w)
    }

    /// Writes `stem.json`, `stem.csv` and, when vectors were recorded, `stem_vectors.csv`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        crate::io::ensure_dir(dir)?;
        let scalars = format!("{stem}.csv");
        let header: Vec<String> = SCALAR_COLUMNS.iter().map(|s| s.to_string()).collect();
        let rows: Vec<Vec<f64>> = self.records.iter().map(StepRecord::scalar_row).collect();
        write_table(&dir.join(&scalars), &header, &rows)?;
        let mut vrows = Vec::new();
        for r in &self.records {
            for (kind, vec) in [(0.0, &r.e_proj), (1.0, &r.individual), (2.0, &r.v)] {
                if let Some(x) = vec {
                    let mut row = vec![r.step as f64, kind];
                    row.extend_from_slice(x);
                    vrows.push(row);
                }
            }
        }
        let vectors = if vrows.is_empty() {
            None
        } else {
            let width = vrows.iter().map(Vec::len).max().unwrap_or(2);
            if vrows.iter().any(|r| r.len() != width) {
                return invalid("recorded vectors have inconsistent lengths");
            }
            let mut header = vec!["step".to_string(), "kind".to_string()];
            header.extend((0..width - 2).map(|i| format!("x{i}")));
            let name = format!("{stem}_vectors.csv");
            write_table(&dir.join(&name), &header, &vrows)?;
            Some(name)
        };
        let manifest =
            Manifest { trajectory: self.clone(), records: self.records.len(), scalars, vectors, columns: header };
        let path = dir.join(format!("{stem}.json"));
        write_json(&path, &manifest)?;
        Ok(path)
    }

    pub fn load(json_path: &Path) -> Result<Self> {
        let manifest: Manifest = read_json(json_path)?;
        let dir = json_path.parent().unwrap_or(Path::new("."));
        let (_, rows) = read_table(&dir.join(&manifest.scalars))?;
        let mut records = rows.iter().map(|r| StepRecord::from_row(r)).collect::<Result<Vec<_>>>()?;
        if records.len() != manifest.records {
            return invalid(format!("manifest lists {} records, table has {}", manifest.records, records.len()));
        }
        if let Some(name) = &manifest.vectors {
            let (_, vrows) = read_table(&dir.join(name))?;
            for row in vrows {
                let step = row[0] as usize;
                let i = records
                    .binary_search_by_key(&step, |r| r.step)
                    .map_err(|_| Error::Validation(format!("vector row for unrecorded step {step}")))?;
                let x = row[2..].to_vec();
                match row[1] as u8 {
                    0 => records[i].e_proj = Some(x),
                    1 => records[i].individual = Some(x),
                    2 => records[i].v = Some(x),
                    k => return invalid(format!("unknown vector kind {k}")),
                }
            }
        }
        let mut t = manifest.trajectory;
        t.records = records;
        Ok(t)
    }
}

struct Recorder<'a> {
    ds: &'a DataSet,
    eta: f64,
    yy: f64,
}

impl<'a> Recorder<'a> {
    fn new(ds: &'a DataSet, eta: f64) -> Self {
        Recorder { ds, eta, yy: ds.y.norm_squared() }
    }

    fn common(&self, s: &ReducedState, e: &DVector<f64>, f: &DVector<f64>, step: usize, time: f64) -> StepRecord {
        let ds = self.ds;
        let n = ds.n() as f64;
        let ep = ds.kernel_spectrum.project(e);
        let e_q1 = ep[0];
        let approx = ds.lambda1() * s.c2() / n;
        StepRecord {
            step,
            time,
            coords: Coords::Reduced,
            loss: e.norm_squared() / (2.0 * n),
            sharpness_exact: f64::NAN,
            sharpness_approx: approx,
            kta: f64::NAN,
            alpha: if s.c.abs() < 1e-12 { f64::NAN } else { s.v2() / s.c2() },
            c: s.c,
            c2: s.c2(),
            v2: s.v2(),
            delta_t: approx - 2.0 / self.eta,
            e_q1,
            e_tail: (e.norm_squared() - e_q1 * e_q1).max(0.0),
            e_dot_f: e.dot(f),
            cos_vy: cosine(&s.v, &ds.y),
            fit_residual: s.fit_residual,
            sigma: 0.0,
            e_proj: None,
            individual: None,
            v: None,
        }
    }

    fn reduced(&self, s: &ReducedState, step: usize, time: f64, vectors: bool) -> Result<StepRecord> {
        let f = s.outputs();
        let e = &f - &self.ds.y;
        let mut r = self.common(s, &e, &f, step, time);
        r.sharpness_exact = sharpness_reduced(s, self.ds)?.0;
        r.kta = kta_reduced(s, self.ds)?;
        if vectors {
            let (_, coords) = reduced_kernel_eigen(s, self.ds)?;
            r.individual = Some(coords.iter().map(|c| c * c / self.yy).collect());
            r.e_proj = Some(self.ds.kernel_spectrum.project(&e).iter().copied().collect());
            r.v = Some(s.v.iter().copied().collect());
        }
        Ok(r)
    }

    fn full(
        &self,
        net: &LinearNet,
        h: &DMatrix<f64>,
        step: usize,
        time: f64,
        vectors: bool,
    ) -> Result<(StepRecord, ReducedState)> {
        let ds = self.ds;
        let s = extract_reduced(net, ds)?;
        let f = h.tr_mul(&net.w2);
        let e = &f - &ds.y;
        let mut r = self.common(&s, &e, &f, step, time);
        r.coords = Coords::Full;
        let k = ntk_from_features(h, &net.w2, &ds.kernel);
        r.kta = kta(&k, &ds.y)?;
        let n = ds.n() as f64;
        if vectors {
            let spec = sym_eigh(&k)?;
            r.sharpness_exact = spec.top() / n;
            r.individual = Some(spec.project(&ds.y).iter().map(|c| c * c / self.yy).collect());
            r.e_proj = Some(ds.kernel_spectrum.project(&e).iter().copied().collect());
            r.v = Some(s.v.iter().copied().collect());
        } else {
            r.sharpness_exact = k.symmetric_eigenvalues().max() / n;
        }
        Ok((r, s))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GdConfig {
    pub eta: f64,
    pub mode: Mode,
    pub max_steps: usize,
    pub target_loss: Option<f64>,
    pub record_stride: usize,
    pub vector_stride: Option<usize>,
    /// Step number of the initial state, for resumed runs.
    pub start_step: usize,
    pub seed: u64,
}

impl GdConfig {
    pub fn new(eta: f64, mode: Mode, max_steps: usize) -> Self {
        GdConfig {
            eta,
            mode,
            max_steps,
            target_loss: None,
            record_stride: 1,
            vector_stride: None,
            start_step: 0,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return invalid(format!("eta must be positive, got {}", self.eta));
        }
        if self.record_stride == 0 || self.vector_stride == Some(0) {
            return invalid("strides must be positive");
        }
        if let Mode::Hybrid { switch_residual } = self.mode {
            if !(switch_residual > 0.0 && switch_residual < 1.0) {
                return invalid(format!("switch residual must lie in (0, 1), got {switch_residual}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GdRun {
    pub trajectory: Trajectory,
    pub final_state: ModelState,
    /// Step at which a hybrid run switched to rank-1 coordinates.
    pub switch_step: Option<usize>,
}

/// Gradient descent on the loss `(1/2n)|F - Y|^2`.
///
/// Records every `record_stride` steps and at the final step; stops at the first step whose
/// loss is at most `target_loss`, or after `max_steps` updates.
pub fn gd_train(init: ModelState, ds: &DataSet, cfg: &GdConfig) -> Result<GdRun> {
    cfg.validate()?;
    let mut state = match (init, cfg.mode) {
        (ModelState::Full(net), Mode::Reduced) => ModelState::Reduced(extract_reduced(&net, ds)?),
        (ModelState::Reduced(_), Mode::Full | Mode::Hybrid { .. }) => {
            return invalid("full-weight GD needs a full-weight initial state")
        }
        (s, _) => s,
    };
    let rec = Recorder::new(ds, cfg.eta);
    let n = ds.n() as f64;
    let loss0 = state.loss(ds)?;
    let guard = DIVERGENCE_FACTOR * loss0.max(f64::MIN_POSITIVE);
    let mut records = Vec::new();
    let mut switch_step = None;
    let mut stop = StopReason::MaxSteps;
    for k in 0..=cfg.max_steps {
        let step = cfg.start_step + k;
        let at_stride = k % cfg.record_stride == 0;
        let vectors = cfg.vector_stride.is_some_and(|v| k % v == 0);
        let (loss, record) = match &mut state {
            ModelState::Full(net) => {
                let h = net.features(ds);
                let e = h.tr_mul(&net.w2) - &ds.y;
                let loss = e.norm_squared() / (2.0 * n);
                let hybrid = matches!(cfg.mode, Mode::Hybrid { .. });
                let last = k == cfg.max_steps || cfg.target_loss.is_some_and(|t| loss <= t);
                if at_stride || hybrid || last {
                    let (r, s) = rec.full(net, &h, step, step as f64, vectors || last)?;
                    if let Mode::Hybrid { switch_residual } = cfg.mode {
                        if s.fit_residual < switch_residual {
                            switch_step = Some(step);
                            state = ModelState::Reduced(s);
                            let r = rec.reduced(state_reduced(&state), step, step as f64, vectors || last)?;
                            (r.loss, Some(r))
                        } else {
                            (loss, (at_stride || last).then_some(r))
                        }
                    } else {
                        (loss, Some(r))
                    }
                } else {
                    (loss, None)
                }
            }
            ModelState::Reduced(s) => {
                let loss = s.loss(ds);
                let last = k == cfg.max_steps || cfg.target_loss.is_some_and(|t| loss <= t);
                let r =
                    if at_stride || last { Some(rec.reduced(s, step, step as f64, vectors || last)?) } else { None };
                (loss, r)
            }
        };
        if !loss.is_finite() || loss > guard {
            return Err(Error::Divergence { eta: cfg.eta, step, loss, guard });
        }
        let hit = cfg.target_loss.is_some_and(|t| loss <= t);
        if let Some(r) = record {
            records.push(r);
        }
        if hit {
            stop = StopReason::TargetLoss;
            break;
        }
        if k == cfg.max_steps {
            break;
        }
        match &mut state {
            ModelState::Full(net) => full_gd_step(net, ds, cfg.eta),
            ModelState::Reduced(s) => *s = crate::models::reduced_step(s, ds, cfg.eta),
        }
    }
    let config = TrajectoryConfig {
        kind: RunKind::GradientDescent,
        eta: cfg.eta,
        mode: cfg.mode,
        seed: cfg.seed,
        data: content_hash(&ds.spec),
        max_steps: Some(cfg.max_steps),
        target_loss: cfg.target_loss,
        record_stride: cfg.record_stride,
        vector_stride: cfg.vector_stride,
        dt: None,
        horizon: None,
        branch_time: None,
    };
    Ok(GdRun { trajectory: Trajectory::new(config, records, stop)?, final_state: state, switch_step })
}

fn state_reduced(s: &ModelState) -> &ReducedState {
    match s {
        ModelState::Reduced(r) => r,
        ModelState::Full(_) => unreachable!("called on a reduced state"),
    }
}

fn full_gd_step(net: &mut LinearNet, ds: &DataSet, eta: f64) {
    let g = full_field(net, ds);
    net.w1 -= g.w1 * eta;
    net.w2 -= g.w2 * eta;
}

fn full_field(net: &LinearNet, ds: &DataSet) -> LinearNet {
    let n = ds.n() as f64;
    let h = net.features(ds);
    let e = h.tr_mul(&net.w2) - &ds.y;
    let xe = &ds.x * &e;
    LinearNet { w1: &net.w2 * xe.transpose() / n, w2: &h * &e / n }
}

fn rk4<S>(s: &S, dt: f64, field: impl Fn(&S) -> Result<S>, axpy: impl Fn(&S, f64, &S) -> S) -> Result<S> {
    let k1 = field(s)?;
    let k2 = field(&axpy(s, dt / 2.0, &k1))?;
    let k3 = field(&axpy(s, dt / 2.0, &k2))?;
    let k4 = field(&axpy(s, dt, &k3))?;
    let mut out = axpy(s, dt / 6.0, &k1);
    out = axpy(&out, dt / 3.0, &k2);
    out = axpy(&out, dt / 3.0, &k3);
    Ok(axpy(&out, dt / 6.0, &k4))
}

fn axpy_reduced(s: &ReducedState, a: f64, d: &ReducedState) -> ReducedState {
    ReducedState { c: s.c + a * d.c, v: &s.v + &d.v * a, fit_residual: s.fit_residual }
}

fn axpy_full(s: &LinearNet, a: f64, d: &LinearNet) -> LinearNet {
    LinearNet { w1: &s.w1 + &d.w1 * a, w2: &s.w2 + &d.w2 * a }
}

/// Reduced flow field `-eta (G_c + sigma dS/dc, G_v)`; `sigma` is recomputed from the state
/// when the constraint is active.
fn reduced_field(s: &ReducedState, ds: &DataSet, eta: f64, constrained: bool) -> ReducedState {
    let (gc, gv) = crate::models::reduced_grads(s, ds);
    let sigma = if constrained { central_sigma(s, ds, gc) } else { 0.0 };
    let ds_dc = 2.0 * ds.lambda1() * s.c / ds.n() as f64;
    ReducedState { c: -eta * (gc + sigma * ds_dc), v: gv * -eta, fit_residual: s.fit_residual }
}

fn central_sigma(s: &ReducedState, ds: &DataSet, gc: f64) -> f64 {
    if s.c == 0.0 {
        return 0.0;
    }
    (-gc * ds.n() as f64 / (2.0 * ds.lambda1() * s.c)).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    /// Time scale: the field is `-eta grad L`.
    pub eta: f64,
    pub horizon: f64,
    pub dt: f64,
    /// Integration steps between records.
    pub record_every: usize,
    pub vector_every: Option<usize>,
    pub seed: u64,
}

impl FlowConfig {
    pub fn new(eta: f64, horizon: f64, dt: f64) -> Self {
        FlowConfig { eta, horizon, dt, record_every: 1, vector_every: None, seed: 0 }
    }

    fn steps(&self) -> Result<usize> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return invalid(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.eta > 0.0) || !(self.horizon >= 0.0) {
            return invalid(format!("need eta > 0 and horizon >= 0, got {} and {}", self.eta, self.horizon));
        }
        if self.record_every == 0 || self.vector_every == Some(0) {
            return invalid("record intervals must be positive");
        }
        let steps = (self.horizon / self.dt).round();
        if (steps * self.dt - self.horizon).abs() > 1e-9 * self.horizon.max(1.0) {
            return invalid(format!("horizon {} is not a multiple of dt {}", self.horizon, self.dt));
        }
        Ok(steps as usize)
    }

    fn trajectory_config(&self, kind: RunKind, mode: Mode, ds: &DataSet) -> TrajectoryConfig {
        TrajectoryConfig {
            kind,
            eta: self.eta,
            mode,
            seed: self.seed,
            data: content_hash(&ds.spec),
            max_steps: None,
            target_loss: None,
            record_stride: self.record_every,
            vector_stride: self.vector_every,
            dt: Some(self.dt),
            horizon: Some(self.horizon),
            branch_time: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FlowRun {
    pub trajectory: Trajectory,
    pub final_state: ModelState,
}

/// Fixed-step RK4 integration of `d theta/dt = -eta grad L`.
///
/// Fails with [`Error::Instability`] when the loss rises by more than `1e-8 * dt` relative
/// to the initial loss across a step.
pub fn gradient_flow(init: &ModelState, ds: &DataSet, cfg: &FlowConfig) -> Result<FlowRun> {
    flow_with_offset(init, ds, cfg, 0.0, RunKind::GradientFlow)
}

fn flow_with_offset(init: &ModelState, ds: &DataSet, cfg: &FlowConfig, t0: f64, kind: RunKind) -> Result<FlowRun> {
    let steps = cfg.steps()?;
    let rec = Recorder::new(ds, cfg.eta);
    let mut state = init.clone();
    let loss0 = state.loss(ds)?;
    let tol = ENERGY_TOL * cfg.dt * loss0.max(f64::MIN_POSITIVE);
    let mut records = Vec::new();
    let mut prev = loss0;
    for i in 0..=steps {
        let time = t0 + i as f64 * cfg.dt;
        let last = i == steps;
        if i % cfg.record_every == 0 || last {
            let vectors = last || cfg.vector_every.is_some_and(|v| i % v == 0);
            let r = match &state {
                ModelState::Reduced(s) => rec.reduced(s, i, time, vectors)?,
                ModelState::Full(net) => rec.full(net, &net.features(ds), i, time, vectors)?.0,
            };
            records.push(r);
        }
        if last {
            break;
        }
        state = match &state {
            ModelState::Reduced(s) => {
                ModelState::Reduced(rk4(s, cfg.dt, |x| Ok(reduced_field(x, ds, cfg.eta, false)), axpy_reduced)?)
            }
            ModelState::Full(net) => {
                let field = |x: &LinearNet| {
                    let g = full_field(x, ds);
                    Ok(LinearNet { w1: g.w1 * -cfg.eta, w2: g.w2 * -cfg.eta })
                };
                ModelState::Full(rk4(net, cfg.dt, field, axpy_full)?)
            }
        };
        let loss = state.loss(ds)?;
        if !loss.is_finite() || loss > prev + tol {
            return Err(Error::Instability { time: time + cfg.dt, before: prev, after: loss });
        }
        prev = loss;
    }
    let mode = match init {
        ModelState::Full(_) => Mode::Full,
        ModelState::Reduced(_) => Mode::Reduced,
    };
    let trajectory = Trajectory::new(cfg.trajectory_config(kind, mode, ds), records, StopReason::Horizon)?;
    Ok(FlowRun { trajectory, final_state: state })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentralFlowState {
    pub c: f64,
    pub v: DVector<f64>,
    /// Penalty multiplier; positive only while constrained.
    pub sigma: f64,
    pub constrained: bool,
}

#[derive(Debug, Clone)]
pub struct CentralFlowRun {
    pub trajectory: Trajectory,
    pub final_state: CentralFlowState,
}

/// Rank-1 central flow: gradient flow with the penalty `sigma dS/dc`, `S = lambda_1 c^2 / n`,
/// holding `S <= 2/eta`.
///
/// The constraint activates once `S >= 2/eta - 1e-9` and releases when `S` falls below that
/// level. After each step an overshoot beyond `2/eta + 1e-9` is projected back onto the surface.
/// The initial state must satisfy the constraint.
pub fn central_flow_reduced(init: &ReducedState, ds: &DataSet, cfg: &FlowConfig) -> Result<CentralFlowRun> {
    let steps = cfg.steps()?;
    let n = ds.n() as f64;
    let lam1 = ds.lambda1();
    let limit = 2.0 / cfg.eta;
    let c_star = (2.0 * n / (cfg.eta * lam1)).sqrt();
    let rec = Recorder::new(ds, cfg.eta);
    let mut s = init.clone();
    let mut constrained = false;
    let mut activation = None;
    let mut projections = 0;
    let mut records = Vec::new();
    let sharp = |s: &ReducedState| lam1 * s.c2() / n;
    if sharp(init) > limit + ACTIVATION_HYSTERESIS {
        return invalid(format!("initial sharpness {} is above 2/eta = {limit}", sharp(init)));
    }
    for i in 0..=steps {
        let time = i as f64 * cfg.dt;
        let sv = sharp(&s);
        if !constrained && sv >= limit - ACTIVATION_HYSTERESIS {
            constrained = true;
            activation.get_or_insert(time);
        } else if constrained && sv < limit - ACTIVATION_HYSTERESIS {
            constrained = false;
        }
        let sigma = if constrained { central_sigma(&s, ds, crate::models::reduced_grads(&s, ds).0) } else { 0.0 };
        let last = i == steps;
        if i % cfg.record_every == 0 || last {
            let vectors = last || cfg.vector_every.is_some_and(|v| i % v == 0);
            let mut r = rec.reduced(&s, i, time, vectors)?;
            r.sigma = sigma;
            records.push(r);
        }
        if last {
            break;
        }
        let mut next = rk4(&s, cfg.dt, |x| Ok(reduced_field(x, ds, cfg.eta, constrained)), axpy_reduced)?;
        if constrained && next.c.signum() != s.c.signum() {
            return Err(Error::Degenerate(format!("c crossed zero at t = {} while constrained", time + cfg.dt)));
        }
        if sharp(&next) > limit + ACTIVATION_HYSTERESIS {
            next.c = c_star.copysign(next.c);
            projections += 1;
        }
        if !next.loss(ds).is_finite() {
            return Err(Error::Instability { time: time + cfg.dt, before: s.loss(ds), after: next.loss(ds) });
        }
        s = next;
    }
    let sigma = if constrained { central_sigma(&s, ds, crate::models::reduced_grads(&s, ds).0) } else { 0.0 };
    let mut trajectory =
        Trajectory::new(cfg.trajectory_config(RunKind::CentralFlow, Mode::Reduced, ds), records, StopReason::Horizon)?;
    trajectory.flow = Some(FlowSummary { activation_time: activation, projections });
    Ok(CentralFlowRun { trajectory, final_state: CentralFlowState { c: s.c, v: s.v, sigma, constrained } })
}

/// Gradient flow restarted from the central-flow state at each branch time, for `t_branch`
/// units of time. Branch records carry absolute times.
pub fn branch_gradient_flow(
    central: &Trajectory,
    ds: &DataSet,
    branch_times: &[f64],
    t_branch: f64,
    dt: f64,
) -> Result<Vec<Trajectory>> {
    let span = central.last().time;
    let tol = central.config.dt.unwrap_or(dt) / 2.0;
    branch_times
        .iter()
        .map(|&bt| {
            if !(bt >= 0.0 && bt <= span + tol) {
                return invalid(format!("branch time {bt} outside the central span [0, {span}]"));
            }
            let r =
                central.at_time(bt, tol).ok_or_else(|| Error::Validation(format!("no central record at time {bt}")))?;
            let s = r.reduced_state().ok_or_else(|| {
                Error::Validation(format!("central record at time {bt} has no v; record vectors at branch times"))
            })?;
            let mut cfg = FlowConfig::new(central.config.eta, t_branch, dt);
            cfg.seed = central.config.seed;
            cfg.record_every = ((1.0 / dt).round() as usize).max(1);
            let mut run = flow_with_offset(&ModelState::Reduced(s), ds, &cfg, r.time, RunKind::Branch)?;
            run.trajectory.config.branch_time = Some(r.time);
            run.trajectory.provenance.config_hash = content_hash(&run.trajectory.config);
            Ok(run.trajectory)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReluRecord {
    pub step: usize,
    pub loss: f64,
    /// KTA of `K1 + K2`.
    pub kta: f64,
    /// `(lambda_1(K1) + lambda_2(K1)) / lambda_1(K2)`; NaN while `K2` vanishes.
    pub alpha: f64,
    /// `lambda_3(K1) / lambda_2(K1)`.
    pub rank2_ratio: f64,
}

impl ReluRecord {
    pub const COLUMNS: [&'static str; 5] = ["step", "loss", "kta", "alpha", "rank2_ratio"];

    pub fn row(&self) -> Vec<f64> {
        vec![self.step as f64, self.loss, self.kta, self.alpha, self.rank2_ratio]
    }
}

/// Plain GD on the two-layer ReLU net, recording the kernel split every `record_stride` steps.
pub fn relu_gd_train(
    mut net: ReluNet,
    ds: &DataSet,
    eta: f64,
    steps: usize,
    record_stride: usize,
) -> Result<(ReluNet, Vec<ReluRecord>)> {
    if !(eta > 0.0) || record_stride == 0 {
        return invalid("need eta > 0 and a positive record stride");
    }
    let loss0 = relu_loss(&net, ds)?;
    let guard = DIVERGENCE_FACTOR * loss0.max(f64::MIN_POSITIVE);
    let mut out = Vec::new();
    for step in 0..=steps {
        let loss = relu_loss(&net, ds)?;
        if !loss.is_finite() || loss > guard {
            return Err(Error::Divergence { eta, step, loss, guard });
        }
        if step % record_stride == 0 || step == steps {
            let (k1, k2) = relu_ntk_components(&net, ds)?;
            let ev = |k: &DMatrix<f64>| {
                let mut e: Vec<f64> = k.clone().symmetric_eigenvalues().iter().copied().collect();
                e.sort_by(|a, b| b.total_cmp(a));
                e
            };
            let e1 = ev(&k1);
            let rank2_ratio = if e1.len() > 2 && e1[1] > 0.0 { e1[2] / e1[1] } else { f64::NAN };
            out.push(ReluRecord {
                step,
                loss,
                kta: kta(&(&k1 + &k2), &ds.y).unwrap_or(f64::NAN),
                alpha: generalized_alpha(&k1, &k2).unwrap_or(f64::NAN),
                rank2_ratio,
            });
        }
        if step == steps {
            break;
        }
        let g = relu_grads(&net, ds)?;
        net.w1 -= g.w1 * eta;
        net.w2 -= g.w2 * eta;
    }
    Ok((net, out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    I,
    II,
    III,
    IV,
}

impl Phase {
    pub fn sharpness_increasing(self) -> bool {
        matches!(self, Phase::I | Phase::II)
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::I => "I",
            Phase::II => "II",
            Phase::III => "III",
            Phase::IV => "IV",
        })
    }
}

/// Labels `[start, end)` of the series, except the final interval which also owns `end`
/// (the last index). `end` is the next interval's `start`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseInterval {
    pub label: Phase,
    pub start: usize,
    pub end: usize,
    /// Mean of `S_t - 2/eta` over the labelled points.
    pub mean_delta: f64,
}

/// Per-point labels: trend `S_t - S_{t-w}` (against `S_0` for `t < w`, ties count as rising)
/// and position relative to `2/eta`.
pub fn phase_labels(series: &[f64], two_over_eta: f64, w: usize) -> Vec<Phase> {
    (0..series.len())
        .map(|t| {
            let up = series[t] - series[t.saturating_sub(w)] >= 0.0;
            match (series[t] < two_over_eta, up) {
                (true, true) => Phase::I,
                (true, false) => Phase::IV,
                (false, true) => Phase::II,
                (false, false) => Phase::III,
            }
        })
        .collect()
}

/// Runs of equal labels; runs shorter than `w` are absorbed into the longer neighbour
/// (the earlier one on ties).
pub fn detect_phases(series: &[f64], two_over_eta: f64, w: usize) -> Result<Vec<PhaseInterval>> {
    if w == 0 {
        return invalid("phase window must be positive");
    }
    if series.len() <= 2 * w {
        return invalid(format!("series of length {} too short for window {w}", series.len()));
    }
    let labels = phase_labels(series, two_over_eta, w);
    // (label, first, last) inclusive
    let mut runs: Vec<(Phase, usize, usize)> = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        match runs.last_mut() {
            Some(r) if r.0 == l => r.2 = i,
            _ => runs.push((l, i, i)),
        }
    }
    while let Some(i) = runs.iter().position(|r| r.2 - r.1 + 1 < w) {
        if runs.len() == 1 {
            break;
        }
        let len = |r: &(Phase, usize, usize)| r.2 - r.1;
        let nb = if i == 0 {
            1
        } else if i == runs.len() - 1 || len(&runs[i - 1]) >= len(&runs[i + 1]) {
            i - 1
        } else {
            i + 1
        };
        let (_, a, b) = runs.remove(i);
        let nb = if nb > i { nb - 1 } else { nb };
        runs[nb].1 = runs[nb].1.min(a);
        runs[nb].2 = runs[nb].2.max(b);
        let mut merged: Vec<(Phase, usize, usize)> = Vec::with_capacity(runs.len());
        for r in runs {
            match merged.last_mut() {
                Some(m) if m.0 == r.0 => m.2 = r.2,
                _ => merged.push(r),
            }
        }
        runs = merged;
    }
    let last = series.len() - 1;
    Ok(runs
        .iter()
        .enumerate()
        .map(|(j, &(label, a, b))| {
            let mean_delta = series[a..=b].iter().map(|s| s - two_over_eta).sum::<f64>() / (b - a + 1) as f64;
            let end = if j + 1 < runs.len() { runs[j + 1].1 } else { last };
            PhaseInterval { label, start: a, end, mean_delta }
        })
        .collect())
}

/// Label transitions outside the cycle `I -> II -> III -> IV -> I`, as `(from, to)` pairs
/// that go backwards (`II -> I`, `IV -> III`).
pub fn forbidden_transitions(intervals: &[PhaseInterval]) -> Vec<(usize, Phase, Phase)> {
    intervals
        .windows(2)
        .enumerate()
        .filter(|(_, w)| matches!((w[0].label, w[1].label), (Phase::II, Phase::I) | (Phase::IV, Phase::III)))
        .map(|(i, w)| (i, w[0].label, w[1].label))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalKtaRow {
    pub label: Option<Phase>,
    pub start_step: usize,
    pub end_step: usize,
    pub increasing: bool,
    pub total: f64,
    pub per_step: f64,
}

/// KTA change across each interval and its average per step.
pub fn interval_kta_stats(steps: &[usize], kta: &[f64], intervals: &[PhaseInterval]) -> Result<Vec<IntervalKtaRow>> {
    if steps.len() != kta.len() {
        return invalid("step and KTA series differ in length");
    }
    intervals
        .iter()
        .map(|iv| {
            if iv.start > iv.end || iv.end >= kta.len() {
                return invalid(format!("interval [{}, {}] outside {} records", iv.start, iv.end, kta.len()));
            }
            let total = kta[iv.end] - kta[iv.start];
            let span = steps[iv.end] - steps[iv.start];
            Ok(IntervalKtaRow {
                label: Some(iv.label),
                start_step: steps[iv.start],
                end_step: steps[iv.end],
                increasing: iv.label.sharpness_increasing(),
                total,
                per_step: if span == 0 { 0.0 } else { total / span as f64 },
            })
        })
        .collect()
}

pub fn trajectory_kta_stats(traj: &Trajectory, intervals: &[PhaseInterval]) -> Result<Vec<IntervalKtaRow>> {
    let steps: Vec<usize> = traj.records.iter().map(|r| r.step).collect();
    interval_kta_stats(&steps, &traj.kta_series(), intervals)
}

/// Mean of per-interval averages over rows with increasing / decreasing sharpness.
pub fn mean_rate_by_trend(rows: &[IntervalKtaRow]) -> (Option<f64>, Option<f64>) {
    let mean = |inc: bool| {
        let v: Vec<f64> = rows.iter().filter(|r| r.increasing == inc).map(|r| r.per_step).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    (mean(true), mean(false))
}

/// Text table with intervals as columns and rows
/// `Iteration interval / Sharpness behavior / Total change of KTA / Avg change of KTA per step`.
pub fn format_kta_table(rows: &[IntervalKtaRow]) -> String {
    let mut cols: Vec<[String; 4]> = vec![[
        "Iteration interval".into(),
        "Sharpness behavior".into(),
        "Total change of KTA".into(),
        "Avg change of KTA per step".into(),
    ]];
    for r in rows {
        cols.push([
            format!("{}-{}", r.start_step, r.end_step),
            if r.increasing { "increase" } else { "decrease" }.into(),
            format!("{:.3e}", r.total),
            format!("{:.3e}", r.per_step),
        ]);
    }
    let widths: Vec<usize> = cols.iter().map(|c| c.iter().map(String::len).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for row in 0..4 {
        let line: Vec<String> = cols.iter().zip(&widths).map(|(c, w)| format!("{:<w$}", c[row], w = *w)).collect();
        out.push_str(line.join(" | ").trim_end());
        out.push('\n');
    }
    out
}

pub fn write_kta_table_csv(path: &Path, rows: &[IntervalKtaRow]) -> Result<()> {
    let header: Vec<String> =
        ["start_step", "end_step", "phase", "increasing", "total", "per_step"].iter().map(|s| s.to_string()).collect();
    let phase_code = |p: Option<Phase>| match p {
        Some(Phase::I) => 1.0,
        Some(Phase::II) => 2.0,
        Some(Phase::III) => 3.0,
        Some(Phase::IV) => 4.0,
        None => 0.0,
    };
    let body: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            vec![
                r.start_step as f64,
                r.end_step as f64,
                phase_code(r.label),
                r.increasing as u8 as f64,
                r.total,
                r.per_step,
            ]
        })
        .collect();
    write_table(path, &header, &body)
}

/// Non-overlapping block means of `x` over `block` consecutive points; a short tail is dropped.
pub fn block_means(x: &[f64], block: usize) -> Vec<f64> {
    if block == 0 {
        return Vec::new();
    }
    x.chunks_exact(block).map(|c| c.iter().sum::<f64>() / block as f64).collect()
}
