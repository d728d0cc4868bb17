//! Matched-loss learning-rate sweeps on the spiked linear setup.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{generate, DataSet, SpikeSpec};
use crate::dynamics::{
    block_means, branch_gradient_flow, central_flow_reduced, gd_train, CentralFlowRun, FlowConfig, GdConfig, GdRun,
    Mode, ModelState, Trajectory,
};
use crate::error::{invalid, Error, Result};
use crate::models::{extract_reduced, linear_grads, LinearNet, ReducedState};
use crate::spectral::{measured_argmax, predict_alignment_argmax, solve_rank_one, RankOneProblem};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub etas: Vec<f64>,
    pub hidden: usize,
    pub init_scale: f64,
    /// Steps of the smallest learning rate; its final loss becomes the shared target.
    pub reference_steps: usize,
    /// Step cap for the other learning rates.
    pub max_steps: usize,
    pub mode: Mode,
    pub record_stride: usize,
    pub vector_stride: Option<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            etas: vec![0.005, 0.010, 0.014],
            hidden: 400,
            init_scale: 1e-2,
            reference_steps: 400,
            max_steps: 20_000,
            mode: Mode::Hybrid { switch_residual: 0.05 },
            record_stride: 1,
            vector_stride: None,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.etas.is_empty() || self.etas.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
            return invalid("learning rates must be a non-empty list of positive numbers");
        }
        if self.hidden == 0 || !(self.init_scale > 0.0) {
            return invalid("need hidden > 0 and init_scale > 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub seed: u64,
    pub target_loss: f64,
    /// Runs in ascending learning-rate order.
    pub runs: Vec<(f64, GdRun)>,
}

impl SweepResult {
    pub fn run(&self, eta: f64) -> Option<&GdRun> {
        self.runs.iter().find(|(e, _)| *e == eta).map(|(_, r)| r)
    }

    pub fn final_kta(&self) -> Vec<f64> {
        self.runs.iter().map(|(_, r)| r.trajectory.last().kta).collect()
    }
}

fn gd_config(cfg: &SweepConfig, eta: f64, seed: u64, max_steps: usize, target: Option<f64>) -> GdConfig {
    GdConfig {
        eta,
        mode: cfg.mode,
        max_steps,
        target_loss: target,
        record_stride: cfg.record_stride,
        vector_stride: cfg.vector_stride,
        start_step: 0,
        seed,
    }
}

/// All learning rates from the same initialization; the smallest runs `reference_steps`
/// and the rest stop at its final loss.
pub fn matched_loss_sweep(ds: &DataSet, cfg: &SweepConfig, seed: u64) -> Result<SweepResult> {
    cfg.validate()?;
    let mut etas = cfg.etas.clone();
    etas.sort_by(f64::total_cmp);
    etas.dedup();
    let init = ModelState::Full(LinearNet::init(ds.d(), cfg.hidden, cfg.init_scale, seed));
    let reference = gd_train(init.clone(), ds, &gd_config(cfg, etas[0], seed, cfg.reference_steps, None))?;
    let target = reference.trajectory.last().loss;
    let rest = etas[1..]
        .par_iter()
        .map(|&eta| {
            gd_train(init.clone(), ds, &gd_config(cfg, eta, seed, cfg.max_steps, Some(target))).map(|r| (eta, r))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut runs = vec![(etas[0], reference)];
    runs.extend(rest);
    Ok(SweepResult { seed, target_loss: target, runs })
}

/// Reference dataset and matched-loss sweep for each seed, run concurrently.
pub fn sweep_seeds(seeds: &[u64], cfg: &SweepConfig) -> Vec<(u64, Result<SweepResult>)> {
    seeds
        .par_iter()
        .map(|&seed| {
            let res = generate(&SpikeSpec::reference(seed)).and_then(|ds| matched_loss_sweep(&ds, cfg, seed));
            (seed, res)
        })
        .collect()
}

/// Full-weight GD from the standard initialization until the rank-1 fit residual drops below
/// `switch_residual`; returns the extracted state and the step reached.
pub fn warm_start(
    ds: &DataSet,
    eta: f64,
    hidden: usize,
    init_scale: f64,
    seed: u64,
    switch_residual: f64,
    max_steps: usize,
) -> Result<(ReducedState, usize)> {
    let mut net = LinearNet::init(ds.d(), hidden, init_scale, seed);
    for step in 0..=max_steps {
        let s = extract_reduced(&net, ds)?;
        if s.fit_residual < switch_residual {
            return Ok((s, step));
        }
        let g = linear_grads(&net, ds)?;
        net.w1 -= g.w1 * eta;
        net.w2 -= g.w2 * eta;
    }
    Err(Error::NotConverged {
        what: "rank-1 warm start",
        iterations: max_steps,
        state: format!("fit residual still >= {switch_residual}"),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentralFlowConfig {
    pub eta: f64,
    pub hidden: usize,
    pub init_scale: f64,
    pub switch_residual: f64,
    pub horizon: f64,
    pub dt: f64,
    pub branch_times: Vec<f64>,
    pub branch_length: f64,
}

impl Default for CentralFlowConfig {
    fn default() -> Self {
        CentralFlowConfig {
            eta: 0.014,
            hidden: 400,
            init_scale: 1e-2,
            switch_residual: 0.05,
            horizon: 700.0,
            dt: 0.1,
            branch_times: vec![100.0, 300.0, 500.0],
            branch_length: 100.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CentralFlowResult {
    /// Full-weight steps before the rank-1 handoff.
    pub warm_steps: usize,
    /// Reduced GD from the handoff state, one record per step (step 0 = handoff).
    pub gd: Trajectory,
    pub central: CentralFlowRun,
    pub branches: Vec<Trajectory>,
}

/// Central flow, matching reduced GD, and gradient-flow branches, all from one warm start.
/// Central records fall on integer times; `v` is kept at every branch time.
pub fn central_flow_experiment(ds: &DataSet, cfg: &CentralFlowConfig, seed: u64) -> Result<CentralFlowResult> {
    if cfg.branch_times.iter().any(|&b| b < 0.0 || b > cfg.horizon) {
        return invalid(format!("branch times {:?} must lie in [0, {}]", cfg.branch_times, cfg.horizon));
    }
    let (s0, warm_steps) = warm_start(ds, cfg.eta, cfg.hidden, cfg.init_scale, seed, cfg.switch_residual, 10_000)?;
    let per_unit = (1.0 / cfg.dt).round() as usize;
    if per_unit == 0 || ((per_unit as f64) * cfg.dt - 1.0).abs() > 1e-9 {
        return invalid(format!("dt = {} must divide one time unit", cfg.dt));
    }
    let mut gd_cfg = GdConfig::new(cfg.eta, Mode::Reduced, cfg.horizon.round() as usize);
    gd_cfg.seed = seed;
    let gd = gd_train(ModelState::Reduced(s0.clone()), ds, &gd_cfg)?.trajectory;
    let mut fc = FlowConfig::new(cfg.eta, cfg.horizon, cfg.dt);
    fc.seed = seed;
    fc.record_every = per_unit;
    fc.vector_every = Some(per_unit);
    let central = central_flow_reduced(&s0, ds, &fc)?;
    let branches = branch_gradient_flow(&central.trajectory, ds, &cfg.branch_times, cfg.branch_length, cfg.dt)?;
    Ok(CentralFlowResult { warm_steps, gd, central, branches })
}

/// Largest gap between `block`-step means of GD and central-flow KTA over blocks that start
/// at or after the constraint activation. Returns `(gap, blocks compared)`.
pub fn block_kta_gap(res: &CentralFlowResult, block: usize) -> Option<(f64, usize)> {
    let act = res.central.trajectory.flow.as_ref()?.activation_time?;
    let start = act.ceil() as usize;
    let gd = res.gd.kta_series();
    let cf: Vec<f64> = res.central.trajectory.records.iter().map(|r| r.kta).collect();
    let len = gd.len().min(cf.len());
    if start >= len {
        return None;
    }
    let a = block_means(&gd[start..len], block);
    let b = block_means(&cf[start..len], block);
    let gap = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    Some((gap, a.len()))
}

/// Spectrum `(lambda_1, lambda_2, bulk, ..., bulk)` with a random unit direction.
pub fn spiked_rank_one(spikes: &[f64], bulk: f64, n: usize, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    if spikes.len() >= n || spikes.iter().any(|&s| s <= bulk) {
        return invalid("need fewer spikes than n, each above the bulk value");
    }
    let mut lambdas = spikes.to_vec();
    lambdas.resize(n, bulk);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let norm = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    b.iter_mut().for_each(|x| *x /= norm);
    Ok((lambdas, b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaRow {
    pub alpha: f64,
    /// Alignment of `b` with the eigenvectors of the top three roots.
    pub top: Vec<f64>,
    pub measured: usize,
    pub predicted: usize,
    pub confident: bool,
}

fn argmax_at(lambdas: &[f64], b: &[f64], alpha: f64) -> Result<(usize, Vec<f64>)> {
    let sol = solve_rank_one(&RankOneProblem::new(lambdas.to_vec(), b.to_vec(), alpha)?)?;
    let al = sol.alignments()?;
    Ok((measured_argmax(&al), al))
}

/// Alignment of `b` with `diag(lambdas) + alpha b b^T` eigenvectors over an alpha grid.
pub fn alpha_sweep(
    lambdas: &[f64],
    b: &[f64],
    alphas: &[f64],
    k: usize,
    delta_lambda: f64,
    a: f64,
) -> Result<Vec<AlphaRow>> {
    alphas
        .iter()
        .map(|&alpha| {
            let (measured, al) = argmax_at(lambdas, b, alpha)?;
            let p = predict_alignment_argmax(lambdas, alpha, k, delta_lambda, a)?;
            Ok(AlphaRow {
                alpha,
                top: al.iter().take(3).copied().collect(),
                measured,
                predicted: p.index,
                confident: p.confident,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub alpha: f64,
    pub from: usize,
    pub to: usize,
}

/// Alpha values where the measured argmax changes between neighbouring grid points, refined
/// by bisection to `rel_tol`.
pub fn argmax_transitions(lambdas: &[f64], b: &[f64], rows: &[AlphaRow], rel_tol: f64) -> Result<Vec<Transition>> {
    let mut out = Vec::new();
    for w in rows.windows(2) {
        if w[0].measured == w[1].measured {
            continue;
        }
        let (mut lo, mut hi) = (w[0].alpha, w[1].alpha);
        while hi - lo > rel_tol * hi {
            let mid = 0.5 * (lo + hi);
            if argmax_at(lambdas, b, mid)?.0 == w[0].measured {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        out.push(Transition { alpha: 0.5 * (lo + hi), from: w[0].measured, to: w[1].measured });
    }
    Ok(out)
}

/// `n` points spaced evenly in log between `lo` and `hi`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|i| lo * (hi / lo).powf(i as f64 / (n - 1) as f64)).collect()
}
