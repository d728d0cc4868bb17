//! Subcommand bodies. Each writes into its own output directory alongside a `manifest.json`
//! holding the resolved configuration, so `--config <dir>/manifest.json` repeats the run.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use eoslab::datagen::{diagnostics, generate, DataSet, OutlierRule, SpectrumDiagnostics};
use eoslab::dynamics::{
    block_means, format_kta_table, gd_train, relu_gd_train, trajectory_kta_stats, write_kta_table_csv, GdConfig,
    IntervalKtaRow, ModelState, PhaseInterval, ReluRecord, RunKind, Trajectory,
};
use eoslab::experiment::{
    alpha_sweep, argmax_transitions, block_kta_gap, central_flow_experiment, log_grid, matched_loss_sweep,
    spiked_rank_one,
};
use eoslab::io::{content_hash, ensure_dir, file_sha256, write_json, write_table};
use eoslab::metrics::cumulative;
use eoslab::models::{load_checkpoint, save_checkpoint, LinearNet, ReducedState, ReluNet};
use eoslab::spectral::measured_argmax;
use eoslab::theorychecks::{
    check_alignment_shift, check_phase1_monotone, check_phase2_divergence, check_phase_kta_speed, check_sign_law,
    check_theorem_a, check_theorem_b_first, cycles, delta2_hat, max_sharpness_eta, CheckReport, Outcome,
    Phase2Tolerances, TheoremATolerances,
};
use eoslab::Error;
use serde::{Deserialize, Serialize};

use crate::config::{ModelMode, RunConfig};
use crate::svg::{bar_chart, line_plot, Panel, Series};

/// Checks that decide the `--strict` exit status.
pub const STRICT_CHECKS: [&str; 4] = ["theorem_A", "theorem_B", "sign_law", "phase_kta_speed"];

/// Raised when `--strict` is set and a strict check fails.
#[derive(Debug)]
pub struct StrictFailure(pub Vec<String>);

impl std::fmt::Display for StrictFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "strict checks failed: {}", self.0.join(", "))
    }
}

impl std::error::Error for StrictFailure {}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    config: &'a RunConfig,
    inputs: Vec<InputFile>,
    extra: serde_json::Value,
}

#[derive(Serialize)]
struct InputFile {
    path: String,
    sha256: String,
}

fn write_manifest(
    out: &Path,
    command: &str,
    cfg: &RunConfig,
    inputs: &[PathBuf],
    extra: serde_json::Value,
) -> Result<()> {
    let inputs = inputs
        .iter()
        .map(|p| Ok(InputFile { path: p.display().to_string(), sha256: file_sha256(p)? }))
        .collect::<eoslab::Result<Vec<_>>>()?;
    let m = Manifest { command, version: env!("CARGO_PKG_VERSION"), config: cfg, inputs, extra };
    write_json(&out.join("manifest.json"), &m)?;
    Ok(())
}

fn outlier_rule(cfg: &RunConfig) -> OutlierRule {
    OutlierRule { ratio: cfg.data.outlier_ratio }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn eta_tag(eta: f64) -> String {
    format!("eta_{eta}")
}

fn load_or_generate(cfg: &RunConfig, data: Option<&Path>) -> Result<(DataSet, Vec<PathBuf>)> {
    match data {
        Some(p) => Ok((DataSet::load(p)?, vec![p.to_path_buf()])),
        None => Ok((generate(&cfg.spec(cfg.seed))?, Vec::new())),
    }
}

pub fn generate_cmd(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let count = cfg.data.count;
    ensure_dir(&cfg.out)?;
    let mut written = Vec::new();
    let mut hashes = Vec::new();
    for seed in cfg.seed..cfg.seed + count as u64 {
        let ds = generate(&cfg.spec(seed))?;
        let (json, csv) = ds.save(&cfg.out, &format!("dataset_seed{seed}"), outlier_rule(cfg))?;
        hashes.push(file_sha256(&csv)?);
        println!("{}", json.display());
        written.push(json);
    }
    write_manifest(&cfg.out, "generate", cfg, &[], serde_json::json!({ "csv_sha256": hashes }))?;
    Ok(written)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ReducedCheckpoint {
    kind: String,
    step: usize,
    seed: u64,
    lineage: String,
    c: f64,
    v: Vec<f64>,
}

fn save_state(dir: &Path, state: &ModelState, step: usize, seed: u64, lineage: &str) -> Result<PathBuf> {
    match state {
        ModelState::Full(net) => {
            Ok(save_checkpoint(dir, "checkpoint", "linear", &net.w1, &net.w2, step, seed, lineage)?)
        }
        ModelState::Reduced(s) => {
            let path = dir.join("checkpoint.json");
            let ck = ReducedCheckpoint {
                kind: "reduced".into(),
                step,
                seed,
                lineage: lineage.into(),
                c: s.c,
                v: s.v.iter().copied().collect(),
            };
            write_json(&path, &ck)?;
            Ok(path)
        }
    }
}

fn load_state(path: &Path) -> Result<(ModelState, usize)> {
    let value: serde_json::Value = eoslab::io::read_json(path)?;
    match value.get("kind").and_then(|k| k.as_str()) {
        Some("reduced") => {
            let ck: ReducedCheckpoint = serde_json::from_value(value)?;
            Ok((ModelState::Reduced(ReducedState::new(ck.c, ck.v.into())), ck.step))
        }
        Some("linear") => {
            let (head, w1, w2) = load_checkpoint(path)?;
            Ok((ModelState::Full(LinearNet::new(w1, w2)?), head.step))
        }
        other => Err(Error::Validation(format!("{}: unsupported checkpoint kind {other:?}", path.display())).into()),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainRow {
    pub eta: f64,
    pub steps: usize,
    pub final_loss: f64,
    pub final_kta: f64,
    pub switch_step: Option<usize>,
    pub max_sharpness_eta: f64,
    pub eos: bool,
    pub argmax: Option<usize>,
    pub top5: Option<f64>,
}

fn summary_text(rows: &[TrainRow], target: Option<f64>) -> String {
    let mut s = String::new();
    if let Some(t) = target {
        let _ = writeln!(s, "matched-loss target {t:.6e}");
    }
    let _ = writeln!(
        s,
        "{:>8} {:>7} {:>12} {:>10} {:>8} {:>6} {:>7} {:>8}",
        "eta", "steps", "final_loss", "final_kta", "max_S*eta", "EoS", "argmax", "top5"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:>8} {:>7} {:>12.5e} {:>10.6} {:>8.4} {:>6} {:>7} {:>8}",
            r.eta,
            r.steps,
            r.final_loss,
            r.final_kta,
            r.max_sharpness_eta,
            if r.eos { "yes" } else { "no" },
            r.argmax.map_or("-".into(), |a| (a + 1).to_string()),
            r.top5.map_or("-".into(), |t| format!("{t:.4}")),
        );
    }
    s
}

fn train_row(eta: f64, traj: &Trajectory, switch_step: Option<usize>) -> TrainRow {
    let last = traj.last();
    let msh = max_sharpness_eta(traj);
    let ind = last.individual.as_ref();
    TrainRow {
        eta,
        steps: last.step,
        final_loss: last.loss,
        final_kta: last.kta,
        switch_step,
        max_sharpness_eta: msh,
        eos: msh >= 2.0,
        argmax: ind.map(|v| measured_argmax(v)),
        top5: ind.map(|v| cumulative(v)[4.min(v.len() - 1)]),
    }
}

pub fn train_cmd(cfg: &RunConfig, data: Option<&Path>, resume: Option<(&Path, usize)>) -> Result<Vec<TrainRow>> {
    cfg.validate()?;
    let (ds, inputs) = load_or_generate(cfg, data)?;
    ensure_dir(&cfg.out)?;
    let lineage = content_hash(cfg);
    let mut rows = Vec::new();
    let mut target = None;
    let mut inputs = inputs;
    match (cfg.model, resume) {
        (ModelMode::Relu, Some(_)) => bail!(Error::Validation("resume is supported for linear models only".into())),
        (ModelMode::Relu, None) => {
            for &eta in &cfg.etas {
                let net = ReluNet::init(ds.d(), cfg.hidden, cfg.init_scale, cfg.seed);
                let (net, recs) = relu_gd_train(net, &ds, eta, cfg.stop.reference_steps, cfg.record_stride)?;
                let dir = cfg.out.join(eta_tag(eta));
                ensure_dir(&dir)?;
                let header: Vec<String> = ReluRecord::COLUMNS.iter().map(|s| s.to_string()).collect();
                write_table(&dir.join("relu.csv"), &header, &recs.iter().map(ReluRecord::row).collect::<Vec<_>>())?;
                save_checkpoint(
                    &dir,
                    "checkpoint",
                    "relu",
                    &net.w1,
                    &net.w2,
                    cfg.stop.reference_steps,
                    cfg.seed,
                    &lineage,
                )?;
                let last = recs.last().expect("at least the initial record");
                rows.push(TrainRow {
                    eta,
                    steps: last.step,
                    final_loss: last.loss,
                    final_kta: last.kta,
                    switch_step: None,
                    max_sharpness_eta: f64::NAN,
                    eos: false,
                    argmax: None,
                    top5: None,
                });
            }
        }
        (_, Some((ckpt, steps))) => {
            if cfg.etas.len() != 1 {
                bail!(Error::Validation("resume takes exactly one learning rate".into()));
            }
            let eta = cfg.etas[0];
            let (state, step) = load_state(ckpt)?;
            inputs.push(ckpt.to_path_buf());
            let mut gc = GdConfig::new(eta, cfg.mode(), steps);
            if matches!(state, ModelState::Reduced(_)) {
                gc.mode = eoslab::dynamics::Mode::Reduced;
            }
            gc.start_step = step;
            gc.seed = cfg.seed;
            gc.record_stride = cfg.record_stride;
            gc.vector_stride = cfg.vector_stride;
            let run = gd_train(state, &ds, &gc)?;
            let dir = cfg.out.join(eta_tag(eta));
            run.trajectory.save(&dir, "trajectory")?;
            save_state(&dir, &run.final_state, run.trajectory.last().step, cfg.seed, &lineage)?;
            rows.push(train_row(eta, &run.trajectory, run.switch_step));
        }
        (_, None) => {
            let sweep = matched_loss_sweep(&ds, &cfg.sweep(), cfg.seed)?;
            target = Some(sweep.target_loss);
            for (eta, run) in &sweep.runs {
                let dir = cfg.out.join(eta_tag(*eta));
                run.trajectory.save(&dir, "trajectory")?;
                save_state(&dir, &run.final_state, run.trajectory.last().step, cfg.seed, &lineage)?;
                rows.push(train_row(*eta, &run.trajectory, run.switch_step));
            }
        }
    }
    if data.is_none() {
        let (json, _) = ds.save(&cfg.out, "dataset", outlier_rule(cfg))?;
        println!("dataset: {}", json.display());
    }
    let text = summary_text(&rows, target);
    print!("{text}");
    write_text(&cfg.out.join("summary.txt"), &text)?;
    write_json(&cfg.out.join("summary.json"), &rows)?;
    write_manifest(
        &cfg.out,
        "train",
        cfg,
        &inputs,
        serde_json::json!({ "resume": resume.map(|(p, s)| (p.display().to_string(), s)) }),
    )?;
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct CentralSummary {
    pub warm_steps: usize,
    pub activation_time: Option<f64>,
    pub projections: usize,
    pub max_sharpness: f64,
    pub two_over_eta: f64,
    pub min_sigma: f64,
    pub block: usize,
    pub block_gap: Option<f64>,
    pub blocks: usize,
    /// `KTA_central(t_end) - KTA_branch(t_end)` per branch.
    pub branch_margins: Vec<(f64, f64)>,
}

pub fn centralflow_cmd(cfg: &RunConfig, data: Option<&Path>) -> Result<CentralSummary> {
    cfg.validate()?;
    if cfg.model != ModelMode::Reduced {
        bail!(Error::Validation("centralflow needs the reduced model mode".into()));
    }
    let (ds, inputs) = load_or_generate(cfg, data)?;
    ensure_dir(&cfg.out)?;
    let res = central_flow_experiment(&ds, &cfg.central_flow, cfg.seed)?;
    res.gd.save(&cfg.out, "gd")?;
    res.central.trajectory.save(&cfg.out, "central")?;
    let ctraj = &res.central.trajectory;
    let mut margins = Vec::new();
    for b in &res.branches {
        let t0 = b.config.branch_time.unwrap_or(0.0);
        b.save(&cfg.out, &format!("branch_t{t0}"))?;
        let end = b.last();
        let c = ctraj.at_time(end.time, cfg.central_flow.dt / 2.0);
        margins.push((t0, c.map_or(f64::NAN, |c| c.kta - end.kta)));
    }
    let flow = ctraj.flow.clone().unwrap_or(eoslab::dynamics::FlowSummary { activation_time: None, projections: 0 });
    let gap = block_kta_gap(&res, cfg.central_block).filter(|g| g.1 > 0);
    let summary = CentralSummary {
        warm_steps: res.warm_steps,
        activation_time: flow.activation_time,
        projections: flow.projections,
        max_sharpness: ctraj.records.iter().map(|r| r.sharpness_approx).fold(f64::NEG_INFINITY, f64::max),
        two_over_eta: ctraj.two_over_eta(),
        min_sigma: ctraj.records.iter().map(|r| r.sigma).fold(f64::INFINITY, f64::min),
        block: cfg.central_block,
        block_gap: gap.map(|g| g.0),
        blocks: gap.map_or(0, |g| g.1),
        branch_margins: margins,
    };
    let mut text = String::new();
    let _ = writeln!(text, "warm start: {} full-weight steps", summary.warm_steps);
    let _ = writeln!(text, "activation time: {:?}, projections: {}", summary.activation_time, summary.projections);
    let _ = writeln!(
        text,
        "max sharpness {:.6} (2/eta = {:.6}), min sigma {:.3e}",
        summary.max_sharpness, summary.two_over_eta, summary.min_sigma
    );
    match summary.block_gap {
        Some(g) => {
            let _ =
                writeln!(text, "max |block mean KTA gap| over {} blocks of {}: {g:.4e}", summary.blocks, summary.block);
        }
        None => {
            let _ = writeln!(text, "no complete {}-step block after activation", summary.block);
        }
    }
    for (t, m) in &summary.branch_margins {
        let _ = writeln!(text, "branch at t={t}: central KTA - branch KTA at end = {m:.4e}");
    }
    print!("{text}");
    write_text(&cfg.out.join("summary.txt"), &text)?;
    write_json(&cfg.out.join("summary.json"), &summary)?;

    let mut kta = Panel::new("KTA: GD vs central flow", "step / time", "KTA");
    kta.series.push(Series::new("GD", res.gd.records.iter().map(|r| (r.time, r.kta)).collect()));
    kta.series.push(Series::new("central flow", ctraj.records.iter().map(|r| (r.time, r.kta)).collect()));
    for b in &res.branches {
        let t0 = b.config.branch_time.unwrap_or(0.0);
        kta.series.push(Series::new(format!("GF branch t={t0}"), b.records.iter().map(|r| (r.time, r.kta)).collect()));
    }
    let mut sh = Panel::new("sharpness", "step / time", "S");
    sh.series.push(Series::new("GD", res.gd.records.iter().map(|r| (r.time, r.sharpness_approx)).collect()));
    sh.series.push(Series::new("central flow", ctraj.records.iter().map(|r| (r.time, r.sharpness_approx)).collect()));
    sh.hlines.push((ctraj.two_over_eta(), "2/eta".into()));
    write_text(&cfg.out.join("central_flow.svg"), &line_plot(&[kta, sh], 800.0, 320.0))?;
    write_manifest(&cfg.out, "centralflow", cfg, &inputs, serde_json::Value::Null)?;
    Ok(summary)
}

fn a_hat_or_default(diag: &SpectrumDiagnostics) -> f64 {
    if diag.a_hat.is_finite() {
        diag.a_hat
    } else {
        1.0
    }
}

/// Every theory check that applies to a gradient-descent trajectory.
pub fn run_checks(
    traj: &Trajectory,
    intervals: &[PhaseInterval],
    kta_rows: &[IntervalKtaRow],
    ds: &DataSet,
    diag: &SpectrumDiagnostics,
    cfg: &RunConfig,
) -> Result<Vec<CheckReport>> {
    let tol = &cfg.tolerances;
    let mut out = Vec::new();
    let delta2 = delta2_hat(traj, intervals, ds, diag.delta1).ok();
    let first = |label| intervals.iter().find(|iv| iv.label == label);
    out.push(match first(eoslab::dynamics::Phase::I) {
        Some(iv) => check_phase1_monotone(traj, iv, ds, tol.phase1_rel_tol, tol.phase1_sign_floor)
            .unwrap_or_else(|e| CheckReport::skip("phase1_monotone", &e.to_string())),
        None => CheckReport::skip("phase1_monotone", "no Phase I interval"),
    });
    let Some(delta2) = delta2 else {
        for name in ["phase2_divergence", "theorem_A", "theorem_B"] {
            out.push(CheckReport::skip(name, "no Phase I interval for delta2_hat"));
        }
        out.push(check_sign_law(traj, ds, tol.sign_dead_zone));
        out.push(check_phase_kta_speed(kta_rows));
        return Ok(out);
    };
    let p2 = Phase2Tolerances { growth_tol: tol.growth_tol, tail_tol: tol.tail_tol };
    for iv in intervals.iter().filter(|iv| iv.label == eoslab::dynamics::Phase::II) {
        out.push(check_phase2_divergence(traj, iv, ds, delta2, p2)?);
    }
    let mut ta = TheoremATolerances::defaults(traj.config.eta, ds.n(), a_hat_or_default(diag));
    ta.e1_floor_mult = tol.e1_floor_mult;
    if let Some(f) = tol.delta_floor {
        ta.delta_floor = f;
    }
    out.push(check_theorem_a(traj, intervals, ds, delta2, ta)?);
    out.push(check_theorem_b_first(traj, intervals, delta2, tol.cos_tol)?);
    out.push(match cycles(intervals).first() {
        Some(&(t1, t2)) => {
            let snaps: Vec<usize> = (t1..=t2).filter(|&i| traj.records[i].individual.is_some()).collect();
            if snaps.len() < 2 {
                CheckReport::skip(
                    "alignment_shift",
                    "fewer than two vector records in the first cycle; lower vector_stride",
                )
            } else {
                check_alignment_shift(traj, &[snaps[0], *snaps.last().unwrap()], ds, diag)?
            }
        }
        None => CheckReport::skip("alignment_shift", "no III -> IV cycle"),
    });
    out.push(check_sign_law(traj, ds, tol.sign_dead_zone));
    out.push(check_phase_kta_speed(kta_rows));
    Ok(out)
}

fn dataset_for(traj: &Trajectory, cfg: &RunConfig, data: Option<&DataSet>) -> Result<DataSet> {
    let ds = match data {
        Some(d) => d.clone(),
        None => generate(&cfg.spec(traj.config.seed))?,
    };
    if content_hash(&ds.spec) != traj.config.data {
        bail!(Error::Validation(format!(
            "trajectory was recorded on dataset {} but the supplied data hashes to {}; pass --data",
            traj.config.data,
            content_hash(&ds.spec)
        )));
    }
    Ok(ds)
}

fn stem_of(path: &Path, traj: &Trajectory) -> String {
    let parent = path.parent().and_then(|p| p.file_name()).map(|s| s.to_string_lossy().into_owned());
    let file = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    match (traj.config.kind, parent) {
        (RunKind::GradientDescent, Some(p)) if file == "trajectory" => p,
        _ => file,
    }
}

fn decimated(xs: &[f64], ys: &[f64], block: usize) -> Vec<(f64, f64)> {
    if block <= 1 {
        return xs.iter().copied().zip(ys.iter().copied()).collect();
    }
    block_means(xs, block).into_iter().zip(block_means(ys, block)).collect()
}

pub fn analyze_cmd(cfg: &RunConfig, paths: &[PathBuf], data: Option<&Path>, strict: bool) -> Result<()> {
    cfg.validate()?;
    if paths.is_empty() {
        bail!(Error::Validation("analyze needs at least one trajectory".into()));
    }
    ensure_dir(&cfg.out)?;
    let supplied = data.map(DataSet::load).transpose()?;
    let mut inputs: Vec<PathBuf> = paths.to_vec();
    inputs.extend(data.map(Path::to_path_buf));
    let mut overlay = Panel::new("KTA", "step", "KTA");
    let mut comparison = Vec::new();
    let mut failed = Vec::new();
    for path in paths {
        let traj = Trajectory::load(path)?;
        if traj.records.len() < 2 {
            bail!(Error::Validation(format!(
                "{}: trajectory has {} records; need at least 2",
                path.display(),
                traj.records.len()
            )));
        }
        let is_gd = traj.config.kind == RunKind::GradientDescent;
        if is_gd && traj.config.record_stride != 1 {
            bail!(Error::Validation(format!(
                "{}: phase and theory checks need every step; re-run with record_stride 1 (got {})",
                path.display(),
                traj.config.record_stride
            )));
        }
        let ds = dataset_for(&traj, cfg, supplied.as_ref())?;
        let diag = diagnostics(&ds, outlier_rule(cfg));
        let stem = stem_of(path, &traj);
        let dir = cfg.out.join(&stem);
        ensure_dir(&dir)?;

        let intervals = traj.phases(cfg.phase_window)?;
        let header: Vec<String> =
            ["label", "start_step", "end_step", "mean_delta"].iter().map(|s| s.to_string()).collect();
        let mut phase_csv = header.join(",") + "\n";
        for iv in &intervals {
            let _ = writeln!(
                phase_csv,
                "{},{},{},{}",
                iv.label, traj.records[iv.start].step, traj.records[iv.end].step, iv.mean_delta
            );
        }
        write_text(&dir.join("phases.csv"), &phase_csv)?;
        let kta_rows = trajectory_kta_stats(&traj, &intervals)?;
        let table = format_kta_table(&kta_rows);
        write_text(&dir.join("kta_table.txt"), &table)?;
        write_kta_table_csv(&dir.join("kta_table.csv"), &kta_rows)?;

        let checks = if is_gd { run_checks(&traj, &intervals, &kta_rows, &ds, &diag, cfg)? } else { Vec::new() };
        write_json(&dir.join("checks.json"), &checks)?;

        println!("== {stem} (eta {}, {} records)", traj.config.eta, traj.records.len());
        println!("phases: {}", intervals.iter().map(|iv| iv.label.to_string()).collect::<Vec<_>>().join(" "));
        print!("{table}");
        for c in &checks {
            println!("{}", c.line());
            if STRICT_CHECKS.contains(&c.name.as_str()) && c.outcome == Outcome::Fail {
                failed.push(format!("{stem}:{}", c.name));
            }
        }

        let xs: Vec<f64> = traj.records.iter().map(|r| r.time).collect();
        overlay.series.push(Series::new(
            format!("{stem} (eta {})", traj.config.eta),
            decimated(&xs, &traj.kta_series(), cfg.decimate),
        ));
        let mut sh = Panel::new("sharpness", "step", "S");
        sh.series
            .push(Series::new("lambda_max(K)/n", traj.records.iter().map(|r| (r.time, r.sharpness_exact)).collect()));
        sh.series
            .push(Series::new("lambda_1 c^2/n", traj.records.iter().map(|r| (r.time, r.sharpness_approx)).collect()));
        sh.hlines.push((traj.two_over_eta(), "2/eta".into()));
        let mut al = Panel::new("alignment", "step", "KTA");
        al.series.push(Series::new("KTA", decimated(&xs, &traj.kta_series(), cfg.decimate)));
        write_text(&dir.join("sharpness_alignment.svg"), &line_plot(&[sh, al], 800.0, 320.0))?;

        let snaps: Vec<_> = traj.records.iter().filter(|r| r.individual.is_some()).collect();
        if let (Some(a), Some(b)) = (snaps.first(), snaps.last()) {
            let top = |r: &eoslab::dynamics::StepRecord| {
                r.individual.as_ref().unwrap().iter().take(20).copied().collect::<Vec<_>>()
            };
            let sets = vec![(format!("step {}", a.step), top(a)), (format!("step {}", b.step), top(b))];
            write_text(
                &dir.join("alignment_bars.svg"),
                &bar_chart("individual alignment, top 20", 20, &sets, 800.0, 320.0),
            )?;
        }
        let last = traj.last();
        let ind = last.individual.as_ref();
        comparison.push(vec![
            traj.config.eta,
            last.step as f64,
            last.loss,
            last.kta,
            ind.map_or(f64::NAN, |v| (measured_argmax(v) + 1) as f64),
            ind.map_or(f64::NAN, |v| cumulative(v)[4.min(v.len() - 1)]),
        ]);
    }
    write_text(&cfg.out.join("kta.svg"), &line_plot(&[overlay], 800.0, 360.0))?;
    let header: Vec<String> =
        ["eta", "final_step", "final_loss", "final_kta", "argmax", "top5"].iter().map(|s| s.to_string()).collect();
    write_table(&cfg.out.join("comparison.csv"), &header, &comparison)?;
    write_manifest(&cfg.out, "analyze", cfg, &inputs, serde_json::json!({ "strict": strict }))?;
    if strict && !failed.is_empty() {
        return Err(StrictFailure(failed).into());
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct DemoTransition {
    pub alpha: f64,
    pub from: usize,
    pub to: usize,
    /// Slack band `[T/(1+s), T/(1-s)]` of the matching threshold, when one exists.
    pub band: Option<(f64, f64)>,
    pub in_band: bool,
}

pub fn secular_demo_cmd(cfg: &RunConfig) -> Result<Vec<DemoTransition>> {
    cfg.validate()?;
    let w = &cfg.warmup;
    let (lambdas, b) = spiked_rank_one(&w.spikes, w.bulk, w.n, cfg.seed)?;
    let k = w.spikes.len() + 1;
    let a = w.bulk.ln() / (w.n as f64).ln();
    let alphas = log_grid(w.alpha_min, w.alpha_max, w.points);
    let rows = alpha_sweep(&lambdas, &b, &alphas, k, 0.0, a)?;
    let trans = argmax_transitions(&lambdas, &b, &rows, 1e-6)?;
    ensure_dir(&cfg.out)?;
    let s = (w.n as f64).powf(-a / 2.0);
    let out: Vec<DemoTransition> = trans
        .iter()
        .map(|t| {
            // Crossing into index j (0-based) happens near T_{j+1} = lambda_{j+1} - lambda_k.
            let band = (t.to + 1 < k).then(|| {
                let thr = lambdas[t.to] - lambdas[k - 1];
                (thr / (1.0 + s), thr / (1.0 - s))
            });
            let in_band = band.is_some_and(|(lo, hi)| lo <= t.alpha && t.alpha <= hi);
            DemoTransition { alpha: t.alpha, from: t.from, to: t.to, band, in_band }
        })
        .collect();

    let header: Vec<String> =
        ["alpha", "top1", "top2", "top3", "measured", "predicted", "confident"].iter().map(|s| s.to_string()).collect();
    let table: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let mut v = vec![r.alpha];
            v.extend((0..3).map(|i| r.top.get(i).copied().unwrap_or(f64::NAN)));
            v.extend([(r.measured + 1) as f64, (r.predicted + 1) as f64, r.confident as u8 as f64]);
            v
        })
        .collect();
    write_table(&cfg.out.join("warmup.csv"), &header, &table)?;
    write_json(&cfg.out.join("transitions.json"), &out)?;
    let mut p = Panel::new("alignment of b with the top eigenvectors", "log10 alpha", "(b^T u_i)^2");
    for i in 0..3.min(lambdas.len()) {
        p.series.push(Series::new(
            format!("u_{}", i + 1),
            rows.iter().map(|r| (r.alpha.log10(), r.top.get(i).copied().unwrap_or(f64::NAN))).collect(),
        ));
    }
    write_text(&cfg.out.join("warmup.svg"), &line_plot(&[p], 800.0, 360.0))?;
    println!("{} grid points, {} transitions", rows.len(), out.len());
    for t in &out {
        match t.band {
            Some((lo, hi)) => println!(
                "argmax {} -> {} at alpha = {:.4} (band [{lo:.4}, {hi:.4}]: {})",
                t.from + 1,
                t.to + 1,
                t.alpha,
                if t.in_band { "inside" } else { "outside" }
            ),
            None => println!("argmax {} -> {} at alpha = {:.4}", t.from + 1, t.to + 1, t.alpha),
        }
    }
    write_manifest(&cfg.out, "secular-demo", cfg, &[], serde_json::Value::Null)?;
    Ok(out)
}
