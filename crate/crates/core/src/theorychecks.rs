//! Quantitative checks of the rank-1 EoS statements on recorded trajectories.
//!
//! Order-of-magnitude conditions become named tolerances with unit or 10x defaults, and each
//! report carries its worst-case margin: `passed` holds exactly when `margin >= 0`.

use serde::{Deserialize, Serialize};

use crate::datagen::{DataSet, SpectrumDiagnostics};
use crate::dynamics::{mean_rate_by_trend, Coords, IntervalKtaRow, Phase, PhaseInterval, StepRecord, Trajectory};
use crate::error::{invalid, Result};
use crate::spectral::{measured_argmax, predict_alignment_argmax};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Pass,
    Fail,
    Inconclusive,
    Skip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckDetail {
    pub step: usize,
    pub margin: f64,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    pub outcome: Outcome,
    pub passed: bool,
    /// Worst-case slack; NaN when the check could not be evaluated.
    pub margin: f64,
    /// True when the pass holds over an empty or single-point set.
    pub vacuous: bool,
    pub summary: String,
    pub details: Vec<CheckDetail>,
    pub config: serde_json::Value,
}

impl CheckReport {
    fn new(name: &str, config: serde_json::Value) -> Self {
        CheckReport {
            name: name.into(),
            outcome: Outcome::Skip,
            passed: false,
            margin: f64::NAN,
            vacuous: false,
            summary: String::new(),
            details: Vec::new(),
            config,
        }
    }

    fn finish_margin(mut self, margin: f64, summary: String) -> Self {
        self.margin = margin;
        self.passed = margin >= 0.0;
        self.outcome = if self.passed { Outcome::Pass } else { Outcome::Fail };
        self.summary = summary;
        self
    }

    fn finish(mut self, outcome: Outcome, summary: String) -> Self {
        self.outcome = outcome;
        self.passed = false;
        self.margin = f64::NAN;
        self.summary = summary;
        self
    }

    pub fn skip(name: &str, reason: &str) -> Self {
        CheckReport::new(name, serde_json::Value::Null).finish(Outcome::Skip, reason.into())
    }

    /// One-line summary.
    pub fn line(&self) -> String {
        let tag = match self.outcome {
            Outcome::Pass => "PASS",
            Outcome::Fail => "FAIL",
            Outcome::Inconclusive => "INCONCLUSIVE",
            Outcome::Skip => "SKIP",
        };
        format!(
            "{tag} {} (margin {:.3e}){} {}",
            self.name,
            self.margin,
            if self.vacuous { " [vacuous]" } else { "" },
            self.summary
        )
    }
}

/// Strict-inequality margin: zero slack counts as a failure.
fn strict(m: f64) -> f64 {
    if m == 0.0 {
        -f64::MIN_POSITIVE
    } else {
        m
    }
}

fn interval_records<'a>(traj: &'a Trajectory, iv: &PhaseInterval) -> Result<&'a [StepRecord]> {
    if iv.start > iv.end || iv.end >= traj.records.len() {
        return invalid(format!("interval [{}, {}] outside {} records", iv.start, iv.end, traj.records.len()));
    }
    Ok(&traj.records[iv.start..=iv.end])
}

fn consecutive(recs: &[StepRecord]) -> bool {
    recs.windows(2).all(|w| w[1].step == w[0].step + 1)
}

/// `max(|E_T1| / |Y|, sqrt(delta_1))` with `T1` the end of the first Phase I interval.
pub fn delta2_hat(traj: &Trajectory, intervals: &[PhaseInterval], ds: &DataSet, delta1: f64) -> Result<f64> {
    let iv = intervals
        .iter()
        .find(|iv| iv.label == Phase::I)
        .ok_or_else(|| crate::Error::Validation("no Phase I interval".into()))?;
    let r = &traj.records[iv.end.min(traj.records.len() - 1)];
    let e_norm = (2.0 * ds.n() as f64 * r.loss).sqrt();
    Ok((e_norm / ds.y_norm()).max(delta1.sqrt()))
}

/// Largest `S eta` seen along the run.
pub fn max_sharpness_eta(traj: &Trajectory) -> f64 {
    traj.records.iter().map(|r| r.sharpness_approx * traj.config.eta).fold(f64::NEG_INFINITY, f64::max)
}

/// `c^2` and `|v|^2` non-decreasing per recorded step from the first record where
/// `<E, q_i><F, q_i>` is negative on every mode with `|<E, q_i>| >= sign_floor |Y|`.
pub fn check_phase1_monotone(
    traj: &Trajectory,
    iv: &PhaseInterval,
    ds: &DataSet,
    rel_tol: f64,
    sign_floor: f64,
) -> Result<CheckReport> {
    let name = "phase1_monotone";
    let report = CheckReport::new(name, serde_json::json!({ "rel_tol": rel_tol, "sign_floor": sign_floor }));
    let floor = sign_floor * ds.y_norm();
    if iv.label != Phase::I {
        return invalid(format!("{name} needs a Phase I interval, got {}", iv.label));
    }
    let recs = interval_records(traj, iv)?;
    if recs.iter().all(|r| r.v.is_none() || r.e_proj.is_none()) {
        return invalid(format!("{name}: interval has no recorded v / e_proj vectors"));
    }
    let onset = recs.iter().position(|r| match (&r.v, &r.e_proj) {
        (Some(v), Some(ep)) => {
            let vq = ds.kernel_spectrum.project(&nalgebra::DVector::from_column_slice(v));
            ep.iter().zip(vq.iter()).all(|(e, f)| e.abs() < floor || e * f * r.c < 0.0)
        }
        _ => false,
    });
    let Some(onset) = onset else {
        return Ok(report.finish(Outcome::Inconclusive, "sign condition never met in the interval".into()));
    };
    let recs = &recs[onset..];
    let mut report = report;
    let mut margin = f64::INFINITY;
    for w in recs.windows(2) {
        let mc = (w[1].c2 - w[0].c2) / w[0].c2.abs().max(f64::MIN_POSITIVE) + rel_tol;
        let mv = (w[1].v2 - w[0].v2) / w[0].v2.abs().max(f64::MIN_POSITIVE) + rel_tol;
        let m = mc.min(mv);
        margin = margin.min(m);
        if m < 0.0 {
            report.details.push(CheckDetail { step: w[1].step, margin: m, note: "decrease".into() });
        }
    }
    let pairs = recs.len().saturating_sub(1);
    if pairs <= 1 {
        report.vacuous = true;
    }
    if pairs == 0 {
        margin = 0.0;
    }
    Ok(report.finish_margin(margin, format!("{pairs} steps from onset at step {}", recs[0].step)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Phase2Tolerances {
    pub growth_tol: f64,
    pub tail_tol: f64,
}

impl Default for Phase2Tolerances {
    fn default() -> Self {
        Phase2Tolerances { growth_tol: 10.0, tail_tol: 0.1 }
    }
}

/// `|<E_t,q_1>| >= (1 + eta Delta_{t-1}) |<E_{t-1},q_1>| - growth_tol eta^2 delta2 |<Y,q_1>|`
/// and `sum_{i>=2} <E_t,q_i>^2 / |Y|^2 <= tail_tol` on every step of a Phase II interval.
pub fn check_phase2_divergence(
    traj: &Trajectory,
    iv: &PhaseInterval,
    ds: &DataSet,
    delta2: f64,
    tol: Phase2Tolerances,
) -> Result<CheckReport> {
    let name = "phase2_divergence";
    if iv.label != Phase::II {
        return invalid(format!("{name} needs a Phase II interval, got {}", iv.label));
    }
    let recs = interval_records(traj, iv)?;
    if !consecutive(recs) {
        return invalid(format!("{name}: needs q_1 residual projections at record_stride 1"));
    }
    let mut report = CheckReport::new(
        name,
        serde_json::json!({ "growth_tol": tol.growth_tol, "tail_tol": tol.tail_tol, "delta2_hat": delta2 }),
    );
    let eta = traj.config.eta;
    let yq1 = ds.kernel_spectrum.project(&ds.y)[0].abs();
    let yy = ds.y.norm_squared();
    let slack = tol.growth_tol * eta * eta * delta2 * yq1;
    let mut growth = f64::INFINITY;
    for w in recs.windows(2) {
        let rhs = (1.0 + eta * w[0].delta_t) * w[0].e_q1.abs() - slack;
        let m = (w[1].e_q1.abs() - rhs) / yq1;
        growth = growth.min(m);
        if m < 0.0 {
            report.details.push(CheckDetail { step: w[1].step, margin: m, note: "growth".into() });
        }
    }
    let mut tail = f64::INFINITY;
    for r in recs {
        let m = tol.tail_tol - r.e_tail / yy;
        tail = tail.min(m);
        if m < 0.0 {
            report.details.push(CheckDetail { step: r.step, margin: m, note: "tail".into() });
        }
    }
    report.vacuous = recs.len() <= 2;
    let summary = format!("growth margin {growth:.3e}, tail margin {tail:.3e} over {} steps", recs.len());
    Ok(report.finish_margin(growth.min(tail), summary))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoremATolerances {
    pub e1_floor_mult: f64,
    pub delta_floor: f64,
}

impl TheoremATolerances {
    /// `e1_floor_mult = 1`, `delta_floor = max(1, 1/(eta n^{a/4}))`.
    pub fn defaults(eta: f64, n: usize, a: f64) -> Self {
        TheoremATolerances { e1_floor_mult: 1.0, delta_floor: 1f64.max(1.0 / (eta * (n as f64).powf(a / 4.0))) }
    }
}

/// On Phase III steps with `|<E_t,q_1>| >= e1_floor_mult delta2 |Y|` and `Delta_t >= delta_floor`,
/// `c^2` strictly decreases and `|v|^2` strictly increases over the step.
pub fn check_theorem_a(
    traj: &Trajectory,
    intervals: &[PhaseInterval],
    ds: &DataSet,
    delta2: f64,
    tol: TheoremATolerances,
) -> Result<CheckReport> {
    let name = "theorem_A";
    let mut report = CheckReport::new(
        name,
        serde_json::json!({ "e1_floor_mult": tol.e1_floor_mult, "delta_floor": tol.delta_floor, "delta2_hat": delta2 }),
    );
    let floor = tol.e1_floor_mult * delta2 * ds.y_norm();
    let (mut total, mut qualifying) = (0usize, 0usize);
    let mut margin = f64::INFINITY;
    for iv in intervals.iter().filter(|iv| iv.label == Phase::III) {
        let recs = interval_records(traj, iv)?;
        for w in recs.windows(2) {
            if w[1].step != w[0].step + 1 || w[1].coords != w[0].coords {
                continue;
            }
            total += 1;
            if w[0].e_q1.abs() < floor || w[0].delta_t < tol.delta_floor {
                continue;
            }
            qualifying += 1;
            let mc = (w[0].c2 - w[1].c2) / w[0].c2;
            let mv = (w[1].v2 - w[0].v2) / w[0].v2;
            let m = strict(mc.min(mv));
            margin = margin.min(m);
            report.details.push(CheckDetail { step: w[0].step, margin: m, note: format!("dc2 {mc:.3e} dv2 {mv:.3e}") });
        }
    }
    if qualifying == 0 {
        return Ok(report.finish(Outcome::Inconclusive, format!("no qualifying step among {total} Phase III steps")));
    }
    let frac = qualifying as f64 / total as f64;
    Ok(report.finish_margin(margin, format!("{qualifying}/{total} Phase III steps qualify ({frac:.2})")))
}

/// `(t1, t2)` record indices: start of each Phase III interval and end of the Phase IV
/// interval right after it.
pub fn cycles(intervals: &[PhaseInterval]) -> Vec<(usize, usize)> {
    intervals
        .windows(2)
        .filter(|w| w[0].label == Phase::III && w[1].label == Phase::IV)
        .map(|w| (w[0].start, w[1].end))
        .collect()
}

/// Precondition `|E_t2|^2 <= |E_t1|^2`; asserts `alpha_t2 > alpha_t1` and
/// `cos(v, Y) >= 1 - cos_tol delta2` at both ends.
pub fn check_theorem_b(traj: &Trajectory, t1: usize, t2: usize, delta2: f64, cos_tol: f64) -> Result<CheckReport> {
    let name = "theorem_B";
    if t1 >= traj.records.len() || t2 >= traj.records.len() {
        return invalid(format!("{name}: indices ({t1}, {t2}) outside {} records", traj.records.len()));
    }
    let mut report = CheckReport::new(name, serde_json::json!({ "cos_tol": cos_tol, "delta2_hat": delta2 }));
    let (a, b) = (&traj.records[t1], &traj.records[t2]);
    if t1 == t2 {
        report.details.push(CheckDetail { step: a.step, margin: 0.0, note: "degenerate cycle".into() });
        return Ok(report.finish_margin(-f64::MIN_POSITIVE, "t1 = t2, alpha unchanged".into()));
    }
    let ratio = b.loss / a.loss;
    if ratio > 1.0 {
        return Ok(report.finish(
            Outcome::Inconclusive,
            format!("precondition fails: |E_t2|^2 / |E_t1|^2 = {ratio:.3} at steps {}..{}", a.step, b.step),
        ));
    }
    let ma = strict((b.alpha - a.alpha) / a.alpha);
    let floor = 1.0 - cos_tol * delta2;
    let (m1, m2) = (a.cos_vy - floor, b.cos_vy - floor);
    report.details.push(CheckDetail {
        step: a.step,
        margin: m1,
        note: format!("alpha {:.4e} cos {:.6}", a.alpha, a.cos_vy),
    });
    report.details.push(CheckDetail {
        step: b.step,
        margin: m2,
        note: format!("alpha {:.4e} cos {:.6}", b.alpha, b.cos_vy),
    });
    let summary =
        format!("steps {}..{}: loss ratio {ratio:.3}, alpha {:.3e} -> {:.3e}", a.step, b.step, a.alpha, b.alpha);
    Ok(report.finish_margin(ma.min(m1).min(m2), summary))
}

/// Compares the predicted and measured alignment argmax at each snapshot and asserts the
/// measured index does not move later between the first and last snapshot.
pub fn check_alignment_shift(
    traj: &Trajectory,
    snapshots: &[usize],
    ds: &DataSet,
    diag: &SpectrumDiagnostics,
) -> Result<CheckReport> {
    let name = "alignment_shift";
    let mut report = CheckReport::new(
        name,
        serde_json::json!({ "k": diag.k, "delta_lambda": diag.delta_lambda, "a_hat": diag.a_hat }),
    );
    if snapshots.len() < 2 {
        return invalid(format!("{name} needs at least two snapshots"));
    }
    let lambdas: Vec<f64> = ds.lambdas().iter().copied().collect();
    let mut measured = Vec::new();
    let mut mismatches = 0;
    for &i in snapshots {
        let r =
            traj.records.get(i).ok_or_else(|| crate::Error::Validation(format!("snapshot {i} outside trajectory")))?;
        let ind = r
            .individual
            .as_ref()
            .ok_or_else(|| crate::Error::Validation(format!("no individual alignment at step {}", r.step)))?;
        if r.fit_residual > 0.2 {
            return Ok(report.finish(
                Outcome::Inconclusive,
                format!("fit residual {:.3} > 0.2 at step {}", r.fit_residual, r.step),
            ));
        }
        let am = measured_argmax(ind);
        measured.push(am);
        if r.alpha.is_finite() && r.alpha > 0.0 {
            let p = predict_alignment_argmax(&lambdas, r.alpha, diag.k, diag.delta_lambda, diag.a_hat)?;
            let bad = p.confident && p.index != am;
            mismatches += bad as usize;
            report.details.push(CheckDetail {
                step: r.step,
                margin: if bad { -1.0 } else { 0.0 },
                note: format!(
                    "alpha {:.3e} measured {am} predicted {} ({})",
                    r.alpha,
                    p.index,
                    if p.confident { "confident" } else { "outside window" }
                ),
            });
        }
    }
    let shift = measured[0] as f64 - *measured.last().unwrap() as f64;
    let margin = if mismatches > 0 { -(mismatches as f64) } else { shift };
    Ok(report.finish_margin(margin, format!("argmax {:?}, {mismatches} confident mismatches", measured)))
}

/// `sign(c^2_{t+1} - c^2_t) = -sign(<E_t, F_t>)` on consecutive reduced records outside the
/// dead zone `|<E,F>| <= dead_zone |Y|^2`.
pub fn check_sign_law(traj: &Trajectory, ds: &DataSet, dead_zone: f64) -> CheckReport {
    let mut report = CheckReport::new("sign_law", serde_json::json!({ "dead_zone": dead_zone }));
    let zone = dead_zone * ds.y.norm_squared();
    let mut checked = 0;
    for w in traj.records.windows(2) {
        if w[1].step != w[0].step + 1 || w[0].coords != Coords::Reduced || w[1].coords != Coords::Reduced {
            continue;
        }
        let ef = w[0].e_dot_f;
        if ef.abs() <= zone {
            continue;
        }
        checked += 1;
        let dc = w[1].c2 - w[0].c2;
        if dc.signum() != -ef.signum() || dc == 0.0 {
            report.details.push(CheckDetail {
                step: w[0].step,
                margin: -1.0,
                note: format!("dc2 {dc:.3e} <E,F> {ef:.3e}"),
            });
        }
    }
    let violations = report.details.len();
    report.vacuous = checked == 0;
    let margin = if violations == 0 { 0.0 } else { -(violations as f64) };
    report.finish_margin(margin, format!("{violations} violations over {checked} steps"))
}

/// [`check_theorem_b`] on the first III -> IV cycle whose loss precondition holds; inconclusive when
/// no cycle qualifies.
pub fn check_theorem_b_first(
    traj: &Trajectory,
    intervals: &[PhaseInterval],
    delta2: f64,
    cos_tol: f64,
) -> Result<CheckReport> {
    let all = cycles(intervals);
    for &(t1, t2) in &all {
        let r = check_theorem_b(traj, t1, t2, delta2, cos_tol)?;
        if r.outcome != Outcome::Inconclusive {
            return Ok(r);
        }
    }
    let report = CheckReport::new("theorem_B", serde_json::json!({ "cos_tol": cos_tol, "delta2_hat": delta2 }));
    Ok(report.finish(Outcome::Inconclusive, format!("precondition fails on all {} cycles", all.len())))
}

/// Mean per-step KTA change over sharpness-decreasing intervals (III, IV) exceeds the mean
/// over sharpness-increasing ones (I, II).
pub fn check_phase_kta_speed(rows: &[IntervalKtaRow]) -> CheckReport {
    let report = CheckReport::new("phase_kta_speed", serde_json::Value::Null);
    match mean_rate_by_trend(rows) {
        (Some(inc), Some(dec)) => {
            report.finish_margin(strict(dec - inc), format!("mean dKTA/step {dec:.3e} (III/IV) vs {inc:.3e} (I/II)"))
        }
        _ => report.finish(Outcome::Inconclusive, "needs both increasing and decreasing intervals".into()),
    }
}
