//! Alignment and sharpness quantities.
//!
//! For rank-1 states the NTK is `K = c^2 K_x + v v^T`; in the eigenbasis of `K_x` this is
//! `c^2 (diag(lambda) + alpha b b^T)` with `b = Q^T v / |v|` and `alpha = |v|^2 / c^2`, so
//! its spectrum comes from the secular solver instead of a dense decomposition.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::datagen::DataSet;
use crate::error::{invalid, Error, Result};
use crate::models::{extract_reduced, ntk_linear, LinearNet, ReducedState};
use crate::spectral::{solve_rank_one, sym_eigh, top_eigenvalue, RankOneProblem, Spectrum};

pub const DEFAULT_EPSILON_FRAC: f64 = 0.0005;
pub const RAW_INVERSE_FLOOR: f64 = 1e-12;

/// `y^T K y / (|y|^2 |K|_F)`.
pub fn kta(k: &DMatrix<f64>, y: &DVector<f64>) -> Result<f64> {
    if k.nrows() != y.len() || !k.is_square() {
        return invalid(format!("kernel {:?} does not match target of length {}", k.shape(), y.len()));
    }
    let yy = y.norm_squared();
    let kf = k.norm();
    if yy == 0.0 || kf == 0.0 {
        return invalid("KTA needs nonzero target and kernel");
    }
    Ok(y.dot(&(k * y)) / (yy * kf))
}

/// `(y^T u_k)^2 / |y|^2` for every eigenvector `u_k`.
pub fn individual_alignment(spec: &Spectrum, y: &DVector<f64>) -> Result<Vec<f64>> {
    let yy = y.norm_squared();
    if yy == 0.0 {
        return invalid("individual alignment needs a nonzero target");
    }
    Ok(spec.project(y).iter().map(|p| p * p / yy).collect())
}

pub fn cumulative(individual: &[f64]) -> Vec<f64> {
    individual
        .iter()
        .scan(0.0, |acc, x| {
            *acc += x;
            Some(*acc)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InverseKta {
    /// Using eigenvalues above `1e-12 * lambda_max` only.
    pub raw: f64,
    /// `K + eps I` with `eps = epsilon_frac * lambda_max`.
    pub stabilized: f64,
    /// Number of eigenvalues dropped from the raw value.
    pub excluded: usize,
    pub epsilon: f64,
}

/// Inverse KTA from eigenvalues and the target's eigen-coordinates `y_i = <y, u_i>`.
pub fn inverse_kta_parts(values: &[f64], y_coords: &[f64], epsilon_frac: f64) -> Result<InverseKta> {
    let lmax = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(lmax > 0.0) {
        return invalid(format!("inverse KTA needs a positive top eigenvalue, got {lmax}"));
    }
    let yy: f64 = y_coords.iter().map(|x| x * x).sum();
    if yy == 0.0 {
        return invalid("inverse KTA needs a nonzero target");
    }
    let floor = RAW_INVERSE_FLOOR * lmax;
    let (mut num, mut fro, mut excluded) = (0.0, 0.0, 0);
    for (l, yc) in values.iter().zip(y_coords) {
        if *l > floor {
            num += yc * yc / l;
            fro += 1.0 / (l * l);
        } else {
            excluded += 1;
        }
    }
    let eps = epsilon_frac * lmax;
    let (mut num_s, mut fro_s) = (0.0, 0.0);
    for (l, yc) in values.iter().zip(y_coords) {
        let ls = l + eps;
        num_s += yc * yc / ls;
        fro_s += 1.0 / (ls * ls);
    }
    Ok(InverseKta { raw: num / (yy * fro.sqrt()), stabilized: num_s / (yy * fro_s.sqrt()), excluded, epsilon: eps })
}

pub fn inverse_kta(k: &DMatrix<f64>, y: &DVector<f64>, epsilon_frac: f64) -> Result<InverseKta> {
    let spec = sym_eigh(k)?;
    let coords = spec.project(y);
    inverse_kta_parts(spec.values.as_slice(), coords.as_slice(), epsilon_frac)
}

/// Cosine between the AGOP `(W2 W1)^T (W2 W1)` and `beta beta^T` in the Frobenius inner product.
pub fn agop_linear_alignment(net: &LinearNet, beta: &DVector<f64>) -> Result<f64> {
    let m = net.end_to_end();
    if m.len() != beta.len() {
        return invalid(format!("beta has {} entries, network input is {}", beta.len(), m.len()));
    }
    let mm = m.norm_squared();
    let bb = beta.norm_squared();
    if mm == 0.0 || bb == 0.0 {
        return invalid("AGOP alignment needs nonzero weights and beta");
    }
    let dot = m.dot(beta);
    Ok(dot * dot / (mm * bb))
}

/// `|v|^2 / c^2`.
pub fn alpha_ratio(s: &ReducedState) -> Result<f64> {
    if s.c.abs() < 1e-12 {
        return invalid(format!("alpha undefined for |c| = {:e} < 1e-12", s.c.abs()));
    }
    Ok(s.v2() / s.c2())
}

fn reduced_problem(s: &ReducedState, ds: &DataSet) -> Option<(RankOneProblem, f64)> {
    let v2 = s.v2();
    let c2 = s.c2();
    if v2 == 0.0 || c2 < 1e-24 {
        return None;
    }
    let b = ds.kernel_spectrum.project(&s.v) / v2.sqrt();
    let p = RankOneProblem::new(ds.lambdas().iter().copied().collect(), b.iter().copied().collect(), v2 / c2).ok()?;
    Some((p, c2))
}

fn reduced_dense(s: &ReducedState, ds: &DataSet) -> DMatrix<f64> {
    &ds.kernel * s.c2() + &s.v * s.v.transpose()
}

/// `(lambda_max(K)/n, lambda_1 c^2 / n)` for a rank-1 state.
pub fn sharpness_reduced(s: &ReducedState, ds: &DataSet) -> Result<(f64, f64)> {
    let n = ds.n() as f64;
    let approx = ds.lambda1() * s.c2() / n;
    let top = match reduced_problem(s, ds) {
        Some((p, c2)) => c2 * top_eigenvalue(&p)?,
        None if s.c2() < 1e-24 => s.v2(),
        None => ds.lambda1() * s.c2(),
    };
    Ok((top / n, approx))
}

/// Exact sharpness proxy `lambda_max(K)/n` and the rank-1 approximation from extraction.
pub fn sharpness_linear(net: &LinearNet, ds: &DataSet) -> Result<(f64, f64)> {
    let n = ds.n() as f64;
    let k = ntk_linear(net, ds)?;
    let top = sym_eigh(&k)?.top();
    let s = extract_reduced(net, ds)?;
    Ok((top / n, ds.lambda1() * s.c2() / n))
}

/// Eigenvalues of a rank-1 NTK and the target's coordinates `<y, u_i>` in its eigenbasis.
pub fn reduced_kernel_eigen(s: &ReducedState, ds: &DataSet) -> Result<(Vec<f64>, Vec<f64>)> {
    match reduced_problem(s, ds) {
        Some((p, c2)) => {
            let sol = solve_rank_one(&p)?;
            let yq = ds.kernel_spectrum.project(&ds.y);
            let mut coords = Vec::with_capacity(sol.n());
            for i in 0..sol.n() {
                coords.push(sol.eigvec(i)?.dot(&yq));
            }
            Ok((sol.tilde_lambdas.iter().map(|t| t * c2).collect(), coords))
        }
        None => {
            let spec = sym_eigh(&reduced_dense(s, ds))?;
            let coords = spec.project(&ds.y);
            Ok((spec.values.iter().copied().collect(), coords.iter().copied().collect()))
        }
    }
}

/// Closed-form KTA of `c^2 K_x + v v^T` against `Y`.
pub fn kta_reduced(s: &ReducedState, ds: &DataSet) -> Result<f64> {
    let c2 = s.c2();
    let yky = ds.y.dot(&(&ds.kernel * &ds.y));
    let vy = s.v.dot(&ds.y);
    let kx_f2: f64 = ds.lambdas().iter().map(|l| l * l).sum();
    let vkv = s.v.dot(&(&ds.kernel * &s.v));
    let v2 = s.v2();
    let fro2 = c2 * c2 * kx_f2 + 2.0 * c2 * vkv + v2 * v2;
    let yy = ds.y.norm_squared();
    if fro2 <= 0.0 || yy == 0.0 {
        return invalid("KTA needs nonzero target and kernel");
    }
    Ok((c2 * yky + vy * vy) / (yy * fro2.sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSnapshot {
    pub kta: f64,
    pub individual: Vec<f64>,
    pub cumulative: Vec<f64>,
    pub inverse_kta: f64,
    pub inverse_kta_stabilized: f64,
    pub inverse_kta_excluded: usize,
    pub alpha: Option<f64>,
    pub sharpness_exact: f64,
    pub sharpness_approx: Option<f64>,
    pub agop_alignment: Option<f64>,
}

impl AlignmentSnapshot {
    pub fn argmax(&self) -> usize {
        crate::spectral::measured_argmax(&self.individual)
    }

    /// Cumulative alignment of the top `m` eigenvectors.
    pub fn top_mass(&self, m: usize) -> f64 {
        self.cumulative[m.min(self.cumulative.len()) - 1]
    }

    pub const CSV_HEADER: [&'static str; 8] = [
        "kta",
        "inverse_kta",
        "inverse_kta_stabilized",
        "inverse_kta_excluded",
        "alpha",
        "sharpness_exact",
        "sharpness_approx",
        "agop_alignment",
    ];

    /// Scalar fields in [`Self::CSV_HEADER`] order; missing values are NaN.
    pub fn csv_row(&self) -> Vec<f64> {
        vec![
            self.kta,
            self.inverse_kta,
            self.inverse_kta_stabilized,
            self.inverse_kta_excluded as f64,
            self.alpha.unwrap_or(f64::NAN),
            self.sharpness_exact,
            self.sharpness_approx.unwrap_or(f64::NAN),
            self.agop_alignment.unwrap_or(f64::NAN),
        ]
    }
}

fn snapshot_from_eigen(
    values: &[f64],
    coords: &[f64],
    y: &DVector<f64>,
    kta: f64,
    n: usize,
    epsilon_frac: f64,
) -> Result<AlignmentSnapshot> {
    let yy = y.norm_squared();
    let individual: Vec<f64> = coords.iter().map(|c| c * c / yy).collect();
    let inv = inverse_kta_parts(values, coords, epsilon_frac)?;
    let top = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(AlignmentSnapshot {
        kta,
        cumulative: cumulative(&individual),
        individual,
        inverse_kta: inv.raw,
        inverse_kta_stabilized: inv.stabilized,
        inverse_kta_excluded: inv.excluded,
        alpha: None,
        sharpness_exact: top / n as f64,
        sharpness_approx: None,
        agop_alignment: None,
    })
}

/// Full snapshot of a rank-1 state (no AGOP: the input-side factor is not tracked).
pub fn snapshot_reduced(s: &ReducedState, ds: &DataSet, epsilon_frac: f64) -> Result<AlignmentSnapshot> {
    let (values, coords) = reduced_kernel_eigen(s, ds)?;
    let mut snap = snapshot_from_eigen(&values, &coords, &ds.y, kta_reduced(s, ds)?, ds.n(), epsilon_frac)?;
    snap.alpha = alpha_ratio(s).ok();
    snap.sharpness_approx = Some(ds.lambda1() * s.c2() / ds.n() as f64);
    Ok(snap)
}

/// Full snapshot of a linear net through its dense NTK.
pub fn snapshot_linear(net: &LinearNet, ds: &DataSet, epsilon_frac: f64) -> Result<AlignmentSnapshot> {
    let k = ntk_linear(net, ds)?;
    let spec = sym_eigh(&k)?;
    let coords = spec.project(&ds.y);
    let mut snap =
        snapshot_from_eigen(spec.values.as_slice(), coords.as_slice(), &ds.y, kta(&k, &ds.y)?, ds.n(), epsilon_frac)?;
    let s = extract_reduced(net, ds)?;
    snap.alpha = alpha_ratio(&s).ok();
    snap.sharpness_approx = Some(ds.lambda1() * s.c2() / ds.n() as f64);
    snap.agop_alignment = agop_linear_alignment(net, &ds.beta).ok();
    Ok(snap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticSnapshot {
    /// `<E, q_i>` for every eigenvector of `K_x`.
    pub e_proj: Vec<f64>,
    /// `lambda_1 c^2 / n - 2/eta`.
    pub delta_t: f64,
    /// `|E| / |Y|`.
    pub delta0_hat: f64,
    pub cos_vy: f64,
}

pub fn cosine(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let d = a.norm() * b.norm();
    if d == 0.0 {
        0.0
    } else {
        a.dot(b) / d
    }
}

pub fn diagnostic_snapshot(s: &ReducedState, ds: &DataSet, eta: f64) -> DiagnosticSnapshot {
    let e = s.residual(ds);
    DiagnosticSnapshot {
        e_proj: ds.kernel_spectrum.project(&e).iter().copied().collect(),
        delta_t: ds.lambda1() * s.c2() / ds.n() as f64 - 2.0 / eta,
        delta0_hat: e.norm() / ds.y_norm(),
        cos_vy: cosine(&s.v, &ds.y),
    }
}

/// Reject kernels that are not PSD to `-tol * lambda_max`.
pub fn check_psd(k: &DMatrix<f64>, tol: f64) -> Result<()> {
    let spec = sym_eigh(k)?;
    let min = spec.values[spec.len() - 1];
    if min < -tol * spec.top().abs() {
        return Err(Error::Validation(format!("kernel has eigenvalue {min:e} below -{tol:e} lambda_max")));
    }
    Ok(())
}
