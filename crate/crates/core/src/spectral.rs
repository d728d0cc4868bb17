//! Dense symmetric eigendecomposition and the diagonal-plus-rank-one engine.
//!
//! The rank-one solver works on `A = diag(lambdas) + alpha * b b^T` with `lambdas`
//! sorted non-increasing. Roots are stored as an offset from the nearest pole so that
//! the differences `lambda_k - root` entering the eigenvector formula stay accurate.
//!
//! All indices are 0-based: index 0 is the largest eigenvalue.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const SYMMETRY_TOL: f64 = 1e-9;
pub const DEFLATION_TOL: f64 = 1e-14;
pub const SECULAR_MAX_ITER: usize = 200;
pub const SECULAR_RESIDUAL_TOL: f64 = 1e-13;
pub const SECULAR_BRACKET_TOL: f64 = 1e-15;

/// Eigenvalues sorted non-increasing; column `i` of `vectors` pairs with `values[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

impl Spectrum {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn top(&self) -> f64 {
        self.values[0]
    }

    /// Coordinates of `x` in the eigenbasis, `Q^T x`.
    pub fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        self.vectors.tr_mul(x)
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        let scaled = &self.vectors * DMatrix::from_diagonal(&self.values);
        scaled * self.vectors.transpose()
    }
}

/// Flip `v` so its largest-magnitude entry is positive.
pub fn fix_sign(v: &mut DVector<f64>) {
    let mut best = 0;
    let mut best_abs = -1.0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > best_abs {
            best_abs = x.abs();
            best = i;
        }
    }
    if !v.is_empty() && v[best] < 0.0 {
        v.neg_mut();
    }
}

pub fn check_symmetric(m: &DMatrix<f64>, tol: f64) -> Result<()> {
    if !m.is_square() {
        return invalid(format!("matrix is {}x{}, expected square", m.nrows(), m.ncols()));
    }
    let norm = m.norm();
    if norm == 0.0 {
        return Ok(());
    }
    let asymmetry = (m - m.transpose()).norm() / norm;
    if asymmetry > tol {
        return Err(Error::NotSymmetric { asymmetry, tolerance: tol });
    }
    Ok(())
}

/// Dense eigendecomposition of a real symmetric matrix (implicit QR via nalgebra).
pub fn sym_eigh(m: &DMatrix<f64>) -> Result<Spectrum> {
    check_symmetric(m, SYMMETRY_TOL)?;
    let n = m.nrows();
    if n == 0 {
        return invalid("empty matrix");
    }
    if m.iter().any(|x| !x.is_finite()) {
        return invalid("matrix has non-finite entries");
    }
    let sym = (m + m.transpose()) * 0.5;
    let max_iter = 1000 * n;
    let eig = SymmetricEigen::try_new(sym, f64::EPSILON, max_iter).ok_or(Error::NotConverged {
        what: "symmetric eigensolver",
        iterations: max_iter,
        state: format!("n={n}"),
    })?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(src).into_owned();
        fix_sign(&mut col);
        vectors.set_column(dst, &col);
    }
    Ok(Spectrum { values, vectors })
}

/// `diag(lambdas) + alpha * b b^T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankOneProblem {
    pub lambdas: Vec<f64>,
    pub b: Vec<f64>,
    pub alpha: f64,
}

impl RankOneProblem {
    pub fn new(lambdas: Vec<f64>, b: Vec<f64>, alpha: f64) -> Result<Self> {
        let p = Self { lambdas, b, alpha };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambdas.is_empty() || self.lambdas.len() != self.b.len() {
            return invalid(format!(
                "lambdas ({}) and b ({}) must be non-empty and of equal length",
                self.lambdas.len(),
                self.b.len()
            ));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return invalid(format!("alpha must be positive and finite, got {}", self.alpha));
        }
        if self.lambdas.iter().chain(self.b.iter()).any(|x| !x.is_finite()) {
            return invalid("non-finite entry in lambdas or b");
        }
        if self.lambdas.windows(2).any(|w| w[0] < w[1]) {
            return invalid("lambdas must be sorted non-increasing");
        }
        if self.b_norm() == 0.0 {
            return invalid("b must be nonzero");
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.lambdas.len()
    }

    pub fn b_norm(&self) -> f64 {
        self.b.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn dense(&self) -> DMatrix<f64> {
        let n = self.n();
        let b = DVector::from_column_slice(&self.b);
        let mut a = &b * b.transpose() * self.alpha;
        for i in 0..n {
            a[(i, i)] += self.lambdas[i];
        }
        a
    }

    /// `sum_k b_k^2 / (lambda_k - t) + 1/alpha`; zero exactly at eigenvalues of the problem.
    pub fn secular(&self, t: f64) -> f64 {
        let s: f64 = self.lambdas.iter().zip(&self.b).map(|(l, b)| b * b / (l - t)).sum();
        s + 1.0 / self.alpha
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
enum Source {
    /// Root of the secular equation (index into `roots`).
    Root(usize),
    /// Coordinate with `b_k` below the deflation threshold.
    Deflated(usize),
    /// One of the `m - 1` trivial directions inside a tie group.
    Tie { group: usize, slot: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Root {
    origin: f64,
    tau: f64,
    iterations: usize,
}

impl Root {
    fn value(&self) -> f64 {
        self.origin + self.tau
    }
}

/// A secular pole: a distinct lambda carrying the combined weight of its tie group.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Pole {
    lambda: f64,
    weight: f64,
    coords: Vec<usize>,
}

/// Eigen-solution of a [`RankOneProblem`]; eigenvectors are evaluated lazily per index.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SecularSolution {
    pub tilde_lambdas: Vec<f64>,
    /// Secular residual `|sum b^2/(lambda - root) + 1/alpha|` per output; zero for trivial outputs.
    pub residuals: Vec<f64>,
    problem: RankOneProblem,
    sources: Vec<Source>,
    roots: Vec<Root>,
    poles: Vec<Pole>,
    deflated: Vec<bool>,
}

/// Solve `sum_k w_k/(d_k - tau) = -1/alpha` in coordinates shifted by `origin`.
fn solve_root(poles: &[Pole], alpha: f64, origin: f64, mut lo: f64, mut hi: f64) -> Result<(f64, usize)> {
    let inv_alpha = 1.0 / alpha;
    let shifted: Vec<(f64, f64)> = poles.iter().map(|p| (p.lambda - origin, p.weight)).collect();
    // g(tau) = 1/alpha + sum w/(d - tau); phi(tau) = tau * g(tau) has no pole at the origin.
    let eval = |tau: f64| -> (f64, f64) {
        let mut g = inv_alpha;
        let mut rest = inv_alpha;
        let mut drest = 0.0;
        for &(d, w) in &shifted {
            let r = 1.0 / (d - tau);
            g += w * r;
            if d != 0.0 {
                rest += w * r;
                drest += w * r * r;
            }
        }
        (g, rest + tau * drest)
    };

    let mut tau = 0.5 * (lo + hi);
    let mut widths = [hi - lo; 3];
    for iter in 1..=SECULAR_MAX_ITER {
        let (g, dphi) = eval(tau);
        if !g.is_finite() {
            // Landed on a pole through rounding; step back inside.
            tau = 0.5 * (lo + hi);
            continue;
        }
        if g.abs() <= SECULAR_RESIDUAL_TOL * inv_alpha {
            return Ok((tau, iter));
        }
        if g < 0.0 {
            lo = tau;
        } else {
            hi = tau;
        }
        let width = hi - lo;
        if width <= SECULAR_BRACKET_TOL * (origin + tau).abs() || width <= f64::MIN_POSITIVE {
            return Ok((tau, iter));
        }
        let phi = tau * g;
        let mut next = if dphi != 0.0 { tau - phi / dphi } else { f64::NAN };
        let stalled = width > 0.5 * widths[2];
        widths = [width, widths[0], widths[1]];
        if !(next > lo && next < hi) || stalled && iter % 3 == 0 {
            next = 0.5 * (lo + hi);
        }
        if next == tau {
            return Ok((tau, iter));
        }
        tau = next;
    }
    Err(Error::NotConverged {
        what: "secular root",
        iterations: SECULAR_MAX_ITER,
        state: format!("origin={origin:e} bracket=[{lo:e}, {hi:e}]"),
    })
}

/// Merge exactly tied active coordinates into poles; flag deflated coordinates.
fn build_poles(p: &RankOneProblem) -> (Vec<Pole>, Vec<bool>) {
    let b_norm = p.b_norm();
    let deflated: Vec<bool> = p.b.iter().map(|b| b.abs() <= DEFLATION_TOL * b_norm).collect();
    let mut poles: Vec<Pole> = Vec::new();
    for (k, &skip) in deflated.iter().enumerate() {
        if skip {
            continue;
        }
        match poles.last_mut() {
            Some(last) if last.lambda == p.lambdas[k] => {
                last.weight += p.b[k] * p.b[k];
                last.coords.push(k);
            }
            _ => poles.push(Pole { lambda: p.lambdas[k], weight: p.b[k] * p.b[k], coords: vec![k] }),
        }
    }
    (poles, deflated)
}

/// Largest eigenvalue only (one secular solve).
pub fn top_eigenvalue(p: &RankOneProblem) -> Result<f64> {
    p.validate()?;
    let (poles, _) = build_poles(p);
    let total: f64 = poles.iter().map(|q| q.weight).sum();
    let (tau, _) = solve_root(&poles, p.alpha, poles[0].lambda, 0.0, p.alpha * total)?;
    Ok((poles[0].lambda + tau).max(p.lambdas[0]))
}

/// Eigenvalues (and lazily eigenvectors) of `diag(lambdas) + alpha b b^T`.
pub fn solve_rank_one(p: &RankOneProblem) -> Result<SecularSolution> {
    p.validate()?;
    let n = p.n();
    let (poles, deflated) = build_poles(p);
    let total_weight: f64 = poles.iter().map(|q| q.weight).sum();

    let mut roots = Vec::with_capacity(poles.len());
    for i in 0..poles.len() {
        let root = if i == 0 {
            let (tau, it) = solve_root(&poles, p.alpha, poles[0].lambda, 0.0, p.alpha * total_weight)?;
            Root { origin: poles[0].lambda, tau, iterations: it }
        } else {
            let lower = poles[i].lambda;
            let upper = poles[i - 1].lambda;
            let half = 0.5 * (upper - lower);
            let g_mid: f64 = 1.0 / p.alpha + poles.iter().map(|q| q.weight / ((q.lambda - lower) - half)).sum::<f64>();
            if g_mid >= 0.0 {
                let (tau, it) = solve_root(&poles, p.alpha, lower, 0.0, half)?;
                Root { origin: lower, tau, iterations: it }
            } else {
                let (tau, it) = solve_root(&poles, p.alpha, upper, -half, 0.0)?;
                Root { origin: upper, tau, iterations: it }
            }
        };
        roots.push(root);
    }

    let mut entries: Vec<(f64, Source)> = Vec::with_capacity(n);
    for (i, r) in roots.iter().enumerate() {
        entries.push((r.value(), Source::Root(i)));
    }
    for (k, &d) in deflated.iter().enumerate() {
        if d {
            entries.push((p.lambdas[k], Source::Deflated(k)));
        }
    }
    for (g, pole) in poles.iter().enumerate() {
        for slot in 0..pole.coords.len() - 1 {
            entries.push((pole.lambda, Source::Tie { group: g, slot }));
        }
    }
    entries.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut sol = SecularSolution {
        tilde_lambdas: entries.iter().map(|e| e.0).collect(),
        residuals: vec![0.0; n],
        problem: p.clone(),
        sources: entries.iter().map(|e| e.1).collect(),
        roots,
        poles,
        deflated,
    };
    for i in 0..n {
        if let Source::Root(r) = sol.sources[i] {
            sol.residuals[i] = sol.root_residual(r);
        }
    }
    Ok(sol)
}

/// All `n` eigenvalues of the rank-one problem, sorted non-increasing.
pub fn secular_roots(p: &RankOneProblem) -> Result<Vec<f64>> {
    Ok(solve_rank_one(p)?.tilde_lambdas)
}

impl SecularSolution {
    pub fn n(&self) -> usize {
        self.tilde_lambdas.len()
    }

    pub fn problem(&self) -> &RankOneProblem {
        &self.problem
    }

    /// True when output `i` is a genuine secular root (not a deflated or tied eigenvalue).
    pub fn is_root(&self, i: usize) -> bool {
        matches!(self.sources[i], Source::Root(_))
    }

    pub fn iterations(&self, i: usize) -> usize {
        match self.sources[i] {
            Source::Root(r) => self.roots[r].iterations,
            _ => 0,
        }
    }

    /// `lambda_k - root` computed relative to the root's origin pole.
    fn gap(&self, k: usize, r: &Root) -> f64 {
        (self.problem.lambdas[k] - r.origin) - r.tau
    }

    fn root_residual(&self, r: usize) -> f64 {
        let root = &self.roots[r];
        let s: f64 = self.poles.iter().map(|q| q.weight / ((q.lambda - root.origin) - root.tau)).sum();
        (s + 1.0 / self.problem.alpha).abs()
    }

    /// Unnormalized BNS vector `b_k / (lambda_k - root)` over active coordinates.
    fn raw_root_vector(&self, r: usize) -> Result<DVector<f64>> {
        let root = &self.roots[r];
        let mut q = DVector::zeros(self.n());
        for k in 0..self.n() {
            if self.deflated[k] {
                continue;
            }
            let gap = self.gap(k, root);
            if gap == 0.0 {
                return Err(Error::NearDeflation { coordinate: k });
            }
            q[k] = self.problem.b[k] / gap;
        }
        Ok(q)
    }

    /// `N_i`, the norm of the unnormalized BNS vector; only meaningful for roots.
    pub fn bns_norm(&self, i: usize) -> Result<f64> {
        match self.sources[i] {
            Source::Root(r) => Ok(self.raw_root_vector(r)?.norm()),
            _ => invalid(format!("output {i} is not a secular root")),
        }
    }

    /// Unit eigenvector for output `i`, with the largest-magnitude entry positive.
    pub fn eigvec(&self, i: usize) -> Result<DVector<f64>> {
        let n = self.n();
        let mut q = match self.sources[i] {
            Source::Root(r) => {
                let raw = self.raw_root_vector(r)?;
                let norm = raw.norm();
                raw / norm
            }
            Source::Deflated(k) => {
                let mut e = DVector::zeros(n);
                e[k] = 1.0;
                e
            }
            Source::Tie { group, slot } => self.tie_vector(group, slot),
        };
        fix_sign(&mut q);
        Ok(q)
    }

    /// Column `slot + 1` of the Householder reflector sending `e_1` to the group's b-direction.
    fn tie_vector(&self, group: usize, slot: usize) -> DVector<f64> {
        let coords = &self.poles[group].coords;
        let m = coords.len();
        let w = self.poles[group].weight.sqrt();
        let mut z: Vec<f64> = coords.iter().map(|&k| self.problem.b[k] / w).collect();
        let s = if z[0] >= 0.0 { 1.0 } else { -1.0 };
        z[0] += s;
        let zz: f64 = z.iter().map(|x| x * x).sum();
        let col = slot + 1;
        let mut q = DVector::zeros(self.n());
        for (row, &k) in coords.iter().enumerate() {
            let delta = if row == col { 1.0 } else { 0.0 };
            q[k] = delta - 2.0 * z[row] * z[col] / zz;
        }
        debug_assert!(m >= 2);
        q
    }

    /// `|<q_i, b/|b|>|`; equals `(1/alpha) / (N_i |b|)` for roots and zero otherwise.
    pub fn alignment(&self, i: usize) -> Result<f64> {
        match self.sources[i] {
            Source::Root(_) => {
                let n_i = self.bns_norm(i)?;
                Ok((1.0 / self.problem.alpha) / (n_i * self.problem.b_norm()))
            }
            _ => Ok(0.0),
        }
    }

    pub fn alignments(&self) -> Result<Vec<f64>> {
        (0..self.n()).map(|i| self.alignment(i)).collect()
    }

    /// Dense [`Spectrum`] assembled from the lazy eigenvectors.
    pub fn to_spectrum(&self) -> Result<Spectrum> {
        let n = self.n();
        let mut vectors = DMatrix::zeros(n, n);
        for i in 0..n {
            vectors.set_column(i, &self.eigvec(i)?);
        }
        Ok(Spectrum { values: DVector::from_column_slice(&self.tilde_lambdas), vectors })
    }

    /// Checks `lambda_j <= root_j <= lambda_{j-1}` (0-based) and `root_0 >= lambda_0`.
    pub fn interlacing_violations(&self) -> Vec<usize> {
        let l = &self.problem.lambdas;
        let t = &self.tilde_lambdas;
        (0..self.n())
            .filter(|&j| {
                let below = t[j] < l[j];
                let above = j > 0 && t[j] > l[j - 1];
                below || above
            })
            .collect()
    }
}

/// BNS eigenvector for a supplied root value, `q[k] = b[k]/((lambda_k - root) N)`.
///
/// Plain differences are used here; [`SecularSolution::eigvec`] is the accurate route.
pub fn bns_eigvec(p: &RankOneProblem, root_index: usize, tilde_lambda: f64) -> Result<DVector<f64>> {
    p.validate()?;
    let n = p.n();
    if root_index >= n {
        return invalid(format!("root index {root_index} out of range for n={n}"));
    }
    let b_norm = p.b_norm();
    let mut q = DVector::zeros(n);
    for k in 0..n {
        if p.b[k].abs() <= DEFLATION_TOL * b_norm {
            continue;
        }
        let gap = p.lambdas[k] - tilde_lambda;
        if gap.abs() <= 4.0 * f64::EPSILON * tilde_lambda.abs().max(p.lambdas[k].abs()) {
            return Err(Error::NearDeflation { coordinate: k });
        }
        q[k] = p.b[k] / gap;
    }
    let norm = q.norm();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::Degenerate(format!("BNS vector for root {root_index} has norm {norm}")));
    }
    let mut q = q / norm;
    fix_sign(&mut q);
    Ok(q)
}

/// `|<q_root, b/|b|>|` for the eigenvector at `root_index`.
pub fn rank_one_alignment(p: &RankOneProblem, root_index: usize) -> Result<f64> {
    let sol = solve_rank_one(p)?;
    if root_index >= sol.n() {
        return invalid(format!("root index {root_index} out of range for n={}", sol.n()));
    }
    sol.alignment(root_index)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentPrediction {
    /// Predicted 0-based eigen-index carrying the largest alignment.
    pub index: usize,
    /// Confident window for `index` (alpha strictly inside means confident).
    pub window: (f64, f64),
    pub confident: bool,
    /// `delta_lambda + n^(-a/2)`.
    pub slack: f64,
}

/// Argmax window prediction for `diag(lambdas) + alpha * yhat yhat^T`.
///
/// `k` is the 1-based index of the boundary eigenvalue `lambda_k` (first `k-1` are spikes).
/// Thresholds are `T_j = lambda_j - lambda_k`; index `j <= k-1` is confident when
/// `T_j/(1-s) < alpha < T_{j-1}/(1+s)` with `s = delta_lambda + n^(-a/2)`. The bulk leader
/// `j = k` (small alpha) is only reported confident when the bulk is exactly flat.
pub fn predict_alignment_argmax(
    lambdas: &[f64],
    alpha: f64,
    k: usize,
    delta_lambda: f64,
    a: f64,
) -> Result<AlignmentPrediction> {
    let n = lambdas.len();
    if k == 0 || k > n {
        return invalid(format!("k={k} must satisfy 1 <= k <= n={n}"));
    }
    if !(alpha > 0.0) {
        return invalid(format!("alpha must be positive, got {alpha}"));
    }
    if lambdas.windows(2).any(|w| w[0] < w[1]) {
        return invalid("lambdas must be sorted non-increasing");
    }
    let slack = delta_lambda.abs() + (n as f64).powf(-a / 2.0);
    let lk = lambdas[k - 1];
    let threshold = |j: usize| -> f64 {
        // 1-based j; T_0 = +inf, T_k = 0
        if j == 0 {
            f64::INFINITY
        } else {
            lambdas[j - 1] - lk
        }
    };
    let j = (1..=k).find(|&j| alpha > threshold(j)).unwrap_or(k);
    let upper = threshold(j - 1) / (1.0 + slack);
    let lower = if j == k {
        0.0
    } else if slack < 1.0 {
        threshold(j) / (1.0 - slack)
    } else {
        f64::INFINITY
    };
    let premise = slack < 1.0 && (j < k || delta_lambda == 0.0);
    let confident = premise && lower < alpha && alpha < upper;
    Ok(AlignmentPrediction { index: j - 1, window: (lower, upper), confident, slack })
}

/// Largest-alignment index of `sol`, ties resolved to the smaller index.
pub fn measured_argmax(alignments: &[f64]) -> usize {
    let mut best = 0;
    for (i, &a) in alignments.iter().enumerate() {
        if a > alignments[best] {
            best = i;
        }
    }
    best
}
