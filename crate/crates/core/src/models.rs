//! Two-layer linear network `x -> W2 W1 x`, its rank-1 reduced coordinates `(c, v)`, and
//! the two-layer ReLU network `x -> W2 relu(W1 x)`. Loss is `(1/2n) |F - Y|^2` throughout.
//!
//! `W2` is stored as a length-`d_h` vector (the transpose of the `1 x d_h` row).

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datagen::DataSet;
use crate::error::{invalid, Error, Result};
use crate::io;
use crate::spectral::sym_eigh;

/// ChaCha stream used for weight initialization (stream 0 draws the data).
pub const INIT_STREAM: u64 = 1;

fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows, cols);
    for j in 0..cols {
        for i in 0..rows {
            m[(i, j)] = std * rng.sample::<f64, _>(StandardNormal);
        }
    }
    m
}

fn init_weights(d: usize, hidden: usize, init_scale: f64, seed: u64) -> (DMatrix<f64>, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(INIT_STREAM);
    let std = init_scale / (hidden as f64).sqrt();
    let w1 = gaussian_matrix(hidden, d, std, &mut rng);
    let w2 = gaussian_matrix(hidden, 1, std, &mut rng).column(0).into_owned();
    (w1, w2)
}

fn check_shapes(w1: &DMatrix<f64>, w2: &DVector<f64>, ds: &DataSet) -> Result<()> {
    if w1.ncols() != ds.d() || w1.nrows() != w2.len() {
        return invalid(format!(
            "weights W1 {}x{}, W2 1x{} do not fit data with d={}",
            w1.nrows(),
            w1.ncols(),
            w2.len(),
            ds.d()
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearNet {
    /// `d_h x d`.
    pub w1: DMatrix<f64>,
    /// Length `d_h`.
    pub w2: DVector<f64>,
}

impl LinearNet {
    pub fn new(w1: DMatrix<f64>, w2: DVector<f64>) -> Result<Self> {
        if w1.nrows() != w2.len() {
            return invalid(format!("W1 has {} rows but W2 has {} entries", w1.nrows(), w2.len()));
        }
        if w1.iter().chain(w2.iter()).any(|x| !x.is_finite()) {
            return invalid("non-finite weight");
        }
        Ok(Self { w1, w2 })
    }

    /// I.i.d. `N(0, (init_scale / sqrt(d_h))^2)` entries.
    pub fn init(d: usize, hidden: usize, init_scale: f64, seed: u64) -> Self {
        let (w1, w2) = init_weights(d, hidden, init_scale, seed);
        Self { w1, w2 }
    }

    /// Exactly rank-1 weights `W1 = u a^T`, `W2 = c u^T` (`u` is normalized here).
    pub fn rank_one(u: &DVector<f64>, a: &DVector<f64>, c: f64) -> Self {
        let u = u / u.norm();
        Self { w1: &u * a.transpose(), w2: u * c }
    }

    pub fn hidden(&self) -> usize {
        self.w2.len()
    }

    /// `H = W1 X`, `d_h x n`.
    pub fn features(&self, ds: &DataSet) -> DMatrix<f64> {
        &self.w1 * &ds.x
    }

    /// Network outputs `F = W2 W1 X` as a length-`n` vector.
    pub fn outputs(&self, ds: &DataSet) -> DVector<f64> {
        self.features(ds).tr_mul(&self.w2)
    }

    /// End-to-end linear map `(W2 W1)^T`, length `d`.
    pub fn end_to_end(&self) -> DVector<f64> {
        self.w1.tr_mul(&self.w2)
    }
}

pub fn linear_loss(net: &LinearNet, ds: &DataSet) -> Result<f64> {
    check_shapes(&net.w1, &net.w2, ds)?;
    let e = net.outputs(ds) - &ds.y;
    Ok(e.norm_squared() / (2.0 * ds.n() as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub w1: DMatrix<f64>,
    pub w2: DVector<f64>,
}

/// `gW1 = (1/n) W2^T E X^T`, `gW2 = (1/n) E (W1 X)^T` with `E = W2 W1 X - Y`.
pub fn linear_grads(net: &LinearNet, ds: &DataSet) -> Result<Grads> {
    check_shapes(&net.w1, &net.w2, ds)?;
    let n = ds.n() as f64;
    let h = net.features(ds);
    let e = h.tr_mul(&net.w2) - &ds.y;
    let xe = &ds.x * &e;
    Ok(Grads { w1: &net.w2 * xe.transpose() / n, w2: &h * &e / n })
}

/// `K = |W2|^2 X^T X + X^T W1^T W1 X`.
pub fn ntk_linear(net: &LinearNet, ds: &DataSet) -> Result<DMatrix<f64>> {
    check_shapes(&net.w1, &net.w2, ds)?;
    let h = net.features(ds);
    Ok(ntk_from_features(&h, &net.w2, &ds.kernel))
}

pub(crate) fn ntk_from_features(h: &DMatrix<f64>, w2: &DVector<f64>, kx: &DMatrix<f64>) -> DMatrix<f64> {
    let hh = h.tr_mul(h);
    kx * w2.norm_squared() + (&hh + hh.transpose()) * 0.5
}

/// Rank-1 coordinates: `W1 X ~ u v^T`, `W2 = c u^T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedState {
    pub c: f64,
    pub v: DVector<f64>,
    /// `|W1 X - u v^T|_F / |W1 X|_F` at extraction time.
    pub fit_residual: f64,
}

impl ReducedState {
    pub fn new(c: f64, v: DVector<f64>) -> Self {
        Self { c, v, fit_residual: 0.0 }
    }

    /// Outputs `F = c v`.
    pub fn outputs(&self) -> DVector<f64> {
        &self.v * self.c
    }

    pub fn residual(&self, ds: &DataSet) -> DVector<f64> {
        self.outputs() - &ds.y
    }

    pub fn loss(&self, ds: &DataSet) -> f64 {
        self.residual(ds).norm_squared() / (2.0 * ds.n() as f64)
    }

    pub fn c2(&self) -> f64 {
        self.c * self.c
    }

    pub fn v2(&self) -> f64 {
        self.v.norm_squared()
    }
}

/// Top right singular vector of the `d_h x (n+1)` matrix `M` by power iteration on `M^T M`,
/// falling back to a dense eigendecomposition when the gap is too small to converge.
fn top_right_singular(m: &DMatrix<f64>) -> Result<DVector<f64>> {
    let cols = m.ncols();
    let norms: Vec<f64> = (0..cols).map(|j| m.column(j).norm_squared()).collect();
    let start = (0..cols).max_by(|&a, &b| norms[a].total_cmp(&norms[b])).unwrap_or(0);
    let mut w = m.tr_mul(&m.column(start));
    let mut norm = w.norm();
    if norm == 0.0 {
        return Ok(DVector::from_fn(cols, |i, _| if i == start { 1.0 } else { 0.0 }));
    }
    w /= norm;
    for _ in 0..500 {
        let mut next = m.tr_mul(&(m * &w));
        norm = next.norm();
        next /= norm;
        let delta = (&next - &w).norm();
        w = next;
        if delta <= 1e-15 {
            return Ok(w);
        }
    }
    let gram = m.tr_mul(m);
    let spec = sym_eigh(&((&gram + gram.transpose()) * 0.5))?;
    Ok(spec.vectors.column(0).into_owned())
}

/// Extract `(c, v)` and the unit direction `u`, with `c >= 0`.
///
/// `u` is the top left singular vector of `[W1 X | s W2^T]` with `s = |W1 X|_F / |W2|`,
/// which weights both blocks equally.
pub fn extract_reduced_with_direction(net: &LinearNet, ds: &DataSet) -> Result<(ReducedState, DVector<f64>)> {
    check_shapes(&net.w1, &net.w2, ds)?;
    let h = net.features(ds);
    let h_norm = h.norm();
    let w2_norm = net.w2.norm();
    let dh = net.hidden();
    let n = ds.n();
    if h_norm == 0.0 && w2_norm == 0.0 {
        let mut u = DVector::zeros(dh);
        u[0] = 1.0;
        return Ok((ReducedState { c: 0.0, v: DVector::zeros(n), fit_residual: 1.0 }, u));
    }
    let s = if w2_norm > 0.0 && h_norm > 0.0 { h_norm / w2_norm } else { 1.0 };
    let mut m = DMatrix::zeros(dh, n + 1);
    m.columns_mut(0, n).copy_from(&h);
    m.set_column(n, &(&net.w2 * s));
    let w = top_right_singular(&m)?;
    let mut u = &m * &w;
    u /= u.norm();
    let mut c = net.w2.dot(&u);
    if c < 0.0 {
        u.neg_mut();
        c = -c;
    }
    let v = h.tr_mul(&u);
    let fit_residual = if h_norm > 0.0 { ((&h - &u * v.transpose()).norm() / h_norm).min(1.0) } else { 1.0 };
    Ok((ReducedState { c, v, fit_residual }, u))
}

pub fn extract_reduced(net: &LinearNet, ds: &DataSet) -> Result<ReducedState> {
    Ok(extract_reduced_with_direction(net, ds)?.0)
}

/// `(G_c, G_v) = ((1/n) <E, v>, (c/n) K_x E)`, the reduced loss gradient.
pub fn reduced_grads(s: &ReducedState, ds: &DataSet) -> (f64, DVector<f64>) {
    let n = ds.n() as f64;
    let e = s.residual(ds);
    (e.dot(&s.v) / n, &ds.kernel * &e * (s.c / n))
}

/// One exact GD step in rank-1 coordinates; `fit_residual` is carried unchanged.
pub fn reduced_step(s: &ReducedState, ds: &DataSet, eta: f64) -> ReducedState {
    let (gc, gv) = reduced_grads(s, ds);
    ReducedState { c: s.c - eta * gc, v: &s.v - gv * eta, fit_residual: s.fit_residual }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReluNet {
    pub w1: DMatrix<f64>,
    pub w2: DVector<f64>,
}

impl ReluNet {
    pub fn new(w1: DMatrix<f64>, w2: DVector<f64>) -> Result<Self> {
        let l = LinearNet::new(w1, w2)?;
        Ok(Self { w1: l.w1, w2: l.w2 })
    }

    pub fn init(d: usize, hidden: usize, init_scale: f64, seed: u64) -> Self {
        let (w1, w2) = init_weights(d, hidden, init_scale, seed);
        Self { w1, w2 }
    }

    pub fn preactivations(&self, ds: &DataSet) -> DMatrix<f64> {
        &self.w1 * &ds.x
    }

    pub fn outputs(&self, ds: &DataSet) -> DVector<f64> {
        self.preactivations(ds).map(|p| p.max(0.0)).tr_mul(&self.w2)
    }
}

pub fn relu_loss(net: &ReluNet, ds: &DataSet) -> Result<f64> {
    check_shapes(&net.w1, &net.w2, ds)?;
    let e = net.outputs(ds) - &ds.y;
    Ok(e.norm_squared() / (2.0 * ds.n() as f64))
}

/// Gradients with the ReLU derivative at 0 taken as 0.
pub fn relu_grads(net: &ReluNet, ds: &DataSet) -> Result<Grads> {
    check_shapes(&net.w1, &net.w2, ds)?;
    let n = ds.n() as f64;
    let p = net.preactivations(ds);
    let a = p.map(|x| x.max(0.0));
    let e = a.tr_mul(&net.w2) - &ds.y;
    let mut g = DMatrix::zeros(p.nrows(), p.ncols());
    for j in 0..p.ncols() {
        for h in 0..p.nrows() {
            if p[(h, j)] > 0.0 {
                g[(h, j)] = net.w2[h] * e[j];
            }
        }
    }
    Ok(Grads { w1: g * ds.x.transpose() / n, w2: &a * &e / n })
}

/// `K1 = relu(W1 X)^T relu(W1 X)` (second-layer part) and `K2 = D^T D` (first-layer part),
/// where block `h` of `D` is `W2[h] X diag(1{W1[h,:] X > 0})`.
pub fn relu_ntk_components(net: &ReluNet, ds: &DataSet) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_shapes(&net.w1, &net.w2, ds)?;
    let p = net.preactivations(ds);
    let a = p.map(|x| x.max(0.0));
    let k1 = a.tr_mul(&a);
    let mut weighted = p.map(|x| if x > 0.0 { 1.0 } else { 0.0 });
    let mask = weighted.clone();
    for h in 0..weighted.nrows() {
        weighted.row_mut(h).scale_mut(net.w2[h] * net.w2[h]);
    }
    let gate = mask.tr_mul(&weighted);
    let k2 = ds.kernel.component_mul(&gate);
    Ok(((&k1 + k1.transpose()) * 0.5, (&k2 + k2.transpose()) * 0.5))
}

/// `(lambda_1(K1) + lambda_2(K1)) / lambda_1(K2)`.
pub fn generalized_alpha(k1: &DMatrix<f64>, k2: &DMatrix<f64>) -> Result<f64> {
    let s1 = sym_eigh(k1)?;
    let s2 = sym_eigh(k2)?;
    let top2 = s2.values[0];
    let scale = s1.values[0].abs().max(1.0);
    if top2 <= 1e-12 * scale {
        return Err(Error::Degenerate(format!("second-layer kernel has top eigenvalue {top2:e}")));
    }
    let num = s1.values[0] + if s1.len() > 1 { s1.values[1] } else { 0.0 };
    Ok(num / top2)
}

/// JSON header accompanying a weight checkpoint CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// `linear` or `relu`.
    pub kind: String,
    pub hidden: usize,
    pub d: usize,
    pub step: usize,
    pub seed: u64,
    /// Content hash of the run configuration that produced the weights.
    pub lineage: String,
    pub csv: String,
    pub layout: String,
}

/// Write `<stem>.json` + `<stem>.csv`; CSV rows are hidden units: `w2, w1_0..w1_{d-1}`.
#[allow(clippy::too_many_arguments)]
pub fn save_checkpoint(
    dir: &Path,
    stem: &str,
    kind: &str,
    w1: &DMatrix<f64>,
    w2: &DVector<f64>,
    step: usize,
    seed: u64,
    lineage: &str,
) -> Result<PathBuf> {
    io::ensure_dir(dir)?;
    let csv_name = format!("{stem}.csv");
    let mut header = vec!["w2".to_string()];
    header.extend((0..w1.ncols()).map(|i| format!("w1_{i}")));
    let rows: Vec<Vec<f64>> =
        (0..w1.nrows()).map(|h| std::iter::once(w2[h]).chain(w1.row(h).iter().copied()).collect()).collect();
    io::write_table(&dir.join(&csv_name), &header, &rows)?;
    let head = CheckpointHeader {
        kind: kind.into(),
        hidden: w1.nrows(),
        d: w1.ncols(),
        step,
        seed,
        lineage: lineage.into(),
        csv: csv_name,
        layout: "one row per hidden unit h: W2[h], then W1[h, 0..d]".into(),
    };
    let path = dir.join(format!("{stem}.json"));
    io::write_json(&path, &head)?;
    Ok(path)
}

pub fn load_checkpoint(json_path: &Path) -> Result<(CheckpointHeader, DMatrix<f64>, DVector<f64>)> {
    let head: CheckpointHeader = io::read_json(json_path)?;
    let dir = json_path.parent().unwrap_or(Path::new("."));
    let (_, rows) = io::read_table(&dir.join(&head.csv))?;
    if rows.len() != head.hidden || rows.iter().any(|r| r.len() != head.d + 1) {
        return invalid(format!("checkpoint {} has the wrong shape", head.csv));
    }
    let w1 = DMatrix::from_fn(head.hidden, head.d, |h, i| rows[h][i + 1]);
    let w2 = DVector::from_iterator(head.hidden, rows.iter().map(|r| r[0]));
    Ok((head, w1, w2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, SpikeSpec};

    fn small() -> DataSet {
        generate(&SpikeSpec::new(6, 7, 3)).unwrap()
    }

    #[test]
    fn exact_fit_has_zero_loss() {
        let ds = small();
        // W1 = e_1 beta^T, W2 = e_1 reproduces Y = beta^T X exactly.
        let mut w1 = DMatrix::zeros(5, ds.d());
        w1.row_mut(0).copy_from(&ds.beta.transpose());
        let mut w2 = DVector::zeros(5);
        w2[0] = 1.0;
        let net = LinearNet::new(w1, w2).unwrap();
        assert!(linear_loss(&net, &ds).unwrap() < 1e-28);
        let g = linear_grads(&net, &ds).unwrap();
        assert!(g.w1.norm() < 1e-12 && g.w2.norm() < 1e-12);
    }

    #[test]
    fn zero_weights() {
        let ds = small();
        let net = LinearNet::new(DMatrix::zeros(5, ds.d()), DVector::zeros(5)).unwrap();
        let expect = ds.y.norm_squared() / (2.0 * ds.n() as f64);
        assert_eq!(linear_loss(&net, &ds).unwrap(), expect);
    }

    #[test]
    fn zero_second_layer_gradient_formula() {
        let ds = small();
        let mut net = LinearNet::init(ds.d(), 5, 1.0, 0);
        net.w2.fill(0.0);
        let g = linear_grads(&net, &ds).unwrap();
        assert_eq!(g.w1.norm(), 0.0);
        let expect = -(net.features(&ds) * &ds.y) / ds.n() as f64;
        assert!((g.w2 - expect).norm() < 1e-12);
    }

    #[test]
    fn rank_one_weights_round_trip() {
        let ds = small();
        let u = DVector::from_fn(4, |i, _| (i as f64 + 1.0).sin());
        let a = DVector::from_fn(ds.d(), |i, _| (i as f64 * 0.7).cos());
        let net = LinearNet::rank_one(&u, &a, 1.7);
        let (s, uu) = extract_reduced_with_direction(&net, &ds).unwrap();
        let un = &u / u.norm();
        assert!((s.c - 1.7).abs() < 1e-10);
        assert!((&uu - &un).norm() < 1e-10);
        assert!((&s.v - ds.x.tr_mul(&a)).norm() < 1e-10 * s.v.norm());
        assert!(s.fit_residual < 1e-10);
        let k = ntk_linear(&net, &ds).unwrap();
        let kr = &ds.kernel * s.c2() + &s.v * s.v.transpose();
        assert!((k - &kr).norm() <= 1e-10 * kr.norm());
    }

    #[test]
    fn zero_weights_flag_non_applicability() {
        let ds = small();
        let net = LinearNet::new(DMatrix::zeros(3, ds.d()), DVector::zeros(3)).unwrap();
        assert_eq!(extract_reduced(&net, &ds).unwrap().fit_residual, 1.0);
    }

    #[test]
    fn reduced_step_examples() {
        let ds = small();
        let eta = 0.01;
        let s = reduced_step(&ReducedState::new(1.0, DVector::zeros(ds.n())), &ds, eta);
        assert_eq!(s.c, 1.0);
        let expect = &ds.kernel * &ds.y * (eta / ds.n() as f64);
        assert!((s.v - expect).norm() < 1e-12 * ds.y.norm());
        let fixed = ReducedState::new(2.0, &ds.y / 2.0);
        let next = reduced_step(&fixed, &ds, eta);
        assert_eq!(next, fixed);
    }

    #[test]
    fn generalized_alpha_examples() {
        let k1 = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0, 0.0]));
        let k2 = DMatrix::identity(3, 3);
        assert!((generalized_alpha(&k1, &k2).unwrap() - 3.0).abs() < 1e-14);
        assert_eq!(generalized_alpha(&DMatrix::zeros(3, 3), &k2).unwrap(), 0.0);
        assert!(generalized_alpha(&k2, &DMatrix::zeros(3, 3)).is_err());
    }

    #[test]
    fn relu_sign_extremes() {
        // Positive data: the sign of W1 fixes the sign of every preactivation.
        let spec = SpikeSpec::new(6, 7, 0);
        let z = DMatrix::from_fn(7, 6, |i, j| 0.5 + ((i * 6 + j) as f64 * 0.37).sin().abs());
        let ds = crate::datagen::from_noise(&spec, &z).unwrap();
        let base = LinearNet::init(ds.d(), 5, 1.0, 4);
        let pos_w1 = base.w1.map(|x| x.abs() + 0.01);
        let neg = ReluNet::new(-&pos_w1, base.w2.clone()).unwrap();
        let (k1, k2) = relu_ntk_components(&neg, &ds).unwrap();
        assert_eq!((k1.norm(), k2.norm()), (0.0, 0.0));
        let pos = ReluNet::new(pos_w1.clone(), base.w2.clone()).unwrap();
        let (k1, k2) = relu_ntk_components(&pos, &ds).unwrap();
        let k = ntk_linear(&LinearNet::new(pos_w1, base.w2.clone()).unwrap(), &ds).unwrap();
        assert!((k1 + k2 - &k).norm() <= 1e-12 * k.norm());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let net = LinearNet::init(4, 3, 1.0, 9);
        let p = save_checkpoint(dir.path(), "ckpt", "linear", &net.w1, &net.w2, 17, 9, "abc").unwrap();
        let (head, w1, w2) = load_checkpoint(&p).unwrap();
        assert_eq!(head.step, 17);
        assert_eq!(w1, net.w1);
        assert_eq!(w2, net.w2);
    }
}
