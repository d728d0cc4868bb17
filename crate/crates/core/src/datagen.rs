//! Spiked Gaussian data with a linear target.
//!
//! `X = Z diag(s_1, ..., s_n)` is `d x n`: the scales act on examples (columns), so a few
//! examples carry large norms and `X^T X` has a handful of spiked eigenvalues above a
//! Marchenko-Pastur-like bulk. The target is `Y = beta^T X`, `beta` all-ones by default.
//!
//! Sampling: `ChaCha8Rng::seed_from_u64(seed)`, standard normals from `rand_distr`'s
//! ziggurat `StandardNormal`, drawn column by column (example `j` outer, feature `i` inner).

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::io;
use crate::spectral::{sym_eigh, Spectrum};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikeSpec {
    pub n: usize,
    pub d: usize,
    /// One positive scale per example.
    pub column_scales: Vec<f64>,
    pub seed: u64,
    /// Ground-truth coefficients; `None` means all ones.
    #[serde(default)]
    pub beta: Option<Vec<f64>>,
}

/// `(3, 1.5, 1.2, 0.8, ..., 0.8)` truncated to `n` entries.
pub fn default_scales(n: usize) -> Vec<f64> {
    let head = [3.0, 1.5, 1.2];
    (0..n).map(|j| if j < head.len() { head[j] } else { 0.8 }).collect()
}

impl SpikeSpec {
    pub fn new(n: usize, d: usize, seed: u64) -> Self {
        Self { n, d, column_scales: default_scales(n), seed, beta: None }
    }

    /// The reference configuration: 200 examples in 400 dimensions.
    pub fn reference(seed: u64) -> Self {
        Self::new(200, 400, seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 3 {
            return invalid(format!("n must be at least 3, got {}", self.n));
        }
        if self.d < 1 {
            return invalid("d must be at least 1");
        }
        if self.column_scales.len() != self.n {
            return invalid(format!("column_scales has {} entries, expected n={}", self.column_scales.len(), self.n));
        }
        if let Some(bad) = self.column_scales.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return invalid(format!("column scales must be positive and finite, found {bad}"));
        }
        if let Some(beta) = &self.beta {
            if beta.len() != self.d {
                return invalid(format!("beta has {} entries, expected d={}", beta.len(), self.d));
            }
            if beta.iter().any(|b| !b.is_finite()) {
                return invalid("beta has non-finite entries");
            }
        }
        Ok(())
    }

    pub fn beta_vector(&self) -> DVector<f64> {
        match &self.beta {
            Some(b) => DVector::from_column_slice(b),
            None => DVector::from_element(self.d, 1.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DataSet {
    pub spec: SpikeSpec,
    /// `d x n`, one example per column.
    pub x: DMatrix<f64>,
    /// Target row stored as a length-`n` vector.
    pub y: DVector<f64>,
    pub beta: DVector<f64>,
    /// `K_x = X^T X`.
    pub kernel: DMatrix<f64>,
    pub kernel_spectrum: Spectrum,
    left: OnceLock<DMatrix<f64>>,
}

pub fn generate(spec: &SpikeSpec) -> Result<DataSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut z = DMatrix::zeros(spec.d, spec.n);
    for j in 0..spec.n {
        for i in 0..spec.d {
            z[(i, j)] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    from_noise(spec, &z)
}

/// Build the dataset from a supplied noise matrix `Z` (`d x n`).
pub fn from_noise(spec: &SpikeSpec, z: &DMatrix<f64>) -> Result<DataSet> {
    spec.validate()?;
    if z.shape() != (spec.d, spec.n) {
        return invalid(format!("noise is {:?}, expected ({}, {})", z.shape(), spec.d, spec.n));
    }
    let mut x = z.clone();
    for (j, s) in spec.column_scales.iter().enumerate() {
        x.column_mut(j).scale_mut(*s);
    }
    from_parts(spec.clone(), x, spec.beta_vector())
}

pub fn from_parts(spec: SpikeSpec, x: DMatrix<f64>, beta: DVector<f64>) -> Result<DataSet> {
    if x.nrows() != beta.len() {
        return invalid(format!("X has {} rows but beta has {} entries", x.nrows(), beta.len()));
    }
    let y = x.tr_mul(&beta);
    let k = x.tr_mul(&x);
    let kernel = (&k + k.transpose()) * 0.5;
    let kernel_spectrum = sym_eigh(&kernel)?;
    Ok(DataSet { spec, x, y, beta, kernel, kernel_spectrum, left: OnceLock::new() })
}

impl DataSet {
    pub fn n(&self) -> usize {
        self.x.ncols()
    }

    pub fn d(&self) -> usize {
        self.x.nrows()
    }

    pub fn y_norm(&self) -> f64 {
        self.y.norm()
    }

    pub fn lambdas(&self) -> &DVector<f64> {
        &self.kernel_spectrum.values
    }

    pub fn lambda1(&self) -> f64 {
        self.kernel_spectrum.values[0]
    }

    /// Replace the target (used for synthetic checks); `beta` is kept as is.
    pub fn with_target(mut self, y: DVector<f64>) -> Result<Self> {
        if y.len() != self.n() {
            return invalid(format!("target has {} entries, expected {}", y.len(), self.n()));
        }
        self.y = y;
        Ok(self)
    }

    /// Top `min(n, d)` eigenvectors `p_i` of `X X^T`, signed so `<p_i, X q_i> >= 0`.
    pub fn left_vectors(&self) -> &DMatrix<f64> {
        self.left.get_or_init(|| {
            let gram = &self.x * self.x.transpose();
            let gram = (&gram + gram.transpose()) * 0.5;
            let spec = sym_eigh(&gram).expect("X X^T is symmetric and finite");
            let m = self.n().min(self.d());
            let mut p = spec.vectors.columns(0, m).into_owned();
            for i in 0..m {
                let xq = &self.x * self.kernel_spectrum.vectors.column(i);
                if p.column(i).dot(&xq) < 0.0 {
                    p.column_mut(i).neg_mut();
                }
            }
            p
        })
    }

    /// Write `<stem>.json` (spec, diagnostics, layout) and `<stem>.csv` (one row per example:
    /// `y, x0, ..., x{d-1}`). Returns the two paths.
    pub fn save(&self, dir: &Path, stem: &str, rule: OutlierRule) -> Result<(PathBuf, PathBuf)> {
        io::ensure_dir(dir)?;
        let csv_path = dir.join(format!("{stem}.csv"));
        let json_path = dir.join(format!("{stem}.json"));
        let mut header = vec!["y".to_string()];
        header.extend((0..self.d()).map(|i| format!("x{i}")));
        let rows: Vec<Vec<f64>> = (0..self.n())
            .map(|j| {
                let mut r = Vec::with_capacity(self.d() + 1);
                r.push(self.y[j]);
                r.extend(self.x.column(j).iter());
                r
            })
            .collect();
        io::write_table(&csv_path, &header, &rows)?;
        let head = DataSetHeader {
            format: "eoslab-dataset-1".into(),
            spec: self.spec.clone(),
            beta: self.beta.iter().copied().collect(),
            diagnostics: diagnostics(self, rule),
            outlier_rule: rule,
            csv: csv_path.file_name().unwrap().to_string_lossy().into_owned(),
            csv_sha256: io::file_sha256(&csv_path)?,
            layout: "one row per example j: y[j], then X[0..d, j]".into(),
        };
        io::write_json(&json_path, &head)?;
        Ok((json_path, csv_path))
    }

    pub fn load(json_path: &Path) -> Result<DataSet> {
        let head: DataSetHeader = io::read_json(json_path)?;
        let dir = json_path.parent().unwrap_or(Path::new("."));
        let csv_path = dir.join(&head.csv);
        if io::file_sha256(&csv_path)? != head.csv_sha256 {
            return invalid(format!("{} does not match the hash in its header", csv_path.display()));
        }
        let (_, rows) = io::read_table(&csv_path)?;
        let (n, d) = (head.spec.n, head.spec.d);
        if rows.len() != n || rows.iter().any(|r| r.len() != d + 1) {
            return invalid(format!("{}: expected {n} rows of {} values", csv_path.display(), d + 1));
        }
        let x = DMatrix::from_fn(d, n, |i, j| rows[j][i + 1]);
        let ds = from_parts(head.spec, x, DVector::from_vec(head.beta))?;
        let stored = DVector::from_iterator(n, rows.iter().map(|r| r[0]));
        if (&stored - &ds.y).norm() > 1e-12 * ds.y.norm().max(1.0) {
            return invalid("stored target differs from beta^T X");
        }
        Ok(ds)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DataSetHeader {
    format: String,
    spec: SpikeSpec,
    beta: Vec<f64>,
    diagnostics: SpectrumDiagnostics,
    outlier_rule: OutlierRule,
    csv: String,
    csv_sha256: String,
    layout: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutlierRule {
    pub ratio: f64,
}

impl Default for OutlierRule {
    fn default() -> Self {
        Self { ratio: 1.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumDiagnostics {
    /// Number of spiked examples; `lambda_k` is the boundary eigenvalue (1-based).
    pub k: usize,
    /// `min_{2<=i<=k} lambda_{i-1}/lambda_i`; absent when `k = 1`.
    pub gamma_min: Option<f64>,
    /// `|lambda_k - mean(lambda_{k+1..n})| / mean(lambda_{k+1..n})`.
    pub delta_lambda: f64,
    /// `|cos(Y, q_1)|`.
    pub delta1: f64,
    /// `log_n(mean bulk eigenvalue)`.
    pub a_hat: f64,
    pub bulk_mean: f64,
    /// Set when every kernel eigenvalue is equal.
    pub degenerate: bool,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len();
    if m % 2 == 1 {
        v[m / 2]
    } else {
        0.5 * (v[m / 2 - 1] + v[m / 2])
    }
}

/// Spectral diagnostics. The outlier count is the number of examples whose squared norm
/// `K_x[j, j]` is at least `ratio` times the median squared norm, clamped to `[1, n-1]`.
pub fn diagnostics(ds: &DataSet, rule: OutlierRule) -> SpectrumDiagnostics {
    let n = ds.n();
    let lam = ds.lambdas();
    let mut diag: Vec<f64> = ds.kernel.diagonal().iter().copied().collect();
    let med = median(&mut diag);
    let count = diag.iter().filter(|&&x| x >= rule.ratio * med).count();
    let spread = (lam[0] - lam[n - 1]).abs();
    let degenerate = spread <= 1e-12 * lam[0].abs().max(f64::MIN_POSITIVE);
    let k = if degenerate { 1 } else { count.clamp(1, n - 1) };

    let bulk = lam.rows(k, n - k);
    let bulk_mean = bulk.mean();
    let delta_lambda = if bulk_mean != 0.0 { (lam[k - 1] - bulk_mean).abs() / bulk_mean.abs() } else { f64::INFINITY };
    let a_hat = if bulk_mean > 0.0 { bulk_mean.ln() / (n as f64).ln() } else { f64::NAN };
    let gamma_min = (2..=k).map(|i| lam[i - 2] / lam[i - 1]).reduce(f64::min);
    let q1 = ds.kernel_spectrum.vectors.column(0);
    let delta1 = (ds.y.dot(&q1) / ds.y_norm()).abs().min(1.0);
    SpectrumDiagnostics { k, gamma_min, delta_lambda, delta1, a_hat, bulk_mean, degenerate }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computable_instance() {
        let spec = SpikeSpec { n: 3, d: 1, column_scales: vec![2.0, 1.0, 1.0], seed: 0, beta: None };
        let ds = from_noise(&spec, &DMatrix::from_element(1, 3, 1.0)).unwrap();
        assert_eq!(ds.x.as_slice(), &[2.0, 1.0, 1.0]);
        assert_eq!(ds.y.as_slice(), &[2.0, 1.0, 1.0]);
        let expected = DMatrix::from_row_slice(3, 3, &[4.0, 2.0, 2.0, 2.0, 1.0, 1.0, 2.0, 1.0, 1.0]);
        assert_eq!(ds.kernel, expected);
        assert!((ds.lambda1() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = SpikeSpec::new(5, 4, 0);
        s.column_scales[2] = -1.0;
        assert!(generate(&s).is_err());
        assert!(generate(&SpikeSpec::new(2, 4, 0)).is_err());
        let mut s = SpikeSpec::new(5, 4, 0);
        s.beta = Some(vec![1.0; 3]);
        assert!(generate(&s).is_err());
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate(&SpikeSpec::new(20, 30, 7)).unwrap();
        let b = generate(&SpikeSpec::new(20, 30, 7)).unwrap();
        let c = generate(&SpikeSpec::new(20, 30, 8)).unwrap();
        assert_eq!(a.x, b.x);
        assert_ne!(a.x, c.x);
    }

    #[test]
    fn perfect_alignment_gives_unit_delta1() {
        let ds = generate(&SpikeSpec::new(30, 40, 1)).unwrap();
        let y = ds.kernel_spectrum.vectors.column(0) * ds.y_norm();
        let ds = ds.with_target(y).unwrap();
        let diag = diagnostics(&ds, OutlierRule::default());
        assert!((diag.delta1 - 1.0).abs() < 1e-12);
    }
}
