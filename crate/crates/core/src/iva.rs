//! Independent vector analysis with a multivariate Gaussian source component
//! vector (SCV) prior, optimized row by row with Newton's method.
//!
//! For component `n` the SCV is `y_n(t) = [w_n^[1]ᵀ x^[1](t), .., w_n^[K]ᵀ x^[K](t)]`.
//! The cost is the Gaussian mutual-information surrogate
//!
//! ```text
//! J(W) = sum_n ½ log det Ψ_n - sum_k log |det W^[k]|,   Ψ_n = E{y_n y_nᵀ}
//! ```
//!
//! whose gradient for `w_n^[k]` is `E{φ^[k](y_n) x^[k]} - h_n^[k] / (h_n^[k]ᵀ w_n^[k])`
//! with `φ(y_n) = Ψ_n⁻¹ y_n` and `h_n^[k]` the unit normal of the other rows of `W^[k]`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::features::FeatureTensor;

pub const RIDGE: f64 = 1e-8;
pub const MIN_ABS_DET: f64 = 1e-12;
pub const SINGULAR_DET: f64 = 1e-300;

/// `K` stacked `N x N` demixing matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct DemixingTensor {
    pub matrices: Vec<DMatrix<f64>>,
}

impl DemixingTensor {
    pub fn dim(&self) -> usize {
        self.matrices[0].nrows()
    }

    pub fn datasets(&self) -> usize {
        self.matrices.len()
    }

    pub fn identity(n: usize, k: usize) -> Self {
        Self { matrices: vec![DMatrix::identity(n, n); k] }
    }

    /// Stacked row `n` across datasets, length `K * N`.
    pub fn stacked_row(&self, n: usize) -> DVector<f64> {
        let dim = self.dim();
        DVector::from_fn(self.datasets() * dim, |i, _| self.matrices[i / dim][(n, i % dim)])
    }

    pub fn set_stacked_row(&mut self, n: usize, v: &DVector<f64>) {
        let dim = self.dim();
        for (k, m) in self.matrices.iter_mut().enumerate() {
            for j in 0..dim {
                m[(n, j)] = v[k * dim + j];
            }
        }
    }

    /// Scales every row of every matrix to unit Euclidean length.
    pub fn normalize_rows(&mut self) {
        for m in &mut self.matrices {
            for mut row in m.row_iter_mut() {
                let norm = row.norm();
                if norm > 0.0 {
                    row /= norm;
                }
            }
        }
    }

    /// Composes with a per-dataset linear map: `W^[k] P^[k]`.
    pub fn compose(&self, maps: &[DMatrix<f64>]) -> Result<Self> {
        if maps.len() != self.datasets() {
            return Err(Error::ShapeMismatch("composition needs one map per dataset".into()));
        }
        Ok(Self { matrices: self.matrices.iter().zip(maps).map(|(w, p)| w * p).collect() })
    }
}

/// `K` stacked `N x T` estimated independent-feature-component matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct IfcTensor {
    pub slabs: Vec<DMatrix<f64>>,
}

impl IfcTensor {
    pub fn dim(&self) -> usize {
        self.slabs[0].nrows()
    }

    pub fn frames(&self) -> usize {
        self.slabs[0].ncols()
    }

    pub fn datasets(&self) -> usize {
        self.slabs.len()
    }

    /// SCV `y_n(t)` as a K-vector.
    pub fn scv(&self, n: usize, t: usize) -> DVector<f64> {
        DVector::from_iterator(self.datasets(), self.slabs.iter().map(|s| s[(n, t)]))
    }
}

/// `R_x^[k1,k2] = (1/T) X^[k1] X^[k2]ᵀ` for all dataset pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossCovariance {
    datasets: usize,
    blocks: Vec<DMatrix<f64>>,
}

impl CrossCovariance {
    pub fn new(x: &FeatureTensor) -> Self {
        let k = x.datasets();
        let t = x.frames() as f64;
        let mut blocks = vec![DMatrix::zeros(0, 0); k * k];
        for a in 0..k {
            for b in a..k {
                let r = (&x.slabs[a].values * x.slabs[b].values.transpose()) / t;
                if a != b {
                    blocks[b * k + a] = r.transpose();
                }
                blocks[a * k + b] = r;
            }
        }
        Self { datasets: k, blocks }
    }

    pub fn block(&self, k1: usize, k2: usize) -> &DMatrix<f64> {
        &self.blocks[k1 * self.datasets + k2]
    }

    pub fn datasets(&self) -> usize {
        self.datasets
    }

    pub fn dim(&self) -> usize {
        self.blocks[0].nrows()
    }
}

/// Sample SCV covariances `Ψ_n` (K x K, one per component) and, when the
/// observations are supplied, the cross-covariances `R_x`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScvStats {
    pub psi: Vec<DMatrix<f64>>,
    pub cross: Option<CrossCovariance>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IvaConfig {
    pub eta0: f64,
    pub eta_decay: f64,
    pub eta_min: f64,
    pub max_iters: usize,
    pub cost_tol: f64,
    pub seed: u64,
}

impl Default for IvaConfig {
    fn default() -> Self {
        Self { eta0: 1.0, eta_decay: 0.9, eta_min: 1e-6, max_iters: 200, cost_tol: 1e-9, seed: 0 }
    }
}

impl IvaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta_decay > 0.0 && self.eta_decay < 1.0) {
            return Err(Error::InvalidConfig(format!("eta_decay must be in (0, 1), got {}", self.eta_decay)));
        }
        if !(self.eta_min < self.eta0) || self.eta_min <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "need 0 < eta_min < eta0, got eta_min={} eta0={}",
                self.eta_min, self.eta0
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    pub iter: usize,
    pub eta: f64,
    pub cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Converged,
    StepTooSmall,
    MaxIters,
}

#[derive(Debug, Clone)]
pub struct IvaOutcome {
    pub demixing: DemixingTensor,
    pub ifc: IfcTensor,
    /// Accepted iterates only; entry 0 is the initial point.
    pub trace: Vec<TracePoint>,
    pub iterations: usize,
    pub stop: StopReason,
}

impl IvaOutcome {
    pub fn final_cost(&self) -> f64 {
        self.trace.last().map_or(f64::NAN, |p| p.cost)
    }

    pub fn trace_csv(&self) -> String {
        let mut s = String::from("iter,eta,cost\n");
        for p in &self.trace {
            s.push_str(&format!("{},{:e},{:.12e}\n", p.iter, p.eta, p.cost));
        }
        s
    }
}

/// Random standard-normal demixing tensor with unit rows, redrawn per dataset
/// until `|det| > 1e-12`.
pub fn init_demixing(n: usize, k: usize, seed: u64) -> DemixingTensor {
    assert!(n >= 1 && k >= 1, "init_demixing needs N, K >= 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let matrices = (0..k)
        .map(|_| loop {
            let mut m: DMatrix<f64> = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(&mut rng));
            for mut row in m.row_iter_mut() {
                let norm = row.norm();
                row /= norm;
            }
            if m.determinant().abs() > MIN_ABS_DET {
                break m;
            }
        })
        .collect();
    DemixingTensor { matrices }
}

fn check_shapes(w: &DemixingTensor, x: &FeatureTensor) -> Result<()> {
    if w.datasets() != x.datasets() || w.dim() != x.dim() || w.matrices.iter().any(|m| !m.is_square()) {
        return Err(Error::ShapeMismatch(format!(
            "demixing {}x{}x{} vs features {}x{}x{}",
            w.dim(),
            w.matrices[0].ncols(),
            w.datasets(),
            x.dim(),
            x.frames(),
            x.datasets()
        )));
    }
    Ok(())
}

/// `Y^[k] = W^[k] X^[k]`.
pub fn demix(w: &DemixingTensor, x: &FeatureTensor) -> Result<IfcTensor> {
    check_shapes(w, x)?;
    Ok(IfcTensor { slabs: w.matrices.iter().zip(x.matrices()).map(|(w, x)| w * x).collect() })
}

pub fn scv_covariances(y: &IfcTensor, x: Option<&FeatureTensor>) -> ScvStats {
    let (n, k, t) = (y.dim(), y.datasets(), y.frames() as f64);
    let psi = (0..n)
        .map(|c| {
            let mut m = DMatrix::zeros(k, k);
            for a in 0..k {
                for b in a..k {
                    let v = y.slabs[a].row(c).dot(&y.slabs[b].row(c)) / t;
                    m[(a, b)] = v;
                    m[(b, a)] = v;
                }
            }
            m
        })
        .collect();
    ScvStats { psi, cross: x.map(CrossCovariance::new) }
}

/// Inverse of a symmetric covariance, adding `RIDGE * I` when it is not
/// positive definite.
pub fn covariance_inverse(psi: &DMatrix<f64>, component: usize) -> Result<DMatrix<f64>> {
    if let Some(ch) = psi.clone().cholesky() {
        return Ok(ch.inverse());
    }
    let ridged = psi + DMatrix::identity(psi.nrows(), psi.ncols()) * RIDGE;
    ridged.cholesky().map(|c| c.inverse()).ok_or(Error::SingularCovariance { component })
}

/// Score `φ^[k](y_n(t)) = {Ψ_n⁻¹ y_n(t)}_k`, returned as `K` matrices `N x T`.
pub fn score_phi(y: &IfcTensor, stats: &ScvStats) -> Result<Vec<DMatrix<f64>>> {
    let (n, k, t) = (y.dim(), y.datasets(), y.frames());
    let mut phi = vec![DMatrix::zeros(n, t); k];
    for c in 0..n {
        let p = covariance_inverse(&stats.psi[c], c)?;
        for s in 0..t {
            let v = &p * y.scv(c, s);
            for (kk, out) in phi.iter_mut().enumerate() {
                out[(c, s)] = v[kk];
            }
        }
    }
    Ok(phi)
}

/// Unit vector `h` with `W̃ h = 0`, where `W̃` is `w` without row `row`;
/// taken from the last column of the orthogonal factor of `[W̃ᵀ | 0]`.
pub fn nullspace_vector(w: &DMatrix<f64>, row: usize, dataset: usize) -> Result<DVector<f64>> {
    let n = w.nrows();
    if n == 1 {
        return Ok(DVector::from_element(1, 1.0));
    }
    let mut m = DMatrix::zeros(n, n);
    let mut col = 0;
    for i in (0..n).filter(|&i| i != row) {
        m.set_column(col, &w.row(i).transpose());
        col += 1;
    }
    let qr = m.qr();
    let r = qr.r();
    let scale = (0..n - 1).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    if (0..n - 1).any(|i| r[(i, i)].abs() <= 1e-12 * scale.max(1e-300)) || scale == 0.0 {
        return Err(Error::DegenerateNullspace { row, dataset });
    }
    Ok(qr.q().column(n - 1).into_owned())
}

fn determinant_term(w: &DMatrix<f64>, row: usize, dataset: usize) -> Result<(DVector<f64>, f64)> {
    let h = nullspace_vector(w, row, dataset)?;
    let hw = h.dot(&w.row(row).transpose());
    if !(hw.abs() > 1e-300) {
        return Err(Error::DegenerateNullspace { row, dataset });
    }
    Ok((h, hw))
}

/// Gradient of the cost with respect to the stacked row `w_n`, the
/// expectation taken as a sample mean over frames.
pub fn gradient_wn(
    n: usize,
    w: &DemixingTensor,
    x: &FeatureTensor,
    y: &IfcTensor,
    stats: &ScvStats,
) -> Result<DVector<f64>> {
    check_shapes(w, x)?;
    let (dim, k, t) = (w.dim(), w.datasets(), x.frames());
    let p = covariance_inverse(&stats.psi[n], n)?;
    let mut grad = DVector::zeros(k * dim);
    for s in 0..t {
        let phi = &p * y.scv(n, s);
        for (kk, slab) in x.slabs.iter().enumerate() {
            let mut seg = grad.rows_mut(kk * dim, dim);
            seg.axpy(phi[kk] / t as f64, &slab.values.column(s), 1.0);
        }
    }
    for (kk, m) in w.matrices.iter().enumerate() {
        let (h, hw) = determinant_term(m, n, kk)?;
        let mut seg = grad.rows_mut(kk * dim, dim);
        seg.axpy(-1.0 / hw, &h, 1.0);
    }
    Ok(grad)
}

/// Per-row quantities shared by the gradient and Hessians, computed from the
/// cross-covariances: `r[k][j] = R^[k,j] w_n^[j]`, `Ψ_n` and its inverse.
struct RowTerms {
    r: Vec<Vec<DVector<f64>>>,
    p: DMatrix<f64>,
    det_terms: Vec<(DVector<f64>, f64)>,
}

impl RowTerms {
    fn new(n: usize, w: &DemixingTensor, cross: &CrossCovariance) -> Result<Self> {
        let k = w.datasets();
        let rows: Vec<DVector<f64>> = w.matrices.iter().map(|m| m.row(n).transpose()).collect();
        let r: Vec<Vec<DVector<f64>>> =
            (0..k).map(|a| (0..k).map(|b| cross.block(a, b) * &rows[b]).collect()).collect();
        let psi = DMatrix::from_fn(k, k, |a, b| rows[a].dot(&r[a][b]));
        let p = covariance_inverse(&psi, n)?;
        let det_terms =
            w.matrices.iter().enumerate().map(|(kk, m)| determinant_term(m, n, kk)).collect::<Result<_>>()?;
        Ok(Self { r, p, det_terms })
    }

    fn gradient(&self, dim: usize) -> DVector<f64> {
        let k = self.p.nrows();
        let mut g = DVector::zeros(k * dim);
        for a in 0..k {
            let mut seg = g.rows_mut(a * dim, dim);
            for b in 0..k {
                seg.axpy(self.p[(a, b)], &self.r[a][b], 1.0);
            }
            let (h, hw) = &self.det_terms[a];
            seg.axpy(-1.0 / hw, h, 1.0);
        }
        g
    }

    fn newton_hessian(&self, cross: &CrossCovariance) -> DMatrix<f64> {
        let (k, dim) = (self.p.nrows(), cross.dim());
        let mut hess = DMatrix::zeros(k * dim, k * dim);
        for a in 0..k {
            for b in 0..k {
                let mut blk = hess.view_mut((a * dim, b * dim), (dim, dim));
                blk.copy_from(&(cross.block(a, b) * self.p[(a, b)]));
            }
            let (h, hw) = &self.det_terms[a];
            let mut blk = hess.view_mut((a * dim, a * dim), (dim, dim));
            blk.ger(1.0 / (hw * hw), h, h, 1.0);
        }
        hess
    }
}

impl RowTerms {
    fn exact_hessian(&self, cross: &CrossCovariance) -> DMatrix<f64> {
        let mut hess = self.newton_hessian(cross);
        let (k, dim) = (self.p.nrows(), cross.dim());
        let (p, r) = (&self.p, &self.r);
        // q[l][j] = sum_b P_jb r[l][b]
        let q: Vec<Vec<DVector<f64>>> = (0..k)
            .map(|l| {
                (0..k)
                    .map(|j| {
                        let mut v = DVector::zeros(dim);
                        for b in 0..k {
                            v.axpy(p[(j, b)], &r[l][b], 1.0);
                        }
                        v
                    })
                    .collect()
            })
            .collect();
        for a in 0..k {
            for l in 0..k {
                let mut blk = hess.view_mut((a * dim, l * dim), (dim, dim));
                for j in 0..k {
                    blk.ger(-p[(a, l)], &r[a][j], &q[l][j], 1.0);
                }
                blk.ger(-1.0, &q[a][l], &q[l][a], 1.0);
            }
        }
        hess
    }
}

fn require_cross(stats: &ScvStats) -> Result<&CrossCovariance> {
    stats
        .cross
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("Hessian needs cross-covariances; pass X to scv_covariances".into()))
}

/// Newton Hessian for row `n`: blocks `{Ψ_n⁻¹}_{k1,k2} R_x^[k1,k2]`, plus
/// `h hᵀ / (hᵀ w)²` on the diagonal blocks. This is the expected-Hessian
/// form used for the update step.
pub fn hessian_blocks(n: usize, w: &DemixingTensor, stats: &ScvStats) -> Result<DMatrix<f64>> {
    let cross = require_cross(stats)?;
    Ok(RowTerms::new(n, w, cross)?.newton_hessian(cross))
}

/// Exact second derivative of the sample cost with respect to `w_n`: the
/// Newton Hessian plus the terms from the dependence of `Ψ_n` on `w_n`.
pub fn exact_hessian(n: usize, w: &DemixingTensor, stats: &ScvStats) -> Result<DMatrix<f64>> {
    let cross = require_cross(stats)?;
    Ok(RowTerms::new(n, w, cross)?.exact_hessian(cross))
}

fn log_det_spd(m: &DMatrix<f64>, component: usize) -> Result<f64> {
    match m.clone().cholesky() {
        Some(ch) => Ok(2.0 * ch.l().diagonal().iter().map(|d| d.ln()).sum::<f64>()),
        None => Err(Error::SingularCovariance { component }),
    }
}

fn log_abs_det_sum(w: &DemixingTensor) -> Result<f64> {
    w.matrices
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let lu = m.clone().lu();
            let abs_det = lu.determinant().abs();
            if abs_det < SINGULAR_DET || !abs_det.is_finite() {
                // determinant may underflow for large N; fall back to the LU diagonal
                let log = lu.u().diagonal().iter().map(|d| d.abs().ln()).sum::<f64>();
                if !log.is_finite() || log < SINGULAR_DET.ln() {
                    return Err(Error::SingularDemixing { dataset: k, abs_det });
                }
                return Ok(log);
            }
            Ok(abs_det.ln())
        })
        .sum()
}

/// `sum_n ½ log det Ψ_n - sum_k log |det W^[k]|`; the data-entropy constant is
/// omitted.
pub fn cost_iva(w: &DemixingTensor, stats: &ScvStats) -> Result<f64> {
    let scv: f64 = stats.psi.iter().enumerate().map(|(n, p)| log_det_spd(p, n).map(|l| 0.5 * l)).sum::<Result<f64>>()?;
    Ok(scv - log_abs_det_sum(w)?)
}

/// Cost evaluated through the cross-covariances, without forming `Y`.
pub fn cost_from_cross(w: &DemixingTensor, cross: &CrossCovariance) -> Result<f64> {
    let (k, dim) = (w.datasets(), w.dim());
    let mut scv = 0.0;
    for n in 0..dim {
        let rows: Vec<DVector<f64>> = w.matrices.iter().map(|m| m.row(n).transpose()).collect();
        let psi = DMatrix::from_fn(k, k, |a, b| rows[a].dot(&(cross.block(a, b) * &rows[b])));
        scv += 0.5 * log_det_spd(&psi, n)?;
    }
    Ok(scv - log_abs_det_sum(w)?)
}

/// Solves `H d = g` by Cholesky, retrying with `RIDGE * I`, then LU.
fn solve_newton(hess: DMatrix<f64>, grad: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(ch) = hess.clone().cholesky() {
        return Some(ch.solve(grad));
    }
    let dim = hess.nrows();
    let ridged = &hess + DMatrix::identity(dim, dim) * RIDGE;
    if let Some(ch) = ridged.clone().cholesky() {
        return Some(ch.solve(grad));
    }
    ridged.lu().solve(grad)
}

/// One Newton pass over all rows, each row renormalized after its update.
fn newton_sweep(w: &DemixingTensor, cross: &CrossCovariance, eta: f64) -> Result<DemixingTensor> {
    let mut next = w.clone();
    let dim = w.dim();
    for n in 0..dim {
        let terms = RowTerms::new(n, &next, cross)?;
        let grad = terms.gradient(dim);
        let step = solve_newton(terms.newton_hessian(cross), &grad)
            .ok_or(Error::SingularCovariance { component: n })?;
        let row = next.stacked_row(n) - step * eta;
        next.set_stacked_row(n, &row);
        for m in &mut next.matrices {
            let norm = m.row(n).norm();
            if norm > 0.0 {
                let scaled = m.row(n) / norm;
                m.set_row(n, &scaled);
            }
        }
    }
    Ok(next)
}

/// Orders components by decreasing cross-dataset dependence (ascending
/// log-determinant of the SCV correlation matrix) and makes the largest
/// entry of every row positive.
pub fn canonicalize(w: &mut DemixingTensor, cross: &CrossCovariance) -> Result<()> {
    let (k, dim) = (w.datasets(), w.dim());
    for m in &mut w.matrices {
        for i in 0..dim {
            let (idx, _) = m.row(i).iter().enumerate().fold((0, 0.0), |best, (j, v)| {
                if v.abs() > best.1 { (j, v.abs()) } else { best }
            });
            if m[(i, idx)] < 0.0 {
                let flipped = -m.row(i);
                m.set_row(i, &flipped);
            }
        }
    }
    let mut keys = Vec::with_capacity(dim);
    for n in 0..dim {
        let rows: Vec<DVector<f64>> = w.matrices.iter().map(|m| m.row(n).transpose()).collect();
        let psi = DMatrix::from_fn(k, k, |a, b| rows[a].dot(&(cross.block(a, b) * &rows[b])));
        let scale = psi.diagonal().map(|d| d.ln()).sum();
        keys.push((log_det_spd(&psi, n)? - scale, n));
    }
    keys.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let order: Vec<usize> = keys.into_iter().map(|(_, n)| n).collect();
    for m in &mut w.matrices {
        let old = m.clone();
        for (dst, &src) in order.iter().enumerate() {
            m.set_row(dst, &old.row(src));
        }
    }
    Ok(())
}

/// Estimates `W` from a random seeded start. `x` should be whitened.
pub fn run_iva(x: &FeatureTensor, cfg: &IvaConfig) -> Result<IvaOutcome> {
    let w0 = init_demixing(x.dim(), x.datasets(), cfg.seed);
    run_iva_from(x, w0, cfg)
}

pub fn run_iva_from(x: &FeatureTensor, w0: DemixingTensor, cfg: &IvaConfig) -> Result<IvaOutcome> {
    cfg.validate()?;
    check_shapes(&w0, x)?;
    let cross = CrossCovariance::new(x);
    let mut w = w0;
    w.normalize_rows();
    let wrap = |iteration: usize| move |e: Error| Error::IvaIteration { iteration, source: Box::new(e) };

    let mut eta = cfg.eta0;
    let mut cost = cost_from_cross(&w, &cross).map_err(wrap(0))?;
    let mut trace = vec![TracePoint { iter: 0, eta, cost }];
    let mut stop = StopReason::MaxIters;
    let mut iterations = 0;

    for iter in 1..=cfg.max_iters {
        iterations = iter;
        let candidate = newton_sweep(&w, &cross, eta).map_err(wrap(iter))?;
        // a step that makes some W^[k] singular counts as a cost increase
        let new_cost = cost_from_cross(&candidate, &cross).unwrap_or(f64::INFINITY);
        if new_cost <= cost {
            let decrease = cost - new_cost;
            w = candidate;
            cost = new_cost;
            trace.push(TracePoint { iter, eta, cost });
            if decrease < cfg.cost_tol {
                stop = StopReason::Converged;
                break;
            }
        } else {
            eta *= cfg.eta_decay;
            if eta < cfg.eta_min {
                stop = StopReason::StepTooSmall;
                break;
            }
        }
    }

    canonicalize(&mut w, &cross).map_err(wrap(iterations))?;
    let ifc = demix(&w, x)?;
    Ok(IvaOutcome { demixing: w, ifc, trace, iterations, stop })
}

/// IVA applied to raw features: the tensor is centered and whitened per slab,
/// demixed, and the whitening folded into the returned demixing so that
/// `Y^[k] = W^[k] X^[k]` holds for the raw `X`.
#[derive(Debug, Clone)]
pub struct Separation {
    pub demixing: DemixingTensor,
    pub ifc: IfcTensor,
    pub outcome: IvaOutcome,
}

pub fn separate(x: &FeatureTensor, cfg: &IvaConfig) -> Result<Separation> {
    let (white, transform) = crate::features::whiten(x)?;
    let outcome = run_iva(&white, cfg)?;
    let demixing = outcome.demixing.compose(&transform.matrices)?;
    let ifc = demix(&demixing, x)?;
    Ok(Separation { demixing, ifc, outcome })
}

/// Analytic derivatives against central finite differences on one random
/// instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivativeCheck {
    pub grad_rel_err: f64,
    pub hess_rel_err: f64,
}

pub const FD_STEP: f64 = 1e-6;

fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    analytic.iter().zip(numeric).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale
}

/// Draws a Gaussian `N x T x K` instance and a random demixing tensor from
/// `seed`, then compares the gradient and the exact Hessian of a random row
/// with central differences of the cost and of the gradient.
pub fn derivative_check(n: usize, k: usize, t: usize, seed: u64) -> Result<DerivativeCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = FeatureTensor::from_matrices(
        (0..k).map(|_| DMatrix::from_fn(n, t, |_, _| StandardNormal.sample(&mut rng))).collect(),
    )?;
    let w = init_demixing(n, k, seed.wrapping_add(1));
    let row = (seed as usize) % n;
    let cross = CrossCovariance::new(&x);
    let stats_at = |w: &DemixingTensor| -> Result<ScvStats> {
        Ok(scv_covariances(&demix(w, &x)?, Some(&x)))
    };
    let grad_at = |w: &DemixingTensor| -> Result<DVector<f64>> {
        let y = demix(w, &x)?;
        gradient_wn(row, w, &x, &y, &scv_covariances(&y, Some(&x)))
    };
    let perturbed = |i: usize, delta: f64| {
        let mut v = w.stacked_row(row);
        v[i] += delta;
        let mut p = w.clone();
        p.set_stacked_row(row, &v);
        p
    };

    let grad = grad_at(&w)?;
    let hess = exact_hessian(row, &w, &stats_at(&w)?)?;
    let dim = k * n;
    let mut fd_grad = vec![0.0; dim];
    let mut fd_hess = DMatrix::zeros(dim, dim);
    for i in 0..dim {
        let (plus, minus) = (perturbed(i, FD_STEP), perturbed(i, -FD_STEP));
        fd_grad[i] = (cost_from_cross(&plus, &cross)? - cost_from_cross(&minus, &cross)?) / (2.0 * FD_STEP);
        let col = (grad_at(&plus)? - grad_at(&minus)?) / (2.0 * FD_STEP);
        fd_hess.set_column(i, &col);
    }
    Ok(DerivativeCheck {
        grad_rel_err: max_rel_err(grad.as_slice(), &fd_grad),
        hess_rel_err: max_rel_err(hess.as_slice(), fd_hess.as_slice()),
    })
}
