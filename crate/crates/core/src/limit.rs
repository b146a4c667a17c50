//! Infinite-width limit of the three-layer network.
//!
//! The limit is a network on countably many hidden units: an input layer
//! `A` (rows x d), a middle layer `Lambda + G` and an output layer `B`. The
//! ladder `Lambda` is a fixed 0/1 matrix (the limit of the frozen Gaussian
//! middle layer in the basis of chain vectors) and only `A`, `G`, `B` are
//! trained. All of them start finitely supported and their support grows by
//! at most `d + 1` rows every two steps, so the state is stored densely on
//! the rows that can be non-zero.

use std::io::Write;

use serde::Serialize;

use crate::data::Objective;
use crate::error::{Error, Result};
use crate::finite::check_divergence;
use crate::numerics::{axpy, dot, fit_line, norm_sq, LineFit, Matrix};

/// A 0/1 matrix on the index set `0, 1, 2, ...` with at most two ones in
/// each row and column.
pub trait Ladder {
    /// Columns with a one in row `i`, ascending.
    fn cols_of_row(&self, i: usize, out: &mut Vec<usize>);
    /// Rows with a one in column `j`, ascending.
    fn rows_of_col(&self, j: usize, out: &mut Vec<usize>);
    /// Number of leading rows of `Lambda x` that can be non-zero when `x`
    /// is supported on its first `n` entries.
    fn out_support(&self, n: usize) -> usize;
    /// Same for `Lambda^T y`.
    fn out_support_t(&self, n: usize) -> usize;

    /// `Lambda x` on the first `out_len` rows, summing in ascending column order.
    fn apply(&self, x: &[f64], out_len: usize) -> Vec<f64> {
        let mut buf = Vec::with_capacity(2);
        (0..out_len)
            .map(|i| {
                self.cols_of_row(i, &mut buf);
                let mut s = 0.0;
                for &j in &buf {
                    if j < x.len() {
                        s += x[j];
                    }
                }
                s
            })
            .collect()
    }

    /// `Lambda^T y` on the first `out_len` entries.
    fn apply_t(&self, y: &[f64], out_len: usize) -> Vec<f64> {
        let mut buf = Vec::with_capacity(2);
        (0..out_len)
            .map(|j| {
                self.rows_of_col(j, &mut buf);
                let mut s = 0.0;
                for &i in &buf {
                    if i < y.len() {
                        s += y[i];
                    }
                }
                s
            })
            .collect()
    }

    /// Top-left `rows x cols` block as a dense matrix.
    fn dense(&self, rows: usize, cols: usize) -> Matrix {
        let mut out = Matrix::zeros(rows, cols);
        let mut buf = Vec::new();
        for i in 0..rows {
            self.cols_of_row(i, &mut buf);
            for &j in &buf {
                if j < cols {
                    out.set(i, j, 1.0);
                }
            }
        }
        out
    }
}

/// The three-layer ladder for input dimension `d`: with 1-based indices,
/// `Lambda_ij = 1` iff `j = i + d` or `i = j + 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LadderOperator {
    pub d: usize,
}

impl Ladder for LadderOperator {
    fn cols_of_row(&self, i: usize, out: &mut Vec<usize>) {
        out.clear();
        if i >= 1 {
            out.push(i - 1);
        }
        out.push(i + self.d);
    }

    fn rows_of_col(&self, j: usize, out: &mut Vec<usize>) {
        out.clear();
        if j >= self.d {
            out.push(j - self.d);
        }
        out.push(j + 1);
    }

    fn out_support(&self, n: usize) -> usize {
        if n == 0 {
            0
        } else {
            n + 1
        }
    }

    fn out_support_t(&self, n: usize) -> usize {
        if n == 0 {
            0
        } else {
            n + self.d
        }
    }
}

/// Dense matrix whose active block grows; capacity grows in blocks of 64
/// so that growth does not reallocate every step.
#[derive(Clone, Debug, Default, PartialEq)]
pub(crate) struct Grid {
    pub rows: usize,
    pub cols: usize,
    cap_rows: usize,
    cap_cols: usize,
    data: Vec<f64>,
}

const BLOCK: usize = 64;

fn round_up(n: usize) -> usize {
    n.div_ceil(BLOCK).max(1) * BLOCK
}

impl Grid {
    pub fn ensure(&mut self, rows: usize, cols: usize) {
        if rows > self.cap_rows || cols > self.cap_cols {
            let (cr, cc) = (round_up(rows.max(self.cap_rows)), round_up(cols.max(self.cap_cols)));
            let mut data = vec![0.0; cr * cc];
            for i in 0..self.rows {
                data[i * cc..i * cc + self.cols].copy_from_slice(&self.data[i * self.cap_cols..i * self.cap_cols + self.cols]);
            }
            self.data = data;
            self.cap_rows = cr;
            self.cap_cols = cc;
        }
        self.rows = self.rows.max(rows);
        self.cols = self.cols.max(cols);
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cap_cols..i * self.cap_cols + self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i < self.rows && j < self.cols {
            self.data[i * self.cap_cols + j]
        } else {
            0.0
        }
    }

    /// `G x` on the first `out_len` rows.
    pub fn apply(&self, x: &[f64], out_len: usize) -> Vec<f64> {
        let n = self.cols.min(x.len());
        (0..out_len).map(|i| if i < self.rows { dot(&self.row(i)[..n], &x[..n]) } else { 0.0 }).collect()
    }

    /// `G^T y` on the first `out_len` entries.
    pub fn apply_t(&self, y: &[f64], out_len: usize) -> Vec<f64> {
        let mut out = vec![0.0; out_len];
        let n = self.cols.min(out_len);
        for (i, &yi) in y.iter().enumerate().take(self.rows) {
            axpy(yi, &self.row(i)[..n], &mut out[..n]);
        }
        out
    }

    /// `G += alpha x y^T`, growing the active block to fit.
    pub fn rank1(&mut self, alpha: f64, x: &[f64], y: &[f64]) {
        self.ensure(x.len(), y.len());
        let n = y.len();
        for (i, &xi) in x.iter().enumerate() {
            let c = alpha * xi;
            if c != 0.0 {
                let off = i * self.cap_cols;
                axpy(c, y, &mut self.data[off..off + n]);
            }
        }
    }

    pub fn frobenius_sq(&self) -> f64 {
        (0..self.rows).map(|i| norm_sq(self.row(i))).sum()
    }

    /// `sum_ij Lambda_ij G_ij`.
    pub fn trace_against(&self, ladder: &dyn Ladder) -> f64 {
        let mut buf = Vec::new();
        let mut s = 0.0;
        for i in 0..self.rows {
            ladder.cols_of_row(i, &mut buf);
            for &j in &buf {
                s += self.get(i, j);
            }
        }
        s
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |i, j| self.get(i, j))
    }
}

/// `(Lambda + G) x` on the first `out_len` rows.
pub(crate) fn lg_apply(ladder: &dyn Ladder, g: &Grid, x: &[f64], out_len: usize) -> Vec<f64> {
    let lx = ladder.apply(x, out_len);
    let gx = g.apply(x, out_len);
    lx.iter().zip(&gx).map(|(a, b)| a + b).collect()
}

/// `(Lambda + G)^T y` on the first `out_len` entries.
pub(crate) fn lg_apply_t(ladder: &dyn Ladder, g: &Grid, y: &[f64], out_len: usize) -> Vec<f64> {
    let ly = ladder.apply_t(y, out_len);
    let gy = g.apply_t(y, out_len);
    ly.iter().zip(&gy).map(|(a, b)| a + b).collect()
}

/// How many rows the state keeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Truncation {
    /// Track the exact support, optionally capped at `max_rows` (lossy once
    /// the cap binds).
    Auto { max_rows: Option<usize> },
    /// Keep exactly `rows` rows from the start; exact while
    /// `rows >= d (kappa + 1) + 1`.
    Fixed(usize),
}

impl Default for Truncation {
    fn default() -> Self {
        Truncation::Auto { max_rows: None }
    }
}

impl Truncation {
    pub(crate) fn cap(&self) -> usize {
        match *self {
            Truncation::Auto { max_rows } => max_rows.unwrap_or(usize::MAX),
            Truncation::Fixed(r) => r,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LimitState {
    pub d: usize,
    ladder: LadderOperator,
    /// Input layer, `a.rows` active rows by `d`.
    a: Matrix,
    /// Output layer on its active rows.
    b: Vec<f64>,
    g: Grid,
    truncation: Truncation,
    pub kappa: usize,
}

pub fn init_limit(d: usize, truncation: Truncation) -> Result<LimitState> {
    if d == 0 {
        return Err(Error::Dimension("input dimension must be at least 1".into()));
    }
    let (na, nb) = match truncation {
        Truncation::Auto { max_rows } => {
            if max_rows.is_some_and(|r| r < d + 1) {
                return Err(Error::Config(format!("row cap must be at least d + 1 = {}", d + 1)));
            }
            (d, 1)
        }
        Truncation::Fixed(r) => {
            if r < d + 1 {
                return Err(Error::Config(format!("truncation must be at least d + 1 = {}", d + 1)));
            }
            (r, r)
        }
    };
    let mut a = Matrix::zeros(na, d);
    for k in 0..d {
        a.set(k, k, 1.0);
    }
    let mut b = vec![0.0; nb];
    b[0] = 1.0;
    Ok(LimitState { d, ladder: LadderOperator { d }, a, b, g: Grid::default(), truncation, kappa: 0 })
}

fn grow_rows(m: &mut Matrix, rows: usize) {
    if rows > m.rows {
        m.data.resize(rows * m.cols, 0.0);
        m.rows = rows;
    }
}

impl LimitState {
    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn g(&self) -> Matrix {
        self.g.to_matrix()
    }

    /// Number of rows currently stored.
    pub fn rows(&self) -> usize {
        self.a.rows.max(self.b.len()).max(self.g.rows).max(self.g.cols)
    }

    fn back_len(&self) -> usize {
        let need = self.ladder.out_support_t(self.b.len()).max(self.g.cols).max(self.a.rows);
        need.min(self.truncation.cap()).max(self.a.rows)
    }

    fn fwd_len(&self) -> usize {
        let need = self.ladder.out_support(self.a.rows).max(self.g.rows).max(self.b.len());
        need.min(self.truncation.cap()).max(self.b.len())
    }

    /// Unscaled predictor `A^T (Lambda + G)^T B`.
    pub fn raw_predictor(&self) -> Vec<f64> {
        let y = lg_apply_t(&self.ladder, &self.g, &self.b, self.a.rows);
        self.a.matvec_t(&y)
    }

    pub fn predictor(&self, scale: f64) -> Vec<f64> {
        self.raw_predictor().into_iter().map(|x| scale * x).collect()
    }

    /// One gradient step; every update uses the pre-step parameters.
    pub fn gd_step(&mut self, obj: &Objective, tau: f64) -> Result<()> {
        let back = self.back_len();
        let fwd = self.fwd_len();
        let y = lg_apply_t(&self.ladder, &self.g, &self.b, back);
        grow_rows(&mut self.a, back);
        let mut lam = self.a.matvec_t(&y);
        lam.iter_mut().for_each(|x| *x *= obj.scale);
        check_divergence(&lam, self.kappa)?;
        let xi = obj.xi(&lam);
        let a_xi = self.a.matvec(&xi);
        let f = lg_apply(&self.ladder, &self.g, &a_xi, fwd);
        self.a.rank1_update(-tau, &y, &xi);
        self.g.rank1(-tau, &self.b, &a_xi);
        self.b.resize(fwd, 0.0);
        for (bi, fi) in self.b.iter_mut().zip(&f) {
            *bi -= tau * fi;
        }
        self.kappa += 1;
        Ok(())
    }

    pub fn norm_a2(&self) -> f64 {
        self.a.frobenius_sq()
    }

    pub fn norm_b2(&self) -> f64 {
        norm_sq(&self.b)
    }

    /// `|Lambda + G|^2 - |Lambda|^2 = 2 <Lambda, G> + |G|^2`, the middle-layer
    /// quantity whose rate of change matches that of `|A|^2` and `|B|^2`.
    pub fn norm_lg2(&self) -> f64 {
        2.0 * self.g.trace_against(&self.ladder) + self.g.frobenius_sq()
    }

    /// Largest row index (plus one) holding a non-zero entry in any layer.
    pub fn support(&self) -> usize {
        let last_a = (0..self.a.rows).rev().find(|&i| self.a.row(i).iter().any(|&v| v != 0.0)).map_or(0, |i| i + 1);
        let last_b = self.b.iter().rposition(|&v| v != 0.0).map_or(0, |i| i + 1);
        let mut last_g = 0;
        for i in 0..self.g.rows {
            if let Some(j) = self.g.row(i).iter().rposition(|&v| v != 0.0) {
                last_g = last_g.max(i + 1).max(j + 1);
            }
        }
        last_a.max(last_b).max(last_g)
    }
}

/// One recorded point of a trajectory.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlowRecord {
    pub t: f64,
    /// Effective predictor.
    pub lambda: Vec<f64>,
    pub energy: f64,
    /// Energy above its infimum (square loss only, otherwise NaN).
    pub excess: f64,
    pub norm_a2: f64,
    pub norm_b2: f64,
    pub norm_lg2: f64,
}

/// Per-step diagnostics accumulated over a whole run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct FlowDiagnostics {
    /// `max_n |dA_n - dB_n|` with `dX_n` the per-step change of `|X|^2`.
    pub max_gap_ab: f64,
    /// `max_n |dA_n - dLG_n|`.
    pub max_gap_alg: f64,
    /// `max_n |dA_n|`.
    pub max_step_a: f64,
    /// `max_n (E_{n+1} - E_n)`, positive when the energy went up.
    pub max_energy_increase: f64,
    /// `max_n |P_ker lambda_n|`.
    pub max_kernel_component: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlowTrajectory {
    pub tau: f64,
    pub steps: usize,
    pub records: Vec<FlowRecord>,
    pub diagnostics: FlowDiagnostics,
}

impl FlowTrajectory {
    /// Largest per-step layer imbalance divided by the step size; for the
    /// explicit Euler scheme this is `O(tau)`.
    pub fn balancedness_defect(&self) -> f64 {
        self.diagnostics.max_gap_ab.max(self.diagnostics.max_gap_alg) / self.tau
    }

    /// Largest per-step imbalance relative to the largest per-step change.
    pub fn relative_balancedness_defect(&self) -> f64 {
        self.diagnostics.max_gap_ab.max(self.diagnostics.max_gap_alg) / self.diagnostics.max_step_a
    }

    pub fn last(&self) -> &FlowRecord {
        self.records.last().expect("trajectory has at least the initial record")
    }

    pub fn write_csv(&self, out: &mut dyn Write) -> Result<()> {
        let d = self.records.first().map_or(0, |r| r.lambda.len());
        let mut header = vec!["t".to_string()];
        header.extend((1..=d).map(|k| format!("lambda_{k}")));
        header.extend(["energy", "normA2", "normB2", "normLG2"].map(String::from));
        writeln!(out, "{}", header.join(","))?;
        for r in &self.records {
            let mut row = vec![r.t.to_string()];
            row.extend(r.lambda.iter().map(f64::to_string));
            row.extend([r.energy, r.norm_a2, r.norm_b2, r.norm_lg2].map(|v| v.to_string()));
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

fn record(state: &LimitState, obj: &Objective, t: f64) -> FlowRecord {
    let lambda = state.predictor(obj.scale);
    FlowRecord {
        t,
        energy: obj.risk(&lambda),
        excess: obj.excess_risk(&lambda).unwrap_or(f64::NAN),
        lambda,
        norm_a2: state.norm_a2(),
        norm_b2: state.norm_b2(),
        norm_lg2: state.norm_lg2(),
    }
}

/// Explicit Euler integration of the gradient flow up to time `t_max`,
/// recording every `record_every` steps and at the end.
pub fn gradient_flow(state: &mut LimitState, obj: &Objective, tau: f64, t_max: f64, record_every: usize) -> Result<FlowTrajectory> {
    if !(tau > 0.0 && t_max >= 0.0) {
        return Err(Error::Config("flow needs a positive step and non-negative horizon".into()));
    }
    let steps = (t_max / tau).round() as usize;
    let every = record_every.max(1);
    let kernel = obj.moments.kernel_basis();
    let kernel_part = |lam: &[f64]| kernel.iter().map(|v| dot(v, lam).powi(2)).sum::<f64>().sqrt();
    let mut diag = FlowDiagnostics::default();
    let mut records = vec![record(state, obj, 0.0)];
    let (mut na, mut nb, mut nlg) = (state.norm_a2(), state.norm_b2(), state.norm_lg2());
    let mut energy = records[0].energy;
    diag.max_kernel_component = kernel_part(&records[0].lambda);
    for n in 1..=steps {
        state.gd_step(obj, tau)?;
        let (a2, b2, lg2) = (state.norm_a2(), state.norm_b2(), state.norm_lg2());
        let (da, db, dlg) = (a2 - na, b2 - nb, lg2 - nlg);
        diag.max_gap_ab = diag.max_gap_ab.max((da - db).abs());
        diag.max_gap_alg = diag.max_gap_alg.max((da - dlg).abs());
        diag.max_step_a = diag.max_step_a.max(da.abs());
        (na, nb, nlg) = (a2, b2, lg2);
        let lambda = state.predictor(obj.scale);
        let e = obj.risk(&lambda);
        diag.max_energy_increase = diag.max_energy_increase.max(e - energy);
        energy = e;
        diag.max_kernel_component = diag.max_kernel_component.max(kernel_part(&lambda));
        if n % every == 0 || n == steps {
            records.push(record(state, obj, n as f64 * tau));
        }
    }
    Ok(FlowTrajectory { tau, steps, records, diagnostics: diag })
}

/// Result of fitting `log(E_t - E_inf) ~ c - rate t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ExpFit {
    pub rate: f64,
    pub r2: f64,
    pub n_points: usize,
    pub t_start: f64,
    pub t_end: f64,
}

/// Gap below which samples are ignored by the tail fit.
pub const GAP_FLOOR: f64 = 1e-12;

/// First sample at which the gap has dropped by `1e-3` of its initial
/// value; the samples before it form the plateau.
pub fn plateau_index(gaps: &[f64]) -> Option<usize> {
    let g0 = *gaps.first()?;
    gaps.iter().position(|&g| g0 - g >= 1e-3 * g0)
}

/// Fit an exponential rate to the tail of an energy-gap curve.
///
/// The fit skips the initial plateau (until the gap has dropped by
/// `1e-3` of its initial value), keeps samples whose gap exceeds
/// [`GAP_FLOOR`], and uses the last half of them.
pub fn exp_rate_fit(ts: &[f64], gaps: &[f64]) -> Result<ExpFit> {
    assert_eq!(ts.len(), gaps.len());
    if gaps.is_empty() {
        return Err(Error::EmptyWindow);
    }
    let plateau_end = plateau_index(gaps).unwrap_or(gaps.len());
    let idx: Vec<usize> = (plateau_end..gaps.len()).filter(|&i| gaps[i] > GAP_FLOOR).collect();
    let tail = &idx[idx.len() / 2..];
    if tail.len() < 3 {
        return Err(Error::EmptyWindow);
    }
    let x: Vec<f64> = tail.iter().map(|&i| ts[i]).collect();
    let y: Vec<f64> = tail.iter().map(|&i| gaps[i].ln()).collect();
    let LineFit { slope, r2, .. } = fit_line(&x, &y, None).ok_or(Error::EmptyWindow)?;
    Ok(ExpFit { rate: -slope, r2, n_points: tail.len(), t_start: x[0], t_end: x[x.len() - 1] })
}

/// Rate fit on a recorded flow, using the closed-form excess energy.
pub fn flow_rate_fit(traj: &FlowTrajectory) -> Result<ExpFit> {
    let ts: Vec<f64> = traj.records.iter().map(|r| r.t).collect();
    let gaps: Vec<f64> = traj.records.iter().map(|r| r.excess).collect();
    if gaps.iter().any(|g| g.is_nan()) {
        return Err(Error::Unsupported("rate fit needs the square loss".into()));
    }
    exp_rate_fit(&ts, &gaps)
}
