//! Deeper networks with one-dimensional input: `L` frozen Gaussian middle
//! layers, `x -> (1/m) V^T F_L ... F_1 U x` with `F_l = Z_l / sqrt m + W_l / m`.
//!
//! In the limit each layer `l` carries its own family of Gaussian basis
//! vectors, indexed by walks `s_0, ..., s_M` over the layer indices that
//! start at `0` or `L`, end at `l` and move by one at each step. The frozen
//! layer `Z_l` maps the basis of layer `l - 1` to that of layer `l` by a 0/1
//! coefficient matrix (the ladder of that layer):
//!
//! `m^{-1/2} Z_l Psi^{l-1}_s = Psi^l_{(s, l)} + Psi^l_{s'}` where the second
//! term is present when `s = (s', l - 1)` with `s'` ending at `l`.
//!
//! Walks are numbered by a [`SequenceCoding`]. For `L = 2` the binary
//! numbering [`BinaryCoding`] is used; other depths use [`WalkCoding`],
//! which lists walks by length and then lexicographically.

use std::collections::HashMap;
use std::sync::Arc;

use serde::Serialize;

use crate::data::Objective;
use crate::error::{Error, Result};
use crate::finite::{check_divergence, factor_apply, factor_apply_t, inv, inv_sqrt, InitDists, OBJ_U, OBJ_V, OBJ_Z};
use crate::limit::{lg_apply, lg_apply_t, Grid, Ladder, LadderOperator, Truncation};
use crate::numerics::{dot, mean, norm_sq, par_map, Dist, Matrix, RunStreams};

/// A walk `s_0, ..., s_M` over layer indices `0..=L`.
pub type LayerSequence = Vec<usize>;

pub fn is_valid_sequence(l_total: usize, seq: &[usize]) -> bool {
    !seq.is_empty()
        && (seq[0] == 0 || seq[0] == l_total)
        && seq.iter().all(|&s| s <= l_total)
        && seq.windows(2).all(|w| w[0].abs_diff(w[1]) == 1)
}

/// All walks of at most `max_len` entries ending at layer `ell`, shortest
/// first and lexicographic within a length.
pub fn enumerate_sequences(l_total: usize, ell: usize, max_len: usize) -> Result<Vec<LayerSequence>> {
    if ell > l_total || l_total == 0 || max_len == 0 {
        return Err(Error::Config(format!("need 1 <= L, 0 <= ell <= L and max_len >= 1 (L={l_total}, ell={ell})")));
    }
    let mut out = Vec::new();
    fn extend(l_total: usize, cur: &mut Vec<usize>, len: usize, ell: usize, out: &mut Vec<LayerSequence>) {
        if cur.len() == len {
            if *cur.last().unwrap() == ell {
                out.push(cur.clone());
            }
            return;
        }
        let last = *cur.last().unwrap();
        for next in [last.wrapping_sub(1), last + 1] {
            if next <= l_total {
                cur.push(next);
                extend(l_total, cur, len, ell, out);
                cur.pop();
            }
        }
    }
    for len in 1..=max_len {
        let mut starts = vec![0, l_total];
        starts.dedup();
        for s0 in starts {
            let mut cur = vec![s0];
            extend(l_total, &mut cur, len, ell, &mut out);
        }
    }
    out.sort_by(|a, b| a.len().cmp(&b.len()).then(a.cmp(b)));
    Ok(out)
}

/// A numbering of the walks ending at each layer by `1, 2, 3, ...`; some
/// numbers may be unused.
pub trait SequenceCoding: Send + Sync {
    fn depth(&self) -> usize;
    /// 1-based number of a valid walk; the layer is its last entry.
    fn index(&self, seq: &[usize]) -> Option<usize>;
    /// The walk ending at `layer` with the given number, if any.
    fn sequence(&self, layer: usize, index: usize) -> Option<LayerSequence>;
}

/// Binary numbering for `L = 2`. Every walk alternates between layer 1
/// and a layer in `{0, 2}`; writing `b_k = s_{2k} / 2` for the even entries
/// the number is the binary string `1 b_0 b_1 ...`, with the final entry
/// dropped when the walk ends at layer 0 or 2. Layer 1 numbers start at 2.
#[derive(Clone, Copy, Debug, Default)]
pub struct BinaryCoding;

impl SequenceCoding for BinaryCoding {
    fn depth(&self) -> usize {
        2
    }

    fn index(&self, seq: &[usize]) -> Option<usize> {
        if !is_valid_sequence(2, seq) {
            return None;
        }
        let mm = seq.len() - 1;
        let sigma = mm / 2;
        let ell = seq[mm];
        // 2^{sigma+1} + sum_{i=0}^{sigma} 2^{i-1} s_{2(sigma-i)} for layer 1,
        // 2^{sigma} + sum_{i=1}^{sigma} 2^{i-2} s_{2(sigma-i)} otherwise.
        let (lead, first) = if ell == 1 { (sigma + 1, 0) } else { (sigma, 1) };
        let mut n = 1usize.checked_shl(lead as u32)?;
        for i in first..=sigma {
            let bit = seq[2 * (sigma - i)] / 2;
            n += bit << (i - first);
        }
        Some(n)
    }

    fn sequence(&self, layer: usize, index: usize) -> Option<LayerSequence> {
        if layer > 2 || index == 0 {
            return None;
        }
        let nbits = (usize::BITS - 1 - index.leading_zeros()) as usize;
        if layer == 1 && nbits == 0 {
            return None;
        }
        let mut seq = Vec::with_capacity(2 * nbits + 1);
        for k in 0..nbits {
            let bit = (index >> (nbits - 1 - k)) & 1;
            seq.push(2 * bit);
            seq.push(1);
        }
        if layer != 1 {
            seq.push(layer);
        }
        Some(seq)
    }
}

/// Numbering for any depth: shorter walks first, lexicographic order
/// within a length. For `L = 1` the number of a walk is its length.
#[derive(Clone, Copy, Debug)]
pub struct WalkCoding {
    pub l_total: usize,
}

impl WalkCoding {
    /// `ways[n][x]`: walks of `n` steps from `x` to `ell` inside `0..=L`.
    fn ways(&self, ell: usize, steps: usize) -> Vec<Vec<u128>> {
        let l = self.l_total;
        let mut w = vec![vec![0u128; l + 1]];
        w[0][ell] = 1;
        for n in 1..=steps {
            let row: Vec<u128> = (0..=l)
                .map(|x| {
                    let down = if x > 0 { w[n - 1][x - 1] } else { 0 };
                    let up = if x < l { w[n - 1][x + 1] } else { 0 };
                    down.saturating_add(up)
                })
                .collect();
            w.push(row);
        }
        w
    }

    fn starts(&self) -> Vec<usize> {
        let mut s = vec![0, self.l_total];
        s.dedup();
        s
    }

    fn count(&self, ways: &[Vec<u128>], len: usize) -> u128 {
        self.starts().iter().map(|&s| ways[len - 1][s]).fold(0u128, u128::saturating_add)
    }
}

impl SequenceCoding for WalkCoding {
    fn depth(&self) -> usize {
        self.l_total
    }

    fn index(&self, seq: &[usize]) -> Option<usize> {
        if !is_valid_sequence(self.l_total, seq) {
            return None;
        }
        let len = seq.len();
        let ell = seq[len - 1];
        let ways = self.ways(ell, len - 1);
        let mut idx: u128 = 1;
        for l in 1..len {
            idx = idx.saturating_add(self.count(&ways, l));
        }
        for k in 0..len {
            let choices: Vec<usize> = if k == 0 {
                self.starts()
            } else {
                let p = seq[k - 1];
                [p.wrapping_sub(1), p + 1].into_iter().filter(|&v| v <= self.l_total).collect()
            };
            for v in choices.into_iter().filter(|&v| v < seq[k]) {
                idx = idx.saturating_add(ways[len - 1 - k][v]);
            }
        }
        usize::try_from(idx).ok()
    }

    fn sequence(&self, layer: usize, index: usize) -> Option<LayerSequence> {
        if layer > self.l_total || index == 0 {
            return None;
        }
        let mut r = (index - 1) as u128;
        let mut len = 1;
        let ways = loop {
            let ways = self.ways(layer, len - 1);
            let c = self.count(&ways, len);
            if r < c {
                break ways;
            }
            r -= c;
            len += 1;
            if len > 128 {
                return None;
            }
        };
        let mut seq = Vec::with_capacity(len);
        for k in 0..len {
            let choices: Vec<usize> = if k == 0 {
                self.starts()
            } else {
                let p: usize = seq[k - 1];
                [p.wrapping_sub(1), p + 1].into_iter().filter(|&v: &usize| v <= self.l_total).collect()
            };
            let mut picked = None;
            for v in choices {
                let c = ways[len - 1 - k][v];
                if r < c {
                    picked = Some(v);
                    break;
                }
                r -= c;
            }
            seq.push(picked?);
        }
        Some(seq)
    }
}

/// The binary number of a depth-2 walk.
pub fn sequence_to_index(l_total: usize, seq: &[usize]) -> Result<usize> {
    if l_total != 2 {
        return Err(Error::Unsupported("binary numbering is defined for L = 2 only".into()));
    }
    BinaryCoding.index(seq).ok_or_else(|| Error::Config(format!("{seq:?} is not a depth-2 walk")))
}

/// The coding used for the limit dynamics at a given depth.
pub fn default_coding(l_total: usize) -> Arc<dyn SequenceCoding> {
    if l_total == 2 {
        Arc::new(BinaryCoding)
    } else {
        Arc::new(WalkCoding { l_total })
    }
}

/// Ladder of layer `ell`, derived from a coding: column `j` (a walk `s`
/// ending at `ell - 1`) has ones at the rows of `(s, ell)` and, when `s`
/// reads `(s', ell - 1)` with `s'` ending at `ell`, of `s'`.
#[derive(Clone)]
pub struct CodedLadder {
    pub coding: Arc<dyn SequenceCoding>,
    pub ell: usize,
}

impl Ladder for CodedLadder {
    fn rows_of_col(&self, j: usize, out: &mut Vec<usize>) {
        out.clear();
        let Some(mut s) = self.coding.sequence(self.ell - 1, j + 1) else {
            return;
        };
        if s.len() >= 2 && s[s.len() - 2] == self.ell {
            if let Some(i) = self.coding.index(&s[..s.len() - 1]) {
                out.push(i - 1);
            }
        }
        s.push(self.ell);
        if let Some(i) = self.coding.index(&s) {
            out.push(i - 1);
        }
        out.sort_unstable();
    }

    fn cols_of_row(&self, i: usize, out: &mut Vec<usize>) {
        out.clear();
        let Some(mut t) = self.coding.sequence(self.ell, i + 1) else {
            return;
        };
        if t.len() >= 2 && t[t.len() - 2] == self.ell - 1 {
            if let Some(j) = self.coding.index(&t[..t.len() - 1]) {
                out.push(j - 1);
            }
        }
        t.push(self.ell - 1);
        if let Some(j) = self.coding.index(&t) {
            out.push(j - 1);
        }
        out.sort_unstable();
    }

    fn out_support(&self, n: usize) -> usize {
        let mut buf = Vec::new();
        (0..n)
            .map(|j| {
                self.rows_of_col(j, &mut buf);
                buf.last().map_or(0, |&i| i + 1)
            })
            .max()
            .unwrap_or(0)
    }

    fn out_support_t(&self, n: usize) -> usize {
        let mut buf = Vec::new();
        (0..n)
            .map(|i| {
                self.cols_of_row(i, &mut buf);
                buf.last().map_or(0, |&j| j + 1)
            })
            .max()
            .unwrap_or(0)
    }
}

/// The ladder matrices in their published display form, `R x R`.
///
/// For `L = 2`: `(Lambda_1)_ij = 1` iff `i = j` or `2i = j`, and
/// `(Lambda_2)_ij = 1` iff `i = j` or `2j + 1 = i` (1-based). These are the
/// transposes of the coefficient maps that act in the dynamics, which also
/// omit the unused layer-1 number 1; see [`dynamics_ladder`]. For `L = 1`
/// the three-layer ladder with `d = 1` is returned, and deeper networks get
/// the coded ladder.
pub fn lambda_ell(l_total: usize, ell: usize, r: usize) -> Result<Matrix> {
    if ell == 0 || ell > l_total {
        return Err(Error::Config(format!("layer {ell} out of range 1..={l_total}")));
    }
    Ok(match l_total {
        1 => LadderOperator { d: 1 }.dense(r, r),
        2 => Matrix::from_fn(r, r, |i0, j0| {
            let (i, j) = (i0 + 1, j0 + 1);
            let one = if ell == 1 { i == j || 2 * i == j } else { i == j || 2 * j + 1 == i };
            if one {
                1.0
            } else {
                0.0
            }
        }),
        _ => dynamics_ladder(l_total, ell).dense(r, r),
    })
}

/// The ladder of layer `ell` as it acts on limit coefficients.
pub fn dynamics_ladder(l_total: usize, ell: usize) -> CodedLadder {
    CodedLadder { coding: default_coding(l_total), ell }
}

/// Stream object id of the frozen matrix of layer `ell` (1-based); layer 1
/// shares its id with the three-layer network.
pub fn obj_z(ell: usize) -> u16 {
    OBJ_Z + (ell as u16 - 1)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MultiFiniteState {
    pub m: usize,
    pub l_total: usize,
    /// `m x 1`.
    pub u: Matrix,
    pub ws: Vec<Matrix>,
    pub v: Vec<f64>,
    pub zs: Vec<Matrix>,
    pub kappa: usize,
}

pub fn init_multi_finite(m: usize, l_total: usize, streams: RunStreams, dists: InitDists) -> Result<MultiFiniteState> {
    if m == 0 || l_total == 0 {
        return Err(Error::Dimension(format!("width {m} and depth {l_total} must be positive")));
    }
    Ok(MultiFiniteState {
        m,
        l_total,
        u: streams.object(OBJ_U).matrix(m, 1, dists.u),
        ws: vec![Matrix::zeros(m, m); l_total],
        v: streams.object(OBJ_V).vector(m, dists.v),
        zs: (1..=l_total).map(|l| streams.object(obj_z(l)).matrix(m, m, dists.z)).collect(),
        kappa: 0,
    })
}

impl MultiFiniteState {
    /// `[F_{l+1}^T ... F_L^T V]` for `l = 0..=L`.
    fn backward(&self) -> Vec<Vec<f64>> {
        let mut back = vec![Vec::new(); self.l_total + 1];
        back[self.l_total] = self.v.clone();
        for l in (1..=self.l_total).rev() {
            back[l - 1] = factor_apply_t(&self.zs[l - 1], &self.ws[l - 1], self.m, &back[l]);
        }
        back
    }

    pub fn raw_predictor(&self) -> f64 {
        let back = self.backward();
        self.u.matvec_t(&back[0])[0] * inv(self.m)
    }

    pub fn predictor(&self, scale: f64) -> f64 {
        scale * self.raw_predictor()
    }

    /// One gradient step with layer-wise learning rates; every update uses
    /// the pre-step parameters.
    pub fn gd_step(&mut self, obj: &Objective, tau: f64) -> Result<()> {
        if obj.d() != 1 {
            return Err(Error::Dimension("deep networks take one-dimensional inputs".into()));
        }
        let m = self.m;
        let back = self.backward();
        let mut lam = self.u.matvec_t(&back[0]);
        lam.iter_mut().for_each(|x| *x *= obj.scale * inv(m));
        check_divergence(&lam, self.kappa)?;
        let xi = obj.xi(&lam);
        let mut fwd = vec![self.u.matvec(&xi)];
        for l in 1..=self.l_total {
            let next = factor_apply(&self.zs[l - 1], &self.ws[l - 1], m, &fwd[l - 1]);
            fwd.push(next);
        }
        self.u.rank1_update(-tau, &back[0], &xi);
        for l in 1..=self.l_total {
            self.ws[l - 1].rank1_update(-tau, &back[l], &fwd[l - 1]);
        }
        for (vi, g) in self.v.iter_mut().zip(&fwd[self.l_total]) {
            *vi -= tau * g;
        }
        self.kappa += 1;
        Ok(())
    }
}

#[derive(Clone)]
pub struct MultiLimitState {
    pub l_total: usize,
    ladders: Vec<CodedLadder>,
    /// `n_0 x 1`.
    a: Matrix,
    gs: Vec<Grid>,
    b: Vec<f64>,
    /// Active support of each layer.
    sizes: Vec<usize>,
    truncation: Truncation,
    pub kappa: usize,
}

pub fn init_multi_limit(l_total: usize, truncation: Truncation) -> Result<MultiLimitState> {
    if l_total == 0 {
        return Err(Error::Dimension("depth must be at least 1".into()));
    }
    init_multi_limit_with(default_coding(l_total), truncation)
}

pub fn init_multi_limit_with(coding: Arc<dyn SequenceCoding>, truncation: Truncation) -> Result<MultiLimitState> {
    let l_total = coding.depth();
    let ladders = (1..=l_total).map(|ell| CodedLadder { coding: coding.clone(), ell }).collect();
    let first = |layer: usize| coding.index(&[layer]).expect("single-entry walk at the end layers");
    let (ia, ib) = (first(0), first(l_total));
    let mut a = Matrix::zeros(ia, 1);
    a.set(ia - 1, 0, 1.0);
    let mut b = vec![0.0; ib];
    b[ib - 1] = 1.0;
    let mut sizes = vec![0; l_total + 1];
    sizes[0] = ia;
    sizes[l_total] = ib;
    Ok(MultiLimitState { l_total, ladders, a, gs: vec![Grid::default(); l_total], b, sizes, truncation, kappa: 0 })
}

impl MultiLimitState {
    pub fn a(&self) -> &[f64] {
        &self.a.data
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn g(&self, ell: usize) -> Matrix {
        self.gs[ell - 1].to_matrix()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    fn backward(&self, grow: bool) -> Vec<Vec<f64>> {
        let cap = self.truncation.cap();
        let l_total = self.l_total;
        let mut back = vec![Vec::new(); l_total + 1];
        back[l_total] = self.b.clone();
        for l in (1..=l_total).rev() {
            let (ladder, g) = (&self.ladders[l - 1], &self.gs[l - 1]);
            let len = if grow {
                let need = ladder.out_support_t(back[l].len()).max(g.cols).max(self.sizes[l - 1]);
                need.min(cap).max(self.sizes[l - 1])
            } else {
                self.sizes[l - 1]
            };
            back[l - 1] = lg_apply_t(ladder, g, &back[l], len);
        }
        back
    }

    pub fn raw_predictor(&self) -> f64 {
        let back = self.backward(false);
        self.a.matvec_t(&back[0])[0]
    }

    pub fn predictor(&self, scale: f64) -> f64 {
        scale * self.raw_predictor()
    }

    pub fn gd_step(&mut self, obj: &Objective, tau: f64) -> Result<()> {
        if obj.d() != 1 {
            return Err(Error::Dimension("deep networks take one-dimensional inputs".into()));
        }
        let cap = self.truncation.cap();
        let l_total = self.l_total;
        let back = self.backward(true);
        grow_rows(&mut self.a, back[0].len());
        let mut lam = self.a.matvec_t(&back[0]);
        lam.iter_mut().for_each(|x| *x *= obj.scale);
        check_divergence(&lam, self.kappa)?;
        let xi = obj.xi(&lam);
        let mut fwd = vec![self.a.matvec(&xi)];
        for l in 1..=l_total {
            let (ladder, g) = (&self.ladders[l - 1], &self.gs[l - 1]);
            let need = ladder.out_support(fwd[l - 1].len()).max(g.rows).max(self.sizes[l]);
            let len = need.min(cap).max(self.sizes[l]);
            let next = lg_apply(ladder, g, &fwd[l - 1], len);
            fwd.push(next);
        }
        self.a.rank1_update(-tau, &back[0], &xi);
        for l in 1..=l_total {
            self.gs[l - 1].rank1(-tau, &back[l], &fwd[l - 1]);
        }
        self.b.resize(fwd[l_total].len().max(self.b.len()), 0.0);
        for (bi, fi) in self.b.iter_mut().zip(&fwd[l_total]) {
            *bi -= tau * fi;
        }
        self.kappa += 1;
        self.trim();
        Ok(())
    }

    /// Shrink every layer's active window to its last non-zero entry.
    fn trim(&mut self) {
        let l_total = self.l_total;
        let last_nz = |v: &[f64]| v.iter().rposition(|&x| x != 0.0).map_or(0, |i| i + 1);
        let na = last_nz(&self.a.data);
        let nb = last_nz(&self.b);
        let mut sizes = vec![0; l_total + 1];
        sizes[0] = na;
        sizes[l_total] = nb;
        for (l, g) in self.gs.iter().enumerate() {
            let (mut rows, mut cols) = (0, 0);
            for i in 0..g.rows {
                let c = last_nz(g.row(i));
                if c > 0 {
                    rows = i + 1;
                    cols = cols.max(c);
                }
            }
            sizes[l + 1] = sizes[l + 1].max(rows);
            sizes[l] = sizes[l].max(cols);
        }
        self.a.data.truncate(na);
        self.a.rows = na;
        self.b.truncate(nb);
        self.sizes = sizes;
    }
}

fn grow_rows(m: &mut Matrix, rows: usize) {
    if rows > m.rows {
        m.data.resize(rows * m.cols, 0.0);
        m.rows = rows;
    }
}

/// Brute-force basis vector for a walk `seq`: the loopless sum over index
/// tuples `(i_0, ..., i_M)` with distinct `(i_j, s_j)` pairs.
pub fn psi_basis_oracle(seq: &[usize], zs: &[Matrix], psi_first: &[f64], psi_last: &[f64]) -> Result<Vec<f64>> {
    let l_total = zs.len();
    if !is_valid_sequence(l_total, seq) {
        return Err(Error::Config(format!("{seq:?} is not a walk for L = {l_total}")));
    }
    let m = psi_first.len();
    let mm = seq.len() - 1;
    let needed = (m as f64).powi(mm as i32);
    if needed > crate::chain::ENUMERATION_BUDGET {
        return Err(Error::Budget { needed, budget: crate::chain::ENUMERATION_BUDGET });
    }
    let start = if seq[0] == 0 { psi_first } else { psi_last };
    let scale = (m as f64).powf(-(mm as f64) / 2.0);
    struct Walk<'a> {
        seq: &'a [usize],
        zs: &'a [Matrix],
        start: &'a [f64],
        m: usize,
    }
    fn rec(w: &Walk, t: usize, cur: usize, prod: f64, used: &mut [Vec<bool>]) -> f64 {
        if t == 0 {
            return prod * w.start[cur];
        }
        let (hi, lo) = (w.seq[t], w.seq[t - 1]);
        let layer = lo;
        let mut acc = 0.0;
        for v in 0..w.m {
            if used[layer][v] {
                continue;
            }
            // Step lo -> hi: Z_{hi}[i_t, i_{t-1}] going up, Z_{lo}^T going down.
            let z = if hi == lo + 1 { w.zs[hi - 1].get(cur, v) } else { w.zs[lo - 1].get(v, cur) };
            used[layer][v] = true;
            acc += rec(w, t - 1, v, prod * z, used);
            used[layer][v] = false;
        }
        acc
    }
    let walk = Walk { seq, zs, start, m };
    Ok(par_map(m, |i| {
        let mut used = vec![vec![false; m]; l_total + 1];
        used[seq[mm]][i] = true;
        rec(&walk, mm, i, 1.0, &mut used) * scale
    }))
}

/// One residual of the explicit depth-2 relations.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RelationRow {
    pub m: usize,
    pub relation: &'static str,
    pub j: usize,
    /// `|lhs - rhs|^2 / m`, averaged over seeds; NaN when skipped.
    pub residual: f64,
    pub skipped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RelationReport {
    pub rows: Vec<RelationRow>,
    /// Mean over seeds of the summed squared orthonormality defects of
    /// every basis vector that entered the relations.
    pub defect: f64,
}

pub const EXP_RELATIONS: u16 = 20;

/// Check the four depth-2 relations for `j = 1..=j_max` with brute-force
/// basis vectors.
pub fn verify_relations_l2(m: usize, j_max: usize, n_seeds: usize, seed: u64) -> Result<RelationReport> {
    /// `(relation, j, residual if defined)` rows and the orthonormality defect of one draw.
    type Draw = (Vec<(&'static str, usize, Option<f64>)>, f64);
    let per_seed = par_map(n_seeds, |rep| -> Result<Draw> {
        let st = RunStreams::new(seed, EXP_RELATIONS, rep as u32);
        let zs: Vec<Matrix> = (1..=2).map(|l| st.object(obj_z(l)).matrix(m, m, Dist::Gaussian)).collect();
        let psi0 = st.object(OBJ_U).vector(m, Dist::Gaussian);
        let psi2 = st.object(OBJ_V).vector(m, Dist::Gaussian);
        let mut cache: HashMap<(usize, usize), Vec<f64>> = HashMap::new();
        let mut psi = |layer: usize, j: usize| -> Result<Option<Vec<f64>>> {
            if let Some(v) = cache.get(&(layer, j)) {
                return Ok(Some(v.clone()));
            }
            let Some(seq) = BinaryCoding.sequence(layer, j) else {
                return Ok(None);
            };
            let v = psi_basis_oracle(&seq, &zs, &psi0, &psi2)?;
            cache.insert((layer, j), v.clone());
            Ok(Some(v))
        };
        let s = inv_sqrt(m);
        let apply = |z: &Matrix, x: &[f64], t: bool| -> Vec<f64> {
            let y = if t { z.matvec_t(x) } else { z.matvec(x) };
            y.into_iter().map(|v| v * s).collect()
        };
        let mut out = Vec::new();
        for j in 1..=j_max {
            // rel 1: Z_1 Psi0_j = Psi1_j + Psi1_{2j}
            let lhs = apply(&zs[0], &psi(0, j)?.unwrap(), false);
            let mut rhs = psi(1, 2 * j)?.unwrap();
            if let Some(p) = psi(1, j)? {
                rhs.iter_mut().zip(&p).for_each(|(a, b)| *a += b);
            }
            out.push(("z1_psi0", j, Some(norm_sq(&crate::numerics::sub(&lhs, &rhs)) / m as f64)));
            // rel 2: Z_2^T Psi2_j = Psi1_j + Psi1_{2j+1}
            let lhs = apply(&zs[1], &psi(2, j)?.unwrap(), true);
            let mut rhs = psi(1, 2 * j + 1)?.unwrap();
            if let Some(p) = psi(1, j)? {
                rhs.iter_mut().zip(&p).for_each(|(a, b)| *a += b);
            }
            out.push(("z2t_psi2", j, Some(norm_sq(&crate::numerics::sub(&lhs, &rhs)) / m as f64)));
            // rel 3: Z_1^T Psi1_j = Psi0_j (+ Psi0_{j/2} for even j)
            // rel 4: Z_2 Psi1_j = Psi2_j (+ Psi2_{(j-1)/2} for odd j)
            match psi(1, j)? {
                None => {
                    out.push(("z1t_psi1", j, None));
                    out.push(("z2_psi1", j, None));
                }
                Some(p1) => {
                    let lhs = apply(&zs[0], &p1, true);
                    let mut rhs = psi(0, j)?.unwrap();
                    if j % 2 == 0 {
                        let extra = psi(0, j / 2)?.unwrap();
                        rhs.iter_mut().zip(&extra).for_each(|(a, b)| *a += b);
                    }
                    out.push(("z1t_psi1", j, Some(norm_sq(&crate::numerics::sub(&lhs, &rhs)) / m as f64)));
                    let lhs = apply(&zs[1], &p1, false);
                    let mut rhs = psi(2, j)?.unwrap();
                    if j % 2 == 1 {
                        let extra = psi(2, (j - 1) / 2)?.unwrap();
                        rhs.iter_mut().zip(&extra).for_each(|(a, b)| *a += b);
                    }
                    out.push(("z2_psi1", j, Some(norm_sq(&crate::numerics::sub(&lhs, &rhs)) / m as f64)));
                }
            }
        }
        // Orthonormality of everything computed, within and across layers.
        let mut keys: Vec<_> = cache.keys().copied().collect();
        keys.sort_unstable();
        let mut defect = 0.0;
        for (x, ka) in keys.iter().enumerate() {
            for kb in &keys[x..] {
                let g = dot(&cache[ka], &cache[kb]) / m as f64;
                let target = if ka == kb { 1.0 } else { 0.0 };
                defect += (g - target).powi(2);
            }
        }
        Ok((out, defect))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let n_rel = per_seed[0].0.len();
    let rows = (0..n_rel)
        .map(|k| {
            let (relation, j, first) = per_seed[0].0[k];
            let residual = if first.is_some() {
                mean(&per_seed.iter().map(|s| s.0[k].2.unwrap()).collect::<Vec<_>>())
            } else {
                f64::NAN
            };
            RelationRow { m, relation, j, residual, skipped: first.is_none() }
        })
        .collect();
    let defect = mean(&per_seed.iter().map(|s| s.1).collect::<Vec<_>>());
    Ok(RelationReport { rows, defect })
}
