//! Loopless chain vectors.
//!
//! The frozen `m x m` matrix `Z` is read as a complete bipartite graph
//! between a column side (where `U` lives) and a row side. A chain of length
//! `k` ending at `i` is a walk `i_1, ..., i_{k+1} = i` that starts on the
//! column side and alternates sides; it is loopless when no vertex repeats
//! on either side. Summing the products of `Z` entries along all loopless
//! chains, weighted by `U` at the start, gives the vector `J_k`:
//!
//! `J_{k,i} = m^{-k/2} sum_chains Z_{i_2 i_1} Z_{i_2 i_3} ... U_{i_1}`.
//!
//! `K_k` is the same construction on `Z^T` started from `V`. As `m` grows
//! the `J_k` and `K_k` become orthonormal (after dividing inner products by
//! `m`) with i.i.d. standard Gaussian entries, and multiplying by the
//! rescaled `Z` shifts the index up and down by one, up to a residual that
//! vanishes.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{mean, par_map, std_error, Dist, Matrix, RunStreams};

/// Vertex sequence `i_1, ..., i_{k+1}`; `i_1` is on the column side.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Chain {
    pub vertices: Vec<usize>,
}

impl Chain {
    /// The `Z` entry `(row, col)` of each edge.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.vertices.windows(2).enumerate().map(|(t, w)| if t % 2 == 0 { (w[1], w[0]) } else { (w[0], w[1]) })
    }

    pub fn weight(&self, z: &Matrix) -> f64 {
        self.edges().map(|(r, c)| z.get(r, c)).product()
    }

    pub fn is_loopless(&self) -> bool {
        let mut seen = [std::collections::HashSet::new(), std::collections::HashSet::new()];
        self.vertices.iter().enumerate().all(|(t, &v)| seen[t % 2].insert(v))
    }
}

/// Default bound on `m^k`, the number of chains per endpoint.
pub const ENUMERATION_BUDGET: f64 = 1e7;

fn check_budget(m: usize, k: usize) -> Result<()> {
    let needed = (m as f64).powi(k as i32);
    if needed > ENUMERATION_BUDGET {
        return Err(Error::Budget { needed, budget: ENUMERATION_BUDGET });
    }
    Ok(())
}

/// All loopless chains of length `k` ending at `i`, in lexicographic order.
pub fn enumerate_loopless_chains(m: usize, i: usize, k: usize) -> Result<Vec<Chain>> {
    if i >= m {
        return Err(Error::Dimension(format!("endpoint {i} out of range for width {m}")));
    }
    check_budget(m, k)?;
    let mut out = Vec::new();
    let mut path = vec![0; k + 1];
    path[k] = i;
    let mut used = [vec![false; m], vec![false; m]];
    used[k % 2][i] = true;
    fn rec(t: usize, m: usize, path: &mut Vec<usize>, used: &mut [Vec<bool>; 2], out: &mut Vec<Chain>) {
        if t == 0 {
            out.push(Chain { vertices: path.clone() });
            return;
        }
        let side = (t - 1) % 2;
        for v in 0..m {
            if !used[side][v] {
                used[side][v] = true;
                path[t - 1] = v;
                rec(t - 1, m, path, used, out);
                used[side][v] = false;
            }
        }
    }
    rec(k, m, &mut path, &mut used, &mut out);
    out.sort();
    Ok(out)
}

/// How chain vectors are evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub enum Backend {
    /// Depth-first enumeration of every loopless chain; exact for any `k`
    /// but costs `m^(k+1)` per column.
    Enumeration,
    /// Inclusion-exclusion formulas, available for `k <= 3`.
    ClosedForm,
    /// Closed form when available, enumeration otherwise.
    #[default]
    Auto,
}

pub const CLOSED_FORM_MAX_K: usize = 3;

/// `J_k` for every column of `U` (`m x d`), returned as `m x d`.
pub fn j_vector(k: usize, z: &Matrix, u: &Matrix, backend: Backend) -> Result<Matrix> {
    let m = z.rows;
    if z.cols != m || u.rows != m {
        return Err(Error::Dimension(format!("Z is {}x{}, U has {} rows", z.rows, z.cols, u.rows)));
    }
    let closed = match backend {
        Backend::Enumeration => false,
        Backend::ClosedForm if k > CLOSED_FORM_MAX_K => {
            return Err(Error::Unsupported(format!("closed form only up to k = {CLOSED_FORM_MAX_K}")))
        }
        Backend::ClosedForm => true,
        Backend::Auto => k <= CLOSED_FORM_MAX_K,
    };
    if closed {
        Ok(closed_form(k, z, u))
    } else {
        enumerate_j(k, z, u)
    }
}

/// `K_k`: chain vectors of `Z^T` started from `V`.
pub fn k_vector(k: usize, z: &Matrix, v: &[f64], backend: Backend) -> Result<Vec<f64>> {
    let vm = Matrix { rows: v.len(), cols: 1, data: v.to_vec() };
    Ok(j_vector(k, &z.transpose(), &vm, backend)?.data)
}

fn enumerate_j(k: usize, z: &Matrix, u: &Matrix) -> Result<Matrix> {
    let m = z.rows;
    let d = u.cols;
    check_budget(m, k)?;
    let scale = (m as f64).powf(-(k as f64) / 2.0);
    // Walk backwards from the endpoint; vertex t sits on side t % 2 counted
    // from i_1 on the column side.
    fn rec(t: usize, cur: usize, prod: f64, z: &Matrix, u: &Matrix, used: &mut [Vec<bool>; 2], acc: &mut [f64]) {
        if t == 0 {
            for (a, x) in acc.iter_mut().zip(u.row(cur)) {
                *a += prod * x;
            }
            return;
        }
        let side = (t - 1) % 2;
        for v in 0..z.rows {
            if used[side][v] {
                continue;
            }
            // Edge between vertex t-1 (value v) and vertex t (value cur).
            let w = if side == 1 { z.get(v, cur) } else { z.get(cur, v) };
            used[side][v] = true;
            rec(t - 1, v, prod * w, z, u, used, acc);
            used[side][v] = false;
        }
    }
    let rows = par_map(m, |i| {
        let mut used = [vec![false; m], vec![false; m]];
        used[k % 2][i] = true;
        let mut acc = vec![0.0; d];
        rec(k, i, 1.0, z, u, &mut used, &mut acc);
        acc.iter().map(|a| a * scale).collect::<Vec<_>>()
    });
    Ok(Matrix { rows: m, cols: d, data: rows.concat() })
}

fn closed_form(k: usize, z: &Matrix, u: &Matrix) -> Matrix {
    let m = z.rows;
    let d = u.cols;
    let s = 1.0 / (m as f64).sqrt();
    let zu = z.matmul(u);
    let scaled = |mut x: Matrix, f: f64| {
        x.data.iter_mut().for_each(|v| *v *= f);
        x
    };
    match k {
        0 => u.clone(),
        1 => scaled(zu, s),
        2 => {
            // Z^T Z U minus the walks that return to the endpoint.
            let col_sq: Vec<f64> = (0..m).map(|j| (0..m).map(|r| z.get(r, j).powi(2)).sum()).collect();
            let mut out = z.transpose().matmul(&zu);
            for (i, &sq) in col_sq.iter().enumerate() {
                for c in 0..d {
                    let v = out.get(i, c) - sq * u.get(i, c);
                    out.set(i, c, v);
                }
            }
            scaled(out, s * s)
        }
        _ => {
            debug_assert_eq!(k, 3);
            // Inclusion-exclusion over i_1 = i_3 and i_2 = i_4.
            let col_sq: Vec<f64> = (0..m).map(|j| (0..m).map(|r| z.get(r, j).powi(2)).sum()).collect();
            let row_sq: Vec<f64> = (0..m).map(|r| z.row(r).iter().map(|v| v * v).sum()).collect();
            let full = z.matmul(&z.transpose().matmul(&zu));
            let cu = Matrix::from_fn(m, d, |j, c| col_sq[j] * u.get(j, c));
            let z_cu = z.matmul(&cu);
            let z3 = Matrix { rows: m, cols: m, data: z.data.iter().map(|v| v * v * v).collect() };
            let z3u = z3.matmul(u);
            let out = Matrix::from_fn(m, d, |i, c| full.get(i, c) - z_cu.get(i, c) - row_sq[i] * zu.get(i, c) + z3u.get(i, c));
            scaled(out, s * s * s)
        }
    }
}

/// Residual statistics of one recursion step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Residual {
    pub vector: Matrix,
    /// `|R|^2 / m`.
    pub mean_sq: f64,
    /// `sum R^4 / m`.
    pub mean_fourth: f64,
}

/// `R_k = m^{-1/2} Z' J_k - J_{k+1} - J_{k-1}` where `Z'` is `Z` for even
/// `k` and `Z^T` for odd `k`.
pub fn recursion_residual(k: usize, z: &Matrix, u: &Matrix, backend: Backend) -> Result<Residual> {
    let m = z.rows;
    let jk = j_vector(k, z, u, backend)?;
    let next = j_vector(k + 1, z, u, backend)?;
    let mut lhs = if k.is_multiple_of(2) { z.matmul(&jk) } else { z.transpose().matmul(&jk) };
    let s = 1.0 / (m as f64).sqrt();
    lhs.data.iter_mut().for_each(|v| *v *= s);
    let prev = if k == 0 { None } else { Some(j_vector(k - 1, z, u, backend)?) };
    let mut r = lhs;
    for (idx, v) in r.data.iter_mut().enumerate() {
        *v -= next.data[idx] + prev.as_ref().map_or(0.0, |p| p.data[idx]);
    }
    let mean_sq = r.data.iter().map(|v| v * v).sum::<f64>() / m as f64;
    let mean_fourth = r.data.iter().map(|v| v.powi(4)).sum::<f64>() / m as f64;
    Ok(Residual { vector: r, mean_sq, mean_fourth })
}

/// Squared sizes of the orthonormality defects for one pair `(k1, k2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Defects {
    pub k1: usize,
    pub k2: usize,
    /// `|m^{-1} J_{k1}^T J_{k2} - delta I|_F^2`.
    pub jj: f64,
    /// `|m^{-1} J_{k1}^T K_{k2}|^2`.
    pub jk: f64,
    /// `(m^{-1} K_{k1} . K_{k2} - delta)^2`.
    pub kk: f64,
}

impl Defects {
    pub fn total(&self) -> f64 {
        self.jj + self.jk + self.kk
    }
}

pub fn orthonormality_defects(k_max: usize, z: &Matrix, u: &Matrix, v: &[f64], backend: Backend) -> Result<Vec<Defects>> {
    let m = z.rows as f64;
    let d = u.cols;
    let js = (0..=k_max).map(|k| j_vector(k, z, u, backend)).collect::<Result<Vec<_>>>()?;
    let ks = (0..=k_max).map(|k| k_vector(k, z, v, backend)).collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for k1 in 0..=k_max {
        for k2 in 0..=k_max {
            let delta = if k1 == k2 { 1.0 } else { 0.0 };
            let gram = js[k1].transpose().matmul(&js[k2]);
            let mut jj = 0.0;
            for a in 0..d {
                for b in 0..d {
                    let id = if a == b { delta } else { 0.0 };
                    jj += (gram.get(a, b) / m - id).powi(2);
                }
            }
            let jk: f64 = js[k1].matvec_t(&ks[k2]).iter().map(|x| (x / m).powi(2)).sum();
            let kk = (crate::numerics::dot(&ks[k1], &ks[k2]) / m - delta).powi(2);
            out.push(Defects { k1, k2, jj, jk, kk });
        }
    }
    Ok(out)
}

/// Random inputs of one repetition: `Z` (Gaussian), `U` (`m x d`) and `V`.
pub fn sample_inputs(m: usize, d: usize, streams: RunStreams, dists: crate::finite::InitDists) -> (Matrix, Matrix, Vec<f64>) {
    use crate::finite::{OBJ_U, OBJ_V, OBJ_Z};
    (
        streams.object(OBJ_Z).matrix(m, m, dists.z),
        streams.object(OBJ_U).matrix(m, d, dists.u),
        streams.object(OBJ_V).vector(m, dists.v),
    )
}

/// Defects averaged over repetitions, one entry per `(k1, k2)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DefectRow {
    pub m: usize,
    pub k1: usize,
    pub k2: usize,
    pub defect_jj: f64,
    pub defect_jk: f64,
    pub defect_kk: f64,
    pub n_seeds: usize,
}

/// Stream experiment ids used by the chain-basis checks.
pub const EXP_DEFECTS: u16 = 10;
pub const EXP_MOMENTS: u16 = 11;

pub fn defect_table(m: usize, d: usize, k_max: usize, n_seeds: usize, seed: u64, backend: Backend) -> Result<Vec<DefectRow>> {
    let per_seed = par_map(n_seeds, |rep| {
        let (z, u, v) = sample_inputs(m, d, RunStreams::new(seed, EXP_DEFECTS, rep as u32), Default::default());
        orthonormality_defects(k_max, &z, &u, &v, backend)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let n = per_seed.len() as f64;
    Ok((0..per_seed[0].len())
        .map(|idx| {
            let first = per_seed[0][idx];
            DefectRow {
                m,
                k1: first.k1,
                k2: first.k2,
                defect_jj: per_seed.iter().map(|s| s[idx].jj).sum::<f64>() / n,
                defect_jk: per_seed.iter().map(|s| s[idx].jk).sum::<f64>() / n,
                defect_kk: per_seed.iter().map(|s| s[idx].kk).sum::<f64>() / n,
                n_seeds,
            }
        })
        .collect())
}

/// A pooled moment estimate; the standard error is taken across seeds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MomentRow {
    pub m: usize,
    pub k: usize,
    pub p: u32,
    pub moment: f64,
    pub stderr: f64,
}

/// Moments `E[J_{k,i}^p]` for `d = 1` chains, pooling all coordinates of a
/// repetition and averaging over repetitions.
pub fn moment_table(m: usize, ks: &[usize], ps: &[u32], n_seeds: usize, seed: u64, dists: crate::finite::InitDists) -> Result<Vec<MomentRow>> {
    let per_seed = par_map(n_seeds, |rep| -> Result<Vec<Vec<f64>>> {
        let (z, u, _) = sample_inputs(m, 1, RunStreams::new(seed, EXP_MOMENTS, rep as u32), dists);
        ks.iter()
            .map(|&k| {
                let j = j_vector(k, &z, &u, Backend::Auto)?;
                Ok(ps.iter().map(|&p| mean(&j.data.iter().map(|x| x.powi(p as i32)).collect::<Vec<_>>())).collect())
            })
            .collect()
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (ki, &k) in ks.iter().enumerate() {
        for (pi, &p) in ps.iter().enumerate() {
            let vals: Vec<f64> = per_seed.iter().map(|s| s[ki][pi]).collect();
            rows.push(MomentRow { m, k, p, moment: mean(&vals), stderr: std_error(&vals) });
        }
    }
    Ok(rows)
}

/// Pooled `E[J_{k1,i}^p1 J_{k2,i}^p2]`, with its standard error across seeds.
pub fn product_moment(m: usize, (k1, p1): (usize, u32), (k2, p2): (usize, u32), n_seeds: usize, seed: u64) -> Result<(f64, f64)> {
    let per_seed = par_map(n_seeds, |rep| -> Result<f64> {
        let (z, u, _) = sample_inputs(m, 1, RunStreams::new(seed, EXP_MOMENTS, rep as u32), Default::default());
        let a = j_vector(k1, &z, &u, Backend::Auto)?;
        let b = j_vector(k2, &z, &u, Backend::Auto)?;
        Ok(mean(&a.data.iter().zip(&b.data).map(|(x, y)| x.powi(p1 as i32) * y.powi(p2 as i32)).collect::<Vec<_>>()))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok((mean(&per_seed), std_error(&per_seed)))
}

/// Moments of a standard Gaussian.
pub fn gaussian_moment(p: u32) -> f64 {
    if p % 2 == 1 {
        0.0
    } else {
        (1..p).step_by(2).map(f64::from).product()
    }
}

pub fn default_dists() -> crate::finite::InitDists {
    crate::finite::InitDists { u: Dist::Gaussian, v: Dist::Gaussian, z: Dist::Gaussian }
}
