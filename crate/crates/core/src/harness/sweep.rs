//! Width sweeps: finite networks of growing width against one shared limit
//! trajectory.

use serde::Serialize;
use serde_json::{json, Value};

use super::{fit_width_slope, mean_se, summary_json, Batches, Csv, ExperimentConfig, Report, SlopeFit, EXP_MULTI_SWEEP, EXP_SWEEP};
use crate::error::{Error, Result};
use crate::finite::init_finite;
use crate::limit::{init_limit, Truncation};
use crate::multilayer::{init_multi_finite, init_multi_limit};
use crate::numerics::{mean, norm_sq, par_map, sub, RunStreams};

/// A finite run at one checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellRecord {
    pub kappa: usize,
    /// Effective predictor.
    pub lambda: Vec<f64>,
    /// Mean square of the output-layer entries.
    pub v_kappa: f64,
}

#[derive(Clone, Debug)]
pub(crate) struct Cell {
    pub m: usize,
    pub seed: usize,
    pub records: Vec<CellRecord>,
}

impl Cell {
    fn at(&self, kappa: usize) -> Option<&CellRecord> {
        self.records.iter().find(|r| r.kappa == kappa)
    }
}

/// The limit system at one checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LimitRecord {
    pub kappa: usize,
    pub lambda: Vec<f64>,
    pub norm_b2: f64,
    /// First coefficient of `B`, the weight of the initial output layer.
    pub b1: f64,
}

pub(crate) fn finite_cells(cfg: &ExperimentConfig, batches: &Batches, experiment: u16, checkpoints: &[usize]) -> Result<Vec<Cell>> {
    let d = batches.base.d();
    let n = cfg.widths.len() * cfg.seeds;
    par_map(n, |idx| -> Result<Cell> {
        let (m, seed) = (cfg.widths[idx / cfg.seeds], idx % cfg.seeds);
        let mut st = init_finite(m, d, RunStreams::new(cfg.master_seed, experiment, seed as u32), cfg.init)?;
        let scale = batches.base.scale;
        let mut records = Vec::new();
        for kappa in 0..=cfg.kappa_max {
            if checkpoints.binary_search(&kappa).is_ok() {
                records.push(CellRecord { kappa, lambda: st.predictor(scale), v_kappa: st.output_norm_sq() });
            }
            if kappa == cfg.kappa_max {
                break;
            }
            match st.gd_step(&*batches.at(kappa)?, cfg.tau) {
                Ok(()) => {}
                Err(Error::Divergence { .. }) => break,
                Err(e) => return Err(e),
            }
        }
        Ok(Cell { m, seed, records })
    })
    .into_iter()
    .collect()
}

pub(crate) fn limit_path(cfg: &ExperimentConfig, batches: &Batches, checkpoints: &[usize]) -> Result<Vec<LimitRecord>> {
    let mut st = init_limit(batches.base.d(), Truncation::Auto { max_rows: cfg.limit_max_rows })?;
    let scale = batches.base.scale;
    let mut out = Vec::new();
    for kappa in 0..=cfg.kappa_max {
        if checkpoints.binary_search(&kappa).is_ok() {
            out.push(LimitRecord { kappa, lambda: st.predictor(scale), norm_b2: st.norm_b2(), b1: st.b()[0] });
        }
        if kappa == cfg.kappa_max {
            break;
        }
        st.gd_step(&*batches.at(kappa)?, cfg.tau)?;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub m: usize,
    pub seed: usize,
    pub kappa: usize,
    /// `|lambda_m - lambda_inf|^2`; NaN after divergence.
    pub err2: f64,
    pub v_kappa: f64,
    pub norm_b2: f64,
    pub diverged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepSummary {
    pub kappa: usize,
    pub m: usize,
    pub completed: usize,
    pub mean_err2: f64,
    pub stderr_err2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SweepSummary>,
    /// Fit per checkpoint over widths where at least half the runs completed.
    pub fits: Vec<(usize, Option<SlopeFit>)>,
}

impl SweepResult {
    pub fn fit_at(&self, kappa: usize) -> Option<SlopeFit> {
        self.fits.iter().find(|f| f.0 == kappa).and_then(|f| f.1)
    }

    pub fn mean_at(&self, kappa: usize, m: usize) -> Option<f64> {
        self.summary.iter().find(|s| s.kappa == kappa && s.m == m).map(|s| s.mean_err2)
    }
}

/// Per-(checkpoint, width) means and the slope fit of each checkpoint.
/// `errs[(kappa, m)]` holds the errors of completed runs.
fn summarize(
    checkpoints: &[usize],
    widths: &[usize],
    seeds: usize,
    errs: impl Fn(usize, usize) -> Vec<f64>,
) -> (Vec<SweepSummary>, Vec<(usize, Option<SlopeFit>)>) {
    let mut summary = Vec::new();
    let mut fits = Vec::new();
    for &kappa in checkpoints {
        let mut pts = Vec::new();
        for &m in widths {
            let e = errs(kappa, m);
            let (mean_err2, stderr_err2) = mean_se(&e);
            if 2 * e.len() >= seeds {
                pts.push((m, mean_err2, stderr_err2));
            }
            summary.push(SweepSummary { kappa, m, completed: e.len(), mean_err2, stderr_err2 });
        }
        fits.push((kappa, fit_width_slope(&pts)));
    }
    (summary, fits)
}

pub fn run_width_sweep(cfg: &ExperimentConfig) -> Result<SweepResult> {
    let batches = Batches::new(cfg.objective()?, cfg.master_seed);
    let checkpoints = cfg.checkpoint_steps();
    let limit = limit_path(cfg, &batches, &checkpoints)?;
    let cells = finite_cells(cfg, &batches, EXP_SWEEP, &checkpoints)?;
    let mut rows = Vec::new();
    for cell in &cells {
        for lim in &limit {
            let (err2, v_kappa, diverged) = match cell.at(lim.kappa) {
                Some(r) => (norm_sq(&sub(&r.lambda, &lim.lambda)), r.v_kappa, false),
                None => (f64::NAN, f64::NAN, true),
            };
            rows.push(SweepRow { m: cell.m, seed: cell.seed, kappa: lim.kappa, err2, v_kappa, norm_b2: lim.norm_b2, diverged });
        }
    }
    let (summary, fits) = summarize(&checkpoints, &cfg.widths, cfg.seeds, |kappa, m| {
        rows.iter().filter(|r| r.kappa == kappa && r.m == m && !r.diverged).map(|r| r.err2).collect()
    });
    Ok(SweepResult { rows, summary, fits })
}

fn fit_tables(summary: &[SweepSummary], fits: &[(usize, Option<SlopeFit>)], depth: Option<usize>) -> (Csv, Csv) {
    let lead: &[&str] = if depth.is_some() { &["L"] } else { &[] };
    let head = |rest: &[&'static str]| [lead, rest].concat();
    let mut s = Csv::new(&head(&["kappa", "m", "completed", "mean_err2", "stderr_err2"]));
    for r in summary {
        match depth {
            Some(l) => s.row(&[&l, &r.kappa, &r.m, &r.completed, &r.mean_err2, &r.stderr_err2]),
            None => s.row(&[&r.kappa, &r.m, &r.completed, &r.mean_err2, &r.stderr_err2]),
        }
    }
    let mut f = Csv::new(&head(&["kappa", "slope", "intercept", "r2", "widths_used"]));
    for (kappa, fit) in fits {
        let fit = fit.unwrap_or(SlopeFit { slope: f64::NAN, intercept: f64::NAN, r2: f64::NAN, widths_used: 0 });
        match depth {
            Some(l) => f.row(&[&l, kappa, &fit.slope, &fit.intercept, &fit.r2, &fit.widths_used]),
            None => f.row(&[kappa, &fit.slope, &fit.intercept, &fit.r2, &fit.widths_used]),
        }
    }
    (s, f)
}

fn fits_json(fits: &[(usize, Option<SlopeFit>)]) -> Value {
    Value::Array(fits.iter().map(|(k, f)| json!({ "kappa": k, "fit": summary_json(f) })).collect())
}

impl Report for SweepResult {
    fn tables(&self) -> Vec<(String, Csv)> {
        let mut rows = Csv::new(&["m", "seed", "kappa", "err2", "v_kappa", "normB2", "diverged"]);
        for r in &self.rows {
            rows.row(&[&r.m, &r.seed, &r.kappa, &r.err2, &r.v_kappa, &r.norm_b2, &r.diverged]);
        }
        let (s, f) = fit_tables(&self.summary, &self.fits, None);
        vec![("sweep.csv".into(), rows), ("sweep_summary.csv".into(), s), ("sweep_fit.csv".into(), f)]
    }

    fn summary(&self) -> Value {
        let first = self.fits.first().map(|f| f.0).unwrap_or(0);
        let last = self.fits.last().map(|f| f.0).unwrap_or(0);
        json!({
            "slope_first_checkpoint": summary_json(&self.fit_at(first)),
            "slope_last_checkpoint": summary_json(&self.fit_at(last)),
            "fits": fits_json(&self.fits),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrackRow {
    pub m: usize,
    pub seed: usize,
    pub kappa: usize,
    pub v_kappa: f64,
    pub norm_b2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrackSummary {
    pub kappa: usize,
    pub m: usize,
    pub runs: usize,
    pub mean_v: f64,
    pub norm_b2: f64,
    /// Mean over runs of `|v_kappa - |B|^2|`.
    pub mean_abs_gap: f64,
    /// Mean over runs of `|v_kappa - |B|^2| / |B|^2`.
    pub mean_rel_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrackingReport {
    pub rows: Vec<TrackRow>,
    pub summary: Vec<TrackSummary>,
}

impl TrackingReport {
    pub fn at(&self, kappa: usize, m: usize) -> Option<&TrackSummary> {
        self.summary.iter().find(|s| s.kappa == kappa && s.m == m)
    }
}

/// Mean square of the output layer against its limit `|B(kappa)|^2`.
pub fn run_parameter_tracking(cfg: &ExperimentConfig) -> Result<TrackingReport> {
    let batches = Batches::new(cfg.objective()?, cfg.master_seed);
    let checkpoints = cfg.checkpoint_steps();
    let limit = limit_path(cfg, &batches, &checkpoints)?;
    let cells = finite_cells(cfg, &batches, EXP_SWEEP, &checkpoints)?;
    let mut rows = Vec::new();
    for cell in &cells {
        for lim in &limit {
            if let Some(r) = cell.at(lim.kappa) {
                rows.push(TrackRow { m: cell.m, seed: cell.seed, kappa: lim.kappa, v_kappa: r.v_kappa, norm_b2: lim.norm_b2 });
            }
        }
    }
    let mut summary = Vec::new();
    for lim in &limit {
        for &m in &cfg.widths {
            let sel: Vec<&TrackRow> = rows.iter().filter(|r| r.kappa == lim.kappa && r.m == m).collect();
            let v: Vec<f64> = sel.iter().map(|r| r.v_kappa).collect();
            let gaps: Vec<f64> = v.iter().map(|x| (x - lim.norm_b2).abs()).collect();
            let rel: Vec<f64> = gaps.iter().map(|g| g / lim.norm_b2).collect();
            summary.push(TrackSummary {
                kappa: lim.kappa,
                m,
                runs: v.len(),
                mean_v: mean(&v),
                norm_b2: lim.norm_b2,
                mean_abs_gap: mean(&gaps),
                mean_rel_gap: mean(&rel),
            });
        }
    }
    Ok(TrackingReport { rows, summary })
}

impl Report for TrackingReport {
    fn tables(&self) -> Vec<(String, Csv)> {
        let mut rows = Csv::new(&["m", "seed", "kappa", "v_kappa", "normB2"]);
        for r in &self.rows {
            rows.row(&[&r.m, &r.seed, &r.kappa, &r.v_kappa, &r.norm_b2]);
        }
        let mut s = Csv::new(&["kappa", "m", "runs", "mean_v", "normB2", "mean_abs_gap", "mean_rel_gap"]);
        for r in &self.summary {
            s.row(&[&r.kappa, &r.m, &r.runs, &r.mean_v, &r.norm_b2, &r.mean_abs_gap, &r.mean_rel_gap]);
        }
        vec![("track.csv".into(), rows), ("track_summary.csv".into(), s)]
    }

    fn summary(&self) -> Value {
        let last = self.summary.iter().map(|s| s.kappa).max().unwrap_or(0);
        let rows: Vec<Value> = self
            .summary
            .iter()
            .filter(|s| s.kappa == last)
            .map(|s| json!({ "m": s.m, "kappa": s.kappa, "mean_rel_gap": s.mean_rel_gap, "mean_abs_gap": s.mean_abs_gap }))
            .collect();
        json!({ "last_checkpoint": rows })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MultiSweepRow {
    pub depth: usize,
    pub m: usize,
    pub seed: usize,
    pub kappa: usize,
    pub err2: f64,
    pub diverged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MultiSweep {
    pub rows: Vec<MultiSweepRow>,
    pub summary: Vec<SweepSummary>,
    pub fits: Vec<(usize, Option<SlopeFit>)>,
}

impl MultiSweep {
    pub fn fit_at(&self, kappa: usize) -> Option<SlopeFit> {
        self.fits.iter().find(|f| f.0 == kappa).and_then(|f| f.1)
    }

    pub(crate) fn tables(&self, depth: usize) -> Vec<(String, Csv)> {
        let mut rows = Csv::new(&["L", "m", "seed", "kappa", "err2", "diverged"]);
        for r in &self.rows {
            rows.row(&[&r.depth, &r.m, &r.seed, &r.kappa, &r.err2, &r.diverged]);
        }
        let (s, f) = fit_tables(&self.summary, &self.fits, Some(depth));
        vec![("ml_sweep.csv".into(), rows), ("ml_sweep_summary.csv".into(), s), ("ml_sweep_fit.csv".into(), f)]
    }

    pub(crate) fn summary_json(&self) -> Value {
        fits_json(&self.fits)
    }
}

/// Finite deep networks against the deep limit, recorded at `0` and
/// `kappa_max` (or the configured checkpoints).
pub fn run_multilayer_sweep(cfg: &ExperimentConfig) -> Result<MultiSweep> {
    let batches = Batches::new(cfg.objective()?, cfg.master_seed);
    if batches.base.d() != 1 {
        return Err(Error::Dimension("deep networks take one-dimensional inputs".into()));
    }
    let checkpoints = match &cfg.checkpoints {
        Some(_) => cfg.checkpoint_steps(),
        None => {
            let mut v = vec![0, cfg.kappa_max];
            v.dedup();
            v
        }
    };
    let depth = cfg.depth;
    let scale = batches.base.scale;
    let mut lim = init_multi_limit(depth, Truncation::Auto { max_rows: cfg.limit_max_rows })?;
    let mut limit = Vec::new();
    for kappa in 0..=cfg.kappa_max {
        if checkpoints.binary_search(&kappa).is_ok() {
            limit.push((kappa, lim.predictor(scale)));
        }
        if kappa == cfg.kappa_max {
            break;
        }
        lim.gd_step(&*batches.at(kappa)?, cfg.tau)?;
    }
    let n = cfg.widths.len() * cfg.seeds;
    let runs = par_map(n, |idx| -> Result<Vec<(usize, f64)>> {
        let (m, seed) = (cfg.widths[idx / cfg.seeds], idx % cfg.seeds);
        let mut st = init_multi_finite(m, depth, RunStreams::new(cfg.master_seed, EXP_MULTI_SWEEP, seed as u32), cfg.init)?;
        let mut out = Vec::new();
        for kappa in 0..=cfg.kappa_max {
            if checkpoints.binary_search(&kappa).is_ok() {
                out.push((kappa, st.predictor(scale)));
            }
            if kappa == cfg.kappa_max {
                break;
            }
            match st.gd_step(&*batches.at(kappa)?, cfg.tau) {
                Ok(()) => {}
                Err(Error::Divergence { .. }) => break,
                Err(e) => return Err(e),
            }
        }
        Ok(out)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (idx, run) in runs.iter().enumerate() {
        let (m, seed) = (cfg.widths[idx / cfg.seeds], idx % cfg.seeds);
        for &(kappa, li) in &limit {
            let hit = run.iter().find(|r| r.0 == kappa);
            let (err2, diverged) = hit.map_or((f64::NAN, true), |r| ((r.1 - li).powi(2), false));
            rows.push(MultiSweepRow { depth, m, seed, kappa, err2, diverged });
        }
    }
    let (summary, fits) = summarize(&checkpoints, &cfg.widths, cfg.seeds, |kappa, m| {
        rows.iter().filter(|r| r.kappa == kappa && r.m == m && !r.diverged).map(|r| r.err2).collect()
    });
    Ok(MultiSweep { rows, summary, fits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::ExperimentKind;

    fn small_sweep() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::defaults(ExperimentKind::SweepWidth);
        cfg.d = 3;
        cfg.widths = vec![8, 16, 32];
        cfg.seeds = 4;
        cfg.kappa_max = 20;
        cfg.tau = 0.1;
        cfg
    }

    #[test]
    fn sweep_shapes_and_initial_error() {
        let cfg = small_sweep();
        let res = run_width_sweep(&cfg).unwrap();
        let ks = cfg.checkpoint_steps();
        assert_eq!(res.rows.len(), 3 * 4 * ks.len());
        // The limit starts at zero, so the first error is |lambda_m(0)|^2.
        for r in res.rows.iter().filter(|r| r.kappa == 0) {
            assert!(r.err2 > 0.0 && !r.diverged);
        }
        assert!(res.fit_at(0).is_some());
    }

    #[test]
    fn sweep_is_independent_of_scheduling() {
        let cfg = small_sweep();
        let a = run_width_sweep(&cfg).unwrap();
        let b = run_width_sweep(&cfg).unwrap();
        let text = |r: &SweepResult| r.tables().into_iter().map(|(_, c)| c.as_str().to_string()).collect::<Vec<_>>();
        assert_eq!(text(&a), text(&b));
    }

    #[test]
    fn divergent_runs_are_recorded_not_fatal() {
        let mut cfg = small_sweep();
        cfg.widths = vec![2, 4];
        cfg.tau = 0.7;
        cfg.kappa_max = 200;
        cfg.limit_max_rows = Some(50);
        match run_width_sweep(&cfg) {
            Ok(res) => {
                for s in &res.summary {
                    assert!(s.completed <= cfg.seeds);
                }
            }
            Err(Error::Divergence { .. }) => {}
            Err(e) => panic!("{e}"),
        }
    }

    #[test]
    fn minibatches_are_shared_between_models() {
        let mut cfg = small_sweep();
        cfg.data = Some(crate::data::DataSpec { minibatch: Some(5), ..crate::data::DataSpec::synthetic(vec![1.0, 0.0, -1.0]) });
        let batches = Batches::new(cfg.objective().unwrap(), cfg.master_seed);
        let a = batches.at(3).unwrap().into_owned();
        let b = batches.at(3).unwrap().into_owned();
        assert_eq!(a.data, b.data);
        assert_ne!(a.data, batches.at(4).unwrap().data);
        run_width_sweep(&cfg).unwrap();
    }

    #[test]
    fn tracking_starts_at_one() {
        let mut cfg = small_sweep();
        cfg.experiment = ExperimentKind::TrackParams;
        let rep = run_parameter_tracking(&cfg).unwrap();
        let s = rep.at(0, 32).unwrap();
        assert_eq!(s.norm_b2, 1.0);
        assert!((s.mean_v - 1.0).abs() < 0.5);
    }
}
