//! Predictor paths and the gradient flow of the limit system.

use serde::Serialize;
use serde_json::{json, Value};

use super::{summary_json, Batches, Csv, ExperimentConfig, Report, EXP_TRAJECTORY};
use crate::data::Objective;
use crate::error::{Error, Result};
use crate::finite::init_finite;
use crate::limit::{flow_rate_fit, gradient_flow, init_limit, plateau_index, ExpFit, FlowTrajectory, Truncation};
use crate::numerics::{discrete_frechet, norm_sq, par_map, resample_by_arclength, sub, RunStreams};

/// Points per path when comparing path shapes.
pub const FRECHET_POINTS: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrajectoryRow {
    /// `finite`, `limit`, `limit_flow`, `linear` or `target`.
    pub source: &'static str,
    pub m: usize,
    pub seed: usize,
    pub scale: f64,
    pub step: usize,
    pub lambda_1: f64,
    pub lambda_2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrechetRow {
    pub scale: f64,
    /// Discrete Frechet distance between the arc-length resampled limit
    /// flow and the linear flow, both in the full predictor space.
    pub frechet_to_linear: f64,
    pub endpoint_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrajectoryReport {
    pub rows: Vec<TrajectoryRow>,
    pub frechet: Vec<FrechetRow>,
    pub target: Vec<f64>,
    /// `|lambda_inf(kappa_max) - target|` for the descent path.
    pub limit_endpoint_error: f64,
}

/// Euler path of `lambda' = -(M lambda - b)` from zero.
pub fn linear_flow(obj: &Objective, tau: f64, steps: usize, record_every: usize) -> Vec<Vec<f64>> {
    let mo = &obj.moments;
    let mut lam = vec![0.0; obj.d()];
    let mut out = vec![lam.clone()];
    for n in 1..=steps {
        let g = sub(&mo.m.matvec(&lam), &mo.b);
        lam.iter_mut().zip(&g).for_each(|(l, gi)| *l -= tau * gi);
        if n % record_every.max(1) == 0 || n == steps {
            out.push(lam.clone());
        }
    }
    out
}

/// Frechet distance between two paths after arc-length resampling.
pub fn path_distance(p: &[Vec<f64>], q: &[Vec<f64>]) -> f64 {
    discrete_frechet(&resample_by_arclength(p, FRECHET_POINTS), &resample_by_arclength(q, FRECHET_POINTS))
}

fn flow(cfg: &ExperimentConfig, scale: f64) -> Result<(Objective, FlowTrajectory)> {
    let obj = cfg.objective_with_scale(scale)?;
    let mut st = init_limit(obj.d(), Truncation::Auto { max_rows: cfg.limit_max_rows })?;
    let traj = gradient_flow(&mut st, &obj, cfg.tau_flow, cfg.t_max, cfg.record_every)?;
    Ok((obj, traj))
}

/// Finite and limit descent paths projected on the first two coordinates,
/// plus limit flows at several scales against the linear flow.
pub fn run_trajectory_export(cfg: &ExperimentConfig) -> Result<TrajectoryReport> {
    let batches = Batches::new(cfg.objective()?, cfg.master_seed);
    let d = batches.base.d();
    if d < 2 {
        return Err(Error::Dimension("projection needs d >= 2".into()));
    }
    let target = batches.base.moments.min_l2_minimizer();
    let scale = batches.base.scale;
    let row = |source, m, seed, scale, step, lam: &[f64]| TrajectoryRow { source, m, seed, scale, step, lambda_1: lam[0], lambda_2: lam[1] };
    let mut rows = vec![row("target", 0, 0, scale, 0, &target)];

    let mut lim = init_limit(d, Truncation::Auto { max_rows: cfg.limit_max_rows })?;
    for kappa in 0..=cfg.kappa_max {
        rows.push(row("limit", 0, 0, scale, kappa, &lim.predictor(scale)));
        if kappa < cfg.kappa_max {
            lim.gd_step(&*batches.at(kappa)?, cfg.tau)?;
        }
    }
    let limit_endpoint_error = norm_sq(&sub(&lim.predictor(scale), &target)).sqrt();

    let n = cfg.widths.len() * cfg.seeds;
    let finite = par_map(n, |idx| -> Result<Vec<TrajectoryRow>> {
        let (m, seed) = (cfg.widths[idx / cfg.seeds], idx % cfg.seeds);
        let mut st = init_finite(m, d, RunStreams::new(cfg.master_seed, EXP_TRAJECTORY, seed as u32), cfg.init)?;
        let mut out = Vec::with_capacity(cfg.kappa_max + 1);
        for kappa in 0..=cfg.kappa_max {
            out.push(row("finite", m, seed, scale, kappa, &st.predictor(scale)));
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
    });
    for r in finite {
        rows.extend(r?);
    }

    let steps = (cfg.t_max / cfg.tau_flow).round() as usize;
    let linear = linear_flow(&batches.base, cfg.tau_flow, steps, cfg.record_every);
    for (i, lam) in linear.iter().enumerate() {
        rows.push(row("linear", 0, 0, 1.0, i * cfg.record_every, lam));
    }
    let mut frechet = Vec::new();
    for &s in &cfg.scales {
        let (obj, traj) = flow(cfg, s)?;
        let path: Vec<Vec<f64>> = traj.records.iter().map(|r| r.lambda.clone()).collect();
        for r in &traj.records {
            rows.push(row("limit_flow", 0, 0, s, (r.t / cfg.tau_flow).round() as usize, &r.lambda));
        }
        let target_s = obj.moments.min_l2_minimizer();
        frechet.push(FrechetRow {
            scale: s,
            frechet_to_linear: path_distance(&path, &linear),
            endpoint_error: norm_sq(&sub(&traj.last().lambda, &target_s)).sqrt(),
        });
    }
    Ok(TrajectoryReport { rows, frechet, target, limit_endpoint_error })
}

impl Report for TrajectoryReport {
    fn tables(&self) -> Vec<(String, Csv)> {
        let mut t = Csv::new(&["source", "m", "seed", "scale", "step", "lambda_1", "lambda_2"]);
        for r in &self.rows {
            t.row(&[&r.source, &r.m, &r.seed, &r.scale, &r.step, &r.lambda_1, &r.lambda_2]);
        }
        let mut f = Csv::new(&["scale", "frechet_to_linear", "endpoint_error"]);
        for r in &self.frechet {
            f.row(&[&r.scale, &r.frechet_to_linear, &r.endpoint_error]);
        }
        vec![("trajectory.csv".into(), t), ("frechet.csv".into(), f)]
    }

    fn summary(&self) -> Value {
        json!({ "limit_endpoint_error": self.limit_endpoint_error, "frechet": summary_json(&self.frechet) })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImplicitBiasRow {
    pub scale: f64,
    /// `|lambda(T) - M^+ b|`.
    pub final_error: f64,
    /// Largest component of the predictor in `ker M` over the run.
    pub max_kernel_component: f64,
    pub rate: f64,
    pub r2: f64,
    /// End of the initial plateau; NaN if the gap never dropped.
    pub plateau_end: f64,
    pub balancedness_defect: f64,
    pub relative_balancedness_defect: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImplicitBiasReport {
    pub rows: Vec<ImplicitBiasRow>,
    pub flows: Vec<(f64, FlowTrajectory)>,
}

/// Gradient flow of the limit system at each configured scale.
pub fn run_implicit_bias(cfg: &ExperimentConfig) -> Result<ImplicitBiasReport> {
    if !cfg.loss.is_square() {
        return Err(Error::Unsupported("the implicit-bias study uses the square loss".into()));
    }
    let mut rows = Vec::new();
    let mut flows = Vec::new();
    for &s in &cfg.scales {
        let (obj, traj) = flow(cfg, s)?;
        let target = obj.moments.min_l2_minimizer();
        let fit = flow_rate_fit(&traj).unwrap_or(ExpFit { rate: f64::NAN, r2: f64::NAN, n_points: 0, t_start: f64::NAN, t_end: f64::NAN });
        let gaps: Vec<f64> = traj.records.iter().map(|r| r.excess).collect();
        let plateau_end = plateau_index(&gaps).map_or(f64::NAN, |i| traj.records[i].t);
        rows.push(ImplicitBiasRow {
            scale: s,
            final_error: norm_sq(&sub(&traj.last().lambda, &target)).sqrt(),
            max_kernel_component: traj.diagnostics.max_kernel_component,
            rate: fit.rate,
            r2: fit.r2,
            plateau_end,
            balancedness_defect: traj.balancedness_defect(),
            relative_balancedness_defect: traj.relative_balancedness_defect(),
        });
        flows.push((s, traj));
    }
    Ok(ImplicitBiasReport { rows, flows })
}

impl Report for ImplicitBiasReport {
    fn tables(&self) -> Vec<(String, Csv)> {
        let mut t = Csv::new(&[
            "scale",
            "final_error",
            "max_kernel_component",
            "rate",
            "r2",
            "plateau_end",
            "balancedness_defect",
            "relative_balancedness_defect",
        ]);
        for r in &self.rows {
            t.row(&[
                &r.scale,
                &r.final_error,
                &r.max_kernel_component,
                &r.rate,
                &r.r2,
                &r.plateau_end,
                &r.balancedness_defect,
                &r.relative_balancedness_defect,
            ]);
        }
        let mut out = vec![("implicit_bias.csv".to_string(), t)];
        for (s, traj) in &self.flows {
            let mut buf = Vec::new();
            traj.write_csv(&mut buf).expect("writing to memory");
            out.push((format!("flow_scale_{s}.csv"), Csv::from_text(String::from_utf8(buf).expect("ascii csv"))));
        }
        out
    }

    fn summary(&self) -> Value {
        summary_json(&self.rows)
    }
}
