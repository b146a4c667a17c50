//! Experiment configuration, orchestration and export.
//!
//! Every experiment is a pure function of an [`ExperimentConfig`]; results
//! are written as CSV files with fixed headers plus a `manifest.json` that
//! echoes the resolved configuration. CSV content depends only on the
//! configuration, never on thread count or scheduling.

mod flow;
mod stats;
mod sweep;
mod verify;

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::{DataSpec, LossSpec, Objective};
use crate::error::{Error, Result};
use crate::finite::InitDists;
use crate::numerics::{fit_line, mean, std_error, LineFit, RngStream};

pub use flow::{linear_flow, path_distance, run_implicit_bias, run_trajectory_export, FrechetRow, ImplicitBiasReport, ImplicitBiasRow, TrajectoryReport, TrajectoryRow};
pub use stats::{run_nongaussian_histogram, HistogramBin, HistogramReport, SampleStats};
pub use stats::histogram;
pub use sweep::{
    run_multilayer_sweep, run_parameter_tracking, run_width_sweep, CellRecord, LimitRecord, MultiSweep, MultiSweepRow, SweepResult, SweepRow,
    SweepSummary, TrackRow, TrackSummary, TrackingReport,
};
pub use verify::{
    depth_one_reduction, run_basis_verification, run_multilayer_verification, BasisReport, EnumerationRow, MultilayerReport, ReductionRow,
    RecursionRow,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    SweepWidth,
    TrackParams,
    Trajectory,
    Histogram,
    ImplicitBias,
    BasisVerify,
    MultilayerVerify,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 7] = [
        Self::SweepWidth,
        Self::TrackParams,
        Self::Trajectory,
        Self::Histogram,
        Self::ImplicitBias,
        Self::BasisVerify,
        Self::MultilayerVerify,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::SweepWidth => "sweep-width",
            Self::TrackParams => "track-params",
            Self::Trajectory => "trajectory",
            Self::Histogram => "histogram",
            Self::ImplicitBias => "implicit-bias",
            Self::BasisVerify => "basis-verify",
            Self::MultilayerVerify => "multilayer-verify",
        }
    }
}

/// One experiment. Absent keys take the defaults of the experiment kind
/// (see [`ExperimentConfig::defaults`]); unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub master_seed: u64,
    /// Input dimension used when `data` is absent.
    pub d: usize,
    /// Widths, ascending.
    pub widths: Vec<usize>,
    /// Repetitions per width.
    pub seeds: usize,
    /// Gradient-descent step.
    pub tau: f64,
    pub kappa_max: usize,
    /// Steps at which sweeps record; `None` means `0`, `kappa_max` and 20
    /// log-spaced steps.
    pub checkpoints: Option<Vec<usize>>,
    pub loss: LossSpec,
    /// `None`: synthetic teacher of dimension `d` drawn from the master seed.
    pub data: Option<DataSpec>,
    /// Output scale of the predictor.
    pub scale: f64,
    /// Scales compared by the flow experiments.
    pub scales: Vec<f64>,
    pub init: InitDists,
    /// Row cap of the limit system; `None` tracks the exact support.
    pub limit_max_rows: Option<usize>,
    /// Euler step of gradient-flow runs.
    pub tau_flow: f64,
    pub t_max: f64,
    pub record_every: usize,
    /// Largest chain order for basis checks.
    pub k_max: usize,
    /// Width and repetitions of the chain moment table.
    pub moment_width: usize,
    pub moment_seeds: usize,
    pub moment_orders: Vec<usize>,
    pub moment_powers: Vec<u32>,
    /// Width of the enumeration cross-check.
    pub enumeration_width: usize,
    /// Number of middle layers for the deep-network experiments.
    pub depth: usize,
    /// Widths and repetitions of the depth-2 relation check.
    pub relation_widths: Vec<usize>,
    pub relation_seeds: usize,
    pub j_max: usize,
    /// Size of the exported ladder blocks.
    pub display_rows: usize,
    pub bins: usize,
    /// Output directory; the command line overrides it.
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Defaults of each experiment: desk-scale versions of the reference
    /// runs (`d = 10`, square loss, Gaussian teacher, `tau = 0.2` for
    /// descent, `1e-3` for flows).
    pub fn defaults(kind: ExperimentKind) -> Self {
        let mut c = ExperimentConfig {
            experiment: kind,
            master_seed: 0,
            d: 10,
            widths: vec![32, 64, 128, 256, 512],
            seeds: 50,
            tau: 0.2,
            kappa_max: 1000,
            checkpoints: None,
            loss: LossSpec::Square,
            data: None,
            scale: 1.0,
            scales: vec![1.0],
            init: InitDists::default(),
            limit_max_rows: Some(800),
            tau_flow: 1e-3,
            t_max: 50.0,
            record_every: 10,
            k_max: 2,
            moment_width: 64,
            moment_seeds: 500,
            moment_orders: vec![1, 2],
            moment_powers: vec![1, 2, 3, 4],
            enumeration_width: 8,
            depth: 2,
            relation_widths: vec![12, 24, 48],
            relation_seeds: 50,
            j_max: 3,
            display_rows: 8,
            bins: 40,
            out: None,
        };
        match kind {
            ExperimentKind::SweepWidth => {}
            ExperimentKind::TrackParams => {
                c.widths = vec![128, 256, 512, 1024];
                c.seeds = 10;
            }
            ExperimentKind::Trajectory => {
                c.widths = vec![32, 128, 512];
                c.seeds = 3;
                c.scales = vec![1.0, 10.0];
                c.t_max = 20.0;
                c.limit_max_rows = Some(200);
            }
            ExperimentKind::Histogram => {
                c.widths = vec![2000];
                c.seeds = 1;
                c.kappa_max = 20;
                c.init = InitDists::uniform_outer();
            }
            ExperimentKind::ImplicitBias => {
                c.scales = vec![1.0, 0.1];
                c.limit_max_rows = Some(200);
                c.record_every = 10;
            }
            ExperimentKind::BasisVerify => {
                c.d = 1;
                c.widths = vec![32, 64, 128, 256];
                c.seeds = 200;
            }
            ExperimentKind::MultilayerVerify => {
                c.d = 1;
                c.data = Some(DataSpec::synthetic(vec![1.0]));
                c.tau = 0.1;
                c.kappa_max = 3;
                c.seeds = 100;
                c.limit_max_rows = None;
            }
        }
        c
    }

    /// Overlay a JSON document on the defaults of `kind`. A document that
    /// names a different experiment is rejected.
    pub fn from_json(kind: ExperimentKind, text: &str) -> Result<Self> {
        let patch: Value = serde_json::from_str(text)?;
        let Value::Object(patch) = patch else {
            return Err(Error::Config("configuration must be a JSON object".into()));
        };
        let Value::Object(mut base) = serde_json::to_value(Self::defaults(kind))? else {
            unreachable!("config serializes to an object");
        };
        for (k, v) in patch {
            if !base.contains_key(&k) {
                return Err(Error::Config(format!("unknown configuration key `{k}`")));
            }
            base.insert(k, v);
        }
        let cfg: Self = serde_json::from_value(Value::Object(base))?;
        if cfg.experiment != kind {
            return Err(Error::Config(format!("configuration is for `{}`, not `{}`", cfg.experiment.name(), kind.name())));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(kind: ExperimentKind, path: &Path) -> Result<Self> {
        Self::from_json(kind, &std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.widths.is_empty() || self.widths.windows(2).any(|w| w[0] >= w[1]) {
            return bad("widths must be non-empty and strictly ascending".into());
        }
        if self.widths[0] == 0 {
            return bad("widths must be positive".into());
        }
        if self.seeds == 0 || self.relation_seeds == 0 || self.moment_seeds == 0 {
            return bad("repetition counts must be at least 1".into());
        }
        if !(self.tau > 0.0 && self.tau_flow > 0.0 && self.t_max >= 0.0) {
            return bad("steps must be positive and horizons non-negative".into());
        }
        if std::iter::once(&self.scale).chain(&self.scales).any(|s| !(s.is_finite() && *s > 0.0)) {
            return bad("scales must be positive".into());
        }
        if self.d == 0 || self.depth == 0 || self.bins == 0 || self.record_every == 0 {
            return bad("d, depth, bins and record_every must be positive".into());
        }
        if let Some(cp) = &self.checkpoints {
            if cp.iter().any(|&k| k > self.kappa_max) {
                return bad("checkpoints must not exceed kappa_max".into());
            }
        }
        if let Some(data) = &self.data {
            data.validate()?;
        }
        self.loss.validate()?;
        Ok(())
    }

    /// Recording steps, sorted and without repeats.
    pub fn checkpoint_steps(&self) -> Vec<usize> {
        let mut ks = match &self.checkpoints {
            Some(c) => c.clone(),
            None => {
                let mut v = vec![0, self.kappa_max];
                if self.kappa_max >= 1 {
                    let top = (self.kappa_max as f64).ln();
                    v.extend((0..20).map(|i| (top * i as f64 / 19.0).exp().round() as usize));
                }
                v
            }
        };
        ks.sort_unstable();
        ks.dedup();
        ks
    }

    /// The data set with any missing teacher drawn from the master seed.
    pub fn resolved_data(&self) -> Result<DataSpec> {
        let data = self.data.clone().unwrap_or(DataSpec {
            kind: crate::data::DataKind::SyntheticTeacher,
            d: self.d,
            teacher: None,
            samples: None,
            minibatch: None,
        });
        data.resolve(RngStream::for_object(self.master_seed, EXP_TEACHER, 0, 0))
    }

    pub fn objective(&self) -> Result<Objective> {
        self.objective_with_scale(self.scale)
    }

    pub fn objective_with_scale(&self, scale: f64) -> Result<Objective> {
        Objective::new(self.resolved_data()?, self.loss.clone(), scale)
    }
}

/// Stream ids of the experiments.
pub const EXP_TEACHER: u16 = 100;
pub const EXP_BATCH: u16 = 101;
pub const EXP_SWEEP: u16 = 102;
pub const EXP_HISTOGRAM: u16 = 103;
pub const EXP_TRAJECTORY: u16 = 104;
pub const EXP_MULTI_SWEEP: u16 = 105;

/// Objective of step `kappa`: the population objective, or a fresh
/// minibatch when the data asks for one. All runs of an experiment see
/// the same batches.
#[derive(Clone, Debug)]
pub struct Batches {
    pub base: Objective,
    seed: u64,
}

impl Batches {
    pub fn new(base: Objective, seed: u64) -> Self {
        Self { base, seed }
    }

    pub fn at(&self, kappa: usize) -> Result<std::borrow::Cow<'_, Objective>> {
        match self.base.data.minibatch {
            None => Ok(std::borrow::Cow::Borrowed(&self.base)),
            Some(size) => {
                let stream = RngStream::for_object(self.seed, EXP_BATCH, kappa as u32, 0);
                let batch = self.base.data.sample_batch(stream, size)?;
                Ok(std::borrow::Cow::Owned(Objective::new(batch, self.base.loss.clone(), self.base.scale)?))
            }
        }
    }
}

/// Log-log fit of a mean error against width.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub widths_used: usize,
}

/// Least squares on `log2` means, each weighted by the inverse variance of
/// its log (from the standard error). Falls back to equal weights when a
/// standard error vanishes. Inputs are `(m, mean, stderr)`.
pub fn fit_width_slope(points: &[(usize, f64, f64)]) -> Option<SlopeFit> {
    let pts: Vec<_> = points.iter().filter(|p| p.1 > 0.0 && p.1.is_finite()).collect();
    let x: Vec<f64> = pts.iter().map(|p| (p.0 as f64).log2()).collect();
    let y: Vec<f64> = pts.iter().map(|p| p.1.log2()).collect();
    let w: Vec<f64> = pts
        .iter()
        .map(|p| {
            let s = p.2 / (p.1 * std::f64::consts::LN_2);
            1.0 / (s * s)
        })
        .collect();
    let weights = w.iter().all(|v| v.is_finite() && *v > 0.0).then_some(w.as_slice());
    let LineFit { slope, intercept, r2 } = fit_line(&x, &y, weights)?;
    Some(SlopeFit { slope, intercept, r2, widths_used: pts.len() })
}

/// Mean and standard error, `NaN` for an empty sample.
pub(crate) fn mean_se(x: &[f64]) -> (f64, f64) {
    if x.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    (mean(x), if x.len() > 1 { std_error(x) } else { 0.0 })
}

/// A CSV table with a fixed header.
pub struct Csv {
    text: String,
    width: usize,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        Self { text: format!("{}\n", header.join(",")), width: header.len() }
    }

    pub fn row(&mut self, cells: &[&dyn Display]) {
        assert_eq!(cells.len(), self.width, "row width");
        let line: Vec<String> = cells.iter().map(|c| c.to_string()).collect();
        self.text.push_str(&line.join(","));
        self.text.push('\n');
    }

    pub(crate) fn from_text(text: String) -> Self {
        let width = text.lines().next().map_or(0, |h| h.split(',').count());
        Self { text, width }
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }
}

/// Something that can be written as CSV files plus summary numbers.
pub trait Report {
    /// `(file name, content)` pairs.
    fn tables(&self) -> Vec<(String, Csv)>;
    /// Headline numbers copied into the manifest.
    fn summary(&self) -> Value;
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    experiment: &'static str,
    master_seed: u64,
    config: &'a ExperimentConfig,
    outputs: Vec<String>,
    results: Value,
    wall_time_s: f64,
}

/// Write the tables of a report and its manifest into `dir`.
pub fn write_report(dir: &Path, cfg: &ExperimentConfig, report: &dyn Report, wall_time_s: f64) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut names = Vec::new();
    for (name, csv) in report.tables() {
        let path = dir.join(&name);
        std::fs::write(&path, csv.as_str())?;
        names.push(name);
        written.push(path);
    }
    let manifest = Manifest {
        tool: "widenet",
        version: env!("CARGO_PKG_VERSION"),
        experiment: cfg.experiment.name(),
        master_seed: cfg.master_seed,
        config: cfg,
        outputs: names,
        results: report.summary(),
        wall_time_s,
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    written.push(path);
    Ok(written)
}

/// Run an experiment and write its outputs.
pub fn run_and_write(cfg: &ExperimentConfig, dir: &Path) -> Result<Value> {
    let start = Instant::now();
    let report = run(cfg)?;
    write_report(dir, cfg, report.as_ref(), start.elapsed().as_secs_f64())?;
    Ok(report.summary())
}

pub fn run(cfg: &ExperimentConfig) -> Result<Box<dyn Report>> {
    cfg.validate()?;
    Ok(match cfg.experiment {
        ExperimentKind::SweepWidth => Box::new(run_width_sweep(cfg)?),
        ExperimentKind::TrackParams => Box::new(run_parameter_tracking(cfg)?),
        ExperimentKind::Trajectory => Box::new(run_trajectory_export(cfg)?),
        ExperimentKind::Histogram => Box::new(run_nongaussian_histogram(cfg)?),
        ExperimentKind::ImplicitBias => Box::new(run_implicit_bias(cfg)?),
        ExperimentKind::BasisVerify => Box::new(run_basis_verification(cfg)?),
        ExperimentKind::MultilayerVerify => Box::new(run_multilayer_verification(cfg)?),
    })
}

pub(crate) fn summary_json<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).unwrap_or_else(|e| json!({ "error": e.to_string() }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_overlays_defaults_and_rejects_unknown_keys() {
        let cfg = ExperimentConfig::from_json(ExperimentKind::SweepWidth, r#"{"seeds": 3, "widths": [8, 16]}"#).unwrap();
        assert_eq!((cfg.seeds, cfg.widths.clone(), cfg.tau), (3, vec![8, 16], 0.2));
        let err = ExperimentConfig::from_json(ExperimentKind::SweepWidth, r#"{"seedz": 3}"#).unwrap_err();
        assert!(err.to_string().contains("seedz"));
        assert!(ExperimentConfig::from_json(ExperimentKind::SweepWidth, r#"{"widths": [16, 8]}"#).is_err());
        assert!(ExperimentConfig::from_json(ExperimentKind::SweepWidth, r#"{"experiment": "histogram"}"#).is_err());
        assert!(ExperimentConfig::from_json(ExperimentKind::SweepWidth, r#"{"data": {"kind": "synthetic_teacher", "d": 2, "x": 1}}"#).is_err());
    }

    #[test]
    fn defaults_validate_and_round_trip() {
        for kind in ExperimentKind::ALL {
            let cfg = ExperimentConfig::defaults(kind);
            cfg.validate().unwrap();
            let text = serde_json::to_string(&cfg).unwrap();
            assert_eq!(ExperimentConfig::from_json(kind, &text).unwrap(), cfg);
        }
    }

    #[test]
    fn checkpoints_cover_ends() {
        let cfg = ExperimentConfig::defaults(ExperimentKind::SweepWidth);
        let ks = cfg.checkpoint_steps();
        assert_eq!((ks[0], *ks.last().unwrap()), (0, 1000));
        assert!(ks.len() >= 15 && ks.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn slope_fit_recovers_power_law() {
        let pts: Vec<_> = [32usize, 64, 128, 256].iter().map(|&m| (m, 3.0 / m as f64, 0.1 / m as f64)).collect();
        let fit = fit_width_slope(&pts).unwrap();
        assert!((fit.slope + 1.0).abs() < 1e-12);
        assert_eq!(fit.widths_used, 4);
    }

    #[test]
    fn teacher_depends_only_on_master_seed() {
        let a = ExperimentConfig::defaults(ExperimentKind::SweepWidth).resolved_data().unwrap();
        let b = ExperimentConfig::defaults(ExperimentKind::TrackParams).resolved_data().unwrap();
        assert_eq!(a, b);
        let mut c = ExperimentConfig::defaults(ExperimentKind::SweepWidth);
        c.master_seed = 1;
        assert_ne!(c.resolved_data().unwrap(), a);
    }
}
