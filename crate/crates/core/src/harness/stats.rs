//! Distribution of the output-layer entries after training.

use serde::Serialize;
use serde_json::Value;

use super::sweep::limit_path;
use super::{summary_json, Batches, Csv, ExperimentConfig, Report, EXP_HISTOGRAM};
use crate::error::Result;
use crate::finite::init_finite;
use crate::numerics::{excess_kurtosis, mean, par_map, variance, RunStreams};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HistogramBin {
    pub m: usize,
    pub seed: usize,
    pub sample: &'static str,
    pub bin_left: f64,
    pub bin_right: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleStats {
    pub m: usize,
    pub seed: usize,
    /// `initial` (`V(0)`), `raw` (`V(kappa)`) or `corrected`
    /// (`V(kappa) - B_1(kappa) V(0)`).
    pub sample: &'static str,
    pub n: usize,
    pub mean: f64,
    pub variance: f64,
    pub excess_kurtosis: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HistogramReport {
    pub bins: Vec<HistogramBin>,
    pub stats: Vec<SampleStats>,
    /// Limit coefficient of the initial output layer at `kappa_max`.
    pub b1: f64,
}

impl HistogramReport {
    pub fn stat(&self, m: usize, seed: usize, sample: &str) -> Option<&SampleStats> {
        self.stats.iter().find(|s| s.m == m && s.seed == seed && s.sample == sample)
    }
}

/// Equal-width counts over `[min, max]`; the last bin is closed.
pub fn histogram(x: &[f64], bins: usize) -> Vec<(f64, f64, usize)> {
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if x.is_empty() || bins == 0 {
        return Vec::new();
    }
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for &v in x {
        let k = (((v - lo) / width) as usize).min(bins - 1);
        counts[k] += 1;
    }
    counts.into_iter().enumerate().map(|(k, c)| (lo + k as f64 * width, lo + (k + 1) as f64 * width, c)).collect()
}

/// Train finite networks and compare the law of `V(kappa)` with the law
/// left after removing the initial output layer.
pub fn run_nongaussian_histogram(cfg: &ExperimentConfig) -> Result<HistogramReport> {
    let batches = Batches::new(cfg.objective()?, cfg.master_seed);
    let d = batches.base.d();
    let b1 = limit_path(cfg, &batches, &[cfg.kappa_max])?[0].b1;
    let n = cfg.widths.len() * cfg.seeds;
    let samples = par_map(n, |idx| -> Result<Vec<(&'static str, Vec<f64>)>> {
        let (m, seed) = (cfg.widths[idx / cfg.seeds], idx % cfg.seeds);
        let mut st = init_finite(m, d, RunStreams::new(cfg.master_seed, EXP_HISTOGRAM, seed as u32), cfg.init)?;
        let v0 = st.v.clone();
        for kappa in 0..cfg.kappa_max {
            st.gd_step(&*batches.at(kappa)?, cfg.tau)?;
        }
        let corrected = st.v.iter().zip(&v0).map(|(v, w)| v - b1 * w).collect();
        Ok(vec![("initial", v0), ("raw", st.v), ("corrected", corrected)])
    });
    let mut bins = Vec::new();
    let mut stats = Vec::new();
    for (idx, s) in samples.into_iter().enumerate() {
        let (m, seed) = (cfg.widths[idx / cfg.seeds], idx % cfg.seeds);
        for (sample, x) in s? {
            for (bin_left, bin_right, count) in histogram(&x, cfg.bins) {
                bins.push(HistogramBin { m, seed, sample, bin_left, bin_right, count });
            }
            stats.push(SampleStats { m, seed, sample, n: x.len(), mean: mean(&x), variance: variance(&x), excess_kurtosis: excess_kurtosis(&x) });
        }
    }
    Ok(HistogramReport { bins, stats, b1 })
}

impl Report for HistogramReport {
    fn tables(&self) -> Vec<(String, Csv)> {
        let mut h = Csv::new(&["m", "seed", "sample", "bin_left", "bin_right", "count"]);
        for b in &self.bins {
            h.row(&[&b.m, &b.seed, &b.sample, &b.bin_left, &b.bin_right, &b.count]);
        }
        let mut s = Csv::new(&["m", "seed", "sample", "n", "mean", "variance", "excess_kurtosis"]);
        for r in &self.stats {
            s.row(&[&r.m, &r.seed, &r.sample, &r.n, &r.mean, &r.variance, &r.excess_kurtosis]);
        }
        vec![("histogram.csv".into(), h), ("histogram_stats.csv".into(), s)]
    }

    fn summary(&self) -> Value {
        serde_json::json!({ "b1": self.b1, "stats": summary_json(&self.stats) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::ExperimentKind;

    #[test]
    fn histogram_counts_everything() {
        let x = [0.0, 0.5, 1.0, 1.0, 0.25];
        let h = histogram(&x, 4);
        assert_eq!(h.iter().map(|b| b.2).sum::<usize>(), 5);
        assert_eq!(h[3].2, 2);
        assert_eq!((h[0].0, h[3].1), (0.0, 1.0));
    }

    #[test]
    fn uniform_initial_layer_has_uniform_kurtosis() {
        let mut cfg = ExperimentConfig::defaults(ExperimentKind::Histogram);
        cfg.d = 2;
        cfg.widths = vec![4000];
        cfg.kappa_max = 2;
        let rep = run_nongaussian_histogram(&cfg).unwrap();
        let k = rep.stat(4000, 0, "initial").unwrap().excess_kurtosis;
        assert!((k + 1.2).abs() < 0.1, "{k}");
    }
}
