//! Checks of the random-matrix identities behind the limit systems.

use serde::Serialize;
use serde_json::{json, Value};

use super::sweep::{run_multilayer_sweep, MultiSweep};
use super::{fit_width_slope, summary_json, Csv, ExperimentConfig, Report, SlopeFit};
use crate::chain::{defect_table, j_vector, k_vector, moment_table, recursion_residual, sample_inputs, Backend, DefectRow, MomentRow};
use crate::error::{Error, Result};
use crate::finite::init_finite;
use crate::limit::{init_limit, Truncation};
use crate::multilayer::{init_multi_finite, init_multi_limit, lambda_ell, verify_relations_l2, RelationRow};
use crate::numerics::{mean, par_map, Matrix, RunStreams};

/// Stream id of the recursion and cross-check draws.
pub const EXP_BASIS: u16 = 12;

/// Largest order of the enumeration cross-check.
pub const CROSS_CHECK_MAX_K: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnumerationRow {
    pub m: usize,
    pub k: usize,
    /// `J` or `K`.
    pub vector: &'static str,
    pub max_abs_diff: f64,
    /// Difference within `1e-10` of the vector scale.
    pub agree: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RecursionRow {
    pub m: usize,
    pub k: usize,
    /// Mean over repetitions of `|R_k|^2 / m`.
    pub mean_sq: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BasisReport {
    pub defects: Vec<DefectRow>,
    /// Sum of all mean squared defects per width.
    pub defect_totals: Vec<(usize, f64)>,
    pub defect_fit: Option<SlopeFit>,
    pub enumeration: Vec<EnumerationRow>,
    pub recursion: Vec<RecursionRow>,
    pub moments: Vec<MomentRow>,
}

pub fn run_basis_verification(cfg: &ExperimentConfig) -> Result<BasisReport> {
    let d = cfg.resolved_data()?.d;
    let mut defects = Vec::new();
    let mut defect_totals = Vec::new();
    for &m in &cfg.widths {
        let rows = defect_table(m, d, cfg.k_max, cfg.seeds, cfg.master_seed, Backend::Auto)?;
        defect_totals.push((m, rows.iter().map(|r| r.defect_jj + r.defect_jk + r.defect_kk).sum()));
        defects.extend(rows);
    }
    let pts: Vec<_> = defect_totals.iter().map(|&(m, t)| (m, t, f64::NAN)).collect();
    let defect_fit = fit_width_slope(&pts);

    let m = cfg.enumeration_width;
    let (z, u, v) = sample_inputs(m, d, RunStreams::new(cfg.master_seed, EXP_BASIS, 0), cfg.init);
    let mut enumeration = Vec::new();
    for k in 0..=CROSS_CHECK_MAX_K {
        let je = j_vector(k, &z, &u, Backend::Enumeration)?;
        let jc = j_vector(k, &z, &u, Backend::ClosedForm)?;
        let ke = k_vector(k, &z, &v, Backend::Enumeration)?;
        let kc = k_vector(k, &z, &v, Backend::ClosedForm)?;
        for (name, a, b) in [("J", &je.data, &jc.data), ("K", &ke, &kc)] {
            let diff = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            let size = a.iter().map(|x| x.abs()).fold(1.0, f64::max);
            enumeration.push(EnumerationRow { m, k, vector: name, max_abs_diff: diff, agree: diff <= 1e-10 * size });
        }
    }

    let mut recursion = Vec::new();
    for &m in &cfg.widths {
        for k in 0..cfg.k_max {
            let per = par_map(cfg.seeds, |rep| -> Result<f64> {
                let (z, u, _) = sample_inputs(m, d, RunStreams::new(cfg.master_seed, EXP_BASIS, rep as u32 + 1), cfg.init);
                Ok(recursion_residual(k, &z, &u, Backend::Auto)?.mean_sq)
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            recursion.push(RecursionRow { m, k, mean_sq: mean(&per) });
        }
    }

    let moments = moment_table(cfg.moment_width, &cfg.moment_orders, &cfg.moment_powers, cfg.moment_seeds, cfg.master_seed, cfg.init)?;
    Ok(BasisReport { defects, defect_totals, defect_fit, enumeration, recursion, moments })
}

impl Report for BasisReport {
    fn tables(&self) -> Vec<(String, Csv)> {
        let mut d = Csv::new(&["m", "k1", "k2", "defect_jj", "defect_jk", "defect_kk", "n_seeds"]);
        for r in &self.defects {
            d.row(&[&r.m, &r.k1, &r.k2, &r.defect_jj, &r.defect_jk, &r.defect_kk, &r.n_seeds]);
        }
        let mut t = Csv::new(&["m", "defect_total"]);
        for (m, v) in &self.defect_totals {
            t.row(&[m, v]);
        }
        let mut e = Csv::new(&["m", "k", "vector", "max_abs_diff", "agree"]);
        for r in &self.enumeration {
            e.row(&[&r.m, &r.k, &r.vector, &r.max_abs_diff, &r.agree]);
        }
        let mut rc = Csv::new(&["m", "k", "mean_sq"]);
        for r in &self.recursion {
            rc.row(&[&r.m, &r.k, &r.mean_sq]);
        }
        let mut mo = Csv::new(&["m", "k", "p", "moment", "stderr"]);
        for r in &self.moments {
            mo.row(&[&r.m, &r.k, &r.p, &r.moment, &r.stderr]);
        }
        vec![
            ("defects.csv".into(), d),
            ("defect_totals.csv".into(), t),
            ("enumeration.csv".into(), e),
            ("recursion.csv".into(), rc),
            ("moments.csv".into(), mo),
        ]
    }

    fn summary(&self) -> Value {
        json!({
            "defect_fit": summary_json(&self.defect_fit),
            "enumeration_agrees": self.enumeration.iter().all(|r| r.agree),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReductionRow {
    pub steps: usize,
    /// Depth-1 finite predictor equals the three-layer one at every step.
    pub finite_identical: bool,
    pub limit_identical: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MultilayerReport {
    pub depth: usize,
    /// `(ell, row, col, value)` of the displayed ladder blocks.
    pub display: Vec<(usize, usize, usize, f64)>,
    pub relations: Vec<RelationRow>,
    /// `(m, mean summed squared orthonormality defect)`.
    pub defects: Vec<(usize, f64)>,
    pub reduction: ReductionRow,
    pub sweep: MultiSweep,
}

/// Steps of the depth-1 reduction check.
pub const REDUCTION_STEPS: usize = 50;

/// Run the three-layer and depth-1 models side by side on `d = 1` data.
pub fn depth_one_reduction(cfg: &ExperimentConfig, m: usize, steps: usize) -> Result<ReductionRow> {
    let obj = cfg.objective()?;
    if obj.d() != 1 {
        return Err(Error::Dimension("the reduction check needs d = 1".into()));
    }
    let streams = RunStreams::new(cfg.master_seed, EXP_BASIS, 0);
    let mut f3 = init_finite(m, 1, streams, cfg.init)?;
    let mut fl = init_multi_finite(m, 1, streams, cfg.init)?;
    let trunc = Truncation::Auto { max_rows: cfg.limit_max_rows };
    let mut l3 = init_limit(1, trunc)?;
    let mut ll = init_multi_limit(1, trunc)?;
    let (mut finite_identical, mut limit_identical) = (true, true);
    for _ in 0..steps {
        f3.gd_step(&obj, cfg.tau)?;
        fl.gd_step(&obj, cfg.tau)?;
        l3.gd_step(&obj, cfg.tau)?;
        ll.gd_step(&obj, cfg.tau)?;
        finite_identical &= f3.raw_predictor()[0].to_bits() == fl.raw_predictor().to_bits() && f3.w == fl.ws[0];
        limit_identical &= l3.raw_predictor()[0].to_bits() == ll.raw_predictor().to_bits();
    }
    Ok(ReductionRow { steps, finite_identical, limit_identical })
}

pub fn run_multilayer_verification(cfg: &ExperimentConfig) -> Result<MultilayerReport> {
    let depth = cfg.depth;
    let mut display = Vec::new();
    for ell in 1..=depth {
        let lam: Matrix = lambda_ell(depth, ell, cfg.display_rows)?;
        for i in 0..lam.rows {
            for j in 0..lam.cols {
                display.push((ell, i + 1, j + 1, lam.get(i, j)));
            }
        }
    }
    let mut relations = Vec::new();
    let mut defects = Vec::new();
    if depth == 2 {
        for &m in &cfg.relation_widths {
            let rep = verify_relations_l2(m, cfg.j_max, cfg.relation_seeds, cfg.master_seed)?;
            relations.extend(rep.rows);
            defects.push((m, rep.defect));
        }
    }
    let reduction = depth_one_reduction(cfg, cfg.widths[0], REDUCTION_STEPS)?;
    let sweep = run_multilayer_sweep(cfg)?;
    Ok(MultilayerReport { depth, display, relations, defects, reduction, sweep })
}

impl Report for MultilayerReport {
    fn tables(&self) -> Vec<(String, Csv)> {
        let l = self.depth;
        let mut d = Csv::new(&["L", "ell", "row", "col", "value"]);
        for (ell, i, j, v) in &self.display {
            d.row(&[&l, ell, i, j, v]);
        }
        let mut r = Csv::new(&["L", "m", "relation", "j", "residual", "skipped"]);
        for x in &self.relations {
            r.row(&[&l, &x.m, &x.relation, &x.j, &x.residual, &x.skipped]);
        }
        let mut o = Csv::new(&["L", "m", "defect"]);
        for (m, v) in &self.defects {
            o.row(&[&l, m, v]);
        }
        let mut red = Csv::new(&["L", "steps", "finite_identical", "limit_identical"]);
        red.row(&[&1, &self.reduction.steps, &self.reduction.finite_identical, &self.reduction.limit_identical]);
        let mut out = vec![
            ("lambda_display.csv".into(), d),
            ("relations.csv".into(), r),
            ("orthonormality.csv".into(), o),
            ("reduction.csv".into(), red),
        ];
        out.extend(self.sweep.tables(l));
        out
    }

    fn summary(&self) -> Value {
        json!({
            "reduction": summary_json(&self.reduction),
            "orthonormality": self.defects,
            "sweep_fits": self.sweep.summary_json(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::ExperimentKind;

    #[test]
    fn small_basis_run() {
        let mut cfg = ExperimentConfig::defaults(ExperimentKind::BasisVerify);
        cfg.widths = vec![8, 16];
        cfg.seeds = 5;
        cfg.moment_seeds = 5;
        cfg.moment_width = 8;
        cfg.enumeration_width = 5;
        let rep = run_basis_verification(&cfg).unwrap();
        assert!(rep.enumeration.iter().all(|r| r.agree));
        assert!(rep.recursion.iter().filter(|r| r.k == 0).all(|r| r.mean_sq == 0.0));
        assert_eq!(rep.tables().len(), 5);
    }

    #[test]
    fn small_multilayer_run() {
        let mut cfg = ExperimentConfig::defaults(ExperimentKind::MultilayerVerify);
        cfg.widths = vec![8, 16];
        cfg.seeds = 4;
        cfg.relation_widths = vec![6];
        cfg.relation_seeds = 2;
        cfg.j_max = 2;
        let rep = run_multilayer_verification(&cfg).unwrap();
        assert!(rep.reduction.finite_identical && rep.reduction.limit_identical);
        assert_eq!(rep.display.len(), 2 * 64);
        assert!(rep.sweep.fit_at(0).is_some());
    }
}
