//! Browser bindings: a finite network next to its infinite-width limit.
//!
//! Each export has a plain Rust twin (`*_values`) that returns
//! `widenet::Result`, so the numbers are testable off the browser.

use wasm_bindgen::prelude::*;
use widenet::data::{DataSpec, LossSpec, Objective};
use widenet::finite::{init_finite, InitDists};
use widenet::limit::{init_limit, Truncation};
use widenet::multilayer::lambda_ell;
use widenet::numerics::{fit_line, RngStream, RunStreams};

/// Stream id of demo runs.
const EXP_DEMO: u16 = 200;

/// Row cap of the limit system; the demos stay well inside it.
const DEMO_ROWS: usize = 400;

fn teacher_objective(teacher: &[f64]) -> widenet::Result<Objective> {
    let data = DataSpec::synthetic(teacher.to_vec()).resolve(RngStream::for_object(0, EXP_DEMO, 0, 0))?;
    Objective::new(data, LossSpec::Square, 1.0)
}

/// Predictor paths of one width-`m` network and of the limit, both trained
/// by `steps` descent steps towards `teacher`. Layout per step:
/// finite coordinates 1 and 2, then limit coordinates 1 and 2.
pub fn trajectory_values(m: usize, seed: u64, tau: f64, steps: usize, teacher: &[f64]) -> widenet::Result<Vec<f64>> {
    let obj = teacher_objective(teacher)?;
    let d = obj.d();
    if d < 2 {
        return Err(widenet::Error::Config("the projection needs d >= 2".into()));
    }
    let mut fin = init_finite(m, d, RunStreams::new(seed, EXP_DEMO, 0), InitDists::default())?;
    let mut lim = init_limit(d, Truncation::Auto { max_rows: Some(DEMO_ROWS) })?;
    let mut out = Vec::with_capacity(4 * (steps + 1));
    for k in 0..=steps {
        if k > 0 {
            fin.gd_step(&obj, tau)?;
            lim.gd_step(&obj, tau)?;
        }
        let (f, l) = (fin.raw_predictor(), lim.raw_predictor());
        out.extend([f[0], f[1], l[0], l[1]]);
    }
    Ok(out)
}

/// Mean squared distance to the limit predictor after `steps` steps, per
/// width, followed by the log-log slope of those means.
pub fn width_errors_values(widths: &[u32], seeds: u32, tau: f64, steps: usize, teacher: &[f64]) -> widenet::Result<Vec<f64>> {
    let obj = teacher_objective(teacher)?;
    let d = obj.d();
    let mut lim = init_limit(d, Truncation::Auto { max_rows: Some(DEMO_ROWS) })?;
    for _ in 0..steps {
        lim.gd_step(&obj, tau)?;
    }
    let target = lim.raw_predictor();
    let mut means = Vec::with_capacity(widths.len() + 1);
    for &m in widths {
        let mut total = 0.0;
        for s in 0..seeds {
            let mut fin = init_finite(m as usize, d, RunStreams::new(u64::from(s), EXP_DEMO, m), InitDists::default())?;
            for _ in 0..steps {
                fin.gd_step(&obj, tau)?;
            }
            total += fin.raw_predictor().iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        means.push(total / f64::from(seeds.max(1)));
    }
    let x: Vec<f64> = widths.iter().map(|&m| f64::from(m).log2()).collect();
    let y: Vec<f64> = means.iter().map(|v| v.log2()).collect();
    means.push(fit_line(&x, &y, None).map_or(f64::NAN, |f| f.slope));
    Ok(means)
}

/// Leading `rows x rows` block of the displayed ladder of layer `ell` in a
/// network with `depth` middle layers, prefixed by its shape.
pub fn ladder_block_values(depth: usize, ell: usize, rows: usize) -> widenet::Result<Vec<f64>> {
    let lam = lambda_ell(depth, ell, rows)?;
    let mut out = vec![lam.rows as f64, lam.cols as f64];
    out.extend_from_slice(&lam.data);
    Ok(out)
}

fn js(e: widenet::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

#[wasm_bindgen]
pub fn trajectory(m: usize, seed: u64, tau: f64, steps: usize, teacher: &[f64]) -> Result<Vec<f64>, JsValue> {
    trajectory_values(m, seed, tau, steps, teacher).map_err(js)
}

#[wasm_bindgen]
pub fn width_errors(widths: &[u32], seeds: u32, tau: f64, steps: usize, teacher: &[f64]) -> Result<Vec<f64>, JsValue> {
    width_errors_values(widths, seeds, tau, steps, teacher).map_err(js)
}

#[wasm_bindgen]
pub fn ladder_block(depth: usize, ell: usize, rows: usize) -> Result<Vec<f64>, JsValue> {
    ladder_block_values(depth, ell, rows).map_err(js)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trajectory_starts_at_origin_and_moves_towards_teacher() {
        let t = trajectory_values(64, 0, 0.2, 100, &[1.0, -0.5]).unwrap();
        assert_eq!(t.len(), 4 * 101);
        assert_eq!((t[2], t[3]), (0.0, 0.0));
        let end = &t[t.len() - 4..];
        assert!((end[2] - 1.0).abs() < 1e-3 && (end[3] + 0.5).abs() < 1e-3);
    }

    #[test]
    fn errors_shrink_with_width() {
        let e = width_errors_values(&[16, 64], 8, 0.2, 20, &[1.0, 0.5]).unwrap();
        assert_eq!(e.len(), 3);
        assert!(e[1] < e[0] && e[2] < 0.0);
    }

    #[test]
    fn ladder_block_has_shape_prefix() {
        let b = ladder_block_values(2, 1, 4).unwrap();
        assert_eq!(b.len(), 2 + (b[0] * b[1]) as usize);
        assert!(ladder_block_values(2, 3, 4).is_err());
    }
}
