//! Width-`m` three-layer linear network `x -> (1/m) V^T F U x` with
//! `F = Z / sqrt(m) + W / m`, trained by gradient descent in the scale-free
//! parameterization. `Z` is frozen Gaussian noise; `W` starts at zero.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Objective;
use crate::error::{Error, Result};
use crate::numerics::{dot, norm_sq, Dist, Matrix, RunStreams};

/// Predictor norm above which a run is declared divergent.
pub const DIVERGENCE_NORM: f64 = 1e8;

/// Stream object ids used when drawing initial weights.
pub const OBJ_U: u16 = 0;
pub const OBJ_V: u16 = 1;
pub const OBJ_Z: u16 = 2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitDists {
    #[serde(default)]
    pub u: Dist,
    #[serde(default)]
    pub v: Dist,
    #[serde(default)]
    pub z: Dist,
}

impl InitDists {
    pub fn uniform_outer() -> Self {
        Self { u: Dist::Uniform, v: Dist::Uniform, z: Dist::Gaussian }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiniteWidthState {
    pub m: usize,
    pub d: usize,
    /// `m x d` input layer.
    pub u: Matrix,
    /// `m x m` trained part of the middle layer.
    pub w: Matrix,
    /// Output layer.
    pub v: Vec<f64>,
    /// `m x m` frozen part of the middle layer.
    pub z: Matrix,
    pub kappa: usize,
}

#[inline]
pub(crate) fn inv_sqrt(m: usize) -> f64 {
    1.0 / (m as f64).sqrt()
}

#[inline]
pub(crate) fn inv(m: usize) -> f64 {
    1.0 / m as f64
}

/// `(Z / sqrt m + W / m) x`.
pub(crate) fn factor_apply(z: &Matrix, w: &Matrix, m: usize, x: &[f64]) -> Vec<f64> {
    let (a, b) = (inv_sqrt(m), inv(m));
    let zx = z.matvec(x);
    let wx = w.matvec(x);
    zx.iter().zip(&wx).map(|(p, q)| a * p + b * q).collect()
}

/// `(Z / sqrt m + W / m)^T y`.
pub(crate) fn factor_apply_t(z: &Matrix, w: &Matrix, m: usize, y: &[f64]) -> Vec<f64> {
    let (a, b) = (inv_sqrt(m), inv(m));
    let zy = z.matvec_t(y);
    let wy = w.matvec_t(y);
    zy.iter().zip(&wy).map(|(p, q)| a * p + b * q).collect()
}

pub(crate) fn check_divergence(lambda: &[f64], kappa: usize) -> Result<()> {
    let n = norm_sq(lambda).sqrt();
    if !n.is_finite() || n > DIVERGENCE_NORM {
        return Err(Error::Divergence { kappa, norm: n });
    }
    Ok(())
}

pub fn init_finite(m: usize, d: usize, streams: RunStreams, dists: InitDists) -> Result<FiniteWidthState> {
    if m < 1 || d < 1 {
        return Err(Error::Dimension(format!("width {m} and input dimension {d} must be positive")));
    }
    Ok(FiniteWidthState {
        m,
        d,
        u: streams.object(OBJ_U).matrix(m, d, dists.u),
        w: Matrix::zeros(m, m),
        v: streams.object(OBJ_V).vector(m, dists.v),
        z: streams.object(OBJ_Z).matrix(m, m, dists.z),
        kappa: 0,
    })
}

/// Per-layer summary: squared Frobenius norm and spectral norm estimate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LayerStats {
    pub frobenius_sq: f64,
    pub spectral: f64,
}

impl FiniteWidthState {
    /// Unscaled predictor `(1/m) U^T F^T V`.
    pub fn raw_predictor(&self) -> Vec<f64> {
        let ftv = factor_apply_t(&self.z, &self.w, self.m, &self.v);
        let mut lam = self.u.matvec_t(&ftv);
        lam.iter_mut().for_each(|x| *x *= inv(self.m));
        lam
    }

    /// Effective predictor, the raw one times the output scale.
    pub fn predictor(&self, scale: f64) -> Vec<f64> {
        self.raw_predictor().into_iter().map(|x| scale * x).collect()
    }

    /// One gradient step; every update uses the pre-step parameters.
    pub fn gd_step(&mut self, obj: &Objective, tau: f64) -> Result<()> {
        let m = self.m;
        let ftv = factor_apply_t(&self.z, &self.w, m, &self.v);
        let mut lam = self.u.matvec_t(&ftv);
        lam.iter_mut().for_each(|x| *x *= obj.scale * inv(m));
        check_divergence(&lam, self.kappa)?;
        let xi = obj.xi(&lam);
        let u_xi = self.u.matvec(&xi);
        let f_u_xi = factor_apply(&self.z, &self.w, m, &u_xi);
        self.u.rank1_update(-tau, &ftv, &xi);
        self.w.rank1_update(-tau, &self.v, &u_xi);
        for (vi, g) in self.v.iter_mut().zip(&f_u_xi) {
            *vi -= tau * g;
        }
        self.kappa += 1;
        Ok(())
    }

    /// Rescaled layers `(U, Z / sqrt m + W / m, V / m)` whose product is the
    /// raw predictor.
    pub fn tilde(&self) -> (Matrix, Matrix, Vec<f64>) {
        let (a, b) = (inv_sqrt(self.m), inv(self.m));
        let f = Matrix {
            rows: self.m,
            cols: self.m,
            data: self.z.data.iter().zip(&self.w.data).map(|(z, w)| a * z + b * w).collect(),
        };
        let v = self.v.iter().map(|x| x * b).collect();
        (self.u.clone(), f, v)
    }

    pub fn layer_stats(&self) -> [LayerStats; 3] {
        let (u, f, v) = self.tilde();
        let vm = Matrix { rows: self.m, cols: 1, data: v };
        [&u, &f, &vm].map(|l| LayerStats { frobenius_sq: l.frobenius_sq(), spectral: l.spectral_norm_estimate(50) })
    }

    /// Squared norm of the output layer divided by the width.
    pub fn output_norm_sq(&self) -> f64 {
        dot(&self.v, &self.v) * inv(self.m)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DataSpec, LossSpec, Sample};

    fn unit_data() -> Objective {
        let data = DataSpec::empirical(vec![Sample { x: vec![1.0], y: 1.0 }]);
        Objective::new(data, LossSpec::Square, 1.0).unwrap()
    }

    /// m = d = 1, all entries one: the gradient step worked by hand.
    #[test]
    fn hand_computed_first_step() {
        let mut st = FiniteWidthState {
            m: 1,
            d: 1,
            u: Matrix::from_rows(&[vec![1.0]]),
            w: Matrix::zeros(1, 1),
            v: vec![1.0],
            z: Matrix::from_rows(&[vec![1.0]]),
            kappa: 0,
        };
        assert_eq!(st.raw_predictor(), vec![1.0]);
        let data = DataSpec::empirical(vec![Sample { x: vec![1.0], y: 2.0 }]);
        let obj = Objective::new(data, LossSpec::Square, 1.0).unwrap();
        // xi = -1, F = 1: every layer moves by +tau.
        st.gd_step(&obj, 0.1).unwrap();
        assert!((st.u.get(0, 0) - 1.1).abs() < 1e-15);
        assert!((st.w.get(0, 0) - 0.1).abs() < 1e-15);
        assert!((st.v[0] - 1.1).abs() < 1e-15);
        let lam = st.raw_predictor()[0];
        assert!((lam - 1.1 * 1.1 * 1.1).abs() < 1e-14);
    }

    #[test]
    fn predictor_matches_tilde_product() {
        let st = init_finite(7, 3, RunStreams::new(5, 0, 0), InitDists::default()).unwrap();
        let (u, f, v) = st.tilde();
        let expect = u.matvec_t(&f.matvec_t(&v));
        for (a, b) in st.raw_predictor().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn init_is_seeded_and_rejects_zero_width() {
        let a = init_finite(5, 2, RunStreams::new(1, 0, 3), InitDists::default()).unwrap();
        let b = init_finite(5, 2, RunStreams::new(1, 0, 3), InitDists::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.w.frobenius_sq(), 0.0);
        assert!(matches!(init_finite(0, 2, RunStreams::new(1, 0, 0), InitDists::default()), Err(Error::Dimension(_))));
    }

    #[test]
    fn gd_reduces_risk() {
        let obj = Objective::new(DataSpec::synthetic(vec![1.0, -0.5]), LossSpec::Square, 1.0).unwrap();
        let mut st = init_finite(64, 2, RunStreams::new(2, 0, 0), InitDists::default()).unwrap();
        let r0 = obj.risk(&st.predictor(1.0));
        for _ in 0..200 {
            st.gd_step(&obj, 0.05).unwrap();
        }
        assert!(obj.risk(&st.predictor(1.0)) < 1e-3 * r0);
    }

    #[test]
    fn divergence_is_reported() {
        let obj = unit_data();
        let mut st = init_finite(4, 1, RunStreams::new(0, 0, 0), InitDists::default()).unwrap();
        let res = (0..200).try_for_each(|_| st.gd_step(&obj, 5.0));
        assert!(matches!(res, Err(Error::Divergence { .. })));
    }

    #[test]
    fn checkpoint_resume_is_bit_exact() {
        let obj = Objective::new(DataSpec::synthetic(vec![0.3, 0.7, -1.1]), LossSpec::Square, 1.0).unwrap();
        let mut a = init_finite(16, 3, RunStreams::new(9, 0, 0), InitDists::uniform_outer()).unwrap();
        for _ in 0..10 {
            a.gd_step(&obj, 0.1).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        a.save_checkpoint(&path).unwrap();
        let mut b = FiniteWidthState::load_checkpoint(&path).unwrap();
        assert_eq!(a, b);
        for _ in 0..10 {
            a.gd_step(&obj, 0.1).unwrap();
            b.gd_step(&obj, 0.1).unwrap();
        }
        assert_eq!(a, b);
    }
}
