//! Data distributions, losses and the risk gradient fed to both models.
//!
//! Every model in this crate is driven by the same quantity: for an effective
//! linear predictor `lambda` and output scale `s`,
//! `xi = s * E[x * dloss(lambda . x, y)]`. For the square loss this reduces
//! to `s * (M lambda - b)` with `M = E[x x^T]` and `b = E[x y]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, sym_eigen, Dist, Matrix, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    /// `x ~ N(0, I_d)`, `y = x . teacher`.
    SyntheticTeacher,
    /// Uniform distribution over a finite list of samples.
    Empirical,
}

/// One labelled point. In JSON it is written `[x_1, ..., x_d, y]`; the
/// object form `{"x": [...], "y": ...}` is also accepted.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: f64,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SampleRepr {
    Flat(Vec<f64>),
    Object(SampleObject),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleObject {
    x: Vec<f64>,
    y: f64,
}

impl Serialize for Sample {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeSeq;
        let mut seq = ser.serialize_seq(Some(self.x.len() + 1))?;
        for v in self.x.iter().chain(std::iter::once(&self.y)) {
            seq.serialize_element(v)?;
        }
        seq.end()
    }
}

impl<'de> Deserialize<'de> for Sample {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        match SampleRepr::deserialize(de)? {
            SampleRepr::Flat(mut v) => {
                let y = v.pop().ok_or_else(|| serde::de::Error::custom("a sample needs at least a label"))?;
                Ok(Sample { x: v, y })
            }
            SampleRepr::Object(o) => Ok(Sample { x: o.x, y: o.y }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub kind: DataKind,
    pub d: usize,
    /// Teacher vector; when absent it is drawn from the master seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<Vec<Sample>>,
    /// Batch size for stochastic steps; `None` uses the full distribution.
    #[serde(default)]
    pub minibatch: Option<usize>,
}

impl DataSpec {
    pub fn synthetic(teacher: Vec<f64>) -> Self {
        Self { kind: DataKind::SyntheticTeacher, d: teacher.len(), teacher: Some(teacher), samples: None, minibatch: None }
    }

    pub fn empirical(samples: Vec<Sample>) -> Self {
        let d = samples.first().map_or(0, |s| s.x.len());
        Self { kind: DataKind::Empirical, d, teacher: None, samples: Some(samples), minibatch: None }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let data: Self = serde_json::from_str(text)?;
        data.validate()?;
        Ok(data)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Dimension("input dimension must be at least 1".into()));
        }
        if self.minibatch == Some(0) {
            return Err(Error::Config("minibatch size must be positive".into()));
        }
        match self.kind {
            DataKind::SyntheticTeacher => {
                if let Some(t) = &self.teacher {
                    if t.len() != self.d {
                        return Err(Error::Dimension(format!("teacher has length {} but d = {}", t.len(), self.d)));
                    }
                }
                if self.samples.is_some() {
                    return Err(Error::Config("synthetic data takes no samples".into()));
                }
            }
            DataKind::Empirical => {
                let samples = self.samples.as_ref().ok_or(Error::EmptyData)?;
                if samples.is_empty() {
                    return Err(Error::EmptyData);
                }
                if let Some(s) = samples.iter().find(|s| s.x.len() != self.d) {
                    return Err(Error::Dimension(format!("sample of length {} but d = {}", s.x.len(), self.d)));
                }
            }
        }
        Ok(())
    }

    /// Fill in a missing teacher with a standard Gaussian draw.
    pub fn resolve(mut self, stream: RngStream) -> Result<Self> {
        self.validate()?;
        if self.kind == DataKind::SyntheticTeacher && self.teacher.is_none() {
            self.teacher = Some(stream.vector(self.d, Dist::Gaussian));
        }
        Ok(self)
    }

    fn teacher(&self) -> Result<&[f64]> {
        self.teacher.as_deref().ok_or_else(|| Error::Config("teacher not resolved".into()))
    }

    /// Draw a minibatch of `size` points. Synthetic data draws fresh
    /// Gaussian inputs; empirical data resamples with replacement.
    pub fn sample_batch(&self, stream: RngStream, size: usize) -> Result<DataSpec> {
        use rand::Rng;
        if size == 0 {
            return Err(Error::EmptyData);
        }
        let mut rng = stream.rng();
        let samples = match self.kind {
            DataKind::SyntheticTeacher => {
                let t = self.teacher()?;
                (0..size)
                    .map(|_| {
                        let x: Vec<f64> = (0..self.d).map(|_| Dist::Gaussian.sample(&mut rng)).collect();
                        Sample { y: dot(&x, t), x }
                    })
                    .collect()
            }
            DataKind::Empirical => {
                let all = self.samples.as_ref().ok_or(Error::EmptyData)?;
                (0..size).map(|_| all[rng.random_range(0..all.len())].clone()).collect()
            }
        };
        Ok(DataSpec::empirical(samples))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossSpec {
    /// `(yhat - y)^2 / 2`.
    #[default]
    Square,
    /// `log(1 + exp(-y yhat))`, labels in `{-1, +1}`.
    LogisticSmooth,
    /// Piecewise-linear derivative in the residual `r = yhat - y`, held
    /// constant outside the table; the loss is its integral from zero.
    CustomTable { residuals: Vec<f64>, derivatives: Vec<f64> },
}


impl LossSpec {
    pub fn validate(&self) -> Result<()> {
        if let LossSpec::CustomTable { residuals, derivatives } = self {
            if residuals.len() < 2 || residuals.len() != derivatives.len() {
                return Err(Error::Config("custom loss table needs matching columns of length >= 2".into()));
            }
            if residuals.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::Config("custom loss residuals must increase strictly".into()));
            }
        }
        Ok(())
    }

    pub fn is_square(&self) -> bool {
        matches!(self, LossSpec::Square)
    }

    pub fn value(&self, yhat: f64, y: f64) -> f64 {
        match self {
            LossSpec::Square => 0.5 * (yhat - y).powi(2),
            LossSpec::LogisticSmooth => softplus(-y * yhat),
            LossSpec::CustomTable { residuals, derivatives } => {
                let r = yhat - y;
                table_antiderivative(residuals, derivatives, r) - table_antiderivative(residuals, derivatives, 0.0)
            }
        }
    }

    /// Derivative in the prediction.
    pub fn deriv(&self, yhat: f64, y: f64) -> f64 {
        match self {
            LossSpec::Square => yhat - y,
            LossSpec::LogisticSmooth => -y / (1.0 + (y * yhat).exp()),
            LossSpec::CustomTable { residuals, derivatives } => table_interp(residuals, derivatives, yhat - y),
        }
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn table_interp(r: &[f64], d: &[f64], x: f64) -> f64 {
    let n = r.len();
    if x <= r[0] {
        return d[0];
    }
    if x >= r[n - 1] {
        return d[n - 1];
    }
    let k = r.partition_point(|&v| v <= x) - 1;
    let t = (x - r[k]) / (r[k + 1] - r[k]);
    d[k] + t * (d[k + 1] - d[k])
}

/// Integral of the interpolated derivative from `r[0]` to `x`.
fn table_antiderivative(r: &[f64], d: &[f64], x: f64) -> f64 {
    let n = r.len();
    if x <= r[0] {
        return d[0] * (x - r[0]);
    }
    let mut acc = 0.0;
    for k in 0..n - 1 {
        if x <= r[k] {
            break;
        }
        let hi = x.min(r[k + 1]);
        acc += 0.5 * (d[k] + table_interp(r, d, hi)) * (hi - r[k]);
    }
    if x > r[n - 1] {
        acc += d[n - 1] * (x - r[n - 1]);
    }
    acc
}

/// Second moments of the data distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationMoments {
    /// `E[x x^T]`.
    pub m: Matrix,
    /// `E[x y]`.
    pub b: Vec<f64>,
    /// `E[y^2]`.
    pub y2: f64,
}

pub fn population_moments(data: &DataSpec) -> Result<PopulationMoments> {
    data.validate()?;
    let d = data.d;
    match data.kind {
        DataKind::SyntheticTeacher => {
            let t = data.teacher()?;
            Ok(PopulationMoments { m: Matrix::identity(d), b: t.to_vec(), y2: dot(t, t) })
        }
        DataKind::Empirical => {
            let samples = data.samples.as_ref().ok_or(Error::EmptyData)?;
            let n = samples.len() as f64;
            let mut m = Matrix::zeros(d, d);
            let mut b = vec![0.0; d];
            let mut y2 = 0.0;
            for s in samples {
                m.rank1_update(1.0 / n, &s.x, &s.x);
                crate::numerics::axpy(s.y / n, &s.x, &mut b);
                y2 += s.y * s.y / n;
            }
            Ok(PopulationMoments { m, b, y2 })
        }
    }
}

/// Relative eigenvalue cutoff used for pseudo-inverses and kernel projections.
pub const RANK_TOL: f64 = 1e-10;

impl PopulationMoments {
    /// Minimum-norm risk minimizer `M^+ b` for the square loss.
    pub fn min_l2_minimizer(&self) -> Vec<f64> {
        let (vals, vecs) = sym_eigen(&self.m);
        let zmax = vals.iter().cloned().fold(0.0, f64::max);
        let d = self.b.len();
        let mut out = vec![0.0; d];
        for (k, &z) in vals.iter().enumerate() {
            if z > RANK_TOL * zmax {
                let v: Vec<f64> = (0..d).map(|i| vecs.get(i, k)).collect();
                crate::numerics::axpy(dot(&v, &self.b) / z, &v, &mut out);
            }
        }
        out
    }

    /// Orthonormal basis of `ker(M)` (as rows).
    pub fn kernel_basis(&self) -> Vec<Vec<f64>> {
        let (vals, vecs) = sym_eigen(&self.m);
        let zmax = vals.iter().cloned().fold(0.0, f64::max);
        let d = self.b.len();
        vals.iter()
            .enumerate()
            .filter(|(_, &z)| z <= RANK_TOL * zmax)
            .map(|(k, _)| (0..d).map(|i| vecs.get(i, k)).collect())
            .collect()
    }

    /// Norm of the projection of `lambda` onto `ker(M)`.
    pub fn kernel_component(&self, lambda: &[f64]) -> f64 {
        self.kernel_basis().iter().map(|v| dot(v, lambda).powi(2)).sum::<f64>().sqrt()
    }
}

/// Data, loss and output scale bundled with cached moments.
#[derive(Clone, Debug)]
pub struct Objective {
    pub data: DataSpec,
    pub loss: LossSpec,
    pub scale: f64,
    pub moments: PopulationMoments,
}

impl Objective {
    pub fn new(data: DataSpec, loss: LossSpec, scale: f64) -> Result<Self> {
        data.validate()?;
        loss.validate()?;
        if !loss.is_square() && data.kind == DataKind::SyntheticTeacher {
            return Err(Error::Unsupported("non-square losses need an empirical data set".into()));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Config(format!("scale must be positive, got {scale}")));
        }
        let moments = population_moments(&data)?;
        Ok(Self { data, loss, scale, moments })
    }

    pub fn d(&self) -> usize {
        self.data.d
    }

    /// `s * E[x dloss(lambda . x, y)]` for the effective predictor `lambda`.
    pub fn xi(&self, lambda: &[f64]) -> Vec<f64> {
        let s = self.scale;
        if self.loss.is_square() {
            let mut g = self.moments.m.matvec(lambda);
            for (gi, bi) in g.iter_mut().zip(&self.moments.b) {
                *gi = s * (*gi - bi);
            }
            return g;
        }
        let samples = self.data.samples.as_deref().unwrap_or_default();
        let n = samples.len() as f64;
        let mut g = vec![0.0; self.d()];
        for smp in samples {
            let c = self.loss.deriv(dot(lambda, &smp.x), smp.y);
            crate::numerics::axpy(s * c / n, &smp.x, &mut g);
        }
        g
    }

    /// Risk `E[loss(lambda . x, y)]` of the effective predictor.
    pub fn risk(&self, lambda: &[f64]) -> f64 {
        if self.loss.is_square() {
            let mo = &self.moments;
            return 0.5 * (dot(lambda, &mo.m.matvec(lambda)) - 2.0 * dot(lambda, &mo.b) + mo.y2);
        }
        let samples = self.data.samples.as_deref().unwrap_or_default();
        samples.iter().map(|s| self.loss.value(dot(lambda, &s.x), s.y)).sum::<f64>() / samples.len() as f64
    }

    /// Square-loss risk above its infimum, computed as a quadratic form so
    /// that it stays accurate near convergence.
    pub fn excess_risk(&self, lambda: &[f64]) -> Result<f64> {
        if !self.loss.is_square() {
            return Err(Error::Unsupported("closed-form excess risk needs the square loss".into()));
        }
        let target = self.moments.min_l2_minimizer();
        let diff = crate::numerics::sub(lambda, &target);
        Ok(0.5 * dot(&diff, &self.moments.m.matvec(&diff)))
    }

    /// Infimum of the square-loss risk.
    pub fn min_risk(&self) -> f64 {
        let t = self.moments.min_l2_minimizer();
        0.5 * (self.moments.y2 - dot(&self.moments.b, &t))
    }
}

/// `s * E[x dloss(s lambda . x, y)]` for a raw, unscaled predictor.
pub fn xi(lambda: &[f64], data: &DataSpec, loss: &LossSpec, s: f64) -> Result<Vec<f64>> {
    let obj = Objective::new(data.clone(), loss.clone(), s)?;
    let eff: Vec<f64> = lambda.iter().map(|v| s * v).collect();
    Ok(obj.xi(&eff))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rank_one_data() -> DataSpec {
        DataSpec::empirical(vec![
            Sample { x: vec![1.0, 1.0], y: 2.0 },
            Sample { x: vec![2.0, 2.0], y: 4.0 },
        ])
    }

    #[test]
    fn square_xi_matches_closed_form() {
        let data = DataSpec::synthetic(vec![1.0, -2.0]);
        let g = xi(&[0.5, 0.5], &data, &LossSpec::Square, 2.0).unwrap();
        // s (s lambda - teacher) = 2 * ([1, 1] - [1, -2])
        assert_eq!(g, vec![0.0, 6.0]);
    }

    #[test]
    fn empirical_moments_and_pseudo_inverse() {
        let mo = population_moments(&rank_one_data()).unwrap();
        assert_eq!(mo.m.data, vec![2.5, 2.5, 2.5, 2.5]);
        assert_eq!(mo.b, vec![5.0, 5.0]);
        let t = mo.min_l2_minimizer();
        assert!((t[0] - 1.0).abs() < 1e-12 && (t[1] - 1.0).abs() < 1e-12);
        assert!(mo.kernel_component(&[1.0, -1.0]) - 2f64.sqrt() < 1e-12);
        assert!(mo.kernel_component(&[3.0, 3.0]) < 1e-12);
    }

    #[test]
    fn empirical_xi_agrees_between_generic_and_square_paths() {
        let data = rank_one_data();
        let table = LossSpec::CustomTable { residuals: vec![-10.0, 10.0], derivatives: vec![-10.0, 10.0] };
        let a = Objective::new(data.clone(), LossSpec::Square, 1.5).unwrap();
        let b = Objective::new(data, table, 1.5).unwrap();
        let lam = [0.3, -0.7];
        for (x, y) in a.xi(&lam).iter().zip(b.xi(&lam)) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((a.risk(&lam) - b.risk(&lam)).abs() < 1e-12);
    }

    #[test]
    fn logistic_derivative_matches_finite_difference() {
        let l = LossSpec::LogisticSmooth;
        for &(yhat, y) in &[(0.3, 1.0), (-2.0, 1.0), (1.5, -1.0)] {
            let h = 1e-6;
            let fd = (l.value(yhat + h, y) - l.value(yhat - h, y)) / (2.0 * h);
            assert!((fd - l.deriv(yhat, y)).abs() < 1e-8);
        }
        assert!(l.value(-800.0, 1.0).is_finite());
    }

    #[test]
    fn excess_risk_vanishes_at_target() {
        let obj = Objective::new(rank_one_data(), LossSpec::Square, 1.0).unwrap();
        assert!(obj.excess_risk(&[1.0, 1.0]).unwrap().abs() < 1e-12);
        assert!(obj.min_risk().abs() < 1e-12);
        let e = obj.excess_risk(&[2.0, 1.0]).unwrap();
        assert!((e - (obj.risk(&[2.0, 1.0]) - obj.min_risk())).abs() < 1e-12);
    }

    #[test]
    fn json_rejects_unknown_keys_and_bad_shapes() {
        assert!(DataSpec::from_json(r#"{"kind":"synthetic_teacher","d":2,"extra":1}"#).is_err());
        assert!(DataSpec::from_json(r#"{"kind":"synthetic_teacher","d":2,"teacher":[1.0]}"#).is_err());
        assert!(matches!(DataSpec::from_json(r#"{"kind":"empirical","d":2,"samples":[]}"#), Err(Error::EmptyData)));
        let ok = DataSpec::from_json(r#"{"kind":"empirical","d":1,"samples":[{"x":[1.0],"y":1.0}]}"#).unwrap();
        assert_eq!(ok.samples.unwrap().len(), 1);
        assert!(DataSpec::from_json(r#"{"kind":"synthetic_teacher","d":1,"minibatch":0}"#).is_err());
    }

    #[test]
    fn samples_round_trip_in_array_form() {
        let text = r#"{"kind":"empirical","d":2,"samples":[[1.0,0.0,1.0],[0.0,2.0,0.0]],"minibatch":null}"#;
        let data = DataSpec::from_json(text).unwrap();
        assert_eq!(data.samples.as_ref().unwrap()[1], Sample { x: vec![0.0, 2.0], y: 0.0 });
        let back = serde_json::to_string(&data).unwrap();
        assert_eq!(DataSpec::from_json(&back).unwrap(), data);
        assert!(back.contains("[1.0,0.0,1.0]"));
        assert!(DataSpec::from_json(r#"{"kind":"empirical","d":1,"samples":[{"x":[1.0],"y":1.0,"w":2}]}"#).is_err());
    }

    #[test]
    fn batches_are_reproducible() {
        let data = DataSpec::synthetic(vec![1.0, 2.0]);
        let a = data.sample_batch(RngStream::new(3, 9), 4).unwrap();
        assert_eq!(a, data.sample_batch(RngStream::new(3, 9), 4).unwrap());
        for s in a.samples.unwrap() {
            assert!((s.y - s.x[0] - 2.0 * s.x[1]).abs() < 1e-12);
        }
    }
}
