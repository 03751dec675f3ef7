//! Covariance functions, Gram assembly and the Kronecker multi-task covariance.
//!
//! Every positive hyperparameter is optimised in log space; gradients returned
//! here are derivatives with respect to those log-parameters.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::data::GeoLocation;
use crate::error::{Error, Result};

/// Relative diagonal jitter added to every Gram matrix.
pub const JITTER_REL: f64 = 1e-8;

/// Upper bound on the stacked (samples x tasks) dimension of a dense
/// multi-task covariance.
pub const MAX_STACKED_DIM: usize = 20_000;

const SQRT3: f64 = 1.732_050_807_568_877_2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    Rbf,
    Matern32,
    RationalQuadratic,
    Periodic,
    /// RBF + rational quadratic + periodic on coordinates, sharing one lengthscale.
    Spatial,
    /// lambda1 * RBF + lambda2 * Matern-3/2 with ARD lengthscales.
    FeatureMixture,
}

impl KernelKind {
    pub fn name(self) -> &'static str {
        match self {
            KernelKind::Rbf => "rbf",
            KernelKind::Matern32 => "matern32",
            KernelKind::RationalQuadratic => "rq",
            KernelKind::Periodic => "periodic",
            KernelKind::Spatial => "spatial",
            KernelKind::FeatureMixture => "feature-mixture",
        }
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            KernelKind::Rbf,
            KernelKind::Matern32,
            KernelKind::RationalQuadratic,
            KernelKind::Periodic,
            KernelKind::Spatial,
            KernelKind::FeatureMixture,
        ]
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| Error::domain(format!("unknown kernel kind '{s}'")))
    }
}

/// Hyperparameters of a covariance function.
///
/// `lengthscales` holds either one shared value or one value per input
/// dimension (ARD). Fields a kind does not use are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub sigma2: f64,
    pub lengthscales: Vec<f64>,
    pub alpha: f64,
    pub period: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl KernelSpec {
    fn base(kind: KernelKind, sigma2: f64, lengthscales: Vec<f64>) -> Self {
        Self {
            kind,
            sigma2,
            lengthscales,
            alpha: 1.0,
            period: 1.0,
            lambda1: 1.0,
            lambda2: 1.0,
        }
    }

    pub fn rbf(sigma2: f64, lengthscales: Vec<f64>) -> Self {
        Self::base(KernelKind::Rbf, sigma2, lengthscales)
    }

    pub fn matern32(sigma2: f64, lengthscales: Vec<f64>) -> Self {
        Self::base(KernelKind::Matern32, sigma2, lengthscales)
    }

    pub fn rational_quadratic(sigma2: f64, lengthscale: f64, alpha: f64) -> Self {
        Self {
            alpha,
            ..Self::base(KernelKind::RationalQuadratic, sigma2, vec![lengthscale])
        }
    }

    pub fn periodic(sigma2: f64, lengthscale: f64, period: f64) -> Self {
        Self {
            period,
            ..Self::base(KernelKind::Periodic, sigma2, vec![lengthscale])
        }
    }

    pub fn spatial(sigma2: f64, lengthscale: f64, alpha: f64, period: f64) -> Self {
        Self {
            alpha,
            period,
            ..Self::base(KernelKind::Spatial, sigma2, vec![lengthscale])
        }
    }

    pub fn feature_mixture(sigma2: f64, lambda1: f64, lambda2: f64, lengthscales: Vec<f64>) -> Self {
        Self {
            lambda1,
            lambda2,
            ..Self::base(KernelKind::FeatureMixture, sigma2, lengthscales)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::domain(format!("kernel parameter {name} must be positive, got {v}")))
            }
        };
        positive("sigma2", self.sigma2)?;
        if self.lengthscales.is_empty() {
            return Err(Error::domain("kernel needs at least one lengthscale"));
        }
        for &l in &self.lengthscales {
            positive("lengthscale", l)?;
        }
        match self.kind {
            KernelKind::RationalQuadratic | KernelKind::Periodic | KernelKind::Spatial
                if self.lengthscales.len() != 1 =>
            {
                return Err(Error::domain(format!("{} kernel takes a single lengthscale", self.kind)))
            }
            _ => {}
        }
        if matches!(self.kind, KernelKind::RationalQuadratic | KernelKind::Spatial) {
            positive("alpha", self.alpha)?;
        }
        if matches!(self.kind, KernelKind::Periodic | KernelKind::Spatial) {
            positive("period", self.period)?;
        }
        if self.kind == KernelKind::FeatureMixture {
            for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(Error::domain(format!("{name} must be non-negative, got {v}")));
                }
            }
        }
        Ok(())
    }

    /// Errors unless inputs of dimension `dim` are compatible.
    pub fn check_dim(&self, dim: usize) -> Result<()> {
        let n = self.lengthscales.len();
        if n == 1 || n == dim {
            Ok(())
        } else {
            Err(Error::Dimension { expected: n, got: dim })
        }
    }

    #[inline]
    fn ls(&self, d: usize) -> f64 {
        if self.lengthscales.len() == 1 {
            self.lengthscales[0]
        } else {
            self.lengthscales[d]
        }
    }

    pub fn n_params(&self) -> usize {
        let nl = self.lengthscales.len();
        match self.kind {
            KernelKind::Rbf | KernelKind::Matern32 => 1 + nl,
            KernelKind::RationalQuadratic | KernelKind::Periodic => 3,
            KernelKind::Spatial => 4,
            KernelKind::FeatureMixture => 3 + nl,
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let ls = |names: &mut Vec<String>| {
            if self.lengthscales.len() == 1 {
                names.push("lengthscale".into());
            } else {
                names.extend((0..self.lengthscales.len()).map(|d| format!("lengthscale[{d}]")));
            }
        };
        let mut names = vec!["sigma2".to_string()];
        match self.kind {
            KernelKind::Rbf | KernelKind::Matern32 => ls(&mut names),
            KernelKind::RationalQuadratic => {
                ls(&mut names);
                names.push("alpha".into());
            }
            KernelKind::Periodic => {
                ls(&mut names);
                names.push("period".into());
            }
            KernelKind::Spatial => {
                ls(&mut names);
                names.push("alpha".into());
                names.push("period".into());
            }
            KernelKind::FeatureMixture => {
                names.push("lambda1".into());
                names.push("lambda2".into());
                ls(&mut names);
            }
        }
        names
    }

    /// Natural-log values of the parameters, in [`KernelSpec::param_names`] order.
    pub fn log_params(&self) -> Vec<f64> {
        let mut p = vec![self.sigma2.ln()];
        let ls = self.lengthscales.iter().map(|l| l.ln());
        match self.kind {
            KernelKind::Rbf | KernelKind::Matern32 => p.extend(ls),
            KernelKind::RationalQuadratic => {
                p.extend(ls);
                p.push(self.alpha.ln());
            }
            KernelKind::Periodic => {
                p.extend(ls);
                p.push(self.period.ln());
            }
            KernelKind::Spatial => {
                p.extend(ls);
                p.push(self.alpha.ln());
                p.push(self.period.ln());
            }
            KernelKind::FeatureMixture => {
                p.push(self.lambda1.ln());
                p.push(self.lambda2.ln());
                p.extend(ls);
            }
        }
        p
    }

    pub fn set_log_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.n_params(), "parameter vector length");
        self.sigma2 = p[0].exp();
        let nl = self.lengthscales.len();
        match self.kind {
            KernelKind::Rbf | KernelKind::Matern32 => {
                self.lengthscales = p[1..1 + nl].iter().map(|v| v.exp()).collect();
            }
            KernelKind::RationalQuadratic => {
                self.lengthscales = vec![p[1].exp()];
                self.alpha = p[2].exp();
            }
            KernelKind::Periodic => {
                self.lengthscales = vec![p[1].exp()];
                self.period = p[2].exp();
            }
            KernelKind::Spatial => {
                self.lengthscales = vec![p[1].exp()];
                self.alpha = p[2].exp();
                self.period = p[3].exp();
            }
            KernelKind::FeatureMixture => {
                self.lambda1 = p[1].exp();
                self.lambda2 = p[2].exp();
                self.lengthscales = p[3..3 + nl].iter().map(|v| v.exp()).collect();
            }
        }
    }

    /// Kernel value at zero distance.
    pub fn prior_variance(&self) -> f64 {
        match self.kind {
            KernelKind::Spatial => 3.0 * self.sigma2,
            KernelKind::FeatureMixture => (self.lambda1 + self.lambda2) * self.sigma2,
            _ => self.sigma2,
        }
    }

    /// Kernel value without dimension checks; see [`KernelSpec::check_dim`].
    pub fn eval(&self, u: &[f64], v: &[f64]) -> f64 {
        match self.kind {
            KernelKind::Rbf => self.sigma2 * self.rbf_unit(u, v),
            KernelKind::Matern32 => self.sigma2 * self.matern_unit(u, v),
            KernelKind::RationalQuadratic => self.sigma2 * rq_unit(sq_dist(u, v), self.ls(0), self.alpha),
            KernelKind::Periodic => self.sigma2 * periodic_unit(sq_dist(u, v).sqrt(), self.ls(0), self.period),
            KernelKind::Spatial => {
                let r2 = sq_dist(u, v);
                let l = self.ls(0);
                self.sigma2
                    * ((-0.5 * r2 / (l * l)).exp()
                        + rq_unit(r2, l, self.alpha)
                        + periodic_unit(r2.sqrt(), l, self.period))
            }
            KernelKind::FeatureMixture => {
                self.sigma2 * (self.lambda1 * self.rbf_unit(u, v) + self.lambda2 * self.matern_unit(u, v))
            }
        }
    }

    /// Kernel value plus its gradient with respect to the log-parameters,
    /// written into `grad` (length [`KernelSpec::n_params`]).
    pub fn eval_with_grad(&self, u: &[f64], v: &[f64], grad: &mut [f64]) -> f64 {
        debug_assert_eq!(grad.len(), self.n_params());
        grad.iter_mut().for_each(|g| *g = 0.0);
        let scalar_ls = self.lengthscales.len() == 1;
        let lsi = |d: usize| if scalar_ls { 0 } else { d };
        match self.kind {
            KernelKind::Rbf => {
                let k = self.sigma2 * self.rbf_unit(u, v);
                grad[0] = k;
                for d in 0..u.len() {
                    let l = self.ls(d);
                    let del = u[d] - v[d];
                    grad[1 + lsi(d)] += k * del * del / (l * l);
                }
                k
            }
            KernelKind::Matern32 => {
                let k = self.sigma2 * self.matern_unit(u, v);
                grad[0] = k;
                for d in 0..u.len() {
                    let t = SQRT3 * (u[d] - v[d]).abs() / self.ls(d);
                    grad[1 + lsi(d)] += k * t * t / (1.0 + t);
                }
                k
            }
            KernelKind::RationalQuadratic => {
                let (e, dl, da) = rq_with_grad(sq_dist(u, v), self.ls(0), self.alpha);
                let k = self.sigma2 * e;
                grad[0] = k;
                grad[1] = self.sigma2 * dl;
                grad[2] = self.sigma2 * da;
                k
            }
            KernelKind::Periodic => {
                let (e, dl, dp) = periodic_with_grad(sq_dist(u, v).sqrt(), self.ls(0), self.period);
                let k = self.sigma2 * e;
                grad[0] = k;
                grad[1] = self.sigma2 * dl;
                grad[2] = self.sigma2 * dp;
                k
            }
            KernelKind::Spatial => {
                let r2 = sq_dist(u, v);
                let l = self.ls(0);
                let e1 = (-0.5 * r2 / (l * l)).exp();
                let (e2, dl2, da) = rq_with_grad(r2, l, self.alpha);
                let (e3, dl3, dp) = periodic_with_grad(r2.sqrt(), l, self.period);
                let k = self.sigma2 * (e1 + e2 + e3);
                grad[0] = k;
                grad[1] = self.sigma2 * (e1 * r2 / (l * l) + dl2 + dl3);
                grad[2] = self.sigma2 * da;
                grad[3] = self.sigma2 * dp;
                k
            }
            KernelKind::FeatureMixture => {
                let r = self.sigma2 * self.rbf_unit(u, v);
                let m = self.sigma2 * self.matern_unit(u, v);
                let k = self.lambda1 * r + self.lambda2 * m;
                grad[0] = k;
                grad[1] = self.lambda1 * r;
                grad[2] = self.lambda2 * m;
                for d in 0..u.len() {
                    let l = self.ls(d);
                    let del = u[d] - v[d];
                    let t = SQRT3 * del.abs() / l;
                    grad[3 + lsi(d)] +=
                        self.lambda1 * r * del * del / (l * l) + self.lambda2 * m * t * t / (1.0 + t);
                }
                k
            }
        }
    }

    fn rbf_unit(&self, u: &[f64], v: &[f64]) -> f64 {
        let mut q = 0.0;
        for d in 0..u.len() {
            let z = (u[d] - v[d]) / self.ls(d);
            q += z * z;
        }
        (-0.5 * q).exp()
    }

    fn matern_unit(&self, u: &[f64], v: &[f64]) -> f64 {
        let mut prod = 1.0;
        let mut sum_t = 0.0;
        for d in 0..u.len() {
            let t = SQRT3 * (u[d] - v[d]).abs() / self.ls(d);
            prod *= 1.0 + t;
            sum_t += t;
        }
        prod * (-sum_t).exp()
    }
}

#[inline]
fn sq_dist(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum()
}

#[inline]
fn rq_unit(r2: f64, l: f64, alpha: f64) -> f64 {
    (1.0 + r2 / (2.0 * alpha * l * l)).powf(-alpha)
}

/// Unit-variance RQ value and its log-lengthscale and log-alpha derivatives.
fn rq_with_grad(r2: f64, l: f64, alpha: f64) -> (f64, f64, f64) {
    let z = r2 / (2.0 * alpha * l * l);
    let e = (1.0 + z).powf(-alpha);
    let dl = e * 2.0 * alpha * z / (1.0 + z);
    let da = e * alpha * (z / (1.0 + z) - z.ln_1p());
    (e, dl, da)
}

#[inline]
fn periodic_unit(r: f64, l: f64, period: f64) -> f64 {
    let s = (PI * r / period).sin();
    (-2.0 * s * s / (l * l)).exp()
}

/// Unit-variance periodic value and its log-lengthscale and log-period derivatives.
fn periodic_with_grad(r: f64, l: f64, period: f64) -> (f64, f64, f64) {
    let arg = PI * r / period;
    let (s, c) = arg.sin_cos();
    let e = (-2.0 * s * s / (l * l)).exp();
    let dl = e * 4.0 * s * s / (l * l);
    let dp = e * 4.0 * s * c * arg / (l * l);
    (e, dl, dp)
}

fn check_pair(u: &[f64], v: &[f64], spec: &KernelSpec) -> Result<()> {
    if u.len() != v.len() {
        return Err(Error::Dimension {
            expected: u.len(),
            got: v.len(),
        });
    }
    spec.check_dim(u.len())
}

/// ARD squared-exponential: `sigma2 * exp(-0.5 * sum_d (u_d - v_d)^2 / l_d^2)`.
pub fn k_rbf(u: &[f64], v: &[f64], spec: &KernelSpec) -> Result<f64> {
    check_pair(u, v, spec)?;
    Ok(spec.sigma2 * spec.rbf_unit(u, v))
}

/// Matern-3/2 in per-dimension product form.
pub fn k_matern32(u: &[f64], v: &[f64], spec: &KernelSpec) -> Result<f64> {
    check_pair(u, v, spec)?;
    Ok(spec.sigma2 * spec.matern_unit(u, v))
}

/// Rational quadratic on the Euclidean distance, single lengthscale.
pub fn k_rq(u: &[f64], v: &[f64], spec: &KernelSpec) -> Result<f64> {
    check_pair(u, v, spec)?;
    Ok(spec.sigma2 * rq_unit(sq_dist(u, v), spec.lengthscales[0], spec.alpha))
}

/// Periodic (exp-sine-squared) on the Euclidean distance, single lengthscale.
pub fn k_periodic(u: &[f64], v: &[f64], spec: &KernelSpec) -> Result<f64> {
    check_pair(u, v, spec)?;
    Ok(spec.sigma2 * periodic_unit(sq_dist(u, v).sqrt(), spec.lengthscales[0], spec.period))
}

/// RBF + RQ + periodic on `(lat, lon)` in degrees with a shared lengthscale.
pub fn k_composite_spatial(x: GeoLocation, y: GeoLocation, spec: &KernelSpec) -> Result<f64> {
    let spatial = KernelSpec {
        kind: KernelKind::Spatial,
        ..spec.clone()
    };
    spatial.validate()?;
    Ok(spatial.eval(&x.to_input(), &y.to_input()))
}

/// `lambda1 * k_rbf + lambda2 * k_matern32`.
pub fn k_feature_mixture(u: &[f64], v: &[f64], spec: &KernelSpec) -> Result<f64> {
    check_pair(u, v, spec)?;
    Ok(spec.lambda1 * spec.sigma2 * spec.rbf_unit(u, v) + spec.lambda2 * spec.sigma2 * spec.matern_unit(u, v))
}

fn check_points(points: &[Vec<f64>], spec: &KernelSpec) -> Result<usize> {
    let dim = points.first().map(Vec::len).unwrap_or(0);
    if let Some(p) = points.iter().find(|p| p.len() != dim) {
        return Err(Error::Dimension {
            expected: dim,
            got: p.len(),
        });
    }
    spec.check_dim(dim)?;
    Ok(dim)
}

/// Diagonal jitter used by [`gram`] for this kernel.
pub fn jitter(spec: &KernelSpec) -> f64 {
    JITTER_REL * spec.prior_variance()
}

/// Symmetric Gram matrix with `JITTER_REL * prior_variance` on the diagonal.
pub fn gram(points: &[Vec<f64>], spec: &KernelSpec) -> Result<DMatrix<f64>> {
    check_points(points, spec)?;
    let n = points.len();
    let mut k = DMatrix::zeros(n, n);
    let jit = jitter(spec);
    for i in 0..n {
        for j in 0..i {
            let v = spec.eval(&points[i], &points[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
        k[(i, i)] = spec.eval(&points[i], &points[i]) + jit;
    }
    if k.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("non-finite entry in Gram matrix"));
    }
    Ok(k)
}

/// Cross-covariance, rows indexed by `a`, columns by `b`.
pub fn cross_covariance(a: &[Vec<f64>], b: &[Vec<f64>], spec: &KernelSpec) -> Result<DMatrix<f64>> {
    let da = check_points(a, spec)?;
    let db = check_points(b, spec)?;
    if !a.is_empty() && !b.is_empty() && da != db {
        return Err(Error::Dimension { expected: da, got: db });
    }
    Ok(DMatrix::from_fn(a.len(), b.len(), |i, j| spec.eval(&a[i], &b[j])))
}

/// `sum_{a,b} weights[a,b] * dK[a,b]/d(log theta)` for every parameter, where
/// `K` is the jittered [`gram`] matrix and `weights` is symmetric.
pub fn gram_gradient_contract(points: &[Vec<f64>], spec: &KernelSpec, weights: &DMatrix<f64>) -> Vec<f64> {
    let n = points.len();
    let p = spec.n_params();
    let mut out = vec![0.0; p];
    let mut g = vec![0.0; p];
    for i in 0..n {
        for j in 0..i {
            let w = 2.0 * weights[(i, j)];
            if w == 0.0 {
                continue;
            }
            spec.eval_with_grad(&points[i], &points[j], &mut g);
            for (o, gv) in out.iter_mut().zip(&g) {
                *o += w * gv;
            }
        }
        spec.eval_with_grad(&points[i], &points[i], &mut g);
        let w = weights[(i, i)] * (1.0 + JITTER_REL);
        for (o, gv) in out.iter_mut().zip(&g) {
            *o += w * gv;
        }
    }
    out
}

/// Lower-triangular factor `L` of a task covariance `K_T = L L^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskCovariance {
    factor: DMatrix<f64>,
}

impl TaskCovariance {
    pub fn new(factor: DMatrix<f64>) -> Result<Self> {
        if !factor.is_square() || factor.nrows() == 0 {
            return Err(Error::domain("task factor must be a non-empty square matrix"));
        }
        let m = factor.nrows();
        for i in 0..m {
            for j in 0..m {
                let v = factor[(i, j)];
                if !v.is_finite() {
                    return Err(Error::domain("non-finite task factor entry"));
                }
                if j > i && v != 0.0 {
                    return Err(Error::domain("task factor must be lower triangular"));
                }
            }
            if factor[(i, i)] < 0.0 {
                return Err(Error::domain("task factor diagonal must be non-negative"));
            }
        }
        Ok(Self { factor })
    }

    pub fn from_diagonal(scales: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(scales)))
    }

    pub fn m(&self) -> usize {
        self.factor.nrows()
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    /// `K_T = L L^T`.
    pub fn matrix(&self) -> DMatrix<f64> {
        let k = &self.factor * self.factor.transpose();
        (&k + k.transpose()) * 0.5
    }

    /// `K_T` normalised to unit diagonal.
    pub fn correlation(&self) -> DMatrix<f64> {
        let k = self.matrix();
        let m = self.m();
        DMatrix::from_fn(m, m, |i, j| {
            if i == j {
                1.0
            } else {
                let d = (k[(i, i)] * k[(j, j)]).sqrt();
                if d > 0.0 {
                    k[(i, j)] / d
                } else {
                    0.0
                }
            }
        })
    }

    pub fn n_params(&self) -> usize {
        self.m() * (self.m() + 1) / 2
    }

    /// Lower-triangle entries in row-major order; diagonal entries as logs.
    pub fn params(&self) -> Vec<f64> {
        let m = self.m();
        let mut p = Vec::with_capacity(self.n_params());
        for i in 0..m {
            for j in 0..=i {
                let v = self.factor[(i, j)];
                p.push(if i == j { v.ln() } else { v });
            }
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.n_params());
        let m = self.m();
        let mut k = 0;
        for i in 0..m {
            for j in 0..=i {
                self.factor[(i, j)] = if i == j { p[k].exp() } else { p[k] };
                k += 1;
            }
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let m = self.m();
        let mut names = Vec::new();
        for i in 0..m {
            for j in 0..=i {
                names.push(format!("L[{i},{j}]"));
            }
        }
        names
    }
}

/// Per-task observation noise variances (the diagonal of the noise covariance).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    variances: Vec<f64>,
}

impl NoiseModel {
    pub fn new(variances: Vec<f64>) -> Result<Self> {
        if variances.is_empty() || variances.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::domain("noise variances must be strictly positive"));
        }
        Ok(Self { variances })
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn log_params(&self) -> Vec<f64> {
        self.variances.iter().map(|v| v.ln()).collect()
    }

    pub fn set_log_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.variances.len());
        self.variances = p.iter().map(|v| v.exp()).collect();
    }
}

/// `K_A ⊗ K_T` with sample-major layout: row `a * M + i` holds sample `a`,
/// task `i`, so each `M x M` block `(a, b)` equals `K_A[a, b] * K_T`.
pub fn kron_multitask(k_a: &DMatrix<f64>, k_t: &TaskCovariance) -> Result<DMatrix<f64>> {
    kron_multitask_capped(k_a, k_t, MAX_STACKED_DIM)
}

pub fn kron_multitask_capped(k_a: &DMatrix<f64>, k_t: &TaskCovariance, cap: usize) -> Result<DMatrix<f64>> {
    let dim = k_a.nrows().checked_mul(k_t.m()).unwrap_or(usize::MAX);
    if dim > cap {
        return Err(Error::domain(format!(
            "stacked covariance dimension {dim} exceeds the cap of {cap}"
        )));
    }
    Ok(k_a.kronecker(&k_t.matrix()))
}
