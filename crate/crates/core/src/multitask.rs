//! Multi-task GP over isotope tasks with covariance `K_A ⊗ K_T + I ⊗ Sigma`.
//!
//! `K_A` is the feature mixture kernel (RBF + Matern-3/2, ARD lengthscales
//! shared by all tasks) and `K_T = L L^T` is a learned task covariance. Stacked
//! vectors are sample-major: entry `a * M + i` is sample `a`, task `i`. Missing
//! isotope values are removed from the stacked system by masking. With no
//! missing values the likelihood is evaluated through eigendecompositions of
//! the two Kronecker factors instead of a dense factorisation.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::data::{Dataset, FeatureSchema, Isotope};
use crate::error::{Error, Result};
use crate::gp::PredictiveDistribution;
use crate::kernels::{self, KernelSpec, NoiseModel, TaskCovariance};
use crate::linalg::{cholesky_jittered, symmetrize, Factor};
use crate::optim::{DescentConfig, DescentState};

/// Below this task count a dense factorisation of the stacked system is
/// cheaper than eigendecomposing the feature kernel.
pub const KRONECKER_MIN_TASKS: usize = 2;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Which algebra evaluates the stacked system.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    /// Kronecker algebra when every task is observed for every sample and
    /// there are at least [`KRONECKER_MIN_TASKS`] tasks, dense masked
    /// Cholesky otherwise.
    Auto,
    Dense,
    /// Kronecker algebra whenever the data are complete.
    Kronecker,
}

/// Unpacked hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MtgParams {
    pub kernel: KernelSpec,
    pub task: TaskCovariance,
    pub noise: NoiseModel,
    pub means: Vec<f64>,
}

/// Training data and parameter layout for the stacked likelihood.
///
/// Parameter vector: kernel log-parameters, then the lower triangle of `L`
/// (row-major, diagonal as logs), then log noise per task, then task means.
#[derive(Debug, Clone)]
pub struct MtgProblem {
    inputs: Vec<Vec<f64>>,
    targets: Vec<Vec<Option<f64>>>,
    m: usize,
    template: KernelSpec,
    observed: Vec<(usize, usize)>,
    route: Route,
}

/// Contractions of `W = (C^{-1} - alpha alpha^T) / 2` needed for gradients.
struct Contractions {
    nll: f64,
    /// `sum_{ij} W[(a,i),(b,j)] K_T[i,j]`.
    w_a: DMatrix<f64>,
    /// `sum_{ab} W[(a,i),(b,j)] K_A[a,b]`.
    w_t: DMatrix<f64>,
    /// `sum_a W[(a,i),(a,i)]`.
    noise_diag: Vec<f64>,
    /// `sum_a alpha[(a,i)]` over observed entries.
    alpha_sum: Vec<f64>,
}

/// Factorisation of the stacked covariance, usable for arbitrary solves.
#[derive(Debug, Clone)]
pub enum CovarianceSolver {
    Dense(Factor),
    Kronecker {
        ua: DMatrix<f64>,
        sa: DVector<f64>,
        ut: DMatrix<f64>,
        st: DVector<f64>,
        /// `noise^{-1/2}` per task.
        dm12: DVector<f64>,
        /// `s_a[c] * s_t[t] + 1`.
        lam: DMatrix<f64>,
    },
}

impl CovarianceSolver {
    /// `C^{-1} r` for a stacked vector over the observed entries.
    pub fn solve(&self, r: &DVector<f64>) -> DVector<f64> {
        match self {
            CovarianceSolver::Dense(f) => f.solve(r),
            CovarianceSolver::Kronecker {
                ua,
                ut,
                dm12,
                lam,
                ..
            } => {
                let (n, m) = (ua.nrows(), ut.nrows());
                let rm = DMatrix::from_row_slice(n, m, r.as_slice());
                let x = kron_solve(ua, ut, dm12, lam, &rm);
                DVector::from_iterator(n * m, (0..n).flat_map(|a| (0..m).map(move |i| (a, i))).map(|(a, i)| x[(a, i)]))
            }
        }
    }

    pub fn log_det(&self) -> f64 {
        match self {
            CovarianceSolver::Dense(f) => f.log_det(),
            CovarianceSolver::Kronecker { ua, dm12, lam, .. } => {
                let n = ua.nrows() as f64;
                -2.0 * n * dm12.iter().map(|v| v.ln()).sum::<f64>() + lam.iter().map(|v| v.ln()).sum::<f64>()
            }
        }
    }
}

/// `C^{-1}` applied to an `n x M` residual matrix under the Kronecker route.
fn kron_solve(
    ua: &DMatrix<f64>,
    ut: &DMatrix<f64>,
    dm12: &DVector<f64>,
    lam: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> DMatrix<f64> {
    let mut rt = r.clone();
    for (j, mut col) in rt.column_iter_mut().enumerate() {
        col *= dm12[j];
    }
    let mut z = ua.transpose() * rt * ut;
    z.component_div_assign(lam);
    let mut x = ua * z * ut.transpose();
    for (j, mut col) in x.column_iter_mut().enumerate() {
        col *= dm12[j];
    }
    x
}

impl MtgProblem {
    pub fn new(inputs: Vec<Vec<f64>>, targets: Vec<Vec<Option<f64>>>, template: KernelSpec) -> Result<Self> {
        let n = inputs.len();
        if n == 0 || targets.len() != n {
            return Err(Error::Dimension {
                expected: n,
                got: targets.len(),
            });
        }
        let m = targets[0].len();
        if m == 0 {
            return Err(Error::domain("multitask model needs at least one task"));
        }
        let dim = inputs[0].len();
        if inputs.iter().any(|x| x.len() != dim) || targets.iter().any(|t| t.len() != m) {
            return Err(Error::domain("ragged inputs or targets"));
        }
        template.check_dim(dim)?;
        let observed: Vec<(usize, usize)> = targets
            .iter()
            .enumerate()
            .flat_map(|(a, row)| row.iter().enumerate().filter(|(_, v)| v.is_some()).map(move |(i, _)| (a, i)))
            .collect();
        if observed.is_empty() {
            return Err(Error::domain("no observed targets"));
        }
        Ok(Self {
            inputs,
            targets,
            m,
            template,
            observed,
            route: Route::Auto,
        })
    }

    pub fn with_route(mut self, route: Route) -> Self {
        self.route = route;
        self
    }

    pub fn n_tasks(&self) -> usize {
        self.m
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn targets(&self) -> &[Vec<Option<f64>>] {
        &self.targets
    }

    pub fn observed(&self) -> &[(usize, usize)] {
        &self.observed
    }

    pub fn is_complete(&self) -> bool {
        self.observed.len() == self.inputs.len() * self.m
    }

    fn use_kronecker(&self) -> bool {
        self.is_complete()
            && match self.route {
                Route::Auto => self.m >= KRONECKER_MIN_TASKS,
                Route::Dense => false,
                Route::Kronecker => true,
            }
    }

    pub fn n_params(&self) -> usize {
        self.template.n_params() + self.m * (self.m + 1) / 2 + 2 * self.m
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = self.template.param_names();
        names.extend(TaskCovariance::from_diagonal(&vec![1.0; self.m]).unwrap().param_names());
        names.extend((0..self.m).map(|i| format!("noise[{i}]")));
        names.extend((0..self.m).map(|i| format!("mean[{i}]")));
        names
    }

    pub fn pack(&self, p: &MtgParams) -> Vec<f64> {
        let mut v = p.kernel.log_params();
        v.extend(p.task.params());
        v.extend(p.noise.log_params());
        v.extend(&p.means);
        v
    }

    pub fn unpack(&self, v: &[f64]) -> Result<MtgParams> {
        if v.len() != self.n_params() {
            return Err(Error::Dimension {
                expected: self.n_params(),
                got: v.len(),
            });
        }
        let nk = self.template.n_params();
        let nl = self.m * (self.m + 1) / 2;
        let mut kernel = self.template.clone();
        kernel.set_log_params(&v[..nk]);
        kernel.validate()?;
        let mut task = TaskCovariance::from_diagonal(&vec![1.0; self.m])?;
        task.set_params(&v[nk..nk + nl]);
        let mut noise = NoiseModel::new(vec![1.0; self.m])?;
        noise.set_log_params(&v[nk + nl..nk + nl + self.m]);
        if task.factor().iter().chain(noise.variances()).any(|x| !x.is_finite()) || noise.variances().iter().any(|x| *x <= 0.0) {
            return Err(Error::domain("parameters outside the representable range"));
        }
        Ok(MtgParams {
            kernel,
            task,
            noise,
            means: v[nk + nl + self.m..].to_vec(),
        })
    }

    fn residual_vector(&self, means: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.observed.len(),
            self.observed.iter().map(|&(a, i)| self.targets[a][i].unwrap() - means[i]),
        )
    }

    /// Dense stacked covariance over the observed entries.
    pub fn dense_covariance(&self, p: &MtgParams) -> Result<DMatrix<f64>> {
        let ka = kernels::gram(&self.inputs, &p.kernel)?;
        let kt = p.task.matrix();
        let nv = p.noise.variances();
        let o = &self.observed;
        Ok(DMatrix::from_fn(o.len(), o.len(), |p_, q| {
            let (a, i) = o[p_];
            let (b, j) = o[q];
            ka[(a, b)] * kt[(i, j)] + if p_ == q { nv[i] } else { 0.0 }
        }))
    }

    /// Factorises the stacked covariance.
    pub fn solver(&self, p: &MtgParams) -> Result<CovarianceSolver> {
        if self.use_kronecker() {
            let ka = kernels::gram(&self.inputs, &p.kernel)?;
            Ok(self.kron_solver(&ka, p))
        } else {
            let c = self.dense_covariance(p)?;
            let base = kernels::jitter(&p.kernel) * p.task.matrix().diagonal().max();
            Ok(CovarianceSolver::Dense(cholesky_jittered(&c, base.max(f64::MIN_POSITIVE))?))
        }
    }

    fn kron_solver(&self, ka: &DMatrix<f64>, p: &MtgParams) -> CovarianceSolver {
        let ea = SymmetricEigen::new(ka.clone());
        let dm12 = DVector::from_iterator(self.m, p.noise.variances().iter().map(|v| 1.0 / v.sqrt()));
        let kt = p.task.matrix();
        let tt = DMatrix::from_fn(self.m, self.m, |i, j| dm12[i] * kt[(i, j)] * dm12[j]);
        let et = SymmetricEigen::new(symmetrize(&tt));
        let lam = DMatrix::from_fn(ka.nrows(), self.m, |c, t| ea.eigenvalues[c] * et.eigenvalues[t] + 1.0);
        CovarianceSolver::Kronecker {
            ua: ea.eigenvectors,
            sa: ea.eigenvalues,
            ut: et.eigenvectors,
            st: et.eigenvalues,
            dm12,
            lam,
        }
    }

    /// Negative log marginal likelihood, `-log p(Y | A(X))`.
    pub fn nll(&self, v: &[f64]) -> Result<f64> {
        let p = self.unpack(v)?;
        let solver = self.solver(&p)?;
        let r = self.residual_vector(&p.means);
        let alpha = solver.solve(&r);
        Ok(0.5 * r.dot(&alpha) + 0.5 * solver.log_det() + 0.5 * r.len() as f64 * LN_2PI)
    }

    /// NLL by a dense factorisation and direct solve, independent of the route.
    pub fn nll_dense(&self, v: &[f64]) -> Result<f64> {
        let p = self.unpack(v)?;
        let c = self.dense_covariance(&p)?;
        let f = cholesky_jittered(&c, 0.0)?;
        let r = self.residual_vector(&p.means);
        Ok(0.5 * r.dot(&f.solve(&r)) + 0.5 * f.log_det() + 0.5 * r.len() as f64 * LN_2PI)
    }

    fn contract_dense(&self, p: &MtgParams, ka: &DMatrix<f64>) -> Result<Contractions> {
        let CovarianceSolver::Dense(factor) = self.solver(p)? else {
            unreachable!("dense route requested")
        };
        let kt = p.task.matrix();
        let r = self.residual_vector(&p.means);
        let alpha = factor.solve(&r);
        let nll = 0.5 * r.dot(&alpha) + 0.5 * factor.log_det() + 0.5 * r.len() as f64 * LN_2PI;
        let w = (factor.inverse() - &alpha * alpha.transpose()) * 0.5;
        let n = self.inputs.len();
        let mut w_a = DMatrix::zeros(n, n);
        let mut w_t = DMatrix::zeros(self.m, self.m);
        let mut noise_diag = vec![0.0; self.m];
        let mut alpha_sum = vec![0.0; self.m];
        for (pi, &(a, i)) in self.observed.iter().enumerate() {
            noise_diag[i] += w[(pi, pi)];
            alpha_sum[i] += alpha[pi];
            for (qi, &(b, j)) in self.observed.iter().enumerate() {
                let wv = w[(pi, qi)];
                w_a[(a, b)] += wv * kt[(i, j)];
                w_t[(i, j)] += wv * ka[(a, b)];
            }
        }
        Ok(Contractions {
            nll,
            w_a,
            w_t,
            noise_diag,
            alpha_sum,
        })
    }

    fn contract_kron(&self, p: &MtgParams, ka: &DMatrix<f64>) -> Contractions {
        let CovarianceSolver::Kronecker {
            ua,
            sa,
            ut,
            st,
            dm12,
            lam,
        } = self.kron_solver(ka, p)
        else {
            unreachable!("kronecker route requested")
        };
        let (n, m) = (self.inputs.len(), self.m);
        let kt = p.task.matrix();
        let r = DMatrix::from_fn(n, m, |a, i| self.targets[a][i].unwrap() - p.means[i]);
        let aa = kron_solve(&ua, &ut, &dm12, &lam, &r);
        let logdet = -2.0 * n as f64 * dm12.iter().map(|v| v.ln()).sum::<f64>() + lam.iter().map(|v| v.ln()).sum::<f64>();
        let nll = 0.5 * r.dot(&aa) + 0.5 * logdet + 0.5 * (n * m) as f64 * LN_2PI;

        let da = DVector::from_fn(n, |c, _| (0..m).map(|t| st[t] / lam[(c, t)]).sum::<f64>());
        let mut ua_scaled = ua.clone();
        for (c, mut col) in ua_scaled.column_iter_mut().enumerate() {
            col *= da[c];
        }
        let w_a = (ua_scaled * ua.transpose() - &aa * &kt * aa.transpose()) * 0.5;

        let dt = DVector::from_fn(m, |t, _| (0..n).map(|c| sa[c] / lam[(c, t)]).sum::<f64>());
        let vt = DMatrix::from_fn(m, m, |i, t| dm12[i] * ut[(i, t)]);
        let mut vt_scaled = vt.clone();
        for (t, mut col) in vt_scaled.column_iter_mut().enumerate() {
            col *= dt[t];
        }
        let w_t = (vt_scaled * vt.transpose() - aa.transpose() * ka * &aa) * 0.5;

        let inv_sum = DVector::from_fn(m, |t, _| (0..n).map(|c| 1.0 / lam[(c, t)]).sum::<f64>());
        let noise_diag = (0..m)
            .map(|i| {
                let cinv: f64 = (0..m).map(|t| ut[(i, t)] * ut[(i, t)] * inv_sum[t]).sum::<f64>() * dm12[i] * dm12[i];
                let a2: f64 = aa.column(i).iter().map(|v| v * v).sum();
                0.5 * (cinv - a2)
            })
            .collect();
        let alpha_sum = (0..m).map(|i| aa.column(i).sum()).collect();
        Contractions {
            nll,
            w_a: symmetrize(&w_a),
            w_t: symmetrize(&w_t),
            noise_diag,
            alpha_sum,
        }
    }

    /// NLL and its gradient with respect to the packed parameters.
    pub fn nll_grad(&self, v: &[f64]) -> Result<(f64, Vec<f64>)> {
        let p = self.unpack(v)?;
        let ka = kernels::gram(&self.inputs, &p.kernel)?;
        let c = if self.use_kronecker() {
            self.contract_kron(&p, &ka)
        } else {
            self.contract_dense(&p, &ka)?
        };
        let mut grad = kernels::gram_gradient_contract(&self.inputs, &p.kernel, &c.w_a);
        let l = p.task.factor();
        let gl = 2.0 * &c.w_t * l;
        for i in 0..self.m {
            for j in 0..=i {
                grad.push(if i == j { gl[(i, j)] * l[(i, i)] } else { gl[(i, j)] });
            }
        }
        for (i, nv) in p.noise.variances().iter().enumerate() {
            grad.push(c.noise_diag[i] * nv);
        }
        grad.extend(c.alpha_sum.iter().map(|s| -s));
        if !c.nll.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::domain("non-finite likelihood"));
        }
        Ok((c.nll, grad))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MtgConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub rel_tol: f64,
    /// Tasks to model; by default every isotope with at least `min_task_count` values.
    pub tasks: Option<Vec<Isotope>>,
    pub min_task_count: usize,
    pub route: Route,
}

impl Default for MtgConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            learning_rate: 0.01,
            rel_tol: 1e-8,
            tasks: None,
            min_task_count: 3,
            route: Route::Auto,
        }
    }
}

/// Per-feature affine standardisation applied before the kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureScaling {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl FeatureScaling {
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let d = rows.first().map(Vec::len).unwrap_or(0);
        let n = rows.len().max(1) as f64;
        let mean: Vec<f64> = (0..d).map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n).collect();
        let scale = (0..d)
            .map(|k| {
                let v = rows.iter().map(|r| (r[k] - mean[k]).powi(2)).sum::<f64>() / n;
                if v > 0.0 {
                    v.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            scale: vec![1.0; d],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect()
    }
}

/// Fitted multitask model. Lengthscales refer to standardised features.
#[derive(Debug, Clone)]
pub struct MultitaskModel {
    pub tasks: Vec<Isotope>,
    pub schema: FeatureSchema,
    pub scaling: FeatureScaling,
    pub params: MtgParams,
    /// Log marginal likelihood after each accepted step (non-decreasing).
    pub mll_trace: Vec<f64>,
    pub converged: bool,
    raw_inputs: Vec<Vec<f64>>,
    problem: MtgProblem,
    solver: CovarianceSolver,
    alpha: DVector<f64>,
}

impl MultitaskModel {
    /// Assembles a model from parameters and training data, factorising the
    /// stacked covariance.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        tasks: Vec<Isotope>,
        schema: FeatureSchema,
        scaling: FeatureScaling,
        params: MtgParams,
        raw_inputs: Vec<Vec<f64>>,
        targets: Vec<Vec<Option<f64>>>,
        mll_trace: Vec<f64>,
        converged: bool,
    ) -> Result<Self> {
        if scaling.mean.len() != schema.dim() || raw_inputs.iter().any(|x| x.len() != schema.dim()) {
            return Err(Error::Schema("training inputs do not match the feature schema".into()));
        }
        if tasks.len() != params.means.len() || params.task.m() != tasks.len() {
            return Err(Error::Dimension {
                expected: tasks.len(),
                got: params.means.len(),
            });
        }
        let inputs = raw_inputs.iter().map(|x| scaling.apply(x)).collect();
        let problem = MtgProblem::new(inputs, targets, params.kernel.clone())?;
        let solver = problem.solver(&params)?;
        let alpha = solver.solve(&problem.residual_vector(&params.means));
        Ok(Self {
            tasks,
            schema,
            scaling,
            params,
            mll_trace,
            converged,
            raw_inputs,
            problem,
            solver,
            alpha,
        })
    }

    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn raw_inputs(&self) -> &[Vec<f64>] {
        &self.raw_inputs
    }

    pub fn targets(&self) -> &[Vec<Option<f64>>] {
        self.problem.targets()
    }

    pub fn task_index(&self, iso: Isotope) -> Option<usize> {
        self.tasks.iter().position(|&t| t == iso)
    }

    /// Log marginal likelihood of the training data under the fitted parameters.
    pub fn log_marginal_likelihood(&self) -> Result<f64> {
        Ok(-self.problem.nll(&self.problem.pack(&self.params))?)
    }

    /// Joint predictive distribution over all tasks at one feature vector.
    pub fn predict(&self, features: &[f64]) -> Result<PredictiveDistribution> {
        if features.len() != self.schema.dim() {
            return Err(Error::Schema(format!(
                "query has {} features, model expects {}",
                features.len(),
                self.schema.dim()
            )));
        }
        let q = self.scaling.apply(features);
        let m = self.n_tasks();
        let kernel = &self.params.kernel;
        let kq: Vec<f64> = self.problem.inputs().iter().map(|x| kernel.eval(&q, x)).collect();
        let kqq = kernel.eval(&q, &q);
        let kt = self.params.task.matrix();
        let obs = self.problem.observed();
        let b = DMatrix::from_fn(m, obs.len(), |i, p| {
            let (a, j) = obs[p];
            kq[a] * kt[(i, j)]
        });
        let mean = DVector::from_column_slice(&self.params.means) + &b * &self.alpha;
        let mut v = DMatrix::zeros(obs.len(), m);
        for i in 0..m {
            let col = self.solver.solve(&b.row(i).transpose());
            v.set_column(i, &col);
        }
        let cov = symmetrize(&(kt * kqq - &b * v));
        Ok(PredictiveDistribution {
            mean,
            covariance: cov,
            noise: DVector::from_column_slice(self.params.noise.variances()),
        })
    }
}

fn task_targets(dataset: &Dataset, tasks: &[Isotope]) -> (Vec<Vec<f64>>, Vec<Vec<Option<f64>>>) {
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for s in dataset.samples() {
        let row: Vec<Option<f64>> = tasks.iter().map(|&t| s.isotopes.get(t)).collect();
        if row.iter().any(Option::is_some) {
            inputs.push(s.features.clone());
            targets.push(row);
        }
    }
    (inputs, targets)
}

/// Fits the model on a dataset by maximising the marginal likelihood.
pub fn fit_multitask(dataset: &Dataset, cfg: &MtgConfig) -> Result<MultitaskModel> {
    let tasks = match &cfg.tasks {
        Some(t) if !t.is_empty() => t.clone(),
        Some(_) => return Err(Error::domain("empty task list")),
        None => dataset.observed_isotopes(cfg.min_task_count),
    };
    if tasks.is_empty() {
        return Err(Error::domain("no isotope task has enough observations"));
    }
    let (inputs, targets) = task_targets(dataset, &tasks);
    fit_arrays(tasks, dataset.schema().clone(), inputs, targets, cfg)
}

/// Fits on raw feature rows and per-task targets (`None` = missing).
pub fn fit_arrays(
    tasks: Vec<Isotope>,
    schema: FeatureSchema,
    raw_inputs: Vec<Vec<f64>>,
    targets: Vec<Vec<Option<f64>>>,
    cfg: &MtgConfig,
) -> Result<MultitaskModel> {
    let m = tasks.len();
    let d = schema.dim();
    if raw_inputs.len() < 2 {
        return Err(Error::domain("multitask fit needs at least 2 samples"));
    }
    let scaling = FeatureScaling::fit(&raw_inputs);
    let inputs: Vec<Vec<f64>> = raw_inputs.iter().map(|x| scaling.apply(x)).collect();

    // Optimise on standardised targets, then map parameters back.
    let mut y_mean = vec![0.0; m];
    let mut y_scale = vec![1.0; m];
    for i in 0..m {
        let vals: Vec<f64> = targets.iter().filter_map(|r| r[i]).collect();
        if vals.is_empty() {
            return Err(Error::domain(format!("task {} has no observations", tasks[i])));
        }
        let mu = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / vals.len() as f64;
        y_mean[i] = mu;
        y_scale[i] = if var > 0.0 { var.sqrt() } else { 1.0 };
    }
    let z: Vec<Vec<Option<f64>>> = targets
        .iter()
        .map(|r| r.iter().enumerate().map(|(i, v)| v.map(|x| (x - y_mean[i]) / y_scale[i])).collect())
        .collect();
    if d == 0 {
        return Err(Error::Schema("no features".into()));
    }
    let template = KernelSpec::feature_mixture(1.0, 0.5, 0.5, vec![1.0; d]);
    let problem = MtgProblem::new(inputs, z, template.clone())?.with_route(cfg.route);
    let init = MtgParams {
        kernel: template,
        task: TaskCovariance::from_diagonal(&vec![1.0; m])?,
        noise: NoiseModel::new(vec![0.1; m])?,
        means: vec![0.0; m],
    };
    let descent = DescentConfig {
        rel_tol: cfg.rel_tol,
        initial_step: cfg.learning_rate,
        ..DescentConfig::default()
    };
    let mut f = |v: &[f64]| problem.nll_grad(v);
    let mut state = DescentState::new(problem.pack(&init), &mut f)?;
    state.run(&mut f, cfg.epochs, &descent);
    if !state.converged {
        log::warn!("multitask optimisation did not converge within {} epochs; returning best parameters", cfg.epochs);
    }
    let fitted = problem.unpack(&state.params)?;
    let log_scale_sum: f64 = problem.observed().iter().map(|&(_, i)| y_scale[i].ln()).sum();
    let mll_trace = state.trace.iter().map(|v| -v - log_scale_sum).collect();

    let s = DMatrix::from_diagonal(&DVector::from_column_slice(&y_scale));
    let params = MtgParams {
        kernel: fitted.kernel,
        task: TaskCovariance::new(&s * fitted.task.factor())?,
        noise: NoiseModel::new(fitted.noise.variances().iter().zip(&y_scale).map(|(v, s)| v * s * s).collect())?,
        means: (0..m).map(|i| y_mean[i] + y_scale[i] * fitted.means[i]).collect(),
    };
    MultitaskModel::from_parts(tasks, schema, scaling, params, raw_inputs, targets, mll_trace, state.converged)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceRow {
    pub task: Isotope,
    pub feature: String,
    pub lengthscale: f64,
    pub importance: f64,
    pub rank: usize,
}

/// Reciprocal ARD lengthscales per task, sorted by decreasing importance.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceReport {
    pub rows: Vec<ImportanceRow>,
    pub note: String,
}

impl ImportanceReport {
    pub fn for_task(&self, task: Isotope) -> Vec<&ImportanceRow> {
        self.rows.iter().filter(|r| r.task == task).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,feature,lengthscale,importance,rank\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{:e},{:e},{}", r.task, r.feature, r.lengthscale, r.importance, r.rank);
        }
        out
    }
}

pub fn feature_importance(model: &MultitaskModel) -> ImportanceReport {
    let names = model.schema.names();
    let ls = &model.params.kernel.lengthscales;
    let l = |d: usize| if ls.len() == 1 { ls[0] } else { ls[d] };
    let mut order: Vec<usize> = (0..names.len()).collect();
    order.sort_by(|&a, &b| l(a).total_cmp(&l(b)).then(a.cmp(&b)));
    let mut rows = Vec::new();
    for &task in &model.tasks {
        for (rank, &d) in order.iter().enumerate() {
            rows.push(ImportanceRow {
                task,
                feature: names[d].clone(),
                lengthscale: l(d),
                importance: 1.0 / l(d),
                rank: rank + 1,
            });
        }
    }
    ImportanceReport {
        rows,
        note: "lengthscales are shared across tasks and measured in units of feature standard deviation".into(),
    }
}

/// Learned task covariance, its correlation form and Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDependencyReport {
    pub tasks: Vec<Isotope>,
    pub covariance: DMatrix<f64>,
    pub correlation: DMatrix<f64>,
    pub factor: DMatrix<f64>,
}

impl TaskDependencyReport {
    pub fn from_task_covariance(tasks: Vec<Isotope>, t: &TaskCovariance) -> Self {
        Self {
            tasks,
            covariance: t.matrix(),
            correlation: t.correlation(),
            factor: t.factor().clone(),
        }
    }

    /// Sign of each off-diagonal correlation (`-1`, `0` or `1`).
    pub fn signs(&self) -> Vec<(Isotope, Isotope, i8)> {
        let mut out = Vec::new();
        for i in 0..self.tasks.len() {
            for j in i + 1..self.tasks.len() {
                let c = self.correlation[(i, j)];
                let s = if c > 0.0 {
                    1
                } else if c < 0.0 {
                    -1
                } else {
                    0
                };
                out.push((self.tasks[i], self.tasks[j], s));
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("task_i,task_j,covariance,correlation,L_ij\n");
        for (i, ti) in self.tasks.iter().enumerate() {
            for (j, tj) in self.tasks.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{ti},{tj},{:e},{:e},{:e}",
                    self.covariance[(i, j)],
                    self.correlation[(i, j)],
                    self.factor[(i, j)]
                );
            }
        }
        out
    }
}

pub fn task_dependency(model: &MultitaskModel) -> TaskDependencyReport {
    TaskDependencyReport::from_task_covariance(model.tasks.clone(), &model.params.task)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn problem(seed: u64, n: usize, m: usize, d: usize, missing: bool) -> (MtgProblem, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.5..1.5)).collect()).collect();
        let y: Vec<Vec<Option<f64>>> = x
            .iter()
            .enumerate()
            .map(|(a, p)| {
                (0..m)
                    .map(|i| {
                        if missing && (a + i) % 3 == 0 && i > 0 {
                            None
                        } else {
                            Some(p[0].sin() * (i as f64 + 1.0) + rng.random_range(-0.3..0.3))
                        }
                    })
                    .collect()
            })
            .collect();
        let template = KernelSpec::feature_mixture(1.0, 0.5, 0.5, vec![1.0; d]);
        let pr = MtgProblem::new(x, y, template).unwrap();
        let mut l = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in 0..=i {
                l[(i, j)] = if i == j { rng.random_range(0.6..1.4) } else { rng.random_range(-0.8..0.8) };
            }
        }
        let params = MtgParams {
            kernel: KernelSpec::feature_mixture(
                rng.random_range(0.5..2.0),
                rng.random_range(0.2..1.0),
                rng.random_range(0.2..1.0),
                (0..d).map(|_| rng.random_range(0.5..2.0)).collect(),
            ),
            task: TaskCovariance::new(l).unwrap(),
            noise: NoiseModel::new((0..m).map(|_| rng.random_range(0.05..0.3)).collect()).unwrap(),
            means: (0..m).map(|_| rng.random_range(-0.5..0.5)).collect(),
        };
        let v = pr.pack(&params);
        (pr, v)
    }

    #[test]
    fn kronecker_route_matches_dense() {
        for seed in 0..5 {
            let (pr, v) = problem(seed, 9, 4, 2, false);
            assert!(pr.is_complete());
            let a = pr.nll(&v).unwrap();
            let b = pr.nll_dense(&v).unwrap();
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
            let (ga, gb) = (pr.nll_grad(&v).unwrap().1, pr.clone().with_route(Route::Dense).nll_grad(&v).unwrap().1);
            for (x, y) in ga.iter().zip(&gb) {
                assert!((x - y).abs() < 1e-7 * (1.0 + y.abs()), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (seed, missing) in [(1, false), (2, true), (3, true)] {
            let (pr, v) = problem(seed, 7, 3, 2, missing);
            let (_, g) = pr.nll_grad(&v).unwrap();
            for k in 0..v.len() {
                let mut vp = v.clone();
                vp[k] += 1e-5;
                let fp = pr.nll(&vp).unwrap();
                vp[k] -= 2e-5;
                let fm = pr.nll(&vp).unwrap();
                let fd = (fp - fm) / 2e-5;
                assert!((fd - g[k]).abs() / fd.abs().max(1e-6) < 1e-4, "param {k}: {fd} vs {}", g[k]);
            }
        }
    }

    #[test]
    fn single_task_equals_exact_gp() {
        let (pr, v) = problem(4, 10, 1, 2, false);
        let p = pr.unpack(&v).unwrap();
        let l = p.task.factor()[(0, 0)];
        let mut spec = p.kernel.clone();
        spec.sigma2 *= l * l;
        let resid: Vec<f64> = pr.targets().iter().map(|r| r[0].unwrap() - p.means[0]).collect();
        let exact = crate::gp::nll(pr.inputs(), &resid, &spec, &p.noise).unwrap();
        assert!((pr.nll(&v).unwrap() - exact).abs() < 1e-10);
    }

    #[test]
    fn sign_flip_of_factor_column_is_invisible() {
        let l = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 0.866]);
        let t = TaskCovariance::new(l.clone()).unwrap();
        let r = TaskDependencyReport::from_task_covariance(vec![Isotope::D18O, Isotope::D2H], &t);
        assert!((r.correlation[(0, 1)] - 0.5).abs() < 1e-3);
        let mut flipped = l;
        flipped[(1, 0)] = -0.5;
        flipped[(0, 0)] = -1.0;
        let kt = &flipped * flipped.transpose();
        assert!((kt - t.matrix()).abs().max() < 1e-15);
        assert_eq!(r.signs(), vec![(Isotope::D18O, Isotope::D2H, 1)]);
    }

    #[test]
    fn fit_recovers_correlation_and_relevant_feature() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 60;
        let x: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]).collect();
        let y: Vec<Vec<Option<f64>>> = x
            .iter()
            .map(|p| {
                let f = (1.5 * p[0]).sin();
                vec![Some(-5.0 + f + rng.random_range(-0.1..0.1)), Some(-40.0 + 8.0 * f + rng.random_range(-0.5..0.5))]
            })
            .collect();
        let schema = FeatureSchema::new(vec!["signal".into(), "noise".into()]).unwrap();
        let model = fit_arrays(vec![Isotope::D18O, Isotope::D2H], schema, x, y, &MtgConfig::default()).unwrap();
        assert!(model.mll_trace.windows(2).all(|w| w[1] >= w[0] - 1e-9));
        let dep = task_dependency(&model);
        assert!(dep.correlation[(0, 1)] > 0.8, "{}", dep.correlation);
        let imp = feature_importance(&model);
        assert_eq!(imp.for_task(Isotope::D2H)[0].feature, "signal");
        let pred = model.predict(&[0.5, 0.0]).unwrap();
        let truth = (0.75f64).sin();
        assert!((pred.mean[0] - (-5.0 + truth)).abs() < 0.3);
        assert!((pred.mean[1] - (-40.0 + 8.0 * truth)).abs() < 2.0);
        assert!((model.log_marginal_likelihood().unwrap() - model.mll_trace.last().unwrap()).abs() < 1e-6);
    }
}
