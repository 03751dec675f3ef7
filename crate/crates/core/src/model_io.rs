//! Line-oriented text container for trained models.
//!
//! The first line is `SIRA-MODEL <version>`, the second `variant GB` or
//! `variant MTG`. Floats are written in shortest round-trip scientific form so
//! a read followed by a write reproduces the file byte for byte.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::boosting::{BoostedEnsemble, GbModel, RegressionTree};
use crate::data::{FeatureSchema, GeoLocation, Isotope};
use crate::error::{Error, Result};
use crate::gp::{GpPosterior, PredictiveDistribution};
use crate::kernels::{KernelKind, KernelSpec, NoiseModel, TaskCovariance};
use crate::multitask::{FeatureScaling, MtgParams, MultitaskModel};
use crate::MODEL_FORMAT_VERSION;

/// Either trained model variant.
#[derive(Debug, Clone)]
pub enum TrainedModel {
    Gb(GbModel),
    Mtg(MultitaskModel),
}

impl TrainedModel {
    pub fn variant(&self) -> &'static str {
        match self {
            TrainedModel::Gb(_) => "GB",
            TrainedModel::Mtg(_) => "MTG",
        }
    }

    pub fn schema(&self) -> &FeatureSchema {
        match self {
            TrainedModel::Gb(m) => &m.schema,
            TrainedModel::Mtg(m) => &m.schema,
        }
    }

    pub fn isotopes(&self) -> Vec<Isotope> {
        match self {
            TrainedModel::Gb(m) => vec![m.isotope],
            TrainedModel::Mtg(m) => m.tasks.clone(),
        }
    }

    /// Predictive mean and latent variance of one isotope.
    pub fn predict_isotope(&self, isotope: Isotope, location: GeoLocation, features: &[f64]) -> Result<(f64, f64)> {
        let (pred, k) = match self {
            TrainedModel::Gb(m) if m.isotope == isotope => (m.predict(location, features)?, 0),
            TrainedModel::Mtg(m) => match m.task_index(isotope) {
                Some(k) => (m.predict(features)?, k),
                None => return Err(Error::domain(format!("model does not predict {isotope}"))),
            },
            TrainedModel::Gb(_) => return Err(Error::domain(format!("model does not predict {isotope}"))),
        };
        Ok((pred.mean[k], pred.covariance[(k, k)].max(0.0)))
    }

    /// Predictive distribution over every isotope the model covers.
    pub fn predict(&self, location: GeoLocation, features: &[f64]) -> Result<PredictiveDistribution> {
        match self {
            TrainedModel::Gb(m) => m.predict(location, features),
            TrainedModel::Mtg(m) => m.predict(features),
        }
    }
}

fn fmt_floats(out: &mut String, key: &str, values: &[f64]) {
    out.push_str(key);
    for v in values {
        let _ = write!(out, " {v:e}");
    }
    out.push('\n');
}

fn write_schema(out: &mut String, schema: &FeatureSchema) {
    let _ = writeln!(out, "features {}", schema.dim());
    for name in schema.names() {
        let _ = writeln!(out, "feature {name}");
    }
}

fn write_kernel(out: &mut String, k: &KernelSpec) {
    let _ = writeln!(out, "kernel {}", k.kind);
    fmt_floats(out, "sigma2", &[k.sigma2]);
    fmt_floats(out, "lengthscales", &k.lengthscales);
    fmt_floats(out, "alpha", &[k.alpha]);
    fmt_floats(out, "period", &[k.period]);
    fmt_floats(out, "lambda", &[k.lambda1, k.lambda2]);
}

fn write_lower(out: &mut String, key: &str, m: &DMatrix<f64>) {
    let _ = writeln!(out, "{key} {}", m.nrows());
    for i in 0..m.nrows() {
        let row: Vec<f64> = (0..=i).map(|j| m[(i, j)]).collect();
        fmt_floats(out, "r", &row);
    }
}

fn write_header(out: &mut String, variant: &str) {
    let _ = writeln!(out, "SIRA-MODEL {MODEL_FORMAT_VERSION}");
    let _ = writeln!(out, "variant {variant}");
}

pub fn gb_to_string(m: &GbModel) -> String {
    let mut out = String::new();
    write_header(&mut out, "GB");
    let _ = writeln!(out, "isotope {}", m.isotope);
    write_schema(&mut out, &m.schema);
    fmt_floats(&mut out, "f0", &[m.ensemble.f0]);
    fmt_floats(&mut out, "learning_rate", &[m.ensemble.learning_rate]);
    let _ = writeln!(out, "trees {}", m.ensemble.trees.len());
    for (tree, w) in &m.ensemble.trees {
        let nodes = tree.to_preorder();
        let _ = writeln!(out, "tree {w:e} {}", nodes.len());
        for n in nodes {
            out.push_str(&n);
            out.push('\n');
        }
    }
    let p = &m.posterior;
    write_kernel(&mut out, p.kernel());
    fmt_floats(&mut out, "noise", &[p.noise()]);
    fmt_floats(&mut out, "extra_jitter", &[p.extra_jitter()]);
    let _ = writeln!(out, "inputs {}", p.inputs().len());
    for x in p.inputs() {
        fmt_floats(&mut out, "x", x);
    }
    fmt_floats(&mut out, "weights", p.weights().as_slice());
    write_lower(&mut out, "factor", &p.factor_l());
    fmt_floats(&mut out, "nll_trace", &m.nll_trace);
    let _ = writeln!(out, "converged {}", m.converged);
    out.push_str("end\n");
    out
}

pub fn mtg_to_string(m: &MultitaskModel) -> String {
    let mut out = String::new();
    write_header(&mut out, "MTG");
    out.push_str("tasks");
    for t in &m.tasks {
        let _ = write!(out, " {t}");
    }
    out.push('\n');
    write_schema(&mut out, &m.schema);
    fmt_floats(&mut out, "scaling_mean", &m.scaling.mean);
    fmt_floats(&mut out, "scaling_scale", &m.scaling.scale);
    write_kernel(&mut out, &m.params.kernel);
    write_lower(&mut out, "task_factor", m.params.task.factor());
    fmt_floats(&mut out, "noise", m.params.noise.variances());
    fmt_floats(&mut out, "means", &m.params.means);
    fmt_floats(&mut out, "mll_trace", &m.mll_trace);
    let _ = writeln!(out, "converged {}", m.converged);
    let _ = writeln!(out, "samples {}", m.raw_inputs().len());
    for (x, y) in m.raw_inputs().iter().zip(m.targets()) {
        out.push('s');
        for v in x {
            let _ = write!(out, " {v:e}");
        }
        out.push_str(" |");
        for v in y {
            match v {
                Some(v) => {
                    let _ = write!(out, " {v:e}");
                }
                None => out.push_str(" NA"),
            }
        }
        out.push('\n');
    }
    out.push_str("end\n");
    out
}

pub fn model_to_string(m: &TrainedModel) -> String {
    match m {
        TrainedModel::Gb(g) => gb_to_string(g),
        TrainedModel::Mtg(t) => mtg_to_string(t),
    }
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            inner: text.lines().enumerate(),
            last: 0,
        }
    }

    fn err(&self, msg: impl std::fmt::Display) -> Error {
        Error::ModelFormat(format!("line {}: {msg}", self.last))
    }

    fn raw(&mut self) -> Result<&'a str> {
        match self.inner.next() {
            Some((i, l)) => {
                self.last = i + 1;
                Ok(l)
            }
            None => Err(Error::ModelFormat(format!("unexpected end of file after line {}", self.last))),
        }
    }

    /// Next line, which must start with `key`; returns the remainder.
    fn keyed(&mut self, key: &str) -> Result<&'a str> {
        let line = self.raw()?;
        match line.split_once(' ') {
            Some((k, rest)) if k == key => Ok(rest),
            None if line == key => Ok(""),
            _ => Err(self.err(format!("expected '{key}', found '{line}'"))),
        }
    }

    fn parse<T: FromStr>(&self, s: &str) -> Result<T> {
        s.parse().map_err(|_| self.err(format!("cannot parse '{s}'")))
    }

    fn floats(&mut self, key: &str) -> Result<Vec<f64>> {
        let rest = self.keyed(key)?;
        rest.split_whitespace().map(|t| self.parse(t)).collect()
    }

    fn float(&mut self, key: &str) -> Result<f64> {
        let v = self.floats(key)?;
        if v.len() != 1 {
            return Err(self.err(format!("'{key}' expects one value")));
        }
        Ok(v[0])
    }

    fn count(&mut self, key: &str) -> Result<usize> {
        let rest = self.keyed(key)?;
        self.parse(rest.trim())
    }

    fn schema(&mut self) -> Result<FeatureSchema> {
        let d = self.count("features")?;
        let names = (0..d).map(|_| self.keyed("feature").map(str::to_string)).collect::<Result<Vec<_>>>()?;
        FeatureSchema::new(names)
    }

    fn kernel(&mut self) -> Result<KernelSpec> {
        let kind: KernelKind = self.keyed("kernel")?.parse()?;
        let sigma2 = self.float("sigma2")?;
        let lengthscales = self.floats("lengthscales")?;
        let alpha = self.float("alpha")?;
        let period = self.float("period")?;
        let lambda = self.floats("lambda")?;
        if lambda.len() != 2 {
            return Err(self.err("'lambda' expects two values"));
        }
        let spec = KernelSpec {
            kind,
            sigma2,
            lengthscales,
            alpha,
            period,
            lambda1: lambda[0],
            lambda2: lambda[1],
        };
        spec.validate()?;
        Ok(spec)
    }

    fn lower(&mut self, key: &str) -> Result<DMatrix<f64>> {
        let n = self.count(key)?;
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            let row = self.floats("r")?;
            if row.len() != i + 1 {
                return Err(self.err(format!("row {i} of '{key}' has {} values", row.len())));
            }
            for (j, v) in row.into_iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        Ok(m)
    }

    fn boolean(&mut self, key: &str) -> Result<bool> {
        let rest = self.keyed(key)?;
        self.parse(rest.trim())
    }

    fn finish(&mut self) -> Result<()> {
        self.keyed("end")?;
        if self.inner.next().is_some() {
            return Err(self.err("trailing content after 'end'"));
        }
        Ok(())
    }
}

pub fn model_from_str(text: &str) -> Result<TrainedModel> {
    let mut lines = Lines::new(text);
    let version: u32 = {
        let v = lines.keyed("SIRA-MODEL")?;
        lines.parse(v.trim())?
    };
    if version != MODEL_FORMAT_VERSION {
        return Err(Error::ModelFormat(format!(
            "format version {version} is not supported (expected {MODEL_FORMAT_VERSION})"
        )));
    }
    match lines.keyed("variant")? {
        "GB" => read_gb(&mut lines).map(TrainedModel::Gb),
        "MTG" => read_mtg(&mut lines).map(TrainedModel::Mtg),
        other => Err(lines.err(format!("unknown variant '{other}'"))),
    }
}

fn read_gb(lines: &mut Lines<'_>) -> Result<GbModel> {
    let isotope: Isotope = lines.keyed("isotope")?.parse()?;
    let schema = lines.schema()?;
    let f0 = lines.float("f0")?;
    let learning_rate = lines.float("learning_rate")?;
    let n_trees = lines.count("trees")?;
    let mut trees = Vec::with_capacity(n_trees);
    for _ in 0..n_trees {
        let rest = lines.keyed("tree")?;
        let mut parts = rest.split_whitespace();
        let (w, n) = match (parts.next(), parts.next()) {
            (Some(w), Some(n)) => (lines.parse::<f64>(w)?, lines.parse::<usize>(n)?),
            _ => return Err(lines.err("tree header needs weight and node count")),
        };
        let mut body = Vec::with_capacity(n);
        for _ in 0..n {
            body.push(lines.raw()?);
        }
        let mut it = body.into_iter();
        let tree = RegressionTree::from_preorder(&mut it)?;
        if it.next().is_some() {
            return Err(lines.err("tree node count does not match its structure"));
        }
        if tree.max_feature().is_some_and(|f| f >= schema.dim()) {
            return Err(lines.err("tree splits on a feature outside the schema"));
        }
        trees.push((tree, w));
    }
    let kernel = lines.kernel()?;
    let noise = lines.float("noise")?;
    let extra_jitter = lines.float("extra_jitter")?;
    let n = lines.count("inputs")?;
    let inputs = (0..n).map(|_| lines.floats("x")).collect::<Result<Vec<_>>>()?;
    let weights = DVector::from_vec(lines.floats("weights")?);
    let factor = lines.lower("factor")?;
    let posterior = GpPosterior::from_parts(inputs, kernel, noise, factor, extra_jitter, weights)?;
    let nll_trace = lines.floats("nll_trace")?;
    let converged = lines.boolean("converged")?;
    lines.finish()?;
    Ok(GbModel {
        isotope,
        schema,
        ensemble: BoostedEnsemble {
            f0,
            learning_rate,
            trees,
        },
        posterior,
        nll_trace,
        converged,
    })
}

fn read_mtg(lines: &mut Lines<'_>) -> Result<MultitaskModel> {
    let tasks = lines
        .keyed("tasks")?
        .split_whitespace()
        .map(Isotope::from_str)
        .collect::<Result<Vec<_>>>()?;
    let schema = lines.schema()?;
    let scaling = FeatureScaling {
        mean: lines.floats("scaling_mean")?,
        scale: lines.floats("scaling_scale")?,
    };
    let kernel = lines.kernel()?;
    let task = TaskCovariance::new(lines.lower("task_factor")?)?;
    let noise = NoiseModel::new(lines.floats("noise")?)?;
    let means = lines.floats("means")?;
    let mll_trace = lines.floats("mll_trace")?;
    let converged = lines.boolean("converged")?;
    let n = lines.count("samples")?;
    let mut inputs = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let rest = lines.keyed("s")?;
        let (x, y) = rest.split_once('|').ok_or_else(|| lines.err("sample row lacks '|'"))?;
        inputs.push(x.split_whitespace().map(|t| lines.parse(t)).collect::<Result<Vec<f64>>>()?);
        targets.push(
            y.split_whitespace()
                .map(|t| if t == "NA" { Ok(None) } else { lines.parse(t).map(Some) })
                .collect::<Result<Vec<Option<f64>>>>()?,
        );
    }
    lines.finish()?;
    let params = MtgParams {
        kernel,
        task,
        noise,
        means,
    };
    MultitaskModel::from_parts(tasks, schema, scaling, params, inputs, targets, mll_trace, converged)
}

pub fn write_model(path: impl AsRef<Path>, model: &TrainedModel) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, model_to_string(model)).map_err(|e| Error::io(path, e))
}

pub fn read_model(path: impl AsRef<Path>) -> Result<TrainedModel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    model_from_str(&text).map_err(|e| match e {
        Error::ModelFormat(msg) => Error::ModelFormat(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_version_and_variant() {
        assert!(matches!(model_from_str("SIRA-MODEL 99\nvariant GB\n"), Err(Error::ModelFormat(_))));
        assert!(matches!(model_from_str("SIRA-MODEL 1\nvariant XX\n"), Err(Error::ModelFormat(_))));
        let e = model_from_str("SIRA-MODEL 1\nvariant GB\nisotope d18O\nfeatures x\n").unwrap_err();
        assert!(e.to_string().contains("line 4"), "{e}");
    }
}
