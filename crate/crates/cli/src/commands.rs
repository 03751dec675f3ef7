use std::fmt::Write as _;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use sira_core::boosting::gpboost_train;
use sira_core::data::{
    drop_sparse_variables, ingest_samples, read_atmospheric_csv, read_dataset, select_features, write_dataset,
    write_samples, Atmosphere, Dataset, Isotope,
};
use sira_core::eval::{
    ablation_suite, generate_world, kfold_cv, reports_csv, reports_table, train_test_split, EvalConfig,
    ModelVariant, SyntheticWorldSpec,
};
use sira_core::model_io::{read_model, write_model, TrainedModel};
use sira_core::multitask::{feature_importance, fit_multitask, task_dependency, MultitaskModel};
use sira_core::raster::{meta_text, render_isoscape, write_layer, Bounds};
use sira_core::verify::{curve_csv, read_claims, report_csv, run_perturbation_experiment};
use sira_core::Error;

use crate::config::RunConfig;
use crate::CliError;

type CmdResult = Result<(), CliError>;

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn parse_isotope(field: &str, s: &str) -> Result<Isotope, CliError> {
    s.parse().map_err(|_| CliError::Usage(format!("{field}: unknown isotope '{s}'")))
}

fn load_atmosphere(path: &Path) -> Result<Atmosphere, Error> {
    Atmosphere::new(&read_atmospheric_csv(path)?)
}

fn load_mtg(path: &Path) -> Result<MultitaskModel, CliError> {
    match read_model(path)? {
        TrainedModel::Mtg(m) => Ok(m),
        TrainedModel::Gb(_) => Err(CliError::Domain(format!(
            "{}: this command needs an MTG model, found GB",
            path.display()
        ))),
    }
}

pub fn synth(cfg: &RunConfig, out: &Path) -> CmdResult {
    let spec = SyntheticWorldSpec {
        seed: cfg.seed()?,
        n_samples: cfg.get("synth.samples")?,
        task_correlation: cfg.get("synth.task_correlation")?,
        grid_step: cfg.get("synth.grid_step")?,
        n_years: cfg.get("synth.years")?,
        ..SyntheticWorldSpec::default()
    };
    let world = generate_world(&spec)?;
    world.write(out)?;
    let (train, test) = train_test_split(world.samples.len(), cfg.get("synth.test_fraction")?, spec.seed)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| world.samples[i].clone()).collect::<Vec<_>>();
    write_samples(out.join("train.csv"), &pick(&train))?;
    write_samples(out.join("test.csv"), &pick(&test))?;
    log::info!("wrote {} samples ({} train, {} test) to {}", world.samples.len(), train.len(), test.len(), out.display());
    Ok(())
}

pub fn ingest(cfg: &RunConfig, samples: &Path, atmosphere: &Path, out: &Path) -> CmdResult {
    let raw = ingest_samples(samples)?;
    let series = read_atmospheric_csv(atmosphere)?;
    let kept = drop_sparse_variables(&series, &raw, cfg.get("drop_threshold")?)?;
    let atmo = Atmosphere::new(&kept)?;
    let mut dataset = Dataset::from_atmosphere(&raw, &atmo, cfg.aggregation()?)?;
    let k: usize = cfg.get("select_k")?;
    if k > 0 {
        let idx = select_features(&dataset, k)?;
        dataset = dataset.project(&idx)?;
    }
    write_dataset(out, &dataset)?;
    log::info!("dataset: {} samples, {} features", dataset.len(), dataset.schema().dim());
    Ok(())
}

pub fn train_gb(cfg: &RunConfig, data: &Path, out: &Path, isotope: &str) -> CmdResult {
    let iso = parse_isotope("--isotope", isotope)?;
    let dataset = read_dataset(data)?;
    let model = gpboost_train(&dataset, iso, &cfg.gb()?)?;
    log::info!("trained GB for {iso}: {} trees, converged {}", model.ensemble.n_trees(), model.converged);
    write_model(out, &TrainedModel::Gb(model))?;
    Ok(())
}

pub fn train_mtg(cfg: &RunConfig, data: &Path, out: &Path) -> CmdResult {
    let dataset = read_dataset(data)?;
    let model = fit_multitask(&dataset, &cfg.mtg()?)?;
    log::info!(
        "trained MTG on tasks {:?}: {} iterations, converged {}",
        model.tasks.iter().map(|t| t.name()).collect::<Vec<_>>(),
        model.mll_trace.len(),
        model.converged
    );
    write_model(out, &TrainedModel::Mtg(model))?;
    Ok(())
}

pub fn predict(model_path: &Path, data: &Path, out: &Path) -> CmdResult {
    let model = read_model(model_path)?;
    let dataset = read_dataset(data)?;
    let idx: Vec<usize> = model
        .schema()
        .names()
        .iter()
        .map(|name| {
            dataset.schema().index_of(name).ok_or_else(|| {
                CliError::Domain(format!("{}: feature '{name}' required by the model is missing", data.display()))
            })
        })
        .collect::<Result<_, _>>()?;
    let isotopes = model.isotopes();
    let mut csv = String::from("lat,lon");
    for iso in &isotopes {
        let _ = write!(csv, ",mean_{iso},var_{iso}");
    }
    csv.push('\n');
    for s in dataset.samples() {
        let features: Vec<f64> = idx.iter().map(|&i| s.features[i]).collect();
        let pred = model.predict(s.location, &features)?;
        let _ = write!(csv, "{},{}", s.location.lat(), s.location.lon());
        for k in 0..isotopes.len() {
            let _ = write!(csv, ",{},{}", pred.mean[k], pred.covariance[(k, k)].max(0.0));
        }
        csv.push('\n');
    }
    write_text(out, &csv)?;
    Ok(())
}

pub fn verify(cfg: &RunConfig, model: &Path, claims: &Path, atmosphere: &Path, out: &Path) -> CmdResult {
    let model = load_mtg(model)?;
    let atmo = load_atmosphere(atmosphere)?;
    let agg = cfg.aggregation()?;
    let claims = read_claims(claims, cfg.get("alpha")?)?;
    let mut rows = Vec::with_capacity(claims.len());
    for c in &claims {
        let r = sira_core::verify::verify(&model, &atmo, agg, c)
            .map_err(|e| CliError::Domain(format!("claim '{}': {e}", c.id)))?;
        log::info!("claim {}: chi2 {:.3} dof {} p {:.4} {}", c.id, r.chi2, r.dof, r.p_value, r.decision);
        rows.push((c.id.clone(), r));
    }
    write_text(out, &report_csv(&rows))?;
    Ok(())
}

fn parse_bounds(s: &str) -> Result<Bounds, CliError> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("--bounds '{s}': expected lat_min,lat_max,lon_min,lon_max")))?;
    if v.len() != 4 {
        return Err(CliError::Usage(format!("--bounds '{s}': expected 4 numbers, got {}", v.len())));
    }
    Bounds::new(v[0], v[1], v[2], v[3]).map_err(|e| CliError::Usage(format!("--bounds: {e}")))
}

fn timestamp() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or_else(|| SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0))
}

pub fn isoscape(
    cfg: &RunConfig,
    model_path: &Path,
    atmosphere: &Path,
    bounds: &str,
    isotope: &str,
    prefix: &Path,
) -> CmdResult {
    let bounds = parse_bounds(bounds)?;
    let iso = parse_isotope("--isotope", isotope)?;
    let model = read_model(model_path)?;
    let atmo = load_atmosphere(atmosphere)?;
    let (mean, std) = render_isoscape(&model, &atmo, cfg.aggregation()?, &bounds, cfg.get("raster.cell_size")?, iso)?;
    let ts = timestamp();
    let stem = prefix.display().to_string();
    write_layer(&mean, format!("{stem}_mean.asc"), &meta_text(&model, iso, "mean", ts))?;
    write_layer(&std, format!("{stem}_std.asc"), &meta_text(&model, iso, "std", ts))?;
    log::info!("rendered {}x{} grid to {stem}_mean.asc and {stem}_std.asc", mean.nrows, mean.ncols);
    Ok(())
}

pub fn importance(model: &Path, out_dir: &Path) -> CmdResult {
    let model = load_mtg(model)?;
    create_dir(out_dir)?;
    let report = feature_importance(&model);
    if !report.note.is_empty() {
        log::info!("{}", report.note);
    }
    write_text(&out_dir.join("importance.csv"), &report.to_csv())?;
    write_text(&out_dir.join("task_dependency.csv"), &task_dependency(&model).to_csv())?;
    Ok(())
}

pub fn experiment(cfg: &RunConfig, model: &Path, atmosphere: &Path, test: &Path, out: &Path) -> CmdResult {
    let model = load_mtg(model)?;
    let atmo = load_atmosphere(atmosphere)?;
    let samples = ingest_samples(test)?;
    let curve = run_perturbation_experiment(&model, &atmo, cfg.aggregation()?, &samples, &cfg.experiment()?)?;
    for p in &curve {
        log::info!("d = {} km: accuracy {:.3} over {} trials", p.d_km, p.accuracy, p.trials);
    }
    write_text(out, &curve_csv(&curve))?;
    Ok(())
}

pub fn eval(cfg: &RunConfig, data: &Path, out_dir: &Path, variant: Option<&str>) -> CmdResult {
    let dataset = read_dataset(data)?;
    let ecfg = EvalConfig {
        folds: cfg.get("eval.folds")?,
        seed: cfg.seed()?,
        isotopes: cfg.eval_isotopes()?,
        gb: cfg.gb()?,
        mtg: cfg.mtg()?,
    };
    let reports = match variant {
        Some(v) => {
            let v: ModelVariant = v.parse().map_err(|e: Error| CliError::Usage(format!("--model: {e}")))?;
            vec![kfold_cv(&dataset, v, &ecfg)?]
        }
        None => ablation_suite(&dataset, &ecfg)?,
    };
    create_dir(out_dir)?;
    write_text(&out_dir.join("metrics.csv"), &reports_csv(&reports))?;
    let table = reports_table(&reports);
    write_text(&out_dir.join("metrics.txt"), &table)?;
    print!("{table}");
    Ok(())
}
