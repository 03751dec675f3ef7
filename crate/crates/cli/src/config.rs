//! `key = value` run configuration with a fixed key set.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use sira_core::boosting::GbConfig;
use sira_core::data::{AggregationMode, Isotope};
use sira_core::multitask::MtgConfig;
use sira_core::verify::{PerturbationConfig, PerturbationMode};

/// Every accepted key with its default value.
const KEYS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("threads", "0"),
    ("aggregation", "mean"),
    ("drop_threshold", "0.5"),
    ("select_k", "0"),
    ("alpha", "0.05"),
    ("gb.n_trees", "100"),
    ("gb.learning_rate", "0.03"),
    ("gb.max_depth", "5"),
    ("gb.min_leaf", "5"),
    ("gb.inner_iters", "10"),
    ("gb.final_iters", "500"),
    ("gb.max_halvings", "10"),
    ("mtg.epochs", "500"),
    ("mtg.learning_rate", "0.01"),
    ("mtg.rel_tol", "1e-8"),
    ("mtg.tasks", ""),
    ("mtg.min_task_count", "3"),
    ("experiment.distances", "500,1000,1500,2000,2500,3000,3500,4000,4500,5000"),
    ("experiment.trials", "500"),
    ("experiment.mode", "fixed"),
    ("eval.folds", "5"),
    ("eval.isotopes", ""),
    ("raster.cell_size", "0.5"),
    ("synth.samples", "300"),
    ("synth.task_correlation", "0.9"),
    ("synth.grid_step", "1.0"),
    ("synth.years", "1"),
    ("synth.test_fraction", "0.2"),
];

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str, source: &str) -> Result<(), ConfigError> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.trim().to_string();
                Ok(())
            }
            None => Err(ConfigError(format!("{source}: unknown configuration key '{key}'"))),
        }
    }

    /// Applies a `key = value` file; `#` starts a comment.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let source = format!("{}:{}", path.display(), i + 1);
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("{source}: expected 'key = value'")))?;
            self.set(k.trim(), v, &source)?;
        }
        Ok(())
    }

    /// Applies a `key=value` command-line override.
    pub fn apply_override(&mut self, kv: &str) -> Result<(), ConfigError> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| ConfigError(format!("--set '{kv}': expected key=value")))?;
        self.set(k.trim(), v, "--set")
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("key is in the fixed table")
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, ConfigError> {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|_| ConfigError(format!("configuration key '{key}': cannot parse '{raw}'")))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, ConfigError> {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| ConfigError(format!("configuration key '{key}': cannot parse '{s}'")))
            })
            .collect()
    }

    fn isotopes(&self, key: &str) -> Result<Option<Vec<Isotope>>, ConfigError> {
        let v: Vec<Isotope> = self.list(key)?;
        Ok(if v.is_empty() { None } else { Some(v) })
    }

    pub fn seed(&self) -> Result<u64, ConfigError> {
        self.get("seed")
    }

    pub fn aggregation(&self) -> Result<AggregationMode, ConfigError> {
        self.get("aggregation")
    }

    pub fn gb(&self) -> Result<GbConfig, ConfigError> {
        Ok(GbConfig {
            n_trees: self.get("gb.n_trees")?,
            learning_rate: self.get("gb.learning_rate")?,
            max_depth: self.get("gb.max_depth")?,
            min_leaf: self.get("gb.min_leaf")?,
            inner_iters: self.get("gb.inner_iters")?,
            final_iters: self.get("gb.final_iters")?,
            max_halvings: self.get("gb.max_halvings")?,
            ..GbConfig::default()
        })
    }

    pub fn mtg(&self) -> Result<MtgConfig, ConfigError> {
        Ok(MtgConfig {
            epochs: self.get("mtg.epochs")?,
            learning_rate: self.get("mtg.learning_rate")?,
            rel_tol: self.get("mtg.rel_tol")?,
            tasks: self.isotopes("mtg.tasks")?,
            min_task_count: self.get("mtg.min_task_count")?,
            ..MtgConfig::default()
        })
    }

    pub fn experiment(&self) -> Result<PerturbationConfig, ConfigError> {
        let mode: PerturbationMode = self.get("experiment.mode")?;
        Ok(PerturbationConfig {
            distances_km: self.list("experiment.distances")?,
            trials: self.get("experiment.trials")?,
            seed: self.seed()?,
            alpha: self.get("alpha")?,
            mode,
        })
    }

    pub fn eval_isotopes(&self) -> Result<Option<Vec<Isotope>>, ConfigError> {
        self.isotopes("eval.isotopes")
    }

    /// Resolved configuration, one `key = value` per line.
    pub fn dump(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse() {
        let c = RunConfig::default();
        assert_eq!(c.gb().unwrap(), GbConfig::default());
        let mtg = c.mtg().unwrap();
        assert_eq!(mtg, MtgConfig::default());
        assert_eq!(c.experiment().unwrap(), PerturbationConfig::default());
    }

    #[test]
    fn unknown_key_rejected() {
        let mut c = RunConfig::default();
        assert!(c.apply_override("gb.trees=3").unwrap_err().0.contains("gb.trees"));
        c.apply_override("mtg.tasks=d18O,d2H").unwrap();
        assert_eq!(c.mtg().unwrap().tasks, Some(vec![Isotope::D18O, Isotope::D2H]));
    }
}
