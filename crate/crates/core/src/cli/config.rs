//! JSON run configuration, named presets and dotted-path overrides.
//!
//! Loading order: preset (if the file or an override names one) or the
//! built-in defaults, then the file merged on top, then every `--set`
//! override in command-line order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{load_csv, load_libsvm, standardize, subsample, synth_two_gaussians, Dataset};
use crate::error::{Error, Result};
use crate::kernel::GaussianKernel;
use crate::objective::{Loss, Problem, ScalingPreset};
use crate::optimize::{LineSearchConfig, Method, OptimizerConfig, SampleSize, StepInit};

/// Where the training data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic {
        n: usize,
        d: usize,
        separation: f64,
        #[serde(default)]
        seed: u64,
    },
    Libsvm {
        path: PathBuf,
    },
    Csv {
        path: PathBuf,
        #[serde(default)]
        label_column: usize,
        #[serde(default)]
        has_header: bool,
    },
}

/// Which diagnostic sweeps `diag` runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    Mu,
    Ratio,
    Spectral,
    Containment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContainmentConfig {
    pub gamma: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub trials: usize,
    /// Feature counts to test; the sufficient count from the bound when absent.
    pub m_grid: Option<Vec<usize>>,
}

impl Default for ContainmentConfig {
    fn default() -> Self {
        Self {
            gamma: 1e-2,
            epsilon: 0.5,
            delta: 0.1,
            trials: 50,
            m_grid: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagConfig {
    pub sweeps: Vec<Sweep>,
    /// Runs averaged per sweep value.
    pub runs: usize,
    /// RFN iterations per run in the μ sweep.
    pub mu_iterations: usize,
    pub mu_grid: Vec<f64>,
    /// RFN iterations per run in the ratio sweep.
    pub ratio_iterations: usize,
    pub ratio_grid: Vec<f64>,
    pub ratio_mu: f64,
    pub spectral_m_grid: Vec<usize>,
    pub spectral_trials: usize,
    pub containment: ContainmentConfig,
}

impl Default for DiagConfig {
    fn default() -> Self {
        Self {
            sweeps: vec![Sweep::Mu, Sweep::Ratio, Sweep::Spectral, Sweep::Containment],
            runs: 10,
            mu_iterations: 15,
            mu_grid: vec![1.0, 1e-4, 1e-8, 1e-12, 1e-16],
            ratio_iterations: 50,
            ratio_grid: vec![0.1, 0.4, 0.7],
            ratio_mu: 1e-6,
            spectral_m_grid: vec![32, 128, 512, 2048],
            spectral_trials: 20,
            containment: ContainmentConfig::default(),
        }
    }
}

/// Everything one `train`, `bench` or `diag` invocation needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Name of the preset this config started from, if any.
    pub preset: Option<String>,
    pub dataset: DatasetSource,
    pub standardize: bool,
    /// Keep this many rows, drawn with `subsample_seed`.
    pub subsample: Option<usize>,
    pub subsample_seed: u64,
    pub sigma: f64,
    pub lambda: f64,
    pub loss: Loss,
    pub scaling: ScalingPreset,
    pub methods: Vec<OptimizerConfig>,
    pub repeats: usize,
    /// Run `i` uses seed `seed_base + i` for its start point and sampling.
    pub seed_base: u64,
    /// Standard deviation of the Gaussian initial point.
    pub init_scale: f64,
    pub record_iterates: bool,
    pub out_dir: PathBuf,
    pub diag: DiagConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: None,
            dataset: DatasetSource::Synthetic {
                n: 1000,
                d: 5,
                separation: 2.0,
                seed: 0,
            },
            standardize: false,
            subsample: None,
            subsample_seed: 0,
            sigma: 1.0,
            lambda: 1e-5,
            loss: Loss::Logistic,
            scaling: ScalingPreset::Experiment,
            methods: vec![OptimizerConfig::for_method(Method::Rfn)],
            repeats: 10,
            seed_base: 0,
            init_scale: 1.0,
            record_iterates: false,
            out_dir: PathBuf::from("out"),
            diag: DiagConfig::default(),
        }
    }
}

fn method_config(method: Method, sufficient_decrease: f64, shrink: f64, init_policy: StepInit) -> OptimizerConfig {
    OptimizerConfig {
        line_search: LineSearchConfig {
            sufficient_decrease,
            shrink,
            init_policy,
            ..LineSearchConfig::default()
        },
        sample_size: SampleSize::Ratio(0.1),
        mu: 1e-4,
        cg_tolerance: 1e-6,
        lbfgs_memory: 50,
        ..OptimizerConfig::for_method(method)
    }
}

/// Names accepted by [`preset`].
pub const PRESETS: [&str; 2] = ["covertype-paper", "codrna-paper"];

/// The Covertype and Cod-RNA benchmark protocols: 5000 random training rows,
/// 40 repeats, 10% features or subset, `μ = 1e-4`, per-method Armijo
/// constants. The data path must still be supplied.
pub fn preset(name: &str) -> Result<RunConfig> {
    let (file, sigma, randomized_shrink, randomized_init) = match name {
        "covertype-paper" => ("covtype.libsvm.binary", 0.5, 0.2, StepInit::InverseNewtonDecrementSq),
        "codrna-paper" => ("cod-rna", 2.0, 0.25, StepInit::DoublePrevious),
        other => {
            return Err(Error::Config(format!(
                "unknown preset {other:?}; expected one of {}",
                PRESETS.join(", ")
            )))
        }
    };
    Ok(RunConfig {
        preset: Some(name.to_string()),
        dataset: DatasetSource::Libsvm {
            path: PathBuf::from(file),
        },
        standardize: true,
        subsample: Some(5000),
        sigma,
        lambda: 1e-5,
        methods: vec![
            method_config(Method::Newton, 0.3, 0.5, StepInit::Unit),
            method_config(Method::Lbfgs, 0.3, 0.5, StepInit::Unit),
            method_config(Method::Ssncg, 0.3, randomized_shrink, randomized_init),
            method_config(Method::Rfn, 0.3, randomized_shrink, randomized_init),
        ],
        repeats: 40,
        ..RunConfig::default()
    })
}

/// Merges `top` into `base`. Objects merge key by key; anything else is
/// replaced. Objects whose `source` tags differ are replaced whole, so a
/// file can switch the dataset kind of a preset.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            let retagged = matches!((b.get("source"), t.get("source")), (Some(x), Some(y)) if x != y);
            if retagged {
                *b = t;
                return;
            }
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, t) => *slot = t,
    }
}

/// Parses `key.path=value`. The value is read as JSON when possible and as a
/// plain string otherwise, so `--set dataset.path=data.txt` needs no quotes.
pub fn parse_override(raw: &str) -> Result<(Vec<String>, Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {raw:?} is not key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(Error::Config(format!("override key {key:?} has an empty segment")));
    }
    let value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
    Ok((path, value))
}

/// Sets the leaf at `path`, creating missing object keys. Array segments
/// must be existing indices.
pub fn set_path(root: &mut Value, path: &[String], value: Value) -> Result<()> {
    let mut node = root;
    for (depth, segment) in path.iter().enumerate() {
        let last = depth + 1 == path.len();
        if !node.is_object() && !node.is_array() {
            *node = Value::Object(Default::default());
        }
        node = match node {
            Value::Object(map) => {
                if last {
                    map.insert(segment.clone(), value);
                    return Ok(());
                }
                map.entry(segment.clone())
                    .or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let len = items.len();
                let index: usize = segment
                    .parse()
                    .map_err(|_| Error::Config(format!("{:?} indexes an array; expected a number", path.join("."))))?;
                let slot = items.get_mut(index).ok_or_else(|| {
                    Error::Config(format!(
                        "index {index} out of range (length {len}) in {:?}",
                        path.join(".")
                    ))
                })?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => unreachable!("scalar parents are replaced above"),
        };
    }
    Err(Error::Config("empty override path".into()))
}

impl RunConfig {
    /// Reads a JSON config file and applies `overrides` (`key.path=value`).
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let file: Value = serde_json::from_str(&text)?;
        Self::from_value(file, overrides)
    }

    /// Builds a config from an already-parsed JSON document.
    pub fn from_value(file: Value, overrides: &[String]) -> Result<Self> {
        if !file.is_object() {
            return Err(Error::Config("config must be a JSON object".into()));
        }
        let parsed: Vec<(Vec<String>, Value)> = overrides.iter().map(|o| parse_override(o)).collect::<Result<_>>()?;
        let preset_override = parsed
            .iter()
            .rev()
            .find(|(p, _)| p.len() == 1 && p[0] == "preset")
            .map(|(_, v)| v.clone());
        let preset_name = match preset_override.as_ref().or(file.get("preset")) {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(other) => return Err(Error::Config(format!("preset must be a string, found {other}"))),
        };
        let base_config = match &preset_name {
            Some(name) => preset(name)?,
            None => RunConfig::default(),
        };
        let mut value = serde_json::to_value(base_config)?;
        merge(&mut value, file);
        for (path, v) in parsed {
            set_path(&mut value, &path, v)?;
        }
        let config: RunConfig = serde_json::from_value(value)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma = {}", self.sigma)));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda = {}", self.lambda)));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Config(format!("init_scale = {}", self.init_scale)));
        }
        let mut labels: Vec<String> = self.methods.iter().map(OptimizerConfig::label).collect();
        labels.sort();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config(
                "method labels must be distinct; set `label` to tell repeats apart".into(),
            ));
        }
        for m in &self.methods {
            m.validate()
                .map_err(|e| Error::Config(format!("method {}: {e}", m.label())))?;
        }
        Ok(())
    }

    /// Loads, subsamples and standardizes the dataset as configured.
    pub fn dataset(&self) -> Result<Dataset> {
        let mut ds = match &self.dataset {
            DatasetSource::Synthetic { n, d, separation, seed } => synth_two_gaussians(*n, *d, *separation, *seed)?,
            DatasetSource::Libsvm { path } => load_libsvm(path)?,
            DatasetSource::Csv {
                path,
                label_column,
                has_header,
            } => load_csv(path, *label_column, *has_header)?,
        };
        if let Some(n_keep) = self.subsample {
            ds = subsample(&ds, n_keep, self.subsample_seed)?;
        }
        if self.standardize {
            ds = standardize(&ds);
        }
        Ok(ds)
    }

    pub fn problem(&self) -> Result<Problem> {
        let ds = self.dataset()?;
        Problem::new(
            &ds,
            GaussianKernel::new(self.sigma)?,
            self.loss,
            self.lambda,
            self.scaling,
        )
    }

    /// The first RFN entry of `methods`, or the RFN defaults.
    pub fn rfn_method(&self) -> OptimizerConfig {
        self.methods
            .iter()
            .find(|m| m.method == Method::Rfn)
            .cloned()
            .unwrap_or_else(|| OptimizerConfig::for_method(Method::Rfn))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn defaults_roundtrip_through_json() {
        let c = RunConfig::default();
        let back: RunConfig = serde_json::from_value(serde_json::to_value(&c).unwrap()).unwrap();
        assert_eq!(c, back);
        assert_eq!(RunConfig::from_value(json!({}), &[]).unwrap(), c);
    }

    #[test]
    fn presets_carry_protocol_constants() {
        let c = preset("covertype-paper").unwrap();
        assert_eq!((c.sigma, c.lambda, c.repeats, c.subsample), (0.5, 1e-5, 40, Some(5000)));
        let ls = |m: Method| c.methods.iter().find(|x| x.method == m).unwrap().line_search;
        assert_eq!(
            (ls(Method::Newton).sufficient_decrease, ls(Method::Newton).shrink),
            (0.3, 0.5)
        );
        assert_eq!(ls(Method::Rfn).shrink, 0.2);
        assert_eq!(ls(Method::Rfn).init_policy, StepInit::InverseNewtonDecrementSq);
        let rfn = c.rfn_method();
        assert_eq!((rfn.mu, rfn.sample_size), (1e-4, SampleSize::Ratio(0.1)));
        let d = preset("codrna-paper").unwrap();
        assert_eq!(d.sigma, 2.0);
        assert_eq!(d.rfn_method().line_search.shrink, 0.25);
        assert!(preset("mnist").is_err());
    }

    #[test]
    fn file_merges_over_preset_and_overrides_win() {
        let file = json!({
            "preset": "codrna-paper",
            "dataset": {"source": "synthetic", "n": 40, "d": 2, "separation": 1.0},
            "lambda": 1e-3
        });
        let c = RunConfig::from_value(
            file,
            &[
                "methods.3.mu=1e-6".into(),
                "diag.mu_grid=[1, 0.5]".into(),
                "out_dir=results".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.sigma, 2.0);
        assert_eq!(c.lambda, 1e-3);
        assert!(matches!(c.dataset, DatasetSource::Synthetic { n: 40, seed: 0, .. }));
        assert_eq!(c.methods[3].mu, 1e-6);
        assert_eq!(c.diag.mu_grid, vec![1.0, 0.5]);
        assert_eq!(c.out_dir, PathBuf::from("results"));
    }

    #[test]
    fn preset_can_be_chosen_by_override() {
        let c = RunConfig::from_value(json!({}), &["preset=covertype-paper".into()]).unwrap();
        assert_eq!(c.sigma, 0.5);
    }

    #[test]
    fn bad_configs_are_rejected() {
        assert!(RunConfig::from_value(json!({"methods": []}), &[]).is_err());
        assert!(RunConfig::from_value(json!({"repeats": 0}), &[]).is_err());
        assert!(RunConfig::from_value(json!({"unknown_key": 1}), &[]).is_err());
        assert!(RunConfig::from_value(json!({}), &["methods.5.mu=1".into()]).is_err());
        assert!(RunConfig::from_value(json!({}), &["novalue".into()]).is_err());
        assert!(RunConfig::from_value(json!({"methods": [{"method": "rfn"}, {"method": "rfn"}]}), &[]).is_err());
        assert!(RunConfig::from_value(json!([]), &[]).is_err());
    }

    #[test]
    fn override_values_parse_as_json_or_string() {
        let (path, v) = parse_override("a.b=3").unwrap();
        assert_eq!(path, vec!["a", "b"]);
        assert_eq!(v, json!(3));
        assert_eq!(parse_override("p=data/x.txt").unwrap().1, json!("data/x.txt"));
        assert_eq!(parse_override("p=true").unwrap().1, json!(true));
        assert!(parse_override("a..b=1").is_err());
    }
}
