//! Flat `key=value` configuration with dotted group names.
//!
//! Values are resolved in order: built-in defaults, config file, `--set`
//! flags, then the dedicated `--seed`/`--out` flags. Unknown keys are errors.

use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::ValueEnum;
use gla_icl::training::OptimizerKind;
use gla_icl::{SgdConfig, TaskConfig, TestConfig};
use nalgebra::DMatrix;

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Kind {
    Constants,
    SweepLambda,
    TrainFlow,
    TrainSgd,
    McError,
    Baselines,
    Multilayer,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Constants => "constants",
            Kind::SweepLambda => "sweep-lambda",
            Kind::TrainFlow => "train-flow",
            Kind::TrainSgd => "train-sgd",
            Kind::McError => "mc-error",
            Kind::Baselines => "baselines",
            Kind::Multilayer => "multilayer",
        }
    }
}

const DEFAULT_LAMBDAS: &str =
    "0.05,0.1,0.15,0.2,0.25,0.3,0.35,0.4,0.45,0.5,0.55,0.6,0.65,0.7,0.75,0.8,0.85,0.9,0.95,1";

/// Keys with a default value.
const DEFAULTS: &[(&str, &str)] = &[
    ("task.d", "10"),
    ("task.n", "100"),
    ("task.gamma", "0.95"),
    ("task.sigma_w2", "1"),
    ("task.sigma_e2", "0.01"),
    ("lam", "0.9"),
    ("lambdas", DEFAULT_LAMBDAS),
    ("trials", "10000"),
    ("seed", "0"),
    ("init.fraction", "0.5"),
    ("init.theta", "identity"),
    ("flow.t_end", "1000"),
    ("sgd.mode", "reduced"),
    ("sgd.batch_size", "5000"),
    ("sgd.step_size", "0.01"),
    ("sgd.steps", "2000"),
    ("sgd.optimizer", "adamw"),
    ("sgd.beta1", "0.9"),
    ("sgd.beta2", "0.999"),
    ("sgd.weight_decay", "0.05"),
    ("sgd.init_std", "0.02"),
    ("baselines.gammas", "0.8,0.85,0.925,0.95,0.975"),
    ("baselines.length", "1000"),
    ("baselines.mu", "0.01"),
    ("baselines.forgetting", "0.98"),
    ("baselines.delta", "0.01"),
    ("baselines.tail_fraction", "0.2"),
    ("multilayer.layers", "1,2"),
    ("multilayer.init_std", "0.1"),
];

/// Keys that are absent unless given.
const OPTIONAL: &[&str] = &[
    "out",
    "task.lambda_diag",
    "flow.step",
    "test.m",
    "test.gamma",
    "test.sigma_w2",
    "test.sigma_e2",
    "test.lam_bar",
];

fn is_known(key: &str) -> bool {
    DEFAULTS.iter().any(|(k, _)| *k == key) || OPTIONAL.contains(&key)
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_text(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = split_assignment(line).map_err(|e| CliError::Config(format!("line {}: {e}", no + 1)))?;
        if out.insert(key.clone(), value).is_some() {
            return Err(CliError::Config(format!("line {}: duplicate key `{key}`", no + 1)));
        }
    }
    Ok(out)
}

fn split_assignment(s: &str) -> Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key=value, got `{s}`"))?;
    let (k, v) = (k.trim(), v.trim());
    if !is_known(k) {
        return Err(format!("unknown key `{k}`"));
    }
    if v.is_empty() {
        return Err(format!("empty value for key `{k}`"));
    }
    Ok((k.to_string(), v.to_string()))
}

/// Merged key/value view plus which keys the command line overrode.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub values: BTreeMap<String, String>,
    pub overrides: Vec<String>,
}

impl Resolved {
    pub fn new(file: Option<&str>, sets: &[String], seed: Option<u64>, out: Option<&str>) -> Result<Self, CliError> {
        let mut values: BTreeMap<String, String> =
            DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        let from_file = match file {
            Some(text) => parse_text(text)?,
            None => BTreeMap::new(),
        };
        let mut overrides = Vec::new();
        values.extend(from_file.clone());
        let mut flags = Vec::with_capacity(sets.len() + 2);
        for s in sets {
            flags.push(split_assignment(s).map_err(|e| CliError::Config(format!("--set: {e}")))?);
        }
        if let Some(seed) = seed {
            flags.push(("seed".into(), seed.to_string()));
        }
        if let Some(out) = out {
            flags.push(("out".into(), out.to_string()));
        }
        for (k, v) in flags {
            if from_file.get(&k).is_some_and(|old| *old != v) && !overrides.contains(&k) {
                overrides.push(k.clone());
            }
            values.insert(k, v);
        }
        Ok(Resolved { values, overrides })
    }

    /// Canonical `key=value` lines, sorted by key.
    pub fn echo(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn get<T: std::str::FromStr>(&self, key: &str, what: &str) -> Result<T, CliError> {
        let v = self.raw(key).ok_or_else(|| CliError::Config(format!("missing key `{key}`")))?;
        v.parse()
            .map_err(|_| CliError::Config(format!("invalid value for `{key}`: `{v}` (expected {what})")))
    }

    fn get_opt<T: std::str::FromStr>(&self, key: &str, what: &str) -> Result<Option<T>, CliError> {
        match self.raw(key) {
            Some(_) => self.get(key, what).map(Some),
            None => Ok(None),
        }
    }

    fn float(&self, key: &str) -> Result<f64, CliError> {
        let x: f64 = self.get(key, "a number")?;
        if !x.is_finite() {
            return Err(CliError::Config(format!("invalid value for `{key}`: must be finite")));
        }
        Ok(x)
    }

    fn count(&self, key: &str) -> Result<usize, CliError> {
        self.get(key, "a nonnegative integer")
    }

    fn list(&self, key: &str) -> Result<Vec<f64>, CliError> {
        let v = self.raw(key).unwrap_or("");
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| CliError::Config(format!("invalid entry `{s}` in `{key}` (expected a number)")))
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ThetaKind {
    Identity,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SgdMode {
    Reduced,
    Full,
}

#[derive(Clone, Debug)]
pub struct BaselineSpec {
    pub gammas: Vec<f64>,
    pub length: usize,
    pub mu: f64,
    pub forgetting: f64,
    pub delta: f64,
    pub tail_fraction: f64,
}

#[derive(Clone, Debug)]
pub struct ExperimentSpec {
    pub kind: Kind,
    pub task: TaskConfig,
    pub lam: f64,
    pub test: Option<TestConfig>,
    pub init_fraction: f64,
    pub init_theta: ThetaKind,
    pub flow_t_end: f64,
    pub flow_step: Option<f64>,
    pub sgd: SgdConfig,
    pub sgd_mode: SgdMode,
    pub sgd_init_std: f64,
    pub lambdas: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    pub out_path: Option<PathBuf>,
    pub baselines: BaselineSpec,
    pub layers: Vec<usize>,
    pub layer_init_std: f64,
    pub resolved: Resolved,
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn unit_interval(key: &str, x: f64) -> Result<f64, CliError> {
    if x > 0.0 && x <= 1.0 {
        Ok(x)
    } else {
        Err(invalid(format!("`{key}` must lie in (0, 1], got {x}")))
    }
}

impl ExperimentSpec {
    pub fn from_resolved(kind: Kind, r: Resolved) -> Result<Self, CliError> {
        let d = r.count("task.d")?;
        let n = r.count("task.n")?;
        let gamma = r.float("task.gamma")?;
        let sw2 = r.float("task.sigma_w2")?;
        let se2 = r.float("task.sigma_e2")?;
        let cov = match r.raw("task.lambda_diag") {
            Some(_) => {
                let diag = r.list("task.lambda_diag")?;
                if diag.len() != d {
                    return Err(invalid(format!(
                        "`task.lambda_diag` has {} entries but task.d = {d}",
                        diag.len()
                    )));
                }
                DMatrix::from_diagonal(&nalgebra::DVector::from_vec(diag))
            }
            None => DMatrix::identity(d, d),
        };
        let task = TaskConfig::new(n, gamma, sw2, se2, cov).map_err(|e| invalid(format!("task: {e}")))?;
        let lam = unit_interval("lam", r.float("lam")?)?;

        let test_keys = ["test.m", "test.gamma", "test.sigma_w2", "test.sigma_e2", "test.lam_bar"];
        let test = if test_keys.iter().any(|k| r.raw(k).is_some()) {
            let m = r.get_opt("test.m", "a nonnegative integer")?.unwrap_or(n);
            let tg = r.get_opt("test.gamma", "a number")?.unwrap_or(gamma);
            let tw = r.get_opt("test.sigma_w2", "a number")?.unwrap_or(sw2);
            let te = r.get_opt("test.sigma_e2", "a number")?.unwrap_or(se2);
            let lb = unit_interval("test.lam_bar", r.get_opt("test.lam_bar", "a number")?.unwrap_or(lam))?;
            Some(TestConfig::new(m, tg, tw, te, task.lambda_cov().clone(), lb).map_err(|e| invalid(format!("test: {e}")))?)
        } else {
            None
        };

        let init_theta = match r.raw("init.theta") {
            Some("identity") => ThetaKind::Identity,
            Some("random") => ThetaKind::Random,
            Some(other) => return Err(invalid(format!("invalid value for `init.theta`: `{other}` (expected identity or random)"))),
            None => unreachable!("defaulted"),
        };
        let init_fraction = r.float("init.fraction")?;
        if !(init_fraction > 0.0 && init_fraction < 1.0) {
            return Err(invalid(format!("`init.fraction` must lie in (0, 1), got {init_fraction}")));
        }
        let flow_t_end = r.float("flow.t_end")?;
        if flow_t_end <= 0.0 {
            return Err(invalid("`flow.t_end` must be positive"));
        }
        let flow_step = r.get_opt::<f64>("flow.step", "a number")?;
        if flow_step.is_some_and(|h| !(h > 0.0 && h.is_finite())) {
            return Err(invalid("`flow.step` must be positive"));
        }

        let sgd_mode = match r.raw("sgd.mode") {
            Some("reduced") => SgdMode::Reduced,
            Some("full") => SgdMode::Full,
            Some(other) => return Err(invalid(format!("invalid value for `sgd.mode`: `{other}` (expected reduced or full)"))),
            None => unreachable!("defaulted"),
        };
        let optimizer_kind = match r.raw("sgd.optimizer") {
            Some("gd") => OptimizerKind::PlainGd,
            Some("adamw") => OptimizerKind::AdaptiveMoment,
            Some(other) => return Err(invalid(format!("invalid value for `sgd.optimizer`: `{other}` (expected gd or adamw)"))),
            None => unreachable!("defaulted"),
        };
        let seed: u64 = r.get("seed", "an unsigned integer")?;
        let sgd = SgdConfig {
            batch_size: r.count("sgd.batch_size")?,
            step_size: r.float("sgd.step_size")?,
            steps: r.count("sgd.steps")?,
            optimizer_kind,
            moment_decays: (r.float("sgd.beta1")?, r.float("sgd.beta2")?),
            weight_decay: r.float("sgd.weight_decay")?,
            seed,
        };
        sgd.validate().map_err(|e| invalid(format!("sgd: {e}")))?;
        let sgd_init_std = r.float("sgd.init_std")?;
        if sgd_init_std < 0.0 {
            return Err(invalid("`sgd.init_std` must be nonnegative"));
        }

        let lambdas = r.list("lambdas")?;
        if lambdas.is_empty() {
            return Err(invalid("`lambdas` must not be empty"));
        }
        for &l in &lambdas {
            unit_interval("lambdas", l)?;
        }
        let trials = r.count("trials")?;
        if trials < 2 {
            return Err(invalid(format!("`trials` must be at least 2, got {trials}")));
        }

        let baselines = BaselineSpec {
            gammas: r.list("baselines.gammas")?,
            length: r.count("baselines.length")?,
            mu: r.float("baselines.mu")?,
            forgetting: r.float("baselines.forgetting")?,
            delta: r.float("baselines.delta")?,
            tail_fraction: r.float("baselines.tail_fraction")?,
        };
        if baselines.gammas.is_empty() {
            return Err(invalid("`baselines.gammas` must not be empty"));
        }
        let layers = r
            .list("multilayer.layers")?
            .into_iter()
            .map(|x| {
                if x >= 1.0 && x.fract() == 0.0 {
                    Ok(x as usize)
                } else {
                    Err(invalid(format!("`multilayer.layers` entries must be positive integers, got {x}")))
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        if layers.is_empty() {
            return Err(invalid("`multilayer.layers` must not be empty"));
        }
        let layer_init_std = r.float("multilayer.init_std")?;
        let out_path = r.raw("out").map(PathBuf::from);

        Ok(ExperimentSpec {
            kind,
            task,
            lam,
            test,
            init_fraction,
            init_theta,
            flow_t_end,
            flow_step,
            sgd,
            sgd_mode,
            sgd_init_std,
            lambdas,
            trials,
            seed,
            out_path,
            baselines,
            layers,
            layer_init_std,
            resolved: r,
        })
    }

    /// Whether `lambdas` was given explicitly rather than defaulted.
    pub fn lambdas_given(&self) -> bool {
        self.resolved.raw("lambdas") != Some(DEFAULT_LAMBDAS)
    }
}
