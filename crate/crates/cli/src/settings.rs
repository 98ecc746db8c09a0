//! Flag resolution: explicit flags, then the `--config` TOML table, then
//! defaults. Also parses the model and reward mini-languages.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use flowdirect::rewards::{command_reward, linear_reward, negsq_reward, RewardFn};
use flowdirect::{Component, GaussianMixture, KernelNoise, Mode};
use serde::Deserialize;

use crate::CliError;

/// The parsed `--config` file.
#[derive(Debug, Default)]
pub struct Layer {
    table: toml::Table,
    source: Option<PathBuf>,
}

impl Layer {
    pub fn load(path: Option<&Path>, allowed: &[&str]) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let table: toml::Table = text
            .parse()
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        if let Some(key) = table.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(CliError::Usage(format!(
                "config {}: unknown key `{key}` (expected one of: {})",
                path.display(),
                allowed.join(", ")
            )));
        }
        Ok(Self {
            table,
            source: Some(path.to_path_buf()),
        })
    }

    fn raw(&self, key: &str) -> Result<Option<String>, CliError> {
        let Some(value) = self.table.get(key) else {
            return Ok(None);
        };
        let text = match value {
            toml::Value::String(s) => s.clone(),
            toml::Value::Integer(i) => i.to_string(),
            toml::Value::Float(f) => f.to_string(),
            toml::Value::Boolean(b) => b.to_string(),
            other => {
                return Err(CliError::Usage(format!(
                    "config {}: key `{key}` has unsupported value {other}",
                    self.source.as_deref().unwrap_or(Path::new("?")).display()
                )))
            }
        };
        Ok(Some(text))
    }

    /// `flag`, else the config entry `key`, else `None`.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        self.raw(key)?
            .map(|s| s.parse::<T>().map_err(|e| CliError::Usage(format!("config key `{key}`: {e}"))))
            .transpose()
    }

    pub fn or<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.pick(flag, key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.pick(flag, key)?
            .ok_or_else(|| CliError::Usage(format!("missing required --{key} (flag or config key)")))
    }

    /// A list-valued setting: repeated flags, else a config array of strings.
    pub fn list(&self, flags: Vec<String>, key: &str) -> Result<Vec<String>, CliError> {
        if !flags.is_empty() {
            return Ok(flags);
        }
        match self.table.get(key) {
            None => Ok(Vec::new()),
            Some(toml::Value::Array(items)) => items
                .iter()
                .map(|v| match v {
                    toml::Value::String(s) => Ok(s.clone()),
                    other => Err(CliError::Usage(format!("config key `{key}`: expected strings, got {other}"))),
                })
                .collect(),
            Some(toml::Value::String(s)) => Ok(vec![s.clone()]),
            Some(other) => Err(CliError::Usage(format!("config key `{key}`: expected a list, got {other}"))),
        }
    }
}

/// Keys every sampling command accepts in its config file.
pub const COMMON_KEYS: [&str; 7] = ["dim", "T", "eta", "seed", "mode", "noise", "out"];

pub fn keys(extra: &[&'static str]) -> Vec<&'static str> {
    COMMON_KEYS.iter().chain(extra).copied().collect()
}

pub fn parse_mode(s: &str) -> Result<Mode, CliError> {
    s.parse().map_err(|e: flowdirect::FlowError| CliError::Usage(e.to_string()))
}

pub fn parse_noise(s: &str) -> Result<KernelNoise, CliError> {
    s.parse().map_err(|e: flowdirect::FlowError| CliError::Usage(e.to_string()))
}

pub fn parse_coords(s: &str, what: &str) -> Result<Vec<f64>, CliError> {
    let coords: Result<Vec<f64>, _> = s.split(',').map(|c| c.trim().parse::<f64>()).collect();
    match coords {
        Ok(v) if !v.is_empty() && v.iter().all(|c| c.is_finite()) => Ok(v),
        _ => Err(CliError::Usage(format!("{what}: expected comma-separated numbers, got `{s}`"))),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MixFile {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    sigmas: Vec<f64>,
}

/// `gauss:<means>:<sigma>` or `mixfile:<path>`.
pub fn parse_model(spec: &str) -> Result<GaussianMixture, CliError> {
    let usage = |why: String| CliError::Usage(format!("model `{spec}`: {why}"));
    if let Some(rest) = spec.strip_prefix("gauss:") {
        let (means, sigma) = rest
            .rsplit_once(':')
            .ok_or_else(|| usage("expected gauss:<means>:<sigma>".into()))?;
        let mean = parse_coords(means, "model mean")?;
        let sigma: f64 = sigma.parse().map_err(|_| usage(format!("bad sigma `{sigma}`")))?;
        return GaussianMixture::gaussian(mean, sigma).map_err(|e| usage(e.to_string()));
    }
    if let Some(path) = spec.strip_prefix("mixfile:") {
        let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read {path}: {e}")))?;
        let file: MixFile = toml::from_str(&text).map_err(|e| usage(e.to_string()))?;
        if file.weights.len() != file.means.len() || file.weights.len() != file.sigmas.len() {
            return Err(usage("weights, means and sigmas must have equal lengths".into()));
        }
        let components = file
            .weights
            .into_iter()
            .zip(file.means)
            .zip(file.sigmas)
            .map(|((weight, mean), sigma)| Component { weight, mean, sigma })
            .collect();
        return GaussianMixture::new(components).map_err(|e| usage(e.to_string()));
    }
    Err(usage("expected gauss:<means>:<sigma> or mixfile:<path>".into()))
}

/// `linear:<a>`, `negsq:<target>:<scale>` or `cmd:<command>`.
pub fn parse_reward(spec: &str) -> Result<Box<dyn RewardFn>, CliError> {
    let usage = |why: String| CliError::Usage(format!("reward `{spec}`: {why}"));
    if let Some(a) = spec.strip_prefix("linear:") {
        let a = parse_coords(a, "linear reward")?;
        return Ok(Box::new(linear_reward(a).map_err(|e| usage(e.to_string()))?));
    }
    if let Some(rest) = spec.strip_prefix("negsq:") {
        let (target, scale) = rest
            .rsplit_once(':')
            .ok_or_else(|| usage("expected negsq:<target>:<scale>".into()))?;
        let target = parse_coords(target, "negsq target")?;
        let scale: f64 = scale.parse().map_err(|_| usage(format!("bad scale `{scale}`")))?;
        return Ok(Box::new(negsq_reward(target, scale).map_err(|e| usage(e.to_string()))?));
    }
    if let Some(command) = spec.strip_prefix("cmd:") {
        if command.trim().is_empty() {
            return Err(usage("empty command".into()));
        }
        return Ok(Box::new(command_reward(command, None)));
    }
    Err(usage("expected linear:, negsq: or cmd:".into()))
}

/// Dimension of an analytic reward, if it has one.
pub fn reward_dim(spec: &str) -> Option<usize> {
    if let Some(a) = spec.strip_prefix("linear:") {
        return Some(a.split(',').count());
    }
    spec.strip_prefix("negsq:")
        .and_then(|rest| rest.rsplit_once(':'))
        .map(|(target, _)| target.split(',').count())
}

pub fn check_dim(expected: Option<usize>, got: usize, what: &str) -> Result<(), CliError> {
    match expected {
        Some(d) if d != got => Err(CliError::Usage(format!("{what} has dimension {got}, expected {d}"))),
        _ => Ok(()),
    }
}
