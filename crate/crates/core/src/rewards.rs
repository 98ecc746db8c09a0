//! Black-box reward functions.
//!
//! Rewards are evaluated a batch at a time. [`CountingReward`] wraps any
//! reward and counts one evaluation per sample, which is the unit of the
//! feedback budget everywhere in the crate.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{FlowError, Result};
use crate::point::{check_dim, dist_sq, dot, format_f64, Point};

pub trait RewardFn: Sync {
    fn evaluate(&self, batch: &[Point]) -> Result<Vec<f64>>;

    fn describe(&self) -> String;

    /// Whether repeated evaluation of one batch gives identical rewards.
    fn is_deterministic(&self) -> bool {
        true
    }
}

impl<T: RewardFn + ?Sized> RewardFn for &T {
    fn evaluate(&self, batch: &[Point]) -> Result<Vec<f64>> {
        (**self).evaluate(batch)
    }
    fn describe(&self) -> String {
        (**self).describe()
    }
    fn is_deterministic(&self) -> bool {
        (**self).is_deterministic()
    }
}

impl<T: RewardFn + ?Sized> RewardFn for Box<T> {
    fn evaluate(&self, batch: &[Point]) -> Result<Vec<f64>> {
        (**self).evaluate(batch)
    }
    fn describe(&self) -> String {
        (**self).describe()
    }
    fn is_deterministic(&self) -> bool {
        (**self).is_deterministic()
    }
}

fn format_coords(v: &[f64]) -> String {
    v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")
}

/// `r(x) = a . x`
#[derive(Debug, Clone, PartialEq)]
pub struct LinearReward {
    pub a: Point,
}

pub fn linear_reward(a: Point) -> Result<LinearReward> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(FlowError::InvalidParameter {
            name: "a",
            reason: "coefficients must be finite".into(),
        });
    }
    Ok(LinearReward { a })
}

impl RewardFn for LinearReward {
    fn evaluate(&self, batch: &[Point]) -> Result<Vec<f64>> {
        batch
            .iter()
            .map(|x| {
                check_dim(self.a.len(), x.len())?;
                Ok(dot(&self.a, x))
            })
            .collect()
    }

    fn describe(&self) -> String {
        format!("linear:{}", format_coords(&self.a))
    }
}

/// `r(x) = -scale |x - target|^2`
#[derive(Debug, Clone, PartialEq)]
pub struct NegSqReward {
    pub target: Point,
    pub scale: f64,
}

pub fn negsq_reward(target: Point, scale: f64) -> Result<NegSqReward> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(FlowError::InvalidParameter {
            name: "scale",
            reason: format!("must be positive, got {scale}"),
        });
    }
    Ok(NegSqReward { target, scale })
}

impl RewardFn for NegSqReward {
    fn evaluate(&self, batch: &[Point]) -> Result<Vec<f64>> {
        batch
            .iter()
            .map(|x| {
                check_dim(self.target.len(), x.len())?;
                Ok(-self.scale * dist_sq(x, &self.target))
            })
            .collect()
    }

    fn describe(&self) -> String {
        format!("negsq:{}:{}", format_coords(&self.target), self.scale)
    }
}

/// A reward computed by an external program.
///
/// Each call creates a fresh temporary directory, writes `batch.txt` (one point
/// per line, coordinates separated by spaces), runs `sh -c <command>` inside
/// that directory and reads `rewards.txt` (one decimal per line, same order).
/// The absolute paths are also exported as `FLOWDIRECT_BATCH` and
/// `FLOWDIRECT_REWARDS`.
#[derive(Debug, Clone, PartialEq)]
pub struct CommandReward {
    pub command: String,
    pub workdir: Option<PathBuf>,
    pub deterministic: bool,
}

pub fn command_reward(command: impl Into<String>, workdir: Option<PathBuf>) -> CommandReward {
    CommandReward {
        command: command.into(),
        workdir,
        deterministic: false,
    }
}

pub const BATCH_FILE: &str = "batch.txt";
pub const REWARDS_FILE: &str = "rewards.txt";

impl RewardFn for CommandReward {
    fn evaluate(&self, batch: &[Point]) -> Result<Vec<f64>> {
        let dir = match &self.workdir {
            Some(parent) => tempfile::Builder::new().prefix("flowdirect-reward").tempdir_in(parent)?,
            None => tempfile::Builder::new().prefix("flowdirect-reward").tempdir()?,
        };
        let batch_path = dir.path().join(BATCH_FILE);
        let rewards_path = dir.path().join(REWARDS_FILE);
        let mut text = String::new();
        for x in batch {
            let line: Vec<String> = x.iter().map(|v| format_f64(*v)).collect();
            writeln!(text, "{}", line.join(" ")).expect("writing to a String");
        }
        std::fs::write(&batch_path, text)?;

        let output = Command::new("sh")
            .arg("-c")
            .arg(&self.command)
            .current_dir(dir.path())
            .env("FLOWDIRECT_BATCH", &batch_path)
            .env("FLOWDIRECT_REWARDS", &rewards_path)
            .output()?;
        if !output.status.success() {
            return Err(FlowError::Reward(format!(
                "`{}` exited with {}: {}",
                self.command,
                output.status,
                String::from_utf8_lossy(&output.stderr).trim()
            )));
        }
        let body = std::fs::read_to_string(&rewards_path).map_err(|e| {
            FlowError::Reward(format!("`{}` produced no {REWARDS_FILE}: {e}", self.command))
        })?;
        let mut rewards = Vec::with_capacity(batch.len());
        for (i, line) in body.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let r: f64 = line
                .parse()
                .map_err(|_| FlowError::Reward(format!("{REWARDS_FILE}:{}: not a number: `{line}`", i + 1)))?;
            if !r.is_finite() {
                return Err(FlowError::Reward(format!("{REWARDS_FILE}:{}: non-finite reward", i + 1)));
            }
            rewards.push(r);
        }
        if rewards.len() != batch.len() {
            return Err(FlowError::Reward(format!(
                "expected {} rewards, got {}",
                batch.len(),
                rewards.len()
            )));
        }
        Ok(rewards)
    }

    fn describe(&self) -> String {
        format!("cmd:{}", self.command)
    }

    fn is_deterministic(&self) -> bool {
        self.deterministic
    }
}

/// Counts one evaluation per sample passed to the inner reward.
#[derive(Debug)]
pub struct CountingReward<R> {
    inner: R,
    count: AtomicU64,
}

impl<R: RewardFn> CountingReward<R> {
    pub fn new(inner: R) -> Self {
        Self {
            inner,
            count: AtomicU64::new(0),
        }
    }

    pub fn count(&self) -> u64 {
        self.count.load(Ordering::SeqCst)
    }

    pub fn inner(&self) -> &R {
        &self.inner
    }
}

impl<R: RewardFn> RewardFn for CountingReward<R> {
    fn evaluate(&self, batch: &[Point]) -> Result<Vec<f64>> {
        self.count.fetch_add(batch.len() as u64, Ordering::SeqCst);
        self.inner.evaluate(batch)
    }

    fn describe(&self) -> String {
        self.inner.describe()
    }

    fn is_deterministic(&self) -> bool {
        self.inner.is_deterministic()
    }
}
