use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context as _;
use flowdirect::eval::{best_of_n, efficiency_gain, fk_campaign, moment_stats, FkConfig};
use flowdirect::flow::{sample_batch, Guidance};
use flowdirect::guidance::standardize_rewards;
use flowdirect::optimizer::{run, IterationMetrics};
use flowdirect::persistence::{load_dataset, render_metrics, render_samples, save_dataset, write_atomic};
use flowdirect::rewards::RewardFn as _;
use flowdirect::stream::{derive_seed, stream};
use flowdirect::{Dataset, FlowModel, GaussianMixture, GuidanceField, KernelNoise, Mode, OptimizerConfig, Point, SamplerConfig};
use serde::Serialize;
use serde_json::json;

use crate::args::{BaselineArgs, Command, Common, ComposeArgs, DemoArgs, GainArgs, OptimizeArgs, ReuseArgs};
use crate::settings::{check_dim, keys, parse_coords, parse_mode, parse_model, parse_noise, parse_reward, reward_dim, Layer};
use crate::CliError;

const REUSE_STREAM: u64 = 0x7265_7573;
const DEMO_STREAM: u64 = 0x6465_6d6f;

pub fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Optimize(a) => optimize(a),
        Command::Reuse(a) => reuse(a),
        Command::Compose(a) => compose(a),
        Command::Baseline(a) => baseline(a),
        Command::Demo(a) => demo(a),
        Command::Gain(a) => gain(a),
    }
}

/// Settings shared by the sampling commands after layering.
#[derive(Debug, Clone, Serialize)]
struct Sampling {
    dim: Option<usize>,
    steps: usize,
    eta: f64,
    seed: u64,
    mode: Mode,
    noise: KernelNoise,
    out: PathBuf,
}

impl Sampling {
    fn resolve(c: &Common, layer: &Layer, default_eta: f64) -> Result<Self, CliError> {
        let mode = parse_mode(&layer.or(c.mode.clone(), "mode", "practical".to_string())?)?;
        let noise = parse_noise(&layer.or(c.noise.clone(), "noise", "step".to_string())?)?;
        let sampling = Self {
            dim: layer.pick(c.dim, "dim")?,
            steps: layer.or(c.steps, "T", 100)?,
            eta: layer.or(c.eta, "eta", default_eta)?,
            seed: layer.or(c.seed, "seed", 0)?,
            mode,
            noise,
            out: layer.or(c.out.clone(), "out", PathBuf::from("flowdirect-out"))?,
        };
        sampling
            .sampler(sampling.seed)
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(sampling)
    }

    fn sampler(&self, seed: u64) -> SamplerConfig {
        SamplerConfig::new(self.steps, self.eta, seed)
    }
}

fn model_from(spec: &str, dim: Option<usize>) -> Result<GaussianMixture, CliError> {
    let model = parse_model(spec)?;
    check_dim(dim, model.dim(), "model")?;
    Ok(model)
}

fn positive(value: usize, name: &str) -> Result<usize, CliError> {
    if value == 0 {
        return Err(CliError::Usage(format!("--{name} must be positive")));
    }
    Ok(value)
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis())
}

/// Collects the files a command writes and finishes with a manifest.
struct Outputs {
    dir: PathBuf,
    artifacts: Vec<String>,
    started: u128,
}

impl Outputs {
    fn create(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            artifacts: Vec::new(),
            started: now_ms(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<(), CliError> {
        write_atomic(&self.path(name), contents.as_bytes()).with_context(|| format!("writing {name}"))?;
        self.note(name);
        Ok(())
    }

    fn note(&mut self, name: &str) {
        if !self.artifacts.iter().any(|a| a == name) {
            self.artifacts.push(name.to_string());
        }
    }

    fn json(&mut self, name: &str, value: &serde_json::Value) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).context("serializing JSON")?;
        text.push('\n');
        self.write(name, &text)
    }

    fn finish(mut self, command: &str, config: serde_json::Value, seed: u64, reward_evaluations: u64) -> Result<(), CliError> {
        let manifest = json!({
            "tool": "flowdirect",
            "version": env!("CARGO_PKG_VERSION"),
            "command": command,
            "config": config,
            "seed": seed,
            "reward_evaluations": reward_evaluations,
            "artifacts": self.artifacts.clone(),
            "started_unix_ms": self.started as u64,
            "finished_unix_ms": now_ms() as u64,
        });
        self.json("manifest.json", &manifest)
    }
}

fn moments_json(samples: &[Point]) -> Result<serde_json::Value, CliError> {
    let m = moment_stats(samples)?;
    let covariance: Vec<Vec<f64>> = m.covariance.row_iter().map(|r| r.iter().copied().collect()).collect();
    Ok(json!({ "samples": samples.len(), "mean": m.mean, "covariance": covariance }))
}

fn show(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|c| format!("{c:.4}")).collect();
    format!("({})", parts.join(", "))
}

fn sample_guided(model: &dyn FlowModel, field: Option<&GuidanceField>, sampler: &SamplerConfig, n: usize) -> Result<Vec<Point>, CliError> {
    Ok(sample_batch(model, field.map(|f| f as &dyn Guidance), sampler, n, 0)?)
}

fn optimize(a: OptimizeArgs) -> Result<(), CliError> {
    let layer = Layer::load(a.common.config.as_deref(), &keys(&["model", "reward", "L", "N"]))?;
    let s = Sampling::resolve(&a.common, &layer, 0.0)?;
    let model_spec: String = layer.require(a.model, "model")?;
    let reward_spec: String = layer.require(a.reward, "reward")?;
    let iterations = positive(layer.or(a.iterations, "L", 5)?, "L")?;
    let batch = positive(layer.or(a.batch, "N", 256)?, "N")?;
    let model = model_from(&model_spec, s.dim)?;
    if let Some(d) = reward_dim(&reward_spec) {
        check_dim(Some(model.dim()), d, "reward")?;
    }
    let reward = parse_reward(&reward_spec)?;
    let description = reward.describe();
    let config = OptimizerConfig {
        iterations,
        batch,
        sampler: s.sampler(s.seed),
        mode: s.mode,
        seed: s.seed,
        noise: s.noise,
    };

    let mut out = Outputs::create(&s.out)?;
    let dataset_path = out.path("dataset.txt");
    let metrics_path = out.path("metrics.csv");
    let dim = model.dim();
    let result = run(&model, reward.as_ref(), &config, |m, state| {
        save_dataset(&state.datasets, &description, &dataset_path)?;
        write_atomic(&metrics_path, render_metrics(&state.metrics, dim).as_bytes())?;
        eprintln!(
            "iteration {}: {} evaluations, mean reward {:.4}, best so far {:.4}",
            m.iter, m.evaluations, m.mean_reward, m.best_so_far
        );
        Ok(())
    })
    .with_context(|| {
        format!(
            "optimization failed; completed iterations are kept in {}",
            dataset_path.display()
        )
    })?;
    out.note("dataset.txt");
    out.note("metrics.csv");
    out.write("samples.csv", &render_samples(&result.samples))?;
    let last = result.state.metrics.last().expect("at least one iteration");
    let evaluations = result.state.evaluations();
    println!(
        "final batch: mean reward {:.6}, best reward {:.6}, mean {}, evaluations {evaluations}",
        last.mean_reward,
        last.best_reward,
        show(&last.mean_coords)
    );
    let config_json = json!({
        "model": model_spec,
        "reward": description,
        "L": iterations,
        "N": batch,
        "sampling": s,
    });
    out.finish("optimize", config_json, s.seed, evaluations)
}

/// Loads every iteration of a dataset file as one dataset, standardized in
/// practical mode.
fn load_all(path: &Path, mode: Mode) -> Result<Dataset, CliError> {
    let loaded = load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))?;
    let merged = loaded.merged()?;
    Ok(match mode {
        Mode::Practical => standardize_rewards(std::slice::from_ref(&merged))?.remove(0),
        Mode::Exact => merged,
    })
}

fn reuse_child(ds: Dataset, alpha: f64, s: &Sampling, k: usize) -> Result<GuidanceField, CliError> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(CliError::Usage(format!("alpha must be a nonnegative number, got {alpha}")));
    }
    Ok(GuidanceField::reuse(ds, alpha, s.mode, derive_seed(s.seed, REUSE_STREAM, k as u64))?.with_noise(s.noise))
}

fn reuse(a: ReuseArgs) -> Result<(), CliError> {
    let layer = Layer::load(a.common.config.as_deref(), &keys(&["model", "dataset", "alpha", "N"]))?;
    let s = Sampling::resolve(&a.common, &layer, 0.0)?;
    let model_spec: String = layer.require(a.model, "model")?;
    let dataset: PathBuf = layer.require(a.dataset, "dataset")?;
    let alpha: f64 = layer.require(a.alpha, "alpha")?;
    let n = positive(layer.or(a.samples, "N", 1024)?, "N")?;
    let model = model_from(&model_spec, s.dim)?;
    let ds = load_all(&dataset, s.mode)?;
    check_dim(Some(model.dim()), ds.dim(), "dataset")?;
    let field = reuse_child(ds, alpha, &s, 0)?;
    let samples = sample_guided(&model, Some(&field), &s.sampler(s.seed), n)?;

    let mut out = Outputs::create(&s.out)?;
    out.write("samples.csv", &render_samples(&samples))?;
    let report = moments_json(&samples)?;
    out.json("report.json", &report)?;
    println!("reuse alpha={alpha}: mean {} over {n} samples, 0 reward evaluations", show(&moment_stats(&samples)?.mean));
    let config_json = json!({ "model": model_spec, "dataset": dataset, "alpha": alpha, "N": n, "sampling": s });
    out.finish("reuse", config_json, s.seed, 0)
}

fn compose(a: ComposeArgs) -> Result<(), CliError> {
    let layer = Layer::load(a.common.config.as_deref(), &keys(&["model", "dataset", "weights", "N"]))?;
    let s = Sampling::resolve(&a.common, &layer, 0.0)?;
    let model_spec: String = layer.require(a.model, "model")?;
    let dataset_flags: Vec<String> = a.datasets.iter().map(|p| p.display().to_string()).collect();
    let datasets: Vec<PathBuf> = layer.list(dataset_flags, "dataset")?.into_iter().map(PathBuf::from).collect();
    let weight_specs = layer.list(a.weights, "weights")?;
    let n = positive(layer.or(a.samples, "N", 1024)?, "N")?;
    if datasets.len() < 2 {
        return Err(CliError::Usage("compose needs at least two --dataset files".into()));
    }
    if weight_specs.is_empty() {
        return Err(CliError::Usage("compose needs at least one --weights setting".into()));
    }
    let settings = weight_specs
        .iter()
        .map(|w| {
            let v = parse_coords(w, "weights")?;
            if v.len() != datasets.len() {
                return Err(CliError::Usage(format!(
                    "weights `{w}` has {} entries for {} datasets",
                    v.len(),
                    datasets.len()
                )));
            }
            Ok(v)
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let model = model_from(&model_spec, s.dim)?;
    let loaded = datasets
        .iter()
        .map(|p| load_all(p, s.mode))
        .collect::<Result<Vec<_>, CliError>>()?;
    for (p, ds) in datasets.iter().zip(&loaded) {
        if ds.dim() != model.dim() {
            return Err(CliError::Runtime(anyhow::anyhow!(
                "dataset {} has dimension {}, model has {}",
                p.display(),
                ds.dim(),
                model.dim()
            )));
        }
    }

    let mut out = Outputs::create(&s.out)?;
    let mut reports = Vec::new();
    for (idx, weights) in settings.iter().enumerate() {
        // Zero-weight fields vanish identically, so they are left out.
        let children = weights
            .iter()
            .zip(&loaded)
            .enumerate()
            .filter(|(_, (w, _))| **w != 0.0)
            .map(|(k, (w, ds))| reuse_child(ds.clone(), *w, &s, k))
            .collect::<Result<Vec<_>, CliError>>()?;
        let field = match children.len() {
            0 => None,
            1 => children.into_iter().next(),
            _ => Some(GuidanceField::composite(children)?),
        };
        let samples = sample_guided(&model, field.as_ref(), &s.sampler(s.seed), n)?;
        let name = format!("samples_{idx}.csv");
        out.write(&name, &render_samples(&samples))?;
        let mut report = moments_json(&samples)?;
        report["weights"] = json!(weights);
        report["file"] = json!(name);
        println!("weights {}: mean {}", show(weights), show(&moment_stats(&samples)?.mean));
        reports.push(report);
    }
    out.json("report.json", &json!(reports))?;
    let config_json = json!({ "model": model_spec, "dataset": datasets, "weights": settings, "N": n, "sampling": s });
    out.finish("compose", config_json, s.seed, 0)
}

fn baseline(a: BaselineArgs) -> Result<(), CliError> {
    let layer = Layer::load(
        a.common.config.as_deref(),
        &keys(&["model", "reward", "method", "budget", "particles", "resamples", "lambda"]),
    )?;
    let method: String = layer.require(a.method, "method")?;
    let default_eta = match method.as_str() {
        "bestofn" => 0.0,
        "fk" => 0.7,
        other => return Err(CliError::Usage(format!("unknown baseline `{other}` (expected bestofn or fk)"))),
    };
    let s = Sampling::resolve(&a.common, &layer, default_eta)?;
    let model_spec: String = layer.require(a.model, "model")?;
    let reward_spec: String = layer.require(a.reward, "reward")?;
    let budget: u64 = layer.or(a.budget, "budget", 1600)?;
    let model = model_from(&model_spec, s.dim)?;
    if let Some(d) = reward_dim(&reward_spec) {
        check_dim(Some(model.dim()), d, "reward")?;
    }
    let reward = flowdirect::CountingReward::new(parse_reward(&reward_spec)?);
    let fk = FkConfig {
        particles: layer.or(a.particles, "particles", 16)?,
        resamples: layer.or(a.resamples, "resamples", 5)?,
        lambda: layer.or(a.lambda, "lambda", 2.0)?,
    };
    let result = match method.as_str() {
        "bestofn" => {
            let budget = usize::try_from(budget).ok().filter(|b| *b > 0);
            let budget = budget.ok_or_else(|| CliError::Usage("--budget must be positive".into()))?;
            best_of_n(&model, &reward, budget, &s.sampler(s.seed), 16)?
        }
        _ => {
            if s.eta <= 0.0 {
                return Err(CliError::Usage("the fk baseline needs a stochastic sampler (--eta > 0)".into()));
            }
            if fk.particles < 2 || budget < fk.cost() {
                return Err(CliError::Usage(format!(
                    "fk needs at least 2 particles and a budget of at least {} evaluations",
                    fk.cost()
                )));
            }
            fk_campaign(&model, &reward, &fk, &s.sampler(s.seed), budget)?
        }
    };
    let mut out = Outputs::create(&s.out)?;
    out.write("metrics.csv", &render_metrics(&result.metrics, model.dim()))?;
    let top: Vec<Point> = result.top.iter().map(|(x, _)| x.clone()).collect();
    out.write("samples.csv", &render_samples(&top))?;
    println!(
        "{method}: best reward {:.6} after {} evaluations",
        result.final_best(),
        reward.count()
    );
    let config_json = json!({
        "model": model_spec,
        "reward": reward.describe(),
        "method": method,
        "budget": budget,
        "fk": fk,
        "sampling": s,
    });
    out.finish("baseline", config_json, s.seed, reward.count())
}

fn demo(a: DemoArgs) -> Result<(), CliError> {
    let layer = Layer::load(a.common.config.as_deref(), &keys(&["base", "target", "dataset-size", "N"]))?;
    let s = Sampling::resolve(&a.common, &layer, 0.0)?;
    let base_spec: String = layer.require(a.base, "base")?;
    let target_specs = layer.list(a.targets, "target")?;
    if target_specs.is_empty() {
        return Err(CliError::Usage("demo needs at least one --target".into()));
    }
    let size = positive(layer.or(a.dataset_size, "dataset-size", 1024)?, "dataset-size")?;
    let n = positive(layer.or(a.samples, "N", 1024)?, "N")?;
    let base = model_from(&base_spec, s.dim)?;
    let targets = target_specs
        .iter()
        .map(|t| model_from(t, Some(base.dim())))
        .collect::<Result<Vec<_>, CliError>>()?;

    let mut out = Outputs::create(&s.out)?;
    let base_points = base.sample(&mut stream(s.seed, DEMO_STREAM, 0), size);
    out.write("base.csv", &render_samples(&base_points))?;
    let base_ds = Dataset::unlabeled(base_points)?;
    let sampler = s.sampler(s.seed);
    let mut fields = Vec::new();
    let mut reports = Vec::new();
    for (k, (spec, target)) in target_specs.iter().zip(&targets).enumerate() {
        let points = target.sample(&mut stream(s.seed, DEMO_STREAM, k as u64 + 1), size);
        out.write(&format!("target_{k}.csv"), &render_samples(&points))?;
        let field = GuidanceField::data_contrast(
            base_ds.clone(),
            Dataset::unlabeled(points)?,
            s.mode,
            derive_seed(s.seed, DEMO_STREAM, k as u64 + 1),
        )?
        .with_noise(s.noise);
        let guided = sample_guided(&base, Some(&field), &sampler, n)?;
        out.write(&format!("guided_{k}.csv"), &render_samples(&guided))?;
        let mut report = moments_json(&guided)?;
        report["target"] = json!(spec);
        report["target_mean"] = json!(target.mean());
        println!("target {spec}: guided mean {}", show(&moment_stats(&guided)?.mean));
        reports.push(report);
        fields.push(field);
    }
    if fields.len() > 1 {
        let composite = GuidanceField::composite(fields)?;
        let guided = sample_guided(&base, Some(&composite), &sampler, n)?;
        out.write("composite.csv", &render_samples(&guided))?;
        let mut report = moments_json(&guided)?;
        report["target"] = json!("composite");
        println!("composite: guided mean {}", show(&moment_stats(&guided)?.mean));
        reports.push(report);
    }
    out.json("report.json", &json!(reports))?;
    let config_json = json!({
        "base": base_spec,
        "target": target_specs,
        "dataset-size": size,
        "N": n,
        "sampling": s,
    });
    out.finish("demo", config_json, s.seed, 0)
}

/// `(evaluations, mean_reward, best_reward)` rows of a metrics table.
fn read_metrics(path: &Path) -> Result<Vec<IterationMetrics>, CliError> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let bad = |line: usize, why: &str| CliError::Runtime(anyhow::anyhow!("{}:{line}: {why}", path.display()));
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if !header.starts_with("iter,evals,mean_reward,best_reward") {
        return Err(bad(1, "not a metrics table"));
    }
    let mut rows = Vec::new();
    let mut best = f64::NEG_INFINITY;
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 4 {
            return Err(bad(i + 2, "too few columns"));
        }
        let num = |k: usize| fields[k].parse::<f64>().map_err(|_| bad(i + 2, "bad number"));
        let evaluations: u64 = fields[1].parse().map_err(|_| bad(i + 2, "bad evaluation count"))?;
        let best_reward = num(3)?;
        best = best.max(best_reward);
        rows.push(IterationMetrics {
            iter: i,
            evaluations,
            mean_reward: num(2)?,
            best_reward,
            best_so_far: best,
            mean_coords: Vec::new(),
        });
    }
    if rows.is_empty() {
        return Err(bad(2, "no rows"));
    }
    Ok(rows)
}

fn gain(a: GainArgs) -> Result<(), CliError> {
    let ours = read_metrics(&a.ours)?;
    let reference = read_metrics(&a.baseline)?;
    let budget = a.budget.unwrap_or(ours.last().expect("nonempty").evaluations);
    let best_curve: Vec<(u64, f64)> = ours.iter().map(|m| (m.evaluations, m.best_so_far)).collect();
    let mean_curve: Vec<(u64, f64)> = ours.iter().map(|m| (m.evaluations, m.mean_reward)).collect();
    let reference_last = reference.last().expect("nonempty");
    for (name, curve, target) in [
        ("best_so_far", best_curve, reference_last.best_so_far),
        ("batch_mean", mean_curve, reference_last.mean_reward),
    ] {
        match efficiency_gain(&curve, target, budget)? {
            Some(g) => println!("{name}: gain {g:.4} (baseline final {target:.6}, budget {budget})"),
            None => println!("{name}: not reached (baseline final {target:.6}, budget {budget})"),
        }
    }
    Ok(())
}
