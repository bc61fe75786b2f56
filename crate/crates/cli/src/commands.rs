use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use mscp::experiments::{
    asymptotic_csv, dependence_csv, noise_table_csv, plan_for, resolve_config,
    run_asymptotic_study, run_coverage_sweep, run_dependence_study, run_noise_table, sweep_csv,
    write_study, AllocationStrategy, AsymptoticConfig, DependenceConfig, FittedScales,
    NoiseTableConfig, StudyOutput, SweepConfig,
};
use mscp::io::write_atomic;
use mscp::models::{logistic_scorer, train_logistic_traced, LogisticModel, TrainingConfig};
use mscp::seeds::derive_seed;
use mscp::synth::{generate_dataset, split_dataset, Dataset, SplitIndices, SynthConfig};
use mscp::{multiscale::multiscale_predict_detailed, score_calibration, LabelSpace};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::{Alloc, Shared, Study};

const SEED_DERIVATION: &str = "splitmix(splitmix(base ^ fnv1a(stream)) ^ index)";

/// A usage problem detected after argument parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    match err.downcast_ref::<mscp::Error>() {
        Some(
            mscp::Error::InvalidConfig { .. }
            | mscp::Error::InvalidAlpha(_)
            | mscp::Error::InfeasibleAllocation { .. },
        ) => 1,
        _ => 2,
    }
}

/// File values overlaid with `--seed`, resolved against `T`'s defaults.
fn load_config<T>(shared: &Shared) -> Result<T>
where
    T: Default + Serialize + for<'de> Deserialize<'de>,
{
    let mut values = match &shared.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| mscp::Error::Io {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?;
            serde_json::from_str::<Value>(&text).map_err(|e| {
                mscp::Error::config("config", format!("{}: {e}", path.display()))
            })?
        }
        None => Value::Object(Map::new()),
    };
    if let (Some(seed), Some(map)) = (shared.seed, values.as_object_mut()) {
        map.insert("seed".into(), json!(seed));
    }
    Ok(resolve_config(&values)?)
}

fn output_dir(shared: &Shared) -> Result<&Path> {
    if !shared.out.is_dir() {
        return Err(mscp::Error::Io {
            path: shared.out.display().to_string(),
            reason: "output directory does not exist".into(),
        }
        .into());
    }
    Ok(&shared.out)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(write_atomic(path, text.as_bytes())?)
}

fn print_json(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

pub fn generate(shared: &Shared) -> Result<()> {
    let config: SynthConfig = load_config(shared)?;
    let out = output_dir(shared)?;
    config.validate()?;
    let config_path = out.join("resolved_config.json");
    write_json(&config_path, &config)?;
    let data = generate_dataset(&config)?;
    let data_path = out.join("dataset.csv");
    data.write_csv(&data_path)?;
    if shared.json {
        print_json(&json!({
            "dataset": data_path,
            "config": config_path,
            "rows": data.len(),
            "scales": data.n_scales(),
        }))
    } else {
        println!("wrote {} rows to {}", data.len(), data_path.display());
        Ok(())
    }
}

/// Config for `train` and `predict`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FitConfig {
    #[serde(flatten)]
    training: TrainingConfig,
    /// Train / calibration / test fractions.
    split: [f64; 3],
    seed: u64,
    alpha: f64,
    allocation: AllocationStrategy,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            training: TrainingConfig::default(),
            split: [0.4, 0.3, 0.3],
            seed: SynthConfig::default().seed,
            alpha: 0.1,
            allocation: AllocationStrategy::Uniform,
        }
    }
}

impl FitConfig {
    fn split(&self, data: &Dataset) -> mscp::Result<SplitIndices> {
        split_dataset(data.len(), self.split, derive_seed(self.seed, "split", 0))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelBundle {
    split: SplitIndices,
    /// One model per scale; scale `k` reads column `k - 1`.
    models: Vec<LogisticModel>,
}

fn train_bundle(data: &Dataset, config: &FitConfig) -> Result<(ModelBundle, Vec<Vec<usize>>)> {
    let split = config.split(data)?;
    let train = data.rows(&split.train);
    let mut models = Vec::new();
    let mut missing = Vec::new();
    for k in 0..data.n_scales() {
        let run = train_logistic_traced(&train, &[k], data.n_classes(), &config.training)?;
        models.push(run.model);
        missing.push(run.missing_classes);
    }
    Ok((ModelBundle { split, models }, missing))
}

pub fn train(data_path: &Path, shared: &Shared) -> Result<()> {
    let config: FitConfig = load_config(shared)?;
    let out = output_dir(shared)?;
    write_json(&out.join("resolved_config.json"), &config)?;
    let data = Dataset::read_csv(data_path)?;
    let (bundle, missing) = train_bundle(&data, &config)?;
    let models_path = out.join("models.json");
    write_json(&models_path, &bundle)?;
    for (k, m) in missing.iter().enumerate() {
        if !m.is_empty() {
            eprintln!("warning: scale {} saw no training examples of classes {m:?}", k + 1);
        }
    }
    if shared.json {
        print_json(&json!({
            "models": models_path,
            "scales": bundle.models.len(),
            "n_train": bundle.split.train.len(),
            "n_calib": bundle.split.calib.len(),
        }))
    } else {
        println!(
            "trained {} scale models on {} rows; wrote {}",
            bundle.models.len(),
            bundle.split.train.len(),
            models_path.display()
        );
        Ok(())
    }
}

pub struct PredictArgs {
    pub data: PathBuf,
    pub alpha: Option<f64>,
    pub alloc: Option<Alloc>,
    pub index: Option<usize>,
    pub x: Option<String>,
    pub models: Option<PathBuf>,
}

fn parse_point(text: &str, dim: usize) -> Result<Vec<f64>> {
    let x = text
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| UsageError(format!("--x: `{}` is not a number", v.trim())))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if x.len() != dim {
        return Err(UsageError(format!("--x has {} values; the dataset has {dim} scales", x.len())).into());
    }
    Ok(x)
}

pub fn predict(args: &PredictArgs, shared: &Shared) -> Result<()> {
    let mut config: FitConfig = load_config(shared)?;
    if let Some(a) = args.alpha {
        config.alpha = a;
    }
    match args.alloc {
        Some(Alloc::Uniform) => config.allocation = AllocationStrategy::Uniform,
        Some(Alloc::Optimal) => config.allocation = AllocationStrategy::Optimal,
        None => {}
    }
    let out = output_dir(shared)?;
    write_json(&out.join("resolved_config.json"), &config)?;

    let data = Dataset::read_csv(&args.data)?;
    let (x, truth) = match (args.index, &args.x) {
        (Some(i), _) => {
            let x = data.features.get(i).cloned().ok_or_else(|| {
                UsageError(format!("--index {i} is out of range for {} rows", data.len()))
            })?;
            (x, Some(data.labels[i]))
        }
        (None, Some(text)) => (parse_point(text, data.n_scales())?, None),
        (None, None) => return Err(UsageError("one of --index or --x is required".into()).into()),
    };
    let bundle = match &args.models {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| mscp::Error::Io {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?;
            serde_json::from_str::<ModelBundle>(&text)
                .with_context(|| format!("reading models from {}", path.display()))?
        }
        None => train_bundle(&data, &config)?.0,
    };
    if bundle.models.len() != data.n_scales() {
        return Err(mscp::Error::ShapeError { expected: data.n_scales(), got: bundle.models.len() }.into());
    }
    let n_classes = bundle.models.iter().map(LogisticModel::n_classes).max().unwrap_or(0);
    let labels = LabelSpace::range(n_classes.max(data.n_classes()))?;
    let calib = data.rows(&bundle.split.calib);
    let scorers: Vec<_> = bundle
        .models
        .into_iter()
        .enumerate()
        .map(|(k, m)| logistic_scorer(Arc::new(m), k + 1))
        .collect();
    let calibs = scorers
        .iter()
        .map(|s| score_calibration(s, &calib))
        .collect::<mscp::Result<Vec<_>>>()?;
    let fitted = FittedScales {
        scorers,
        calibs,
        calib_points: calib.into_iter().map(|(x, _)| x).collect(),
        labels,
    };
    let plan = plan_for(config.allocation, &fitted, config.alpha)?;
    let outcome = multiscale_predict_detailed(&fitted.scorers, &fitted.calibs, &plan, &x, &fitted.labels)?;

    let scales: Vec<Value> = outcome
        .per_scale
        .iter()
        .zip(&outcome.pvalues)
        .zip(plan.alphas())
        .enumerate()
        .map(|(k, ((set, p), a))| {
            json!({
                "scale": k + 1,
                "alpha": a,
                "pvalues": p.iter().map(|v| v.value()).collect::<Vec<_>>(),
                "set": set.members(),
            })
        })
        .collect();
    if shared.json {
        return print_json(&json!({
            "x": x,
            "label": truth,
            "alpha": config.alpha,
            "allocation": config.allocation,
            "scales": scales,
            "multiscale": outcome.combined.members(),
        }));
    }
    let fmt_set = |m: &[usize]| format!("{{{}}}", m.iter().map(usize::to_string).collect::<Vec<_>>().join(", "));
    for (k, ((set, p), a)) in outcome.per_scale.iter().zip(&outcome.pvalues).zip(plan.alphas()).enumerate() {
        let p: Vec<String> = p.iter().map(|v| format!("{:.4}", v.value())).collect();
        println!(
            "scale {}: alpha_k = {a:.6}  p = [{}]  set = {}",
            k + 1,
            p.join(", "),
            fmt_set(set.members())
        );
    }
    println!("multiscale: set = {}", fmt_set(outcome.combined.members()));
    if let Some(y) = truth {
        println!("true label: {y} ({})", if outcome.combined.contains(y) { "covered" } else { "missed" });
    }
    Ok(())
}

fn seeds_json(base: u64, extra: Value) -> Value {
    let mut v = json!({ "base": base, "derivation": SEED_DERIVATION });
    if let (Some(map), Value::Object(more)) = (v.as_object_mut(), extra) {
        map.extend(more);
    }
    v
}

pub fn study(name: Study, shared: &Shared) -> Result<()> {
    let out = output_dir(shared)?.to_path_buf();
    let (output, rows) = match name {
        Study::Sweep => {
            let config: SweepConfig = load_config(shared)?;
            config.validate()?;
            write_json(&out.join("resolved_config.json"), &config)?;
            let result = run_coverage_sweep(&config)?;
            let seeds = seeds_json(
                config.synth.seed,
                json!({ "replication_data_seeds": result.replication_seeds }),
            );
            (
                StudyOutput::new("sweep", sweep_csv(&result), &config, seeds),
                serde_json::to_value(&result.rows)?,
            )
        }
        Study::NoiseTable => {
            let config: NoiseTableConfig = load_config(shared)?;
            config.validate()?;
            write_json(&out.join("resolved_config.json"), &config)?;
            let rows = run_noise_table(&config)?;
            let seeds = seeds_json(config.synth.seed, json!({}));
            (
                StudyOutput::new("noise_table", noise_table_csv(&rows), &config, seeds),
                serde_json::to_value(&rows)?,
            )
        }
        Study::Dependence => {
            let config: DependenceConfig = load_config(shared)?;
            config.validate()?;
            write_json(&out.join("resolved_config.json"), &config)?;
            let rows = run_dependence_study(&config)?;
            let seeds = seeds_json(config.synth.seed, json!({}));
            (
                StudyOutput::new("dependence", dependence_csv(&rows), &config, seeds),
                serde_json::to_value(&rows)?,
            )
        }
        Study::Asymptotic => {
            let config: AsymptoticConfig = load_config(shared)?;
            config.validate()?;
            write_json(&out.join("resolved_config.json"), &config)?;
            let rows = run_asymptotic_study(&config)?;
            let seeds = seeds_json(config.synth.seed, json!({}));
            (
                StudyOutput::new("asymptotic", asymptotic_csv(&rows), &config, seeds),
                serde_json::to_value(&rows)?,
            )
        }
    };
    let paths = write_study(&out, &output)?;
    if shared.json {
        print_json(&json!({ "study": output.name, "files": paths, "rows": rows }))
    } else {
        print!("{}", output.csv);
        for p in &paths {
            eprintln!("wrote {}", p.display());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_parsing() {
        assert_eq!(parse_point("0.5, -1,2e-1", 3).unwrap(), vec![0.5, -1.0, 0.2]);
        assert!(parse_point("0.5,abc", 2).is_err());
        assert!(parse_point("0.5", 2).is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&UsageError("x".into()).into()), 1);
        assert_eq!(exit_code(&mscp::Error::InvalidAlpha(2.0).into()), 1);
        assert_eq!(exit_code(&mscp::Error::Parse { line: 3, reason: "bad".into() }.into()), 2);
        assert_eq!(exit_code(&anyhow::anyhow!("other")), 2);
    }
}
