use std::io::IsTerminal;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use edgepro::attacks::{finetune_attack, prune_attack, reverse_engineer, Knowledge, ReverseOptions};
use edgepro::data::Dataset;
use edgepro::error::{Error, Result};
use edgepro::keystore::{load_key, save_key, KdfParams};
use edgepro::lock::{evaluate, generate_key, AuthorizationKey, EvalResult};
use edgepro::network::Network;
use edgepro::select::{rank_neurons, Strategy};
use edgepro::train::{lock_train, split_and_obfuscate, TrainReport};
use serde::Serialize;

use crate::config::{DatasetSpec, RunConfig};

pub const PASSPHRASE_VAR: &str = "EDGEPRO_PASSPHRASE";

/// Environment variable first, interactive prompt second, hard error when
/// neither is available.
pub fn passphrase() -> Result<String> {
    if let Ok(p) = std::env::var(PASSPHRASE_VAR) {
        return Ok(p);
    }
    if std::io::stdin().is_terminal() {
        eprint!("passphrase: ");
        std::io::stderr().flush()?;
        let mut line = String::new();
        std::io::stdin().read_line(&mut line)?;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if !trimmed.is_empty() {
            return Ok(trimmed.to_string());
        }
    }
    Err(Error::InvalidParam(format!(
        "passphrase required: set {PASSPHRASE_VAR} or run interactively"
    )))
}

fn load_dataset_spec(path: &Path) -> Result<DatasetSpec> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidParam(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(value: &T, out: Option<&Path>, name: &str) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serialization");
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(name), &text)?;
    }
    println!("{text}");
    Ok(())
}

#[derive(Serialize)]
struct RunReport {
    version: u32,
    seed: u64,
    train: TrainReport,
    eval: EvalResult,
    model_path: PathBuf,
    key_path: PathBuf,
}

/// Derived per-purpose seeds so one config seed pins the whole pipeline.
fn subseed(seed: u64, purpose: u64) -> u64 {
    seed.wrapping_add(purpose)
}

pub struct TrainedArtifacts {
    pub net: Network,
    pub key: AuthorizationKey,
    pub report: TrainReport,
    pub eval: EvalResult,
}

/// The shared train pipeline: split, rank, key, lock-train, evaluate.
pub fn run_pipeline(cfg: &RunConfig, seed: u64, limit: Option<usize>) -> Result<TrainedArtifacts> {
    let (train_data, test_data) = cfg.dataset.load_split(limit)?;
    let num_classes = train_data.num_classes.max(test_data.num_classes);
    let net = cfg.build_model(train_data.input_shape.clone(), num_classes, subseed(seed, 0));
    let strategy = cfg.strategy()?;
    let importance = if strategy == Strategy::Rnr {
        None
    } else {
        let probe_n = train_data.len().min(512);
        let probe = Dataset::new(train_data.examples[..probe_n].to_vec(), num_classes)?;
        Some(rank_neurons(&net, &probe, strategy, subseed(seed, 4))?)
    };
    let key = generate_key(
        &net,
        cfg.lock.rho,
        cfg.lock.value_range,
        cfg.lock.gamma_range,
        subseed(seed, 1),
        importance.as_ref(),
    )?;
    let split = split_and_obfuscate(train_data, num_classes, subseed(seed, 2))?;
    let (trained, report) = lock_train(net, &key, &split, &cfg.train_config(subseed(seed, 3)))?;
    let eval = evaluate(&trained, &test_data, Some(&key))?;
    Ok(TrainedArtifacts { net: trained, key, report, eval })
}

pub fn cmd_train(
    config: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
    limit: Option<usize>,
) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let seed = seed.unwrap_or(cfg.seed);
    let out_dir = out.or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from("."));
    let pass = passphrase()?;
    let arts = run_pipeline(&cfg, seed, limit)?;
    std::fs::create_dir_all(&out_dir)?;
    let model_path = out_dir.join("model.epnn");
    let key_path = out_dir.join("key.epkey");
    arts.net.save(&model_path)?;
    save_key(&key_path, &arts.key, &pass, &KdfParams::default())?;
    let report = RunReport {
        version: crate::config::CONFIG_VERSION,
        seed,
        train: arts.report,
        eval: arts.eval,
        model_path,
        key_path,
    };
    write_json(&report, Some(&out_dir), "report.json")
}

pub fn cmd_eval(
    model: &Path,
    dataset: &Path,
    key: Option<&Path>,
    limit: Option<usize>,
) -> Result<()> {
    let net = Network::load(model)?;
    let (data, _) = load_dataset_spec(dataset)?.load_full(limit)?;
    let key = match key {
        Some(path) => Some(load_key(path, &passphrase()?)?),
        None => None,
    };
    let result = evaluate(&net, &data, key.as_ref())?;
    write_json(&result, None, "eval.json")
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_attack_finetune(
    model: &Path,
    dataset: &Path,
    epochs: usize,
    lr: f64,
    holdout_fraction: f64,
    seed: u64,
    out: Option<PathBuf>,
    limit: Option<usize>,
) -> Result<()> {
    let net = Network::load(model)?;
    let (data, _) = load_dataset_spec(dataset)?.load_full(limit)?;
    if !(0.0..1.0).contains(&holdout_fraction) || holdout_fraction == 0.0 {
        return Err(Error::InvalidParam(format!(
            "holdout fraction must lie in (0, 1), got {holdout_fraction}"
        )));
    }
    let holdout_n = ((data.len() as f64) * holdout_fraction).round().max(1.0) as usize;
    if holdout_n >= data.len() {
        return Err(Error::InvalidParam(format!(
            "holdout of {holdout_n} examples leaves nothing to evaluate on"
        )));
    }
    let (holdout, rest) = data.split_at(holdout_n)?;
    let report = finetune_attack(&net, &holdout, epochs, lr, &rest, seed)?;
    write_json(&report, out.as_deref(), "report.json")
}

pub fn cmd_attack_prune(
    model: &Path,
    dataset: &Path,
    metric: &str,
    rate: f64,
    seed: u64,
    out: Option<PathBuf>,
    limit: Option<usize>,
) -> Result<()> {
    let net = Network::load(model)?;
    let (data, _) = load_dataset_spec(dataset)?.load_full(limit)?;
    let metric: Strategy = metric.parse()?;
    let probe_n = data.len().min(512);
    let probe = Dataset::new(data.examples[..probe_n].to_vec(), data.num_classes)?;
    let report = prune_attack(&net, metric, rate, &probe, &data, seed)?;
    write_json(&report, out.as_deref(), "report.json")
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_attack_reverse(
    model: &Path,
    key: &Path,
    dataset: &Path,
    knowledge: &str,
    budget: usize,
    threshold: f64,
    max_pair_order: usize,
    out: Option<PathBuf>,
    limit: Option<usize>,
) -> Result<()> {
    let net = Network::load(model)?;
    let true_key = load_key(key, &passphrase()?)?;
    let (probe, _) = load_dataset_spec(dataset)?.load_full(limit)?;
    let knowledge: Knowledge = knowledge.parse()?;
    let opts = ReverseOptions {
        knowledge,
        success_threshold: threshold,
        budget,
        max_pair_order,
        ..ReverseOptions::default()
    };
    let report = reverse_engineer(&net, &true_key, &probe, &opts)?;
    write_json(&report, out.as_deref(), "report.json")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SweepParameter {
    Rho,
    Vrange,
    Grange,
}

enum GridPoint {
    Scalar(f64),
    Range(f64, f64),
}

fn parse_grid(parameter: SweepParameter, grid: &str) -> Result<Vec<(String, GridPoint)>> {
    let mut points = Vec::new();
    for part in grid.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let point = match parameter {
            SweepParameter::Rho => GridPoint::Scalar(part.parse().map_err(|_| {
                Error::InvalidParam(format!("bad rho grid entry \"{part}\""))
            })?),
            SweepParameter::Vrange | SweepParameter::Grange => {
                let (lo, hi) = part.split_once(':').ok_or_else(|| {
                    Error::InvalidParam(format!("range grid entries look like lo:hi, got \"{part}\""))
                })?;
                GridPoint::Range(
                    lo.trim().parse().map_err(|_| {
                        Error::InvalidParam(format!("bad range bound \"{lo}\""))
                    })?,
                    hi.trim().parse().map_err(|_| {
                        Error::InvalidParam(format!("bad range bound \"{hi}\""))
                    })?,
                )
            }
        };
        points.push((part.to_string(), point));
    }
    if points.is_empty() {
        return Err(Error::InvalidParam("sweep grid is empty".into()));
    }
    Ok(points)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn cmd_sweep(
    config: &Path,
    parameter: SweepParameter,
    grid: &str,
    out: Option<PathBuf>,
    limit: Option<usize>,
) -> Result<()> {
    let base = RunConfig::load(config)?;
    let points = parse_grid(parameter, grid)?;
    let mut csv = String::from("setting,acc_nl,acc_nu,epoch_seconds,status\n");
    for (i, (label, point)) in points.iter().enumerate() {
        let mut cfg = base.clone();
        match (parameter, point) {
            (SweepParameter::Rho, GridPoint::Scalar(v)) => cfg.lock.rho = *v,
            (SweepParameter::Vrange, GridPoint::Range(lo, hi)) => cfg.lock.value_range = (*lo, *hi),
            (SweepParameter::Grange, GridPoint::Range(lo, hi)) => cfg.lock.gamma_range = (*lo, *hi),
            _ => unreachable!("parse_grid matches the parameter kind"),
        }
        let seed = base.seed.wrapping_add(i as u64);
        let row = match run_pipeline(&cfg, seed, limit) {
            Ok(arts) => {
                let per_epoch = arts.report.wall_seconds / arts.report.epochs_run.max(1) as f64;
                format!(
                    "{},{:.6},{:.6},{:.6},ok\n",
                    csv_field(label),
                    arts.eval.acc_nl.unwrap_or(f64::NAN),
                    arts.eval.acc_nu,
                    per_epoch
                )
            }
            Err(e) => {
                eprintln!("sweep point {label}: {e}");
                format!("{},,,,{}\n", csv_field(label), csv_field(&e.to_string()))
            }
        };
        csv.push_str(&row);
    }
    print!("{csv}");
    if let Some(dir) = out {
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("sweep.csv"), csv)?;
    }
    Ok(())
}
