//! The `dad` command line.
//!
//! Every command that writes files also writes `<primary output>.manifest`,
//! a `key = value` record of the command, its arguments, resolved
//! configuration, inputs, outputs and artifact fingerprints. `dad rerun
//! <manifest>` replays the recorded arguments.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::adversary::{build_cache, verify_cache, AttackConfig, CacheFile};
use crate::codec::hex;
use crate::config::{parse_kv, KvConfig};
use crate::data::synth::{generate, SynthConfig};
use crate::data::{corrupt_dataset, load_dataset, save_dataset, CorruptionKind, Dataset};
use crate::diagnostics::trials::{gaussian_trials, lemma31_trials, lemma33_trials, lemma34_trials, TrialSummary};
use crate::diagnostics::{chart_csv, chart_data, wasserstein_lp, EmpiricalDistribution, GroundMetric, BN_STATS_BATCHES};
use crate::discretizer::{train_discretizer, Discretizer, DiscretizerConfig};
use crate::error::{Error, Result};
use crate::evaluator::{report, reports_csv, SuiteManifest};
use crate::model::Model;
use crate::nn::Arch;
use crate::trainer::{budget_csv, budget_report, train, TrainConfig, TrainInputs, TrainLog};

#[derive(Debug, Parser)]
#[command(name = "dad", version, about = "Discrete adversarial distillation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the procedural 10-class image dataset.
    SynthData(SynthArgs),
    /// Train the vector-quantized discretizer.
    TrainVq(TrainVqArgs),
    /// Generate and cache teacher adversarial examples.
    BuildCache(BuildCacheArgs),
    /// Train a model with one of the objectives.
    Train(TrainArgs),
    /// Evaluate models on a suite manifest and write the robustness report.
    Eval(EvalArgs),
    /// Run the randomized theory checks.
    Diagnose(DiagnoseArgs),
    /// Batch-norm Wasserstein distance against accuracy per (model, suite).
    ChartData(ChartArgs),
    /// Relative pass-count cost of training runs.
    Budget(BudgetArgs),
    /// Replay the arguments recorded in a manifest.
    Rerun { manifest: PathBuf },
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl ConfigArgs {
    fn apply<C: KvConfig>(&self, cfg: &mut C) -> Result<()> {
        if let Some(p) = &self.config {
            cfg.apply_text(&read_text(p)?)?;
        }
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{s}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset root containing one directory per split.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "train")]
    pub split: String,
}

impl DataArgs {
    fn load(&self) -> Result<Dataset> {
        load_dataset(&self.data, &self.split)
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "train")]
    pub split: String,
    #[arg(long, default_value_t = 100)]
    pub per_class: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainVqArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BuildCacheArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub teacher: PathBuf,
    #[arg(long)]
    pub discretizer: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; the output does not depend on this.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// small-cnn (student), wide-cnn (teacher) or mlp.
    #[arg(long, default_value = "small-cnn")]
    pub arch: String,
    /// Start from this checkpoint instead of a fresh network.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[arg(long)]
    pub discretizer: Option<PathBuf>,
    /// Append corrupted copies of the training set, e.g. `fog:3,blur:2`.
    #[arg(long, value_delimiter = ',')]
    pub augment: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch log CSV; defaults to `<out>.log.csv`.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Clean evaluation set.
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub suites: PathBuf,
    /// `name=path`; repeatable.
    #[arg(long = "model", required = true)]
    pub models: Vec<String>,
    /// Reference model for the mCE column.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[command(subcommand)]
    pub check: Check,
}

#[derive(Debug, Subcommand)]
pub enum Check {
    Lemma31(TrialArgs),
    Lemma33(TrialArgs),
    Lemma34(TrialArgs),
    /// Gaussian estimator against the LP, or the LP between two distribution files.
    Wasserstein(WassersteinArgs),
}

#[derive(Debug, Args)]
pub struct TrialArgs {
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the summary (and a manifest) here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct WassersteinArgs {
    #[command(flatten)]
    pub trials: TrialArgs,
    #[arg(long, default_value_t = 200)]
    pub grid: usize,
    #[arg(long, requires = "q")]
    pub p: Option<PathBuf>,
    #[arg(long, requires = "p")]
    pub q: Option<PathBuf>,
    /// Label distance; defaults to the feature-space diameter.
    #[arg(long)]
    pub label_cost: Option<f64>,
    #[arg(long, default_value_t = 1)]
    pub order: u32,
}

#[derive(Debug, Args)]
pub struct ChartArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub suites: PathBuf,
    #[arg(long = "model", required = true)]
    pub models: Vec<String>,
    #[arg(long, default_value_t = BN_STATS_BATCHES)]
    pub batches: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BudgetArgs {
    /// `name=path` of a training log; the first is the baseline.
    #[arg(long = "log", required = true)]
    pub logs: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Record written next to every output.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub seed: Option<u64>,
    pub config: Vec<(String, String)>,
    pub inputs: Vec<(String, PathBuf)>,
    pub outputs: Vec<(String, PathBuf)>,
    pub fingerprints: Vec<(String, String)>,
}

impl RunManifest {
    pub fn to_text(&self) -> String {
        let mut s = format!("command = {}\n", self.command);
        for a in &self.args {
            writeln!(s, "arg = {a}").unwrap();
        }
        if let Some(seed) = self.seed {
            writeln!(s, "seed = {seed}").unwrap();
        }
        for (k, v) in &self.config {
            writeln!(s, "config.{k} = {v}").unwrap();
        }
        for (k, p) in &self.inputs {
            writeln!(s, "input.{k} = {}", p.display()).unwrap();
        }
        for (k, p) in &self.outputs {
            writeln!(s, "output.{k} = {}", p.display()).unwrap();
        }
        for (k, f) in &self.fingerprints {
            writeln!(s, "fingerprint.{k} = {f}").unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = RunManifest::default();
        for (k, v) in parse_kv(text)? {
            match k.split_once('.') {
                None if k == "command" => m.command = v,
                None if k == "arg" => m.args.push(v),
                None if k == "seed" => {
                    m.seed = Some(v.parse().map_err(|_| Error::Config(format!("bad seed `{v}`")))?)
                }
                Some(("config", key)) => m.config.push((key.into(), v)),
                Some(("input", key)) => m.inputs.push((key.into(), v.into())),
                Some(("output", key)) => m.outputs.push((key.into(), v.into())),
                Some(("fingerprint", key)) => m.fingerprints.push((key.into(), v)),
                _ => return Err(Error::Config(format!("unknown manifest key `{k}`"))),
            }
        }
        if m.command.is_empty() {
            return Err(Error::Config("manifest has no command".into()));
        }
        Ok(m)
    }

    fn write_next_to(&self, output: &Path) -> Result<PathBuf> {
        let path = manifest_path(output);
        std::fs::write(&path, self.to_text())?;
        Ok(path)
    }
}

pub fn manifest_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|_| Error::MissingPath(path.to_path_buf()))
}

fn named_path(spec: &str) -> Result<(String, PathBuf)> {
    match spec.split_once('=') {
        Some((n, p)) if !n.is_empty() && !p.is_empty() => Ok((n.to_string(), PathBuf::from(p))),
        _ => Err(Error::Config(format!("expected NAME=PATH, got `{spec}`"))),
    }
}

fn frozen(path: &Path) -> Result<Model> {
    let mut m = Model::load(path)?;
    m.freeze();
    Ok(m)
}

/// Parses `kind:severity` items.
fn parse_augment(items: &[String]) -> Result<Vec<(CorruptionKind, u8)>> {
    items
        .iter()
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            let (k, sev) =
                s.split_once(':').ok_or_else(|| Error::Config(format!("expected KIND:SEVERITY, got `{s}`")))?;
            let kind: CorruptionKind = k.trim().parse()?;
            let sev: u8 = sev.trim().parse().map_err(|_| Error::Config(format!("bad severity in `{s}`")))?;
            kind.parameter(sev)?;
            Ok((kind, sev))
        })
        .collect()
}

/// Parses `args` (including the program name) and runs the command.
///
/// Returns 0 on success, 1 on runtime failure and 2 on usage errors.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    dispatch_to(args, &mut std::io::stdout(), &mut std::io::stderr())
}

pub fn dispatch_to<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let raw: Vec<std::ffi::OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&raw) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind::*;
            let code = match e.kind() {
                DisplayHelp | DisplayVersion => 0,
                _ => 2,
            };
            let text = e.render().to_string();
            let _ = if code == 0 { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    let argv: Vec<String> = raw.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match run(cli, &argv, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

fn run(cli: Cli, argv: &[String], out: &mut dyn Write) -> Result<()> {
    let mut manifest = RunManifest { args: argv.to_vec(), ..Default::default() };
    match cli.command {
        Command::Rerun { manifest: path } => {
            let m = RunManifest::parse(&read_text(&path)?)?;
            let mut args = vec!["dad".to_string()];
            args.extend(m.args);
            let mut err = Vec::new();
            return match dispatch_to(args, out, &mut err) {
                0 => Ok(()),
                _ => Err(Error::Config(String::from_utf8_lossy(&err).trim().to_string())),
            };
        }
        Command::SynthData(a) => {
            manifest.command = "synth-data".into();
            let ds = generate(&SynthConfig { per_class: a.per_class, size: a.size, seed: a.seed });
            save_dataset(&ds, &a.out, &a.split)?;
            writeln!(out, "wrote {} images to {}", ds.len(), a.out.join(&a.split).display())?;
            manifest.seed = Some(a.seed);
            manifest.outputs.push(("data".into(), a.out.join(&a.split)));
            manifest.write_next_to(&a.out.join(&a.split))?;
        }
        Command::TrainVq(a) => {
            manifest.command = "train-vq".into();
            let mut cfg = DiscretizerConfig::default();
            a.cfg.apply(&mut cfg)?;
            let ds = a.data.load()?;
            info!("training discretizer on {} images", ds.len());
            let (disc, rep) = train_discretizer(&ds, &cfg)?;
            disc.save(&a.out)?;
            writeln!(
                out,
                "heldout_mae = {:.6}\nheldout_mse = {:.6}\nperplexity = {:.3}\ndead_codes_reseeded = {}",
                rep.heldout_mae, rep.heldout_mse, rep.perplexity, rep.dead_codes_reseeded
            )?;
            manifest.seed = Some(cfg.seed);
            manifest.config = cfg.entries();
            manifest.inputs.push(("data".into(), a.data.data.join(&a.data.split)));
            manifest.outputs.push(("discretizer".into(), a.out.clone()));
            manifest.fingerprints.push(("discretizer".into(), hex(&disc.fingerprint()?)));
            manifest.write_next_to(&a.out)?;
        }
        Command::BuildCache(a) => {
            manifest.command = "build-cache".into();
            let mut cfg = AttackConfig::default();
            a.cfg.apply(&mut cfg)?;
            let ds = a.data.load()?;
            let teacher = frozen(&a.teacher)?;
            let disc = Discretizer::load(&a.discretizer)?;
            info!("generating adversarial examples for {} images", ds.len());
            let cache = build_cache(&ds, &teacher, &disc, &cfg, a.seed, a.workers.max(1))?;
            cache.save(&a.out)?;
            let mismatches = verify_cache(&cache, &teacher)?;
            writeln!(
                out,
                "records = {}\naccepted = {}\nacceptance_rate = {:.4}\nreverify_mismatches = {mismatches}",
                cache.records.len(),
                cache.accepted(),
                cache.acceptance_rate()
            )?;
            manifest.seed = Some(a.seed);
            manifest.config = cfg.entries();
            manifest.inputs.extend([
                ("data".into(), a.data.data.join(&a.data.split)),
                ("teacher".into(), a.teacher.clone()),
                ("discretizer".into(), a.discretizer.clone()),
            ]);
            manifest.outputs.push(("cache".into(), a.out.clone()));
            manifest.fingerprints.extend([
                ("teacher".into(), hex(&teacher.fingerprint()?)),
                ("discretizer".into(), hex(&disc.fingerprint()?)),
            ]);
            manifest.write_next_to(&a.out)?;
        }
        Command::Train(a) => {
            manifest.command = "train".into();
            let mut cfg = TrainConfig::default();
            a.cfg.apply(&mut cfg)?;
            let mut ds = a.data.load()?;
            let extra = parse_augment(&a.augment)?;
            if !extra.is_empty() {
                let mut parts = vec![ds.clone()];
                for &(k, s) in &extra {
                    parts.push(corrupt_dataset(&ds, k, s, cfg.seed)?);
                }
                ds = Dataset::concat(&parts)?;
            }
            let shape = ds.image_shape().ok_or_else(|| Error::Empty("training set".into()))?;
            let mut student = match &a.init {
                Some(p) => Model::load(p)?,
                None => Model::new(Arch::from_name(&a.arch)?, shape, ds.num_classes(), cfg.seed)?,
            };
            let teacher = a.teacher.as_deref().map(frozen).transpose()?;
            let cache = a.cache.as_deref().map(CacheFile::load).transpose()?;
            let disc = a.discretizer.as_deref().map(Discretizer::load).transpose()?;
            if let (Some(c), Some(t), Some(d)) = (&cache, &teacher, &disc) {
                c.check_fingerprints(&t.fingerprint()?, &d.fingerprint()?)?;
            }
            let inputs =
                TrainInputs { dataset: &ds, teacher: teacher.as_ref(), cache: cache.as_ref(), discretizer: disc.as_ref() };
            info!("training {} with {} on {} images", student.arch, cfg.distill.objective, ds.len());
            let log = train(&mut student, &inputs, &cfg)?;
            student.save(&a.out)?;
            let log_path = a.log.clone().unwrap_or_else(|| {
                let mut s = a.out.as_os_str().to_owned();
                s.push(".log.csv");
                PathBuf::from(s)
            });
            std::fs::write(&log_path, log.to_csv())?;
            let last = log.epochs.last().map_or(f64::NAN, |e| e.loss);
            writeln!(out, "final_loss = {last:.6}\ncost = {}", log.cost())?;
            manifest.seed = Some(cfg.seed);
            manifest.config = cfg.entries();
            manifest.inputs.push(("data".into(), a.data.data.join(&a.data.split)));
            for (k, p) in [("init", &a.init), ("teacher", &a.teacher), ("cache", &a.cache), ("discretizer", &a.discretizer)] {
                if let Some(p) = p {
                    manifest.inputs.push((k.into(), p.clone()));
                }
            }
            if let Some(t) = &teacher {
                manifest.fingerprints.push(("teacher".into(), hex(&t.fingerprint()?)));
            }
            if let Some(d) = &disc {
                manifest.fingerprints.push(("discretizer".into(), hex(&d.fingerprint()?)));
            }
            manifest.fingerprints.push(("model".into(), hex(&student.fingerprint()?)));
            manifest.outputs.extend([("model".into(), a.out.clone()), ("log".into(), log_path)]);
            manifest.write_next_to(&a.out)?;
        }
        Command::Eval(a) => {
            manifest.command = "eval".into();
            let clean = a.data.load()?;
            let suites_manifest = SuiteManifest::load(&a.suites)?;
            let suites = suites_manifest.resolve(&clean)?;
            let baseline = a.baseline.as_deref().map(frozen).transpose()?;
            let mut reports = Vec::new();
            for spec in &a.models {
                let (name, path) = named_path(spec)?;
                let m = frozen(&path)?;
                reports.push(report(&name, &m, &suites_manifest, &suites, &clean, baseline.as_ref())?);
                manifest.fingerprints.push((name.clone(), hex(&m.fingerprint()?)));
                manifest.inputs.push((name, path));
            }
            let csv = reports_csv(&reports)?;
            std::fs::write(&a.report, &csv)?;
            out.write_all(csv.as_bytes())?;
            manifest.seed = Some(suites_manifest.seed);
            manifest.inputs.push(("suites".into(), a.suites.clone()));
            if let Some(b) = &a.baseline {
                manifest.inputs.push(("baseline".into(), b.clone()));
            }
            manifest.outputs.push(("report".into(), a.report.clone()));
            manifest.write_next_to(&a.report)?;
        }
        Command::Diagnose(a) => {
            let (summary, t): (String, &TrialArgs) = match &a.check {
                Check::Lemma31(t) => (trial_text(lemma31_trials(t.trials, t.seed)?)?, t),
                Check::Lemma33(t) => (trial_text(lemma33_trials(t.trials, t.seed)?)?, t),
                Check::Lemma34(t) => (trial_text(lemma34_trials(t.trials, t.seed)?)?, t),
                Check::Wasserstein(w) => match (&w.p, &w.q) {
                    (Some(p), Some(q)) => {
                        let (p, q) = (EmpiricalDistribution::load(p)?, EmpiricalDistribution::load(q)?);
                        let mut metric = match w.label_cost {
                            Some(c) => GroundMetric::new(c),
                            None => GroundMetric::scaled_to(&[&p, &q]),
                        };
                        metric.order = w.order;
                        (format!("wasserstein = {}\n", wasserstein_lp(&p, &q, &metric)?), &w.trials)
                    }
                    _ => (trial_text(gaussian_trials(w.trials.trials, w.trials.seed, w.grid)?)?, &w.trials),
                },
            };
            out.write_all(summary.as_bytes())?;
            manifest.command = "diagnose".into();
            manifest.seed = Some(t.seed);
            if let Some(p) = &t.out {
                std::fs::write(p, &summary)?;
                manifest.outputs.push(("summary".into(), p.clone()));
                manifest.write_next_to(p)?;
            }
            if summary.contains("FAILED") {
                return Err(Error::InvalidArgument("some trials failed".into()));
            }
        }
        Command::ChartData(a) => {
            manifest.command = "chart-data".into();
            let clean = a.data.load()?;
            let sm = SuiteManifest::load(&a.suites)?;
            let suites = sm.resolve(&clean)?;
            let mut models = Vec::new();
            for spec in &a.models {
                let (name, path) = named_path(spec)?;
                models.push((name.clone(), frozen(&path)?));
                manifest.inputs.push((name, path));
            }
            let refs: Vec<(String, &Model)> = models.iter().map(|(n, m)| (n.clone(), m)).collect();
            let rows = chart_data(&refs, &clean, &suites, a.batches, a.batch_size)?;
            let csv = chart_csv(&rows);
            std::fs::write(&a.out, &csv)?;
            out.write_all(csv.as_bytes())?;
            manifest.seed = Some(sm.seed);
            manifest.config = vec![("batches".into(), a.batches.to_string()), ("batch_size".into(), a.batch_size.to_string())];
            manifest.outputs.push(("chart".into(), a.out.clone()));
            manifest.write_next_to(&a.out)?;
        }
        Command::Budget(a) => {
            manifest.command = "budget".into();
            let mut logs = Vec::new();
            for spec in &a.logs {
                let (name, path) = named_path(spec)?;
                logs.push((name.clone(), TrainLog::from_csv(&read_text(&path)?, &name)?));
                manifest.inputs.push((name, path));
            }
            let refs: Vec<(&str, &TrainLog)> = logs.iter().map(|(n, l)| (n.as_str(), l)).collect();
            let csv = budget_csv(&budget_report(&refs)?);
            out.write_all(csv.as_bytes())?;
            if let Some(p) = &a.out {
                std::fs::write(p, &csv)?;
                manifest.outputs.push(("budget".into(), p.clone()));
                manifest.write_next_to(p)?;
            }
        }
    }
    Ok(())
}

fn trial_text(s: TrialSummary) -> Result<String> {
    let status = if s.all_passed() { "ok" } else { "FAILED" };
    Ok(format!("{s}\nstatus = {status}\n"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (i32, String, String) {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        let code = dispatch_to(std::iter::once("dad").chain(args.iter().copied()), &mut o, &mut e);
        (code, String::from_utf8(o).unwrap(), String::from_utf8(e).unwrap())
    }

    #[test]
    fn usage_and_exit_codes() {
        let (code, _, err) = run_capture(&[]);
        assert_eq!(code, 2);
        assert!(err.contains("Usage"));
        assert_eq!(run_capture(&["frobnicate"]).0, 2);
        assert_eq!(run_capture(&["diagnose", "lemma31", "--bogus"]).0, 2);
        let (code, out, _) = run_capture(&["--help"]);
        assert_eq!(code, 0);
        assert!(out.contains("build-cache"));
        let (code, _, err) = run_capture(&["train-vq", "--data", "/nonexistent/dir", "--out", "/tmp/x"]);
        assert_eq!(code, 1);
        assert!(err.starts_with("error:"));
    }

    #[test]
    fn diagnose_is_deterministic() {
        let a = run_capture(&["diagnose", "lemma31", "--trials", "100", "--seed", "7"]);
        let b = run_capture(&["diagnose", "lemma31", "--trials", "100", "--seed", "7"]);
        assert_eq!(a.0, 0);
        assert_eq!(a, b);
        assert!(a.1.contains("100/100"));
    }

    #[test]
    fn manifest_roundtrip() {
        let m = RunManifest {
            command: "train".into(),
            args: vec!["train".into(), "--out".into(), "a b".into()],
            seed: Some(3),
            config: vec![("epochs".into(), "2".into())],
            inputs: vec![("data".into(), "d/train".into())],
            outputs: vec![("model".into(), "m.bin".into())],
            fingerprints: vec![("model".into(), "ab".into())],
        };
        assert_eq!(RunManifest::parse(&m.to_text()).unwrap(), m);
        assert!(RunManifest::parse("bogus = 1").is_err());
    }

    #[test]
    fn augment_specs() {
        assert_eq!(
            parse_augment(&["fog:3".into(), "blur:1".into()]).unwrap(),
            vec![(CorruptionKind::Fog, 3), (CorruptionKind::Blur, 1)]
        );
        assert!(parse_augment(&["fog".into()]).is_err());
        assert!(parse_augment(&["fog:9".into()]).is_err());
    }
}
