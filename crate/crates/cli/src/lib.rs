//! Command-line driver: dataset synthesis, training, single-pair
//! registration, evaluation and reporting.
//!
//! Settings resolve in this order, later winning: preset, config file,
//! flags. The seed falls back to `REGGAN_SEED`, then 0.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use reggan_core::baseline::BaselineConfig;
use reggan_core::harness::{
    aggregate, evaluate_case, parse_cases_csv, registrar, render_cases_csv, render_report,
    Artifacts, Method, MetricsReport, REPORT_FORMATS,
};
use reggan_core::imaging::{load_image, save_field, save_image};
use reggan_core::networks::NetworkParams;
use reggan_core::synthdata::{
    build_dataset, read_dataset, write_dataset, DatasetConfig, Split, MANIFEST,
};
use reggan_core::training::{self, Preset, TrainConfig};

pub const SEED_ENV: &str = "REGGAN_SEED";
pub const GENERATOR_FILE: &str = "generator.rgpt";
pub const TRAINLOG_FILE: &str = "trainlog.csv";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] reggan_core::Error),
    #[error("{failed} of {total} case evaluations failed")]
    PartialFailure { failed: usize, total: usize },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(reggan_core::Error::Divergence { .. }) => 3,
            CliError::PartialFailure { .. } => 4,
            _ => 2,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "reggan",
    version,
    about = "Adversarial multimodal deformable registration"
)]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a deformed multimodal phantom dataset.
    Simulate(SimulateArgs),
    /// Pretrain the generator, then run adversarial training.
    Train(TrainArgs),
    /// Register one floating image onto a reference with a trained generator.
    Register(RegisterArgs),
    /// Score registration methods on a dataset split.
    Evaluate(EvaluateArgs),
    /// Aggregate a per-case CSV and render it.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub phantoms: Option<usize>,
    #[arg(long)]
    pub deformations: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    /// Maximum displacement of the simulated deformations, pixels.
    #[arg(long)]
    pub max_disp: Option<f64>,
    #[arg(long)]
    pub unimodal: bool,
    /// Overwrite an existing dataset.
    #[arg(long)]
    pub force: bool,
    /// Print the resolved configuration without writing anything.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `simulate`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory for checkpoints and the training log.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub pretrain_iters: Option<usize>,
    #[arg(long)]
    pub gan_iters: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lr_pretrain: Option<f64>,
    #[arg(long)]
    pub lr_gan: Option<f64>,
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub flt: PathBuf,
    /// Output directory for `trans.rimg` and `field.rfld`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated subset of before, gan_reg, gan_reg_ncyc, baseline_nmi.
    #[arg(long, value_delimiter = ',', default_value = "before")]
    pub methods: Vec<Method>,
    /// Generator checkpoint for gan_reg.
    #[arg(long)]
    pub gan_reg: Option<PathBuf>,
    /// Generator checkpoint for gan_reg_ncyc.
    #[arg(long)]
    pub gan_reg_ncyc: Option<PathBuf>,
    #[arg(long, default_value = "eval")]
    pub split: SplitArg,
    #[arg(long)]
    pub baseline_iters: Option<usize>,
    /// Parallel case evaluations.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Also write every recovered field under `fields/<method>/`.
    #[arg(long)]
    pub save_fields: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Eval,
    All,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Per-case CSV written by `evaluate`.
    #[arg(long)]
    pub cases: PathBuf,
    #[arg(long, default_value = "text")]
    pub format: String,
    /// Write to this file instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// File-level configuration. Sections overlay the preset defaults key by key.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub preset: Option<Preset>,
    pub jobs: Option<usize>,
    pub dataset: Option<toml::Table>,
    pub train: Option<toml::Table>,
    pub baseline: Option<toml::Table>,
    #[serde(default)]
    pub paths: Paths,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub gan_reg: Option<PathBuf>,
    pub gan_reg_ncyc: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))
    }

    /// Reads a config file, resolving its relative paths against the file's
    /// directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.paths.data,
            &mut cfg.paths.out,
            &mut cfg.paths.gan_reg,
            &mut cfg.paths.gan_reg_ncyc,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }
}

/// Applies the keys of `table` over the serialized `base`, rejecting keys
/// the target type does not know.
pub fn overlay<T: Serialize + DeserializeOwned>(
    base: &T,
    table: Option<&toml::Table>,
    section: &str,
) -> CliResult<T> {
    let Some(table) = table else {
        return Ok(toml::from_str(
            &toml::to_string(base).map_err(|e| CliError::Config(e.to_string()))?,
        )
        .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?);
    };
    let mut merged = toml::Table::try_from(base).map_err(|e| CliError::Config(e.to_string()))?;
    merge(&mut merged, table);
    merged
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(format!("[{section}]: {}", e.message())))
}

fn merge(dst: &mut toml::Table, src: &toml::Table) {
    for (k, v) in src {
        match (dst.get_mut(k), v) {
            (Some(toml::Value::Table(d)), toml::Value::Table(s)) => merge(d, s),
            _ => {
                dst.insert(k.clone(), v.clone());
            }
        }
    }
}

fn env_seed() -> CliResult<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => {
            s.trim().parse().map(Some).map_err(|_| {
                CliError::Usage(format!("{SEED_ENV}=`{s}` is not an unsigned integer"))
            })
        }
        Err(_) => Ok(None),
    }
}

fn resolve_seed(flag: Option<u64>, cfg: &RunConfig) -> CliResult<u64> {
    Ok(match (flag, cfg.seed) {
        (Some(s), _) | (None, Some(s)) => s,
        (None, None) => env_seed()?.unwrap_or(0),
    })
}

fn required(path: Option<PathBuf>, what: &str) -> CliResult<PathBuf> {
    path.ok_or_else(|| CliError::Usage(format!("missing {what} (flag or [paths] in the config)")))
}

/// Resolved `simulate` settings.
pub fn simulate_config(args: &SimulateArgs, cfg: &RunConfig) -> CliResult<DatasetConfig> {
    let seed = resolve_seed(args.seed, cfg)?;
    let mut d = overlay(&DatasetConfig::desk(seed), cfg.dataset.as_ref(), "dataset")?;
    d.seed = seed;
    d.phantoms = args.phantoms.unwrap_or(d.phantoms);
    d.deformations = args.deformations.unwrap_or(d.deformations);
    d.width = args.width.unwrap_or(d.width);
    d.height = args.height.unwrap_or(d.height);
    d.template.max_displacement = args.max_disp.unwrap_or(d.template.max_displacement);
    d.unimodal |= args.unimodal;
    d.validate()?;
    Ok(d)
}

pub fn cmd_simulate(args: &SimulateArgs, cfg: &RunConfig, out: &mut dyn Write) -> CliResult<()> {
    let dataset_cfg = simulate_config(args, cfg)?;
    if args.dry_run {
        writeln!(
            out,
            "{}",
            serde_json::to_string_pretty(&dataset_cfg).map_err(reggan_core::Error::from)?
        )?;
        writeln!(out, "cases={}", dataset_cfg.total_cases())?;
        return Ok(());
    }
    let dir = required(args.out.clone().or(cfg.paths.out.clone()), "--out")?;
    if dir.exists() && std::fs::read_dir(&dir)?.next().is_some() {
        if !args.force {
            return Err(CliError::Usage(format!(
                "{} is not empty (use --force)",
                dir.display()
            )));
        }
        if dir.join(MANIFEST).exists() {
            std::fs::remove_dir_all(&dir)?;
        } else {
            return Err(CliError::Usage(format!(
                "{} is not empty and is not a dataset; refusing to overwrite",
                dir.display()
            )));
        }
    }
    let t = Instant::now();
    let ds = build_dataset(&dataset_cfg)?;
    write_dataset(&ds, &dir)?;
    writeln!(
        out,
        "wrote {} cases ({} train, {} eval) to {} in {:.1}s",
        ds.cases.len(),
        ds.split(Split::Train).len(),
        ds.split(Split::Eval).len(),
        dir.display(),
        t.elapsed().as_secs_f64()
    )?;
    Ok(())
}

/// Resolved `train` settings.
pub fn train_config(args: &TrainArgs, cfg: &RunConfig) -> CliResult<TrainConfig> {
    let preset = args.preset.or(cfg.preset).unwrap_or(Preset::Desk);
    let mut t = overlay(&TrainConfig::preset(preset), cfg.train.as_ref(), "train")?;
    t.seed = resolve_seed(args.seed, cfg)?;
    t.pretrain_iters = args.pretrain_iters.unwrap_or(t.pretrain_iters);
    t.gan_iters = args.gan_iters.unwrap_or(t.gan_iters);
    t.batch_size = args.batch_size.unwrap_or(t.batch_size);
    t.weights.lambda_cyc = args.lambda.unwrap_or(t.weights.lambda_cyc);
    t.lr_pretrain = args.lr_pretrain.unwrap_or(t.lr_pretrain);
    t.lr_gan = args.lr_gan.unwrap_or(t.lr_gan);
    t.validate()?;
    Ok(t)
}

fn describe_train(t: &TrainConfig) -> String {
    format!(
        "beta1={} beta2={} lambda={} lr_pretrain={} lr_gan={} pretrain_iters={} gan_iters={} batch_size={} seed={}",
        t.beta1,
        t.beta2,
        t.lambda(),
        t.lr_pretrain,
        t.lr_gan,
        t.pretrain_iters,
        t.gan_iters,
        t.batch_size,
        t.seed
    )
}

pub fn cmd_train(args: &TrainArgs, cfg: &RunConfig, out: &mut dyn Write) -> CliResult<()> {
    let t = train_config(args, cfg)?;
    if args.dry_run {
        writeln!(out, "{}", describe_train(&t))?;
        return Ok(());
    }
    let data = required(args.data.clone().or(cfg.paths.data.clone()), "--data")?;
    let dir = required(args.out.clone().or(cfg.paths.out.clone()), "--out")?;
    if !data.join(MANIFEST).is_file() {
        return Err(CliError::Usage(format!(
            "no dataset manifest under {}",
            data.display()
        )));
    }
    if dir.join(GENERATOR_FILE).exists() && !args.force {
        return Err(CliError::Usage(format!(
            "{} already holds a checkpoint (use --force)",
            dir.display()
        )));
    }
    let ds = read_dataset(&data)?;
    let cases = ds.split(Split::Train);
    writeln!(out, "{}", describe_train(&t))?;
    std::fs::create_dir_all(&dir)?;
    match training::train(&t, &cases) {
        Ok(o) => {
            o.nets.g.save(dir.join(GENERATOR_FILE))?;
            o.nets.f.save(dir.join("generator_f.rgpt"))?;
            o.nets.d_x.save(dir.join("discriminator_x.rgpt"))?;
            o.nets.d_y.save(dir.join("discriminator_y.rgpt"))?;
            o.log().save_csv(dir.join(TRAINLOG_FILE))?;
            writeln!(
                out,
                "best validation err_def {:.4} at iteration {}; wrote {}",
                o.best_err_def,
                o.best_iteration,
                dir.join(GENERATOR_FILE).display()
            )?;
            Ok(())
        }
        Err(reggan_core::Error::Divergence {
            iteration,
            reason,
            last_good,
        }) => {
            if let Some(g) = &last_good {
                g.save(dir.join(GENERATOR_FILE))?;
            }
            Err(reggan_core::Error::Divergence {
                iteration,
                reason,
                last_good,
            }
            .into())
        }
        Err(e) => Err(e.into()),
    }
}

pub fn cmd_register(args: &RegisterArgs, out: &mut dyn Write) -> CliResult<()> {
    let g = NetworkParams::load(&args.checkpoint)?;
    let reference = load_image(&args.reference)?;
    let flt = load_image(&args.flt)?;
    if reference.dims() != flt.dims() {
        return Err(CliError::Usage(format!(
            "reference is {}x{} but floating image is {}x{}",
            reference.width(),
            reference.height(),
            flt.width(),
            flt.height()
        )));
    }
    let (o, elapsed) = training::register(&g, &reference, &flt)?;
    std::fs::create_dir_all(&args.out)?;
    save_image(&o.trans, args.out.join("trans.rimg"))?;
    save_field(&o.field, args.out.join("field.rfld"))?;
    writeln!(out, "time_s={:.3}", elapsed.as_secs_f64())?;
    Ok(())
}

fn load_checkpoint(
    flag: &Option<PathBuf>,
    cfg: &Option<PathBuf>,
    method: Method,
) -> CliResult<Option<NetworkParams>> {
    match flag.as_ref().or(cfg.as_ref()) {
        Some(p) if p.is_file() => Ok(Some(NetworkParams::load(p)?)),
        Some(p) => Err(CliError::Usage(format!(
            "checkpoint {} for {method} does not exist",
            p.display()
        ))),
        None => Ok(None),
    }
}

/// Evaluates every (method, case) pair; failures are returned separately.
fn run_evaluations(
    methods: &[Method],
    artifacts: &Artifacts,
    cases: &[&reggan_core::synthdata::RegistrationCase],
    jobs: usize,
) -> CliResult<Vec<(Method, String, reggan_core::Result<MetricsReport>)>> {
    let registrars = methods
        .iter()
        .map(|&m| registrar(m, artifacts))
        .collect::<reggan_core::Result<Vec<_>>>()?;
    let tasks: Vec<(usize, usize)> = (0..methods.len())
        .flat_map(|m| (0..cases.len()).map(move |c| (m, c)))
        .collect();
    let run = |&(m, c): &(usize, usize)| {
        (
            methods[m],
            cases[c].id.clone(),
            evaluate_case(cases[c], &*registrars[m]),
        )
    };
    if jobs <= 1 {
        return Ok(tasks.iter().map(run).collect());
    }
    // Registrars are not required to be Sync; each worker builds its own.
    let chunk = tasks.len().div_ceil(jobs);
    let results = std::thread::scope(|s| {
        let handles: Vec<_> = tasks
            .chunks(chunk.max(1))
            .map(|part| {
                s.spawn(move || -> reggan_core::Result<Vec<_>> {
                    let regs = methods
                        .iter()
                        .map(|&m| registrar(m, artifacts))
                        .collect::<reggan_core::Result<Vec<_>>>()?;
                    Ok(part
                        .iter()
                        .map(|&(m, c)| {
                            (
                                methods[m],
                                cases[c].id.clone(),
                                evaluate_case(cases[c], &*regs[m]),
                            )
                        })
                        .collect())
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect::<Vec<_>>()
    });
    let mut all = Vec::with_capacity(tasks.len());
    for r in results {
        all.extend(r?);
    }
    Ok(all)
}

pub fn cmd_evaluate(
    args: &EvaluateArgs,
    cfg: &RunConfig,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> CliResult<()> {
    let data = required(args.data.clone().or(cfg.paths.data.clone()), "--data")?;
    let dir = required(args.out.clone().or(cfg.paths.out.clone()), "--out")?;
    if !data.join(MANIFEST).is_file() {
        return Err(CliError::Usage(format!(
            "no dataset manifest under {}",
            data.display()
        )));
    }
    let mut methods = args.methods.clone();
    methods.sort();
    methods.dedup();
    let mut baseline = overlay(
        &BaselineConfig::default(),
        cfg.baseline.as_ref(),
        "baseline",
    )?;
    baseline.iters = args.baseline_iters.unwrap_or(baseline.iters);
    baseline.validate()?;
    let artifacts = Artifacts {
        gan_reg: load_checkpoint(&args.gan_reg, &cfg.paths.gan_reg, Method::GanReg)?,
        gan_reg_ncyc: load_checkpoint(
            &args.gan_reg_ncyc,
            &cfg.paths.gan_reg_ncyc,
            Method::GanRegNcyc,
        )?,
        baseline,
    };
    let ds = read_dataset(&data)?;
    let cases = match args.split {
        SplitArg::Train => ds.split(Split::Train),
        SplitArg::Eval => ds.split(Split::Eval),
        SplitArg::All => ds.cases.iter().collect(),
    };
    if cases.is_empty() {
        return Err(CliError::Usage("selected split has no cases".into()));
    }
    let jobs = args.jobs.or(cfg.jobs).unwrap_or(1).max(1);
    let results = run_evaluations(&methods, &artifacts, &cases, jobs)?;
    std::fs::create_dir_all(&dir)?;
    let mut reports = Vec::with_capacity(results.len());
    let mut failed = 0;
    for (m, id, r) in results {
        match r {
            Ok(rep) => reports.push(rep),
            Err(e) => {
                failed += 1;
                writeln!(err, "case {id} method {m}: {e}")?;
            }
        }
    }
    if args.save_fields {
        for &m in &methods {
            let reg = registrar(m, &artifacts)?;
            let fd = dir.join("fields").join(m.name());
            std::fs::create_dir_all(&fd)?;
            for c in &cases {
                if let Ok(f) = reg.register(&c.reference, &c.flt) {
                    save_field(&f, fd.join(format!("{}.rfld", c.id)))?;
                }
            }
        }
    }
    std::fs::write(dir.join("cases.csv"), render_cases_csv(&reports, true)?)?;
    if !reports.is_empty() {
        let rows = aggregate(&reports)?;
        std::fs::write(dir.join("aggregate.csv"), render_report(&rows, "csv")?)?;
        std::fs::write(dir.join("aggregate.json"), render_report(&rows, "json")?)?;
        out.write_all(&render_report(&rows, "text")?)?;
    }
    if failed > 0 {
        return Err(CliError::PartialFailure {
            failed,
            total: reports.len() + failed,
        });
    }
    Ok(())
}

pub fn cmd_report(args: &ReportArgs, out: &mut dyn Write) -> CliResult<()> {
    if !REPORT_FORMATS.contains(&args.format.as_str()) {
        return Err(CliError::Usage(format!(
            "unknown format `{}` (expected one of {})",
            args.format,
            REPORT_FORMATS.join(", ")
        )));
    }
    let bytes = std::fs::read(&args.cases)?;
    let rows = aggregate(&parse_cases_csv(&bytes)?)?;
    let rendered = render_report(&rows, &args.format)?;
    match &args.out {
        Some(p) => std::fs::write(p, rendered)?,
        None => out.write_all(&rendered)?,
    }
    Ok(())
}

/// Parses `argv` and runs the command, returning the process exit code.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = if code == 0 {
                write!(out, "{e}")
            } else {
                write!(err, "{e}")
            };
            return code;
        }
    };
    match dispatch(&cli, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a, &cfg, out),
        Command::Train(a) => cmd_train(a, &cfg, out),
        Command::Register(a) => cmd_register(a, out),
        Command::Evaluate(a) => cmd_evaluate(a, &cfg, out, err),
        Command::Report(a) => cmd_report(a, out),
    }
}
