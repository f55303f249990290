//! The `fairguard` command-line driver.
//!
//! Every command reads one JSON config (see [`config`]), calls the library
//! and writes its outputs under the output directory. Each output carries a
//! `fairguard <version> config=<sha256> seed=<n>` provenance line.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 some
//! partition or correction failed to converge (outputs are still written).

pub mod config;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataio::{
    build_panel, generate_synthetic, load_features, load_stations, load_tracts, load_trips, panel_to_csv,
    read_panel, DataError, Panel, TimeGrid, DEMAND, TIMESTAMP_FORMAT,
};
use crate::dynamic_guard::{
    assign_groups, evaluate_models, predict, train, ArPredictor, DynamicError, GroupAssignment, ModelFile,
    Normalizer, Series, TeacherStatus,
};
use crate::metrics::{slice_correlations, summarize, Axis, CorrelationKind};
use crate::persistence::{run_pt, PtError};
use crate::static_guard::{adjust_joint, adjust_sequential, AdjustmentReport, GuardError};
use crate::stl::{parse_spec, FairnessRule, StlError};
pub use config::RunConfig;
use config::InputConfig;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "fairguard", version, about = "Temporal-logic fairness guards for panel data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Correlation series per metric and axis.
    Analyze(Common),
    /// Adjust the panel under the rule file.
    Adjust(Common),
    /// Train a student under teacher supervision.
    Train(Common),
    /// Forecast with a trained student.
    Predict(Common),
    /// Compare a baseline and a guarded student on the test split.
    Evaluate(Common),
    /// Persistence test of an adjusted panel.
    Persist(Common),
    /// Generate a synthetic panel.
    Synth(Common),
}

impl Command {
    pub fn common(&self) -> &Common {
        match self {
            Command::Analyze(c)
            | Command::Adjust(c)
            | Command::Train(c)
            | Command::Predict(c)
            | Command::Evaluate(c)
            | Command::Persist(c)
            | Command::Synth(c) => c,
        }
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::InvalidSpec(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<StlError> for CliError {
    fn from(e: StlError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<GuardError> for CliError {
    fn from(e: GuardError) -> Self {
        match e {
            GuardError::InvalidPlan(_) | GuardError::IncompatibleRules(_) | GuardError::Stl(_) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<DynamicError> for CliError {
    fn from(e: DynamicError) -> Self {
        match e {
            DynamicError::InvalidConfig(_) | DynamicError::EmptyProtectedSet | DynamicError::TooFewStations { .. } => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<PtError> for CliError {
    fn from(e: PtError) -> Self {
        match e {
            PtError::InvalidConfig(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

/// Provenance stamped on every output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Meta {
    pub tool: String,
    pub version: String,
    pub config_sha256: String,
    pub seed: u64,
}

impl Meta {
    pub fn line(&self) -> String {
        format!("{} {} config={} seed={}", self.tool, self.version, self.config_sha256, self.seed)
    }
}

/// A file a command produces, relative to the output directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Output {
    pub name: String,
    pub contents: String,
}

/// What a command produced; `partial` marks convergence failures.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Outputs {
    pub files: Vec<Output>,
    pub partial: bool,
}

impl Outputs {
    fn push(&mut self, name: &str, contents: String) {
        self.files.push(Output {
            name: name.to_string(),
            contents,
        });
    }
}

/// A loaded configuration with its effective seed and provenance.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: RunConfig,
    pub seed: u64,
    pub out: PathBuf,
    pub meta: Meta,
}

impl Context {
    /// Read and resolve a config file; `seed` and `out` override it.
    pub fn load(path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<Self, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let text = String::from_utf8(bytes.clone())
            .map_err(|_| CliError::Config(format!("{}: not UTF-8", path.display())))?;
        let mut config = RunConfig::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        config.resolve(path.parent().unwrap_or(Path::new(".")));
        let seed = seed.or(config.seed).unwrap_or(0);
        config.apply_seed(seed);
        let out = out
            .or_else(|| config.out.clone())
            .unwrap_or_else(|| path.parent().unwrap_or(Path::new(".")).join("out"));
        let config_sha256 = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
        Ok(Context {
            config,
            seed,
            out,
            meta: Meta {
                tool: "fairguard".into(),
                version: VERSION.into(),
                config_sha256,
                seed,
            },
        })
    }

    fn comment(&self) -> String {
        format!("# {}\n", self.meta.line())
    }

    fn json<T: Serialize>(&self, body: &T) -> String {
        #[derive(Serialize)]
        struct Doc<'a, T> {
            meta: &'a Meta,
            #[serde(flatten)]
            body: &'a T,
        }
        serde_json::to_string_pretty(&Doc { meta: &self.meta, body }).expect("plain data") + "\n"
    }

    pub fn panel(&self) -> Result<Panel, CliError> {
        match &self.config.input {
            None => Err(CliError::Config("no input section".into())),
            Some(InputConfig::Panel { panel }) => Ok(read_panel(panel)?),
            Some(raw @ InputConfig::Raw {
                trips,
                features,
                stations,
                tracts,
                steps,
                step_hours,
                ..
            }) => {
                let start = raw
                    .start()
                    .ok_or_else(|| CliError::Config("input.start is not a timestamp".into()))?;
                if *step_hours <= 0 {
                    return Err(CliError::Config("input.step_hours must be positive".into()));
                }
                let grid = TimeGrid {
                    start,
                    step_seconds: step_hours * 3600,
                    len: *steps,
                };
                Ok(build_panel(
                    &load_trips(trips)?,
                    &load_features(features)?,
                    &load_stations(stations)?,
                    &load_tracts(tracts)?,
                    grid,
                )?)
            }
        }
    }

    pub fn rules(&self) -> Result<Vec<FairnessRule>, CliError> {
        let Some(path) = &self.config.rules else {
            return Err(CliError::Config("no rule file configured".into()));
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let rules: Vec<FairnessRule> = parse_spec(&text)?.rules().cloned().collect();
        if rules.is_empty() {
            return Err(CliError::Config(format!("{} defines no rules", path.display())));
        }
        Ok(rules)
    }
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    metric: &'static str,
    axis: Axis,
    attribute: &'a str,
    mean: Option<f64>,
    mean_abs: Option<f64>,
    count: usize,
    missing: usize,
}

pub fn analyze(ctx: &Context) -> Result<Outputs, CliError> {
    let panel = ctx.panel()?;
    let attributes: Vec<String> = if ctx.config.analyze.attributes.is_empty() {
        panel.feature_names().map(str::to_string).collect()
    } else {
        ctx.config.analyze.attributes.clone()
    };
    let window = ctx.config.analyze.window;
    if window == 0 {
        return Err(CliError::Config("analyze.window must be positive".into()));
    }
    let mut out = Outputs::default();
    let mut summary = Vec::new();
    for axis in [Axis::Spatial, Axis::Temporal] {
        for kind in CorrelationKind::ALL {
            let mut columns = Vec::new();
            for a in &attributes {
                let series = slice_correlations(&panel, a, DEMAND, kind, axis, window)
                    .map_err(|e| CliError::Data(e.to_string()))?;
                let s = summarize(&series);
                summary.push(SummaryRow {
                    metric: kind.short(),
                    axis,
                    attribute: a,
                    mean: s.mean,
                    mean_abs: s.mean_abs,
                    count: s.count,
                    missing: s.missing,
                });
                columns.push(series);
            }
            let mut csv = ctx.comment();
            csv.push_str("station_id,timestamp,step,len");
            for a in &attributes {
                csv.push(',');
                csv.push_str(a);
            }
            csv.push('\n');
            for (i, slice) in columns.first().map(|c| c.as_slice()).unwrap_or(&[]).iter().enumerate() {
                let station = slice.station.map(|s| panel.stations()[s].as_str()).unwrap_or("");
                csv.push_str(&format!(
                    "{station},{},{},{}",
                    panel.grid().at(slice.start).format(TIMESTAMP_FORMAT),
                    slice.start,
                    slice.len
                ));
                for col in &columns {
                    csv.push(',');
                    if let Some(v) = col[i].value {
                        csv.push_str(&v.to_string());
                    }
                }
                csv.push('\n');
            }
            out.push(&format!("correlation_{}_{}.csv", kind.short(), axis), csv);
        }
    }
    #[derive(Serialize)]
    struct Summary<'a> {
        summary: Vec<SummaryRow<'a>>,
    }
    out.push("analyze_summary.json", ctx.json(&Summary { summary }));
    Ok(out)
}

/// Run the configured rules over `panel`, sequentially or jointly.
pub fn run_adjust(ctx: &Context, panel: &Panel) -> Result<(Panel, Vec<AdjustmentReport>), CliError> {
    let rules = ctx.rules()?;
    let section = &ctx.config.adjust;
    Ok(if section.joint {
        let (p, r) = adjust_joint(panel, &rules, &section.plan, &section.solver)?;
        (p, vec![r])
    } else {
        adjust_sequential(panel, &rules, &section.plan, &section.solver)?
    })
}

pub fn adjust(ctx: &Context) -> Result<Outputs, CliError> {
    let panel = ctx.panel()?;
    let (adjusted, reports) = run_adjust(ctx, &panel)?;
    let mut out = Outputs {
        partial: reports.iter().any(|r| r.failed > 0),
        ..Outputs::default()
    };
    out.push("adjusted_panel.csv", panel_to_csv(&adjusted, &[ctx.meta.line()]));
    #[derive(Serialize)]
    struct Report<'a> {
        reports: &'a [AdjustmentReport],
    }
    out.push("adjust_report.json", ctx.json(&Report { reports: &reports }));
    Ok(out)
}

/// Everything the dynamic commands derive from the panel before training.
pub struct Prepared {
    pub groups: GroupAssignment,
    pub normalizer: Normalizer,
    pub train: Series,
    pub test: Series,
}

pub fn prepare(ctx: &Context, panel: &Panel) -> Result<Prepared, CliError> {
    let section = &ctx.config.train;
    if !(section.train_fraction > 0.0 && section.train_fraction < 1.0) {
        return Err(CliError::Config("train.train_fraction must lie in (0, 1)".into()));
    }
    let n_t = panel.n_steps();
    let split = (n_t as f64 * section.train_fraction).round() as usize;
    let features: Vec<String> = if section.features.is_empty() {
        panel.feature_names().map(str::to_string).collect()
    } else {
        section.features.clone()
    };
    let rule = section.protected_rule(&features);
    let groups = assign_groups(panel, &features, split, section.k, &rule, ctx.seed)?;
    let raw = Series::demand(panel);
    let normalizer = Normalizer::fit(&raw, split);
    let z = normalizer.apply(&raw);
    Ok(Prepared {
        groups,
        normalizer,
        train: z.slice(0, split),
        test: z.slice(split, n_t),
    })
}

fn student(ctx: &Context, gamma: f64, prep: &Prepared) -> Result<(ArPredictor, crate::dynamic_guard::TrainLog), CliError> {
    let cfg = crate::dynamic_guard::TrainConfig {
        gamma,
        ..ctx.config.train.config.clone()
    };
    Ok(train(ArPredictor::new(cfg.lag, cfg.horizon, cfg.seed), &prep.train, &prep.groups, &cfg)?)
}

pub fn train_cmd(ctx: &Context) -> Result<Outputs, CliError> {
    let panel = ctx.panel()?;
    let prep = prepare(ctx, &panel)?;
    let (model, log) = student(ctx, ctx.config.train.config.gamma, &prep)?;
    let mut file = ModelFile::new(&model, prep.normalizer, prep.groups);
    file.meta = Some(ctx.meta.line());
    let mut out = Outputs {
        partial: log.epochs.iter().any(|e| e.failed > 0),
        ..Outputs::default()
    };
    out.push("model.json", file.to_json());
    out.push("train_log.csv", ctx.comment() + &log.to_csv());
    Ok(out)
}

pub fn predict_cmd(ctx: &Context) -> Result<Outputs, CliError> {
    let panel = ctx.panel()?;
    let path = ctx.config.predict.model.clone().unwrap_or_else(|| ctx.out.join("model.json"));
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let file = ModelFile::from_json(&text)?;
    if file.groups.labels.len() != panel.n_stations() {
        return Err(CliError::Data(format!(
            "model covers {} stations, panel has {}",
            file.groups.labels.len(),
            panel.n_stations()
        )));
    }
    let origin = ctx.config.predict.origin.unwrap_or(panel.n_steps());
    if origin > panel.n_steps() {
        return Err(CliError::Config(format!("predict.origin {origin} is past the panel end")));
    }
    let history = file.normalizer.apply(&Series::demand(&panel)).slice(0, origin);
    let cfg = crate::dynamic_guard::TrainConfig {
        lag: file.lag,
        horizon: file.horizon,
        ..ctx.config.train.config.clone()
    };
    let mode = ctx.config.predict.mode;
    let prediction = predict(&file.model(), &history, mode, &file.groups, &cfg)?;
    let values = file.normalizer.invert_block(&prediction.values);
    let status = match &prediction.teacher {
        None => "none",
        Some(TeacherStatus::Satisfied) => "satisfied",
        Some(TeacherStatus::Corrected { .. }) => "corrected",
        Some(TeacherStatus::Failed { .. }) => "failed",
    };
    let mut csv = ctx.comment();
    csv.push_str(&format!("# mode={mode} teacher={status}\n"));
    csv.push_str("station_id,timestamp,step,prediction\n");
    let n_s = panel.n_stations();
    for (s, station) in panel.stations().iter().enumerate() {
        for h in 0..file.horizon {
            csv.push_str(&format!(
                "{station},{},{},{}\n",
                panel.grid().at(origin + h).format(TIMESTAMP_FORMAT),
                origin + h,
                values[h * n_s + s]
            ));
        }
    }
    let mut out = Outputs {
        partial: matches!(prediction.teacher, Some(TeacherStatus::Failed { .. })),
        ..Outputs::default()
    };
    out.push("predictions.csv", csv);
    Ok(out)
}

pub fn evaluate_cmd(ctx: &Context) -> Result<Outputs, CliError> {
    let panel = ctx.panel()?;
    let prep = prepare(ctx, &panel)?;
    let cfg = &ctx.config.train.config;
    let (baseline, _) = student(ctx, 0.0, &prep)?;
    let (guarded, _) = student(ctx, cfg.gamma, &prep)?;
    let rows = evaluate_models(
        &[("baseline", &baseline), ("fairguard", &guarded)],
        &prep.test,
        &prep.groups,
        cfg,
        &ctx.config.evaluate.modes,
    )?;
    #[derive(Serialize)]
    struct Table<'a> {
        gamma: f64,
        zeta: f64,
        protected_stations: Vec<&'a str>,
        rows: &'a [crate::dynamic_guard::EvalRow],
    }
    let protected = prep
        .groups
        .protected_stations()
        .into_iter()
        .map(|s| panel.stations()[s].as_str())
        .collect();
    let mut out = Outputs {
        partial: rows.iter().any(|r| r.failed > 0),
        ..Outputs::default()
    };
    out.push(
        "evaluation.json",
        ctx.json(&Table {
            gamma: cfg.gamma,
            zeta: cfg.zeta,
            protected_stations: protected,
            rows: &rows,
        }),
    );
    Ok(out)
}

pub fn persist(ctx: &Context) -> Result<Outputs, CliError> {
    let y0 = ctx.panel()?;
    let y1 = match &ctx.config.persist.adjusted {
        Some(path) => read_panel(path)?,
        None => run_adjust(ctx, &y0)?.0,
    };
    let attribute = match &ctx.config.persist.attribute {
        Some(a) => a.clone(),
        None => ctx.rules()?[0].guard.attribute.clone(),
    };
    let report = run_pt(&y0, &y1, &attribute, ArPredictor::new, &ctx.config.persist.config)?;
    let mut out = Outputs::default();
    out.push("persistence.csv", ctx.comment() + &report.to_csv());
    out.push("persistence_report.json", ctx.json(&report));
    Ok(out)
}

pub fn synth(ctx: &Context) -> Result<Outputs, CliError> {
    let Some(spec) = &ctx.config.synth else {
        return Err(CliError::Config("no synth section".into()));
    };
    let (panel, truth) = generate_synthetic(spec)?;
    let mut out = Outputs::default();
    out.push("synthetic_panel.csv", panel_to_csv(&panel, &[ctx.meta.line()]));
    out.push("ground_truth.json", ctx.json(&truth));
    Ok(out)
}

/// Run `command` and write its outputs.
pub fn execute(command: &Command) -> Result<Outputs, CliError> {
    let common = command.common();
    let ctx = Context::load(&common.config, common.seed, common.out.clone())?;
    let outputs = match command {
        Command::Analyze(_) => analyze(&ctx)?,
        Command::Adjust(_) => adjust(&ctx)?,
        Command::Train(_) => train_cmd(&ctx)?,
        Command::Predict(_) => predict_cmd(&ctx)?,
        Command::Evaluate(_) => evaluate_cmd(&ctx)?,
        Command::Persist(_) => persist(&ctx)?,
        Command::Synth(_) => synth(&ctx)?,
    };
    std::fs::create_dir_all(&ctx.out).map_err(|e| CliError::Data(format!("{}: {e}", ctx.out.display())))?;
    for file in &outputs.files {
        let path = ctx.out.join(&file.name);
        std::fs::write(&path, &file.contents).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        log::info!("wrote {}", path.display());
    }
    Ok(outputs)
}

fn cap_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var("FAIRGUARD_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Config(format!("FAIRGUARD_THREADS={value:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(e.to_string()))
}

/// Parse arguments, run, and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = cap_threads().and_then(|_| execute(&cli.command));
    match result {
        Ok(outputs) if outputs.partial => {
            log::warn!("some partitions or corrections did not converge");
            4
        }
        Ok(_) => 0,
        Err(e) => {
            eprintln!("fairguard: {e}");
            e.exit_code()
        }
    }
}
