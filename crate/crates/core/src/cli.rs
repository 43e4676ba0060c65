//! Command-line front end: `train`, `generate`, `eval`, `interpolate` and
//! `simulate`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::digest::json_digest;
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport};
use crate::model::{sample_condvec, Ablation, OctGan, TrainConfig, TrainLog};
use crate::numkit::{RngStream, Stream};
use crate::preprocess::TableSchema;
use crate::synthdata::OracleSpec;
use crate::table::Table;

/// Exit status for each failure class.
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_MISSING_FILE: i32 = 2;
pub const EXIT_SCHEMA: i32 = 3;
pub const EXIT_CONFIG: i32 = 4;

pub const MODEL_FILE: &str = "model.json";
pub const LOG_FILE: &str = "train_log.json";

#[derive(Parser, Debug)]
#[command(name = "octgan", version, about = "Tabular data synthesis with neural-ODE GANs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit the encoder and train a model; writes a checkpoint and a log.
    Train(TrainArgs),
    /// Sample synthetic rows from a checkpoint.
    Generate(GenerateArgs),
    /// Score a synthetic table.
    Eval(EvalArgs),
    /// Decode rows along a straight line between two noise vectors.
    Interpolate(InterpolateArgs),
    /// Sample train and test tables from an oracle.
    Simulate(SimulateArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output file or directory, depending on the command.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Training CSV; overrides `data.train`.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Schema JSON; overrides `data.schema`. Inferred when absent.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long)]
    pub ablation: Option<Ablation>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint; defaults to `<out_dir>/model.json`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub rows: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub synthetic: PathBuf,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Oracle for likelihood fitness: grid, ring or bn:<path>.
    #[arg(long)]
    pub oracle: Option<OracleSpec>,
    /// Label column for efficacy.
    #[arg(long)]
    pub label: Option<String>,
    /// Class count for clustering.
    #[arg(long)]
    pub classes: Option<usize>,
}

#[derive(Args, Debug)]
pub struct InterpolateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Number of intervals; `steps + 1` rows are written.
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    /// Also write `(column, step, value)` triples here.
    #[arg(long)]
    pub plot_data: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub oracle: Option<OracleSpec>,
    /// Training rows.
    #[arg(long)]
    pub rows: Option<usize>,
    /// Test rows; defaults to the training row count.
    #[arg(long)]
    pub test_rows: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub label: Option<String>,
    pub classes: Option<usize>,
    /// Single-byte CSV delimiter.
    pub delimiter: Option<char>,
}

/// Contents of the `--config` file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub rows: Option<usize>,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub oracle: Option<OracleSpec>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
    }

    fn from_common(c: &Common) -> Result<Self> {
        let mut cfg = match &c.config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(s) = c.seed {
            cfg.seed = Some(s);
        }
        if let Some(s) = cfg.seed {
            cfg.train.seed = s;
        }
        Ok(cfg)
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(self.train.seed)
    }

    fn delimiter(&self) -> Result<u8> {
        match self.data.delimiter {
            None => Ok(b','),
            Some(c) if c.is_ascii() => Ok(c as u8),
            Some(c) => Err(Error::Config(format!("delimiter {c:?} is not a single byte"))),
        }
    }

    fn out_dir(&self, c: &Common) -> PathBuf {
        c.out.clone().or_else(|| self.out_dir.clone()).unwrap_or_else(|| PathBuf::from("."))
    }

    pub fn hash(&self) -> Result<String> {
        json_digest(self)
    }
}

/// Provenance written next to every CSV artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub seed: u64,
    pub config_hash: String,
    pub rows: usize,
}

fn write_meta(csv: &Path, meta: &ArtifactMeta) -> Result<()> {
    let mut name = csv.as_os_str().to_owned();
    name.push(".meta.json");
    std::fs::write(PathBuf::from(name), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

#[derive(Serialize)]
struct TrainRecord<'a> {
    seed: u64,
    config_hash: String,
    log: &'a TrainLog,
}

fn required(p: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    p.ok_or_else(|| Error::Config(format!("no {what} given (flag or config)")))
}

fn read_schema(path: Option<&Path>, table: &Table) -> Result<TableSchema> {
    match path {
        Some(p) => TableSchema::load(p),
        None => TableSchema::infer(table),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn model_path(arg: Option<PathBuf>, cfg: &RunConfig) -> PathBuf {
    arg.unwrap_or_else(|| cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from(".")).join(MODEL_FILE))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Generate(a) => generate(a),
        Command::Eval(a) => evaluate(a),
        Command::Interpolate(a) => interpolate(a),
        Command::Simulate(a) => simulate(a),
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::from_common(&a.common)?;
    if let Some(ab) = a.ablation {
        cfg.train.ablation = ab;
    }
    if let Some(e) = a.epochs {
        cfg.train.max_epoch = e;
    }
    cfg.train.validate()?;
    let delim = cfg.delimiter()?;
    let train_path = required(a.train.or_else(|| cfg.data.train.clone()), "training CSV")?;
    let table = Table::read_csv(&train_path, delim)?;
    let schema = read_schema(a.schema.or_else(|| cfg.data.schema.clone()).as_deref(), &table)?;
    let out = cfg.out_dir(&a.common);
    ensure_dir(&out)?;
    let mut model = OctGan::fit_new(&table, &schema, cfg.train.clone())?;
    let log = model.train(&table)?;
    model.save(&out.join(MODEL_FILE))?;
    schema.save(&out.join("schema.json"))?;
    let record = TrainRecord { seed: cfg.seed(), config_hash: cfg.hash()?, log: &log };
    std::fs::write(out.join(LOG_FILE), serde_json::to_string_pretty(&record)?)?;
    if let Some(d) = &log.diverged {
        log::warn!("training stopped early: {d}");
    }
    log::info!("wrote {}", out.join(MODEL_FILE).display());
    Ok(())
}

fn generate(a: GenerateArgs) -> Result<()> {
    let cfg = RunConfig::from_common(&a.common)?;
    let model = OctGan::load(&model_path(a.model, &cfg))?;
    let rows = a.rows.or(cfg.rows).ok_or_else(|| Error::Config("no row count given (--rows or config)".into()))?;
    let seed = a.common.seed.or(cfg.seed).unwrap_or(model.config.seed);
    let out = required(a.common.out.clone(), "output CSV (--out)")?;
    let table = model.generate(rows, seed)?;
    table.write_csv(&out, cfg.delimiter()?)?;
    write_meta(&out, &ArtifactMeta { seed, config_hash: model.config.hash()?, rows })
}

fn evaluate(a: EvalArgs) -> Result<()> {
    let cfg = RunConfig::from_common(&a.common)?;
    let delim = cfg.delimiter()?;
    let seed = cfg.seed();
    let synthetic = Table::read_csv(&a.synthetic, delim)?;
    let read = |p: Option<PathBuf>| p.map(|p| Table::read_csv(&p, delim)).transpose();
    let train = read(a.train.or_else(|| cfg.data.train.clone()))?;
    let test = read(a.test.or_else(|| cfg.data.test.clone()))?;
    let schema_path = a.schema.or_else(|| cfg.data.schema.clone());
    let oracle = a.oracle.or_else(|| cfg.oracle.clone()).map(|s| s.build()).transpose()?;
    let schema = match (&schema_path, &oracle) {
        (Some(p), _) => TableSchema::load(p)?,
        (None, Some(o)) => o.schema(),
        (None, None) => TableSchema::infer(train.as_ref().unwrap_or(&synthetic))?,
    };
    schema.check_header(&synthetic)?;
    let mut report = EvalReport {
        seed,
        synthetic_rows: synthetic.len(),
        train_rows: train.as_ref().map_or(0, Table::len),
        test_rows: test.as_ref().map_or(0, Table::len),
        config_hash: Some(cfg.hash()?),
        ..EvalReport::default()
    };
    let mut rng = RngStream::new(seed, Stream::Eval);
    if let (Some(o), Some(t)) = (&oracle, &test) {
        report.likelihood = Some(eval::likelihood_fitness(&synthetic, o, t, &mut rng)?);
    }
    if let (Some(label), Some(t)) = (a.label.or_else(|| cfg.data.label.clone()), &test) {
        report.efficacy = Some(eval::ml_efficacy(&synthetic, t, &schema, &label, &mut rng)?);
    }
    if let (Some(k), Some(tr), Some(te)) = (a.classes.or(cfg.data.classes), &train, &test) {
        report.clustering = Some(eval::clustering(&synthetic, tr, te, &schema, k, &mut rng)?);
    }
    let json = report.to_json()?;
    match &a.common.out {
        Some(p) => std::fs::write(p, json)?,
        None => println!("{json}"),
    }
    Ok(())
}

fn interpolate(a: InterpolateArgs) -> Result<()> {
    let cfg = RunConfig::from_common(&a.common)?;
    let model = OctGan::load(&model_path(a.model, &cfg))?;
    let seed = a.common.seed.or(cfg.seed).unwrap_or(model.config.seed);
    let out = required(a.common.out.clone(), "output CSV (--out)")?;
    let mut rng = RngStream::new(seed, Stream::Generate);
    let z = rng.normal_matrix(2, model.config.z_dim);
    let c = sample_condvec(&model.layout, 1, &mut rng).c;
    let path = model.interpolate(z.row(0), z.row(1), c.row(0), a.steps)?;
    let delim = cfg.delimiter()?;
    path.write_csv(&out, delim)?;
    let meta = ArtifactMeta { seed, config_hash: model.config.hash()?, rows: path.len() };
    write_meta(&out, &meta)?;
    if let Some(p) = &a.plot_data {
        let plot = eval::interpolation_plot_data(&path);
        plot.write_csv(p, delim)?;
        write_meta(p, &ArtifactMeta { rows: plot.len(), ..meta })?;
    }
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let cfg = RunConfig::from_common(&a.common)?;
    let spec = a.oracle.or_else(|| cfg.oracle.clone()).ok_or_else(|| Error::Config("no oracle given (--oracle or config)".into()))?;
    let oracle = spec.build()?;
    let rows = a.rows.or(cfg.rows).ok_or_else(|| Error::Config("no row count given (--rows or config)".into()))?;
    let test_rows = a.test_rows.unwrap_or(rows);
    let seed = cfg.seed();
    let out = cfg.out_dir(&a.common);
    ensure_dir(&out)?;
    let mut rng = RngStream::new(seed, Stream::Oracle);
    let train = oracle.sample(rows, &mut rng);
    let test = oracle.sample(test_rows, &mut rng);
    let delim = cfg.delimiter()?;
    let hash = cfg.hash()?;
    for (name, t) in [("train.csv", &train), ("test.csv", &test)] {
        let p = out.join(name);
        t.write_csv(&p, delim)?;
        write_meta(&p, &ArtifactMeta { seed, config_hash: hash.clone(), rows: t.len() })?;
    }
    oracle.save(&out.join("oracle.json"))?;
    oracle.schema().save(&out.join("schema.json"))?;
    Ok(())
}

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::MissingFile(_) => EXIT_MISSING_FILE,
        Error::Schema(_) | Error::UnknownCategory { .. } | Error::Parse { .. } | Error::Csv(_) => EXIT_SCHEMA,
        Error::Config(_) => EXIT_CONFIG,
        _ => EXIT_OTHER,
    }
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::Shape(_) => "shape",
        Error::NonFinite(_) => "non_finite",
        Error::InvalidArgument(_) => "invalid_argument",
        Error::Solver(_) => "solver",
        Error::Unsupported(_) => "unsupported",
        Error::Schema(_) => "schema",
        Error::UnknownCategory { .. } => "unknown_category",
        Error::Parse { .. } => "parse",
        Error::Diverged { .. } => "diverged",
        Error::Config(_) => "config",
        Error::MissingFile(_) => "missing_file",
        Error::Checkpoint(_) => "checkpoint",
        Error::Csv(_) => "csv",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
    }
}

/// One-line error report: `error code=<n> kind=<kind> message=<json string>`.
pub fn error_line(e: &Error) -> String {
    let msg = serde_json::to_string(&e.to_string()).unwrap_or_else(|_| "\"\"".into());
    format!("error code={} kind={} message={msg}", exit_code(e), kind(e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_distinct() {
        let codes = [
            exit_code(&Error::MissingFile("x".into())),
            exit_code(&Error::Schema("x".into())),
            exit_code(&Error::Config("x".into())),
            exit_code(&Error::Solver("x".into())),
        ];
        assert_eq!(codes, [2, 3, 4, 1]);
    }

    #[test]
    fn error_line_is_single_line() {
        let line = error_line(&Error::Config("bad\nvalue".into()));
        assert!(!line.contains('\n'));
        assert!(line.starts_with("error code=4 kind=config message="));
    }

    #[test]
    fn run_config_parses_nested_tables() {
        let cfg: RunConfig = toml::from_str(
            "seed = 5\n[data]\ntrain = \"a.csv\"\n[train]\nmax_epoch = 3\nablation = \"only_d\"\n[oracle]\nkind = \"grid\"\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, Some(5));
        assert_eq!(cfg.train.max_epoch, 3);
        assert_eq!(cfg.train.ablation, Ablation::OnlyD);
        assert!(matches!(cfg.oracle, Some(OracleSpec::Grid { .. })));
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        assert!(toml::from_str::<RunConfig>("sede = 1").is_err());
    }
}
