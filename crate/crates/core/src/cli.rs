//! The `shapefactor` command line.
//!
//! Every setting of a subcommand has a default, may be overridden by a flat
//! `key = value` file passed with `--config`, and is finally overridden by the
//! matching flag. The resolved settings are printed before anything runs.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use crate::autodiff::gradcheck::op_suite;
use crate::decomposer::{completeness_residual, effective_rank_report, pi_loss, DEFAULT_RANK_TOL};
use crate::eval::{
    export_run, metrics, metrics_csv, run_interpolation, run_mix, run_reconstruction, run_swap, train_classifier,
    Classifier, ClassifierConfig, Experiment, ExperimentRun, Interpolation, MetricsRow, Pipeline,
};
use crate::model::ShapeModel;
use crate::synthdata::{generate_dataset, load_dataset, save_dataset, shape_seed, Dataset, DatasetConfig, Family};
use crate::training::{parse_kv, train, TrainConfig, LOG_HEADER};
use crate::voxel::{export_obj, load_pflg, save_pflg, LabeledGrid, OccupancyGrid};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] crate::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Debug, Parser)]
#[command(name = "shapefactor", version, about = "Part-aware voxel shape modeling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Seed for every random stream [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it [default: all cores]
    #[arg(long)]
    threads: Option<usize>,
    /// Flat `key = value` file; flags take precedence over it
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ModelData {
    /// Model checkpoint (PFCK1)
    #[arg(long)]
    model: Option<PathBuf>,
    /// Dataset directory written by gen-data
    #[arg(long)]
    data: Option<PathBuf>,
    /// Split to run on: train, val or test [default: test]
    #[arg(long)]
    split: Option<String>,
    /// Output directory for PFLG1 and OBJ exports
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a procedural labeled dataset
    GenData {
        #[command(flatten)]
        common: Common,
        /// Output directory
        #[arg(long)]
        out: Option<PathBuf>,
        /// Training shapes [default: 200]
        #[arg(long)]
        train: Option<usize>,
        /// Validation shapes [default: 20]
        #[arg(long)]
        val: Option<usize>,
        /// Test shapes [default: 20]
        #[arg(long)]
        test: Option<usize>,
        /// Grid resolution [default: 16]
        #[arg(long)]
        res: Option<usize>,
        /// chair or table [default: chair]
        #[arg(long)]
        family: Option<String>,
        /// Probability of the optional part (arms, shelf) [default: 0.5]
        #[arg(long)]
        extra_part_prob: Option<f64>,
    },
    /// Three-stage training; writes checkpoints and logs
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run directory
        #[arg(long)]
        out: Option<PathBuf>,
        /// Pretraining epochs: decomposer and part decoder [default: 50]
        #[arg(long)]
        stage_a_epochs: Option<usize>,
        /// Transformer-only epochs [default: 20]
        #[arg(long)]
        stage_b_epochs: Option<usize>,
        /// Joint epochs with the cycle term [default: 30]
        #[arg(long)]
        stage_c_epochs: Option<usize>,
        /// Shapes per batch [default: 16]
        #[arg(long)]
        batch_size: Option<usize>,
        /// Base Adam learning rate, decayed 0.8 every 40 epochs [default: 1e-3]
        #[arg(long)]
        lr: Option<f64>,
        /// Keep projections at their block initialization
        #[arg(long)]
        fixed_projection: bool,
        /// Monolithic composer instead of decoder plus transformer
        #[arg(long)]
        no_stn: bool,
        /// Drop the cycle term
        #[arg(long)]
        no_cycle: bool,
    },
    /// Decompose and compose every shape of a split
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: ModelData,
    },
    /// Exchange one random part between random pairs
    Swap {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: ModelData,
    },
    /// Mix part embeddings within random batches, with the naive baseline
    Mix {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: ModelData,
        /// Shapes per mixed batch [default: 16]
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Interpolate two shapes, whole or one part
    Interpolate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: ModelData,
        /// Index of the first shape within the split [default: 0]
        #[arg(long)]
        a: Option<usize>,
        /// Index of the second shape within the split [default: 1]
        #[arg(long)]
        b: Option<usize>,
        /// `whole`, a part name, or a zero-based part index [default: whole]
        #[arg(long)]
        part: Option<String>,
        /// Number of shapes including both endpoints [default: 10]
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Metric table over the chosen experiments
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: ModelData,
        /// Comma-separated subset of rec, swap, mix [default: rec,swap,mix]
        #[arg(long)]
        experiments: Option<String>,
        /// Plausibility classifier checkpoint for the classifier column
        #[arg(long)]
        classifier: Option<PathBuf>,
        /// Train the classifier on the dataset first (saved under --out)
        #[arg(long)]
        train_classifier: bool,
        /// Shapes per mixed batch [default: 16]
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Finite-difference check of every differentiable op
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Check the full operation suite
        #[arg(long)]
        all: bool,
        /// Random instances per op [default: 20]
        #[arg(long)]
        instances: Option<usize>,
    },
    /// Convert a PFLG1 grid to an OBJ mesh
    ExportMesh {
        #[command(flatten)]
        common: Common,
        /// PFLG1 input
        #[arg(long)]
        input: Option<PathBuf>,
        /// OBJ output
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Projection algebra residuals and per-part ranks
    RankReport {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Dataset for the completeness residual on embeddings
        #[arg(long)]
        data: Option<PathBuf>,
        /// Split for the residual [default: val]
        #[arg(long)]
        split: Option<String>,
        /// Relative singular-value cutoff [default: 0.001]
        #[arg(long)]
        tol: Option<f64>,
    },
}

/// Ordered settings: defaults, then the config file, then flags.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    entries: Vec<(String, String)>,
}

impl Settings {
    fn new(defaults: Vec<(String, String)>) -> Self {
        Self { entries: defaults }
    }

    fn set(&mut self, key: &str, value: String, source: &str) -> CliResult<()> {
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => {
                e.1 = value;
                Ok(())
            }
            None => Err(usage(format!("unknown setting {key:?} in {source}"))),
        }
    }

    fn raw(&self, key: &str) -> &str {
        self.entries.iter().find(|(k, _)| k == key).map_or("", |(_, v)| v.as_str())
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> CliResult<T> {
        self.raw(key).parse().map_err(|_| usage(format!("bad value {:?} for {key}", self.raw(key))))
    }

    fn path(&self, key: &str) -> CliResult<PathBuf> {
        match self.raw(key) {
            "" => Err(usage(format!("--{} is required", key.replace('_', "-")))),
            v => Ok(PathBuf::from(v)),
        }
    }

    fn flag(&self, key: &str) -> CliResult<bool> {
        match self.raw(key) {
            "true" => Ok(true),
            "false" => Ok(false),
            v => Err(usage(format!("bad value {v:?} for {key} (true or false)"))),
        }
    }

    fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn kv(key: &str, v: impl ToString) -> (String, String) {
    (key.to_string(), v.to_string())
}

fn opt<T: ToString>(key: &'static str, v: &Option<T>) -> (&'static str, Option<String>) {
    (key, v.as_ref().map(T::to_string))
}

fn path_opt(key: &'static str, v: &Option<PathBuf>) -> (&'static str, Option<String>) {
    (key, v.as_ref().map(|p| p.display().to_string()))
}

fn switch(key: &'static str, on: bool) -> (&'static str, Option<String>) {
    (key, on.then(|| "true".to_string()))
}

fn resolve(
    common: &Common,
    mut defaults: Vec<(String, String)>,
    flags: Vec<(&'static str, Option<String>)>,
) -> CliResult<Settings> {
    if !defaults.iter().any(|(k, _)| k == "seed") {
        defaults.insert(0, kv("seed", 0));
    }
    defaults.insert(1, kv("threads", 0));
    let mut s = Settings::new(defaults);
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        let source = path.display().to_string();
        for (k, v) in parse_kv(&text).map_err(|e| usage(e.to_string()))? {
            s.set(&k, v, &source)?;
        }
    }
    let common_flags = [opt("seed", &common.seed), opt("threads", &common.threads)];
    for (k, v) in common_flags.into_iter().chain(flags) {
        if let Some(v) = v {
            s.set(k, v, "flags")?;
        }
    }
    Ok(s)
}

fn io_defaults() -> Vec<(String, String)> {
    vec![kv("model", ""), kv("data", ""), kv("split", "test"), kv("out", "")]
}

fn io_flags(io: &ModelData) -> Vec<(&'static str, Option<String>)> {
    vec![
        path_opt("model", &io.model),
        path_opt("data", &io.data),
        opt("split", &io.split),
        path_opt("out", &io.out),
    ]
}

/// Parses argv (including the program name) and runs; returns the exit code.
pub fn run_from<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Entry point of the binary.
pub fn run() -> i32 {
    run_from(std::env::args_os())
}

fn dispatch(command: Command) -> CliResult<()> {
    let (name, settings) = settings_for(&command)?;
    println!("# shapefactor {name}");
    print!("{}", settings.render());
    let threads: usize = settings.get("threads")?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if threads > 0 {
        pool = pool.num_threads(threads);
    }
    let pool = pool.build().map_err(|e| usage(format!("cannot start {threads} threads: {e}")))?;
    pool.install(|| execute(&command, &settings))
}

fn settings_for(command: &Command) -> CliResult<(&'static str, Settings)> {
    Ok(match command {
        Command::GenData { common, out, train, val, test, res, family, extra_part_prob } => (
            "gen-data",
            resolve(
                common,
                vec![
                    kv("out", ""),
                    kv("train", 200),
                    kv("val", 20),
                    kv("test", 20),
                    kv("res", 16),
                    kv("family", "chair"),
                    kv("extra_part_prob", 0.5),
                ],
                vec![
                    path_opt("out", out),
                    opt("train", train),
                    opt("val", val),
                    opt("test", test),
                    opt("res", res),
                    opt("family", family),
                    opt("extra_part_prob", extra_part_prob),
                ],
            )?,
        ),
        Command::Train {
            common,
            data,
            out,
            stage_a_epochs,
            stage_b_epochs,
            stage_c_epochs,
            batch_size,
            lr,
            fixed_projection,
            no_stn,
            no_cycle,
        } => {
            let mut defaults = vec![kv("data", ""), kv("out", "")];
            defaults.extend(parse_kv(&TrainConfig::default().to_kv())?);
            defaults.push(kv("resolution", "auto"));
            (
                "train",
                resolve(
                    common,
                    defaults,
                    vec![
                        path_opt("data", data),
                        path_opt("out", out),
                        opt("stage_a_epochs", stage_a_epochs),
                        opt("stage_b_epochs", stage_b_epochs),
                        opt("stage_c_epochs", stage_c_epochs),
                        opt("batch_size", batch_size),
                        opt("lr", lr),
                        switch("fixed_projection", *fixed_projection),
                        switch("no_stn", *no_stn),
                        switch("no_cycle", *no_cycle),
                    ],
                )?,
            )
        }
        Command::Reconstruct { common, io } => ("reconstruct", resolve(common, io_defaults(), io_flags(io))?),
        Command::Swap { common, io } => ("swap", resolve(common, io_defaults(), io_flags(io))?),
        Command::Mix { common, io, batch_size } => {
            let mut d = io_defaults();
            d.push(kv("batch_size", 16));
            let mut f = io_flags(io);
            f.push(opt("batch_size", batch_size));
            ("mix", resolve(common, d, f)?)
        }
        Command::Interpolate { common, io, a, b, part, steps } => {
            let mut d = io_defaults();
            d.extend([kv("a", 0), kv("b", 1), kv("part", "whole"), kv("steps", 10)]);
            let mut f = io_flags(io);
            f.extend([opt("a", a), opt("b", b), opt("part", part), opt("steps", steps)]);
            ("interpolate", resolve(common, d, f)?)
        }
        Command::Evaluate { common, io, experiments, classifier, train_classifier, batch_size } => {
            let mut d = io_defaults();
            d.extend([
                kv("experiments", "rec,swap,mix"),
                kv("classifier", ""),
                kv("train_classifier", false),
                kv("batch_size", 16),
            ]);
            let mut f = io_flags(io);
            f.extend([
                opt("experiments", experiments),
                path_opt("classifier", classifier),
                switch("train_classifier", *train_classifier),
                opt("batch_size", batch_size),
            ]);
            ("evaluate", resolve(common, d, f)?)
        }
        Command::Gradcheck { common, all, instances } => (
            "gradcheck",
            resolve(
                common,
                vec![kv("all", false), kv("instances", 20)],
                vec![switch("all", *all), opt("instances", instances)],
            )?,
        ),
        Command::ExportMesh { common, input, out } => (
            "export-mesh",
            resolve(
                common,
                vec![kv("input", ""), kv("out", "")],
                vec![path_opt("input", input), path_opt("out", out)],
            )?,
        ),
        Command::RankReport { common, model, data, split, tol } => (
            "rank-report",
            resolve(
                common,
                vec![kv("model", ""), kv("data", ""), kv("split", "val"), kv("tol", DEFAULT_RANK_TOL)],
                vec![path_opt("model", model), path_opt("data", data), opt("split", split), opt("tol", tol)],
            )?,
        ),
    })
}

fn execute(command: &Command, s: &Settings) -> CliResult<()> {
    match command {
        Command::GenData { .. } => gen_data(s),
        Command::Train { .. } => train_cmd(s),
        Command::Reconstruct { .. } => single_experiment(s, Experiment::Rec),
        Command::Swap { .. } => single_experiment(s, Experiment::Swap),
        Command::Mix { .. } => single_experiment(s, Experiment::Mix),
        Command::Interpolate { .. } => interpolate_cmd(s),
        Command::Evaluate { .. } => evaluate_cmd(s),
        Command::Gradcheck { .. } => gradcheck_cmd(s),
        Command::ExportMesh { .. } => export_mesh_cmd(s),
        Command::RankReport { .. } => rank_report_cmd(s),
    }
}

fn gen_data(s: &Settings) -> CliResult<()> {
    let out = s.path("out")?;
    let config = DatasetConfig {
        family: Family::parse(s.raw("family")).map_err(|e| usage(e.to_string()))?,
        extra_part_prob: s.get("extra_part_prob")?,
        ..DatasetConfig::new(s.get("train")?, s.get("val")?, s.get("test")?, s.get("seed")?, s.get("res")?)
    };
    if config.total() == 0 {
        return Err(usage("dataset must contain at least one shape"));
    }
    let ds = generate_dataset(&config)?;
    save_dataset(&ds, &out)?;
    println!("wrote {} shapes to {}", ds.shapes.len(), out.display());
    Ok(())
}

fn train_config(s: &Settings) -> CliResult<TrainConfig> {
    let mut c = TrainConfig::default();
    for (k, v) in &s.entries {
        if matches!(k.as_str(), "data" | "out" | "threads") || (k == "resolution" && v == "auto") {
            continue;
        }
        c.set(k, v).map_err(|e| usage(e.to_string()))?;
    }
    c.validate().map_err(|e| usage(e.to_string()))?;
    Ok(c)
}

fn train_cmd(s: &Settings) -> CliResult<()> {
    let config = train_config(s)?;
    let (data, out) = (s.path("data")?, s.path("out")?);
    let ds = load_dataset(&data)?;
    println!("{LOG_HEADER},lr");
    let report = train(&ds, &config, &out, |r| {
        let cell = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v:.6}"));
        println!(
            "{},{},{},{},{},{},{:.6},{:.4},{:.2e}",
            r.epoch,
            r.stage.name(),
            cell(r.train.pi),
            cell(r.train.part),
            cell(r.train.trans),
            cell(r.train.cycle),
            r.train_total,
            r.val_miou,
            r.lr
        );
    })?;
    println!(
        "best val mIoU {:.4} at epoch {}; final checkpoint {}",
        report.best_val_miou,
        report.best_epoch,
        report.final_checkpoint().display()
    );
    Ok(())
}

fn split<'a>(ds: &'a Dataset, name: &str) -> CliResult<Vec<&'a LabeledGrid>> {
    match name {
        "train" => Ok(ds.train_shapes()),
        "val" => Ok(ds.val_shapes()),
        "test" => Ok(ds.test_shapes()),
        _ => Err(usage(format!("bad split {name:?} (train, val or test)"))),
    }
}

fn load_model_data(s: &Settings) -> CliResult<(ShapeModel, Dataset)> {
    let (model, data) = (s.path("model")?, s.path("data")?);
    let model = ShapeModel::load(&model)?;
    let ds = load_dataset(&data)?;
    model.check_schema(ds.schema())?;
    Ok((model, ds))
}

/// Independent stream per experiment so the table does not depend on which
/// experiments were requested.
fn experiment_rng(seed: u64, e: Experiment) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(shape_seed(seed, 0x4556_414C ^ e as u64))
}

fn run_experiment(
    p: &dyn Pipeline,
    shapes: &[&LabeledGrid],
    e: Experiment,
    seed: u64,
    batch_size: usize,
) -> CliResult<Vec<ExperimentRun>> {
    let mut rng = experiment_rng(seed, e);
    Ok(match e {
        Experiment::Rec => vec![run_reconstruction(p, shapes)?],
        Experiment::Swap => vec![run_swap(p, shapes, &mut rng)?],
        Experiment::Mix | Experiment::NaiveMix => {
            let (m, n) = run_mix(p, shapes, batch_size, &mut rng)?;
            vec![m, n]
        }
    })
}

fn single_experiment(s: &Settings, e: Experiment) -> CliResult<()> {
    let out = s.path("out")?;
    let (model, ds) = load_model_data(s)?;
    let shapes = split(&ds, s.raw("split"))?;
    let batch = if e == Experiment::Mix { s.get("batch_size")? } else { 16 };
    let mut rows = Vec::new();
    for run in run_experiment(&model, &shapes, e, s.get("seed")?, batch)? {
        let dir = export_run(&run, &out)?;
        println!("exported {} shapes to {}", run.outputs.len(), dir.display());
        rows.push(metrics(&run, None)?);
    }
    print!("{}", metrics_csv(&rows));
    Ok(())
}

fn parse_part(spec: &str, ds: &Dataset) -> CliResult<Interpolation> {
    if spec == "whole" {
        return Ok(Interpolation::Whole);
    }
    if let Some(l) = ds.schema().label_of(spec) {
        return Ok(Interpolation::Part(l as usize - 1));
    }
    spec.parse()
        .map(Interpolation::Part)
        .map_err(|_| usage(format!("bad part {spec:?}: whole, a part name or an index")))
}

fn interpolate_cmd(s: &Settings) -> CliResult<()> {
    let out = s.path("out")?;
    let (model, ds) = load_model_data(s)?;
    let shapes = split(&ds, s.raw("split"))?;
    let (a, b): (usize, usize) = (s.get("a")?, s.get("b")?);
    let pick = |i: usize| shapes.get(i).copied().ok_or_else(|| usage(format!("shape {i} outside the split")));
    let mode = parse_part(s.raw("part"), &ds)?;
    let steps: usize = s.get("steps")?;
    let path = run_interpolation(&model, pick(a)?, pick(b)?, mode, steps)?;
    let tag = match mode {
        Interpolation::Whole => "whole".to_string(),
        Interpolation::Part(k) => ds.schema().names().get(k).cloned().unwrap_or_else(|| k.to_string()),
    };
    let dir = out.join(format!("interp_{tag}"));
    std::fs::create_dir_all(&dir).map_err(|e| crate::Error::io(&dir, e))?;
    for (i, g) in path.iter().enumerate() {
        save_pflg(g, &dir.join(format!("{i:04}.pflg")))?;
        export_obj(g, &dir.join(format!("{i:04}.obj")))?;
        println!("alpha {:.6} -> {}", i as f64 / (steps - 1) as f64, dir.join(format!("{i:04}.pflg")).display());
    }
    Ok(())
}

fn evaluate_cmd(s: &Settings) -> CliResult<()> {
    let (model, ds) = load_model_data(s)?;
    let shapes = split(&ds, s.raw("split"))?;
    let seed: u64 = s.get("seed")?;
    let out = match s.raw("out") {
        "" => None,
        o => Some(PathBuf::from(o)),
    };
    let mut experiments = Vec::new();
    for name in s.raw("experiments").split(',').map(str::trim).filter(|n| !n.is_empty()) {
        let e = Experiment::parse(name).map_err(|e| usage(e.to_string()))?;
        if e == Experiment::NaiveMix {
            return Err(usage("naive_mix is reported alongside mix"));
        }
        if !experiments.contains(&e) {
            experiments.push(e);
        }
    }
    if experiments.is_empty() {
        return Err(usage("no experiments selected"));
    }
    let classifier = if s.flag("train_classifier")? {
        let trained = train_classifier(&ds, &ClassifierConfig::default(), seed)?;
        println!("classifier held-out accuracy {:.4}", trained.held_out_accuracy);
        if let Some(o) = &out {
            let path = o.join("classifier.ckpt");
            std::fs::create_dir_all(o).map_err(|e| crate::Error::io(o, e))?;
            trained.classifier.save(&path)?;
        }
        Some(trained.classifier)
    } else {
        match s.raw("classifier") {
            "" => None,
            p => Some(Classifier::load(Path::new(p))?),
        }
    };
    let mut rows: Vec<MetricsRow> = Vec::new();
    for e in experiments {
        for run in run_experiment(&model, &shapes, e, seed, s.get("batch_size")?)? {
            if let Some(o) = &out {
                export_run(&run, o)?;
            }
            rows.push(metrics(&run, classifier.as_ref())?);
        }
    }
    let table = metrics_csv(&rows);
    if let Some(o) = &out {
        let path = o.join("metrics.csv");
        std::fs::write(&path, &table).map_err(|e| crate::Error::io(&path, e))?;
    }
    print!("{table}");
    Ok(())
}

fn gradcheck_cmd(s: &Settings) -> CliResult<()> {
    if !s.flag("all")? {
        return Err(usage("gradcheck runs the full suite; pass --all"));
    }
    let start = std::time::Instant::now();
    let report = op_suite(s.get("seed")?, s.get("instances")?)?;
    for c in &report {
        println!(
            "{:<22} {:>3} instances  max rel err {:.2e}  (tol {:.0e})  {}",
            c.op,
            c.instances,
            c.max_rel_err,
            c.tolerance,
            if c.passed() { "ok" } else { "FAIL" }
        );
    }
    println!("{:.2}s", start.elapsed().as_secs_f64());
    let failed: Vec<&str> = report.iter().filter(|c| !c.passed()).map(|c| c.op).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(crate::Error::invalid(format!("gradient check failed for {}", failed.join(", "))).into())
    }
}

fn export_mesh_cmd(s: &Settings) -> CliResult<()> {
    let (input, out) = (s.path("input")?, s.path("out")?);
    let g = load_pflg(&input)?;
    export_obj(&g, &out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn rank_report_cmd(s: &Settings) -> CliResult<()> {
    let model = ShapeModel::load(&s.path("model")?)?;
    let tol: f64 = s.get("tol")?;
    let mats = model.projections.matrices(&model.params);
    let pi = pi_loss(&mats)?;
    println!(
        "pi_loss {:.6e} (idempotence {:.6e}, orthogonality {:.6e}, completeness {:.6e})",
        pi.total, pi.idempotence, pi.orthogonality, pi.completeness
    );
    if !s.raw("data").is_empty() {
        let ds = load_dataset(&s.path("data")?)?;
        let occ: Vec<OccupancyGrid> = split(&ds, s.raw("split"))?.iter().map(|g| g.occupancy()).collect();
        let refs: Vec<&OccupancyGrid> = occ.iter().collect();
        let e = model.embed(&refs)?;
        let res: Vec<f64> = (0..e.rows()).map(|i| completeness_residual(&mats, e.row(i))).collect();
        let mean = res.iter().sum::<f64>() / res.len() as f64;
        let max = res.iter().copied().fold(0.0, f64::max);
        println!("completeness residual over {} shapes: mean {mean:.6e}, max {max:.6e}", res.len());
    }
    for (k, rec) in effective_rank_report(&mats, tol).iter().enumerate() {
        println!("proj.P{}: effective rank {} of {}", k + 1, rec.rank, model.embed_dim());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn common(config: Option<PathBuf>, seed: Option<u64>) -> Common {
        Common { seed, threads: None, config }
    }

    #[test]
    fn flags_override_config_which_overrides_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.txt");
        std::fs::write(&cfg, "train = 7\nval = 3 # comment\nseed = 5\n").unwrap();
        let d = vec![kv("train", 200), kv("val", 20), kv("test", 20)];
        let s = resolve(&common(Some(cfg.clone()), Some(9)), d.clone(), vec![opt("val", &Some(4))]).unwrap();
        assert_eq!((s.raw("train"), s.raw("val"), s.raw("test"), s.raw("seed")), ("7", "4", "20", "9"));
        let s = resolve(&common(None, None), d.clone(), vec![]).unwrap();
        assert_eq!((s.raw("train"), s.raw("seed"), s.raw("threads")), ("200", "0", "0"));

        std::fs::write(&cfg, "bogus = 1\n").unwrap();
        let e = resolve(&common(Some(cfg), None), d, vec![]).unwrap_err();
        assert_eq!(e.exit_code(), EXIT_USAGE);
    }

    #[test]
    fn train_settings_cover_every_config_key() {
        let c = Cli::try_parse_from(["shapefactor", "train", "--data", "d", "--out", "o", "--lr", "0.5", "--no-cycle"])
            .unwrap();
        let (_, s) = settings_for(&c.command).unwrap();
        let tc = train_config(&s).unwrap();
        assert_eq!(tc.adam.lr, 0.5);
        assert!(tc.ablation.no_cycle && !tc.ablation.no_stn);
        assert_eq!(tc.resolution, None);
        let mut expected = TrainConfig::default();
        expected.adam.lr = 0.5;
        expected.ablation.no_cycle = true;
        assert_eq!(tc, expected);
    }

    #[test]
    fn usage_errors_map_to_exit_one() {
        assert_eq!(run_from(["shapefactor", "train", "--bogus"]), EXIT_USAGE);
        assert_eq!(run_from(["shapefactor", "nope"]), EXIT_USAGE);
        assert_eq!(run_from(["shapefactor", "gen-data"]), EXIT_USAGE);
        assert_eq!(run_from(["shapefactor", "gradcheck"]), EXIT_USAGE);
        assert_eq!(run_from(["shapefactor", "gen-data", "--help"]), EXIT_OK);
    }

    #[test]
    fn missing_files_are_runtime_errors() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("none.pflg");
        let out = dir.path().join("x.obj");
        let code = run_from([
            "shapefactor".into(),
            "export-mesh".into(),
            "--input".into(),
            missing.into_os_string(),
            "--out".into(),
            out.into_os_string(),
        ]);
        assert_eq!(code, EXIT_RUNTIME);
    }
}
