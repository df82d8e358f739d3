//! `hiersynth` command-line interface.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use hiersynth::domain::{load_dataset, load_schema, save_dataset, HierarchicalDataset};
use hiersynth::harness::{
    ground_truth_f64, multi_run, run_experiment, write_errors, write_sweep, FittedModel, Method, RunConfig,
    SavedModel, WorkloadModel,
};
use hiersynth::synth::{binary_schema, latent_class_dataset};
use hiersynth::workload::{build_workload, QueryClass, Workload};

#[derive(Parser)]
#[command(name = "hiersynth", version, about = "Private synthetic hierarchical data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Enumerate all k-way queries of the given kinds over a schema.
    BuildWorkload(BuildWorkloadArgs),
    /// Fit a model under (ε, δ)-DP.
    Fit(FitArgs),
    /// Draw a synthetic dataset from a fitted model.
    Sample(SampleArgs),
    /// Per-query errors of a model against a dataset.
    Evaluate(EvaluateArgs),
    /// Run every (method, ε, seed) cell and write a results table.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct BuildWorkloadArgs {
    #[arg(long)]
    schema: PathBuf,
    #[arg(long)]
    k: usize,
    /// Comma-separated: g (group), i (individual), r (relationship).
    #[arg(long, value_delimiter = ',', default_value = "g,i")]
    kinds: Vec<QueryClass>,
    #[arg(short = 'o', long = "output")]
    output: PathBuf,
}

/// Run settings shared by `fit` and `sweep`; each flag overrides the config
/// file.
#[derive(Args)]
struct RunFlags {
    /// JSON config file (fields of the run configuration plus paths).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    workload: Option<PathBuf>,
    /// `auto` means 1 / N_I².
    #[arg(long)]
    delta: Option<Delta>,
    #[arg(long = "T")]
    rounds: Option<usize>,
    #[arg(long = "K")]
    components: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long = "t-max")]
    t_max: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    no_clamp: bool,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    method: Option<Method>,
    #[arg(long, allow_negative_numbers = true)]
    epsilon: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    run: RunFlags,
    /// Also write the run summary and per-round trace as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(short = 'o', long = "output")]
    output: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short = 'o', long = "output")]
    output: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    workload: PathBuf,
    #[arg(short = 'o', long = "output")]
    output: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_delimiter = ',')]
    epsilons: Option<Vec<f64>>,
    /// Number of seeds; seeds are `0..n`.
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    #[command(flatten)]
    run: RunFlags,
    #[arg(short = 'o', long = "output")]
    output: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Delta {
    Value(f64),
    Auto,
}

impl std::str::FromStr for Delta {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "auto" {
            return Ok(Delta::Auto);
        }
        s.parse().map(Delta::Value).map_err(|_| format!("expected a number or `auto`, got `{s}`"))
    }
}

/// Contents of `--config`.
#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct ConfigFile {
    #[serde(flatten)]
    run: RunConfig,
    data: Option<PathBuf>,
    workload: Option<PathBuf>,
    epsilons: Option<Vec<f64>>,
    seeds: Option<u64>,
    methods: Option<Vec<Method>>,
}

fn read_config(path: Option<&Path>) -> Result<ConfigFile> {
    let Some(path) = path else {
        return Ok(ConfigFile::default());
    };
    let file = File::open(path).with_context(|| format!("opening config {}", path.display()))?;
    serde_json::from_reader(BufReader::new(file)).with_context(|| format!("parsing config {}", path.display()))
}

impl RunFlags {
    fn apply(&self, run: &mut RunConfig) {
        match self.delta {
            Some(Delta::Auto) => run.delta = None,
            Some(Delta::Value(d)) => run.delta = Some(d),
            None => {}
        }
        if let Some(t) = self.rounds {
            run.rounds = t;
        }
        if let Some(k) = self.components {
            run.hpd.k = k;
        }
        if let Some(a) = self.alpha {
            run.alpha = a;
        }
        if let Some(t) = self.t_max {
            run.t_max = t;
        }
        if let Some(lr) = self.lr {
            run.hpd.lr = Some(lr);
        }
        if self.no_clamp {
            run.clamp = false;
        }
    }
}

fn load_workload(path: &Path) -> Result<Workload> {
    Workload::load(path).with_context(|| format!("loading workload {}", path.display()))
}

fn load_data(workload: &Workload, path: &Path) -> Result<HierarchicalDataset> {
    load_dataset(&workload.schema, path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_model(path: &Path, cap: u64) -> Result<FittedModel> {
    let file = File::open(path).with_context(|| format!("opening model {}", path.display()))?;
    let saved = SavedModel::read_json(BufReader::new(file))?;
    Ok(FittedModel::from_saved(&saved, cap)?)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

/// The built-in sweep target: 1000 groups over three binary group and three
/// binary individual attributes, with all queries of up to two predicates.
fn default_sweep_inputs() -> Result<(HierarchicalDataset, Workload)> {
    let schema = binary_schema(3, 3, 3);
    let data = latent_class_dataset(&schema, 1000, 0);
    let classes = [QueryClass::Group, QueryClass::Individual];
    let workload = build_workload(&schema, 1, &classes)?.union(build_workload(&schema, 2, &classes)?)?;
    Ok((data, workload))
}

fn build_workload_cmd(args: BuildWorkloadArgs) -> Result<()> {
    let schema = load_schema(&args.schema).with_context(|| format!("loading schema {}", args.schema.display()))?;
    let workload = build_workload(&schema, args.k, &args.kinds)?;
    workload.save(&args.output)?;
    eprintln!("{} queries -> {}", workload.len(), args.output.display());
    Ok(())
}

fn fit_cmd(args: FitArgs) -> Result<()> {
    let file = read_config(args.run.config.as_deref())?;
    let mut run = file.run;
    if let Some(m) = args.method {
        run.method = m;
    }
    if let Some(e) = args.epsilon {
        run.epsilon = e;
    }
    if let Some(s) = args.seed {
        run.seed = s;
    }
    args.run.apply(&mut run);
    let data_path = args.run.data.or(file.data).context("--data is required")?;
    let workload_path = args.run.workload.or(file.workload).context("--workload is required")?;
    let workload = load_workload(&workload_path)?;
    let data = load_data(&workload, &data_path)?;

    let (result, model) = run_experiment(&run, &data, &workload)?;
    let mut out = create(&args.output)?;
    model.to_saved().write_json(&mut out)?;
    out.flush()?;
    if let Some(path) = args.report {
        let mut out = create(&path)?;
        serde_json::to_writer_pretty(&mut out, &result)?;
        out.flush()?;
    }
    eprintln!(
        "{} eps={} delta={:.3e} rho={:.6} T={}: max_error={:.6} mean_error={:.6}",
        result.method, result.epsilon, result.delta, result.rho, result.rounds, result.max_error, result.mean_error
    );
    Ok(())
}

fn sample_cmd(args: SampleArgs) -> Result<()> {
    let model = load_model(&args.model, RunConfig::default().enumeration_cap)?;
    let synth = model.sample(args.n, args.seed, RunConfig::default().enumeration_cap)?;
    save_dataset(&synth, &args.output)?;
    eprintln!("{} groups, {} individuals -> {}", synth.n_groups(), synth.n_individuals(), args.output.display());
    Ok(())
}

fn evaluate_cmd(args: EvaluateArgs) -> Result<()> {
    let model = load_model(&args.model, RunConfig::default().enumeration_cap)?;
    let workload = load_workload(&args.workload)?;
    let data = load_data(&workload, &args.data)?;
    let truth = ground_truth_f64(&workload, &data)?;
    let answers = model.workload_answers(&workload)?;
    let mut out = create(&args.output)?;
    write_errors(&answers, &truth, &mut out)?;
    out.flush()?;
    let max = answers.iter().zip(&truth).map(|(a, t)| (a - t).abs()).fold(0.0, f64::max);
    eprintln!("{} queries, max_error={max:.6} -> {}", answers.len(), args.output.display());
    Ok(())
}

fn sweep_cmd(args: SweepArgs) -> Result<()> {
    let file = read_config(args.run.config.as_deref())?;
    let mut run = file.run;
    args.run.apply(&mut run);
    let epsilons = args.epsilons.or(file.epsilons).unwrap_or_else(|| vec![0.125, 0.25, 0.5, 1.0]);
    let n_seeds = args.seeds.or(file.seeds).unwrap_or(5);
    let methods = args.methods.or(file.methods).unwrap_or_else(|| Method::ALL.to_vec());
    let seeds: Vec<u64> = (0..n_seeds).collect();

    let (data, workload) = match (args.run.data.or(file.data), args.run.workload.or(file.workload)) {
        (Some(d), Some(w)) => {
            let workload = load_workload(&w)?;
            (load_data(&workload, &d)?, workload)
        }
        (None, None) => default_sweep_inputs()?,
        _ => bail!("--data and --workload must be given together"),
    };
    let rows = multi_run(&run, &methods, &epsilons, &seeds, &data, &workload)?;
    let mut out = create(&args.output)?;
    write_sweep(&rows, &mut out)?;
    out.flush()?;
    eprintln!("{} rows -> {}", rows.len(), args.output.display());
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::BuildWorkload(a) => build_workload_cmd(a),
        Command::Fit(a) => fit_cmd(a),
        Command::Sample(a) => sample_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
    }
}
