use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use lora_lego::adapter::{load_adapter_with, save_adapter, LoadOptions, SaveDtype};
use lora_lego::harness::{
    conflict_trials, keep_rank, misalignment_trials, norm_decay_trials, structured_pruning_curve, variance_sweep,
    ExperimentReport,
};
use lora_lego::merge::{ensemble_merge, lego_merge, prune_lora, task_arithmetic, ties_merge, weight_average, KPolicy};
use lora_lego::msu::{adapter_delta, delta_weight, extract_msus, permute_layer};
use lora_lego::tensor::inf_norm;
use lora_lego::{LoraAdapter, LoraLayer, Matrix, MergeOptions, Permutation, Rng, TiesOptions};

mod verify;

const SEED_ENV: &str = "LORA_LEGO_SEED";

#[derive(Parser, Debug)]
#[command(name = "lora-lego", version, about = "Merge, prune and inspect LoRA adapters rank by rank")]
struct Cli {
    /// Worker threads for per-layer merging (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Merge several adapters into one.
    Merge(MergeArgs),
    /// Reduce the rank of one adapter.
    Prune(PruneArgs),
    /// Print per-layer shapes and norms.
    Inspect(InspectArgs),
    /// Run the built-in invariant suites.
    Verify(VerifyArgs),
    /// Run a synthetic experiment and write CSV + JSON reports.
    Bench(BenchArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Method {
    Lego,
    Average,
    TaskArithmetic,
    Ties,
    Ensemble,
}

#[derive(ValueEnum, Clone, Copy, Debug, Default)]
enum DtypeArg {
    #[default]
    F32,
    F16,
}

impl From<DtypeArg> for SaveDtype {
    fn from(d: DtypeArg) -> Self {
        match d {
            DtypeArg::F32 => SaveDtype::F32,
            DtypeArg::F16 => SaveDtype::F16,
        }
    }
}

#[derive(Args, Debug)]
struct ReweightArgs {
    /// Skip rescaling centroids to the mean member infinity norm.
    #[arg(long)]
    no_param_reweight: bool,
    /// Skip the sqrt(r/k) output factor.
    #[arg(long)]
    no_output_reweight: bool,
}

#[derive(Args, Debug)]
struct MergeArgs {
    #[arg(long, value_enum, default_value = "lego")]
    method: Method,
    /// Adapter directories, comma separated.
    #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
    adapters: Vec<PathBuf>,
    /// Output adapter directory.
    #[arg(long)]
    out: PathBuf,
    /// Merged rank: an integer or a multiple of the mean rank such as "2r" (lego only).
    #[arg(long)]
    k: Option<String>,
    #[command(flatten)]
    reweight: ReweightArgs,
    /// k-means restarts per layer (lego only).
    #[arg(long)]
    n_init: Option<usize>,
    /// Merge layers that only some adapters have (lego only).
    #[arg(long)]
    union: bool,
    /// Scaling for task arithmetic.
    #[arg(long)]
    p: Option<f64>,
    /// Fraction of entries TIES keeps per matrix.
    #[arg(long)]
    density: Option<f64>,
    /// Final TIES scaling.
    #[arg(long)]
    merge_scale: Option<f64>,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "f32")]
    dtype: DtypeArg,
    /// Merge report path (lego only; default `<out>/merge_report.json`).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Skip tensors that are not LoRA weights when loading.
    #[arg(long)]
    ignore_extra: bool,
}

#[derive(Args, Debug)]
#[command(group(clap::ArgGroup::new("keep").required(true).args(["keep_rank", "keep_frac"])))]
struct PruneArgs {
    #[arg(long)]
    adapter: PathBuf,
    /// Target rank.
    #[arg(long)]
    keep_rank: Option<usize>,
    /// Keep ceil(f * r) ranks.
    #[arg(long)]
    keep_frac: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    reweight: ReweightArgs,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "f32")]
    dtype: DtypeArg,
    /// Report path (default `<out>/prune_report.json`).
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    ignore_extra: bool,
}

#[derive(Args, Debug)]
struct InspectArgs {
    adapter: PathBuf,
    /// Machine-readable output.
    #[arg(long)]
    json: bool,
    #[arg(long)]
    ignore_extra: bool,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    pub seed: u64,
    /// Also check permutation invariance and self-merge on this adapter.
    #[arg(long)]
    pub adapter: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Experiment {
    Misalignment,
    Variance,
    NormDecay,
    PruningCurve,
    Conflict,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(value_enum)]
    experiment: Experiment,
    /// Output prefix; `.csv` and `.json` are appended.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    trials: Option<usize>,
    /// Matrix side for the variance experiment.
    #[arg(long)]
    p: Option<usize>,
    /// Adapter rank.
    #[arg(long)]
    r: Option<usize>,
    /// Cluster counts for the variance experiment, comma separated.
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    /// Layer width for the other experiments.
    #[arg(long)]
    d: Option<usize>,
    /// Clusters per merge (norm-decay).
    #[arg(long)]
    k: Option<usize>,
    /// Adapters per merge (norm-decay).
    #[arg(long)]
    n_adapters: Option<usize>,
    /// Distinct MSUs in the pruning target.
    #[arg(long)]
    prototypes: Option<usize>,
    /// Keep fractions for the pruning curve, comma separated.
    #[arg(long, value_delimiter = ',')]
    fractions: Option<Vec<f64>>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring thread pool")?;
    }
    match cli.command {
        Command::Merge(args) => cmd_merge(args),
        Command::Prune(args) => cmd_prune(args),
        Command::Inspect(args) => cmd_inspect(args),
        Command::Verify(args) => verify::cmd_verify(&args),
        Command::Bench(args) => cmd_bench(args),
    }
    .map(|()| ExitCode::SUCCESS)
    .or_else(|e| match e.downcast::<verify::Failed>() {
        Ok(_) => Ok(ExitCode::from(1)),
        Err(e) => Err(e),
    })
}

fn load(path: &Path, ignore_extra: bool) -> Result<LoraAdapter> {
    load_adapter_with(path, LoadOptions { ignore_extra }).with_context(|| format!("loading adapter {}", path.display()))
}

fn dir_name(path: &Path, fallback: &str) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| fallback.to_string())
}

fn write_json(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, format!("{text}\n")).with_context(|| format!("writing {}", path.display()))
}

fn check_merge_flags(args: &MergeArgs) -> Result<()> {
    let lego_only = [
        ("--k", args.k.is_some()),
        ("--no-param-reweight", args.reweight.no_param_reweight),
        ("--no-output-reweight", args.reweight.no_output_reweight),
        ("--n-init", args.n_init.is_some()),
        ("--union", args.union),
        ("--report", args.report.is_some()),
    ];
    for (flag, set) in lego_only {
        if set && args.method != Method::Lego {
            bail!("{flag} only applies to --method lego");
        }
    }
    if args.p.is_some() && args.method != Method::TaskArithmetic {
        bail!("--p only applies to --method task-arithmetic");
    }
    if (args.density.is_some() || args.merge_scale.is_some()) && args.method != Method::Ties {
        bail!("--density and --merge-scale only apply to --method ties");
    }
    Ok(())
}

fn merge_options(reweight: &ReweightArgs, seed: u64, name: String) -> MergeOptions {
    let mut opts = MergeOptions::default().with_seed(seed).reweighting(!reweight.no_param_reweight, !reweight.no_output_reweight);
    opts.name = name;
    opts
}

fn cmd_merge(args: MergeArgs) -> Result<()> {
    check_merge_flags(&args)?;
    let adapters = args.adapters.iter().map(|p| load(p, args.ignore_extra)).collect::<Result<Vec<_>>>()?;
    let name = dir_name(&args.out, "merged");
    let merged = match args.method {
        Method::Lego => {
            let mut opts = merge_options(&args.reweight, args.seed, name.clone());
            if let Some(spec) = &args.k {
                opts.k_policy = spec.parse::<KPolicy>()?;
            }
            if let Some(n) = args.n_init {
                opts.kmeans = opts.kmeans.with_n_init(n);
            }
            opts.union = args.union;
            let (merged, report) = lego_merge(&adapters, &opts)?;
            let report_path = args.report.clone().unwrap_or_else(|| args.out.join("merge_report.json"));
            save_adapter(&merged, &args.out, args.dtype.into())?;
            write_json(&report_path, &report.to_json())?;
            println!("merge report: {}", report_path.display());
            merged
        }
        Method::Average => weight_average(&adapters)?,
        Method::TaskArithmetic => task_arithmetic(&adapters, args.p.unwrap_or(1.0))?,
        Method::Ties => {
            let defaults = TiesOptions::default();
            let opts = TiesOptions {
                density: args.density.unwrap_or(defaults.density),
                merge_scale: args.merge_scale.unwrap_or(defaults.merge_scale),
            };
            ties_merge(&adapters, opts)?
        }
        Method::Ensemble => ensemble_merge(&adapters)?,
    };
    if args.method != Method::Lego {
        let mut merged = merged.clone();
        merged.name = name;
        save_adapter(&merged, &args.out, args.dtype.into())?;
    }
    println!(
        "wrote {} (rank {}, {} layers, {} inputs)",
        args.out.display(),
        merged.rank,
        merged.layers.len(),
        adapters.len()
    );
    Ok(())
}

fn cmd_prune(args: PruneArgs) -> Result<()> {
    let adapter = load(&args.adapter, args.ignore_extra)?;
    let k = match (args.keep_rank, args.keep_frac) {
        (Some(k), _) => k,
        (None, Some(f)) => {
            if !(f > 0.0 && f <= 1.0) {
                bail!("--keep-frac must be in (0, 1], got {f}");
            }
            keep_rank(f, adapter.rank)
        }
        (None, None) => unreachable!("clap enforces one of --keep-rank/--keep-frac"),
    };
    let opts = merge_options(&args.reweight, args.seed, dir_name(&args.out, "pruned"));
    let (pruned, report) = prune_lora(&adapter, k, &opts)?;
    save_adapter(&pruned, &args.out, args.dtype.into())?;
    let report_path = args.report.unwrap_or_else(|| args.out.join("prune_report.json"));
    write_json(&report_path, &report.to_json())?;
    println!("wrote {} (rank {} -> {})", args.out.display(), adapter.rank, pruned.rank);
    Ok(())
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct InspectReport {
    name: String,
    rank: usize,
    alpha: f64,
    scale: f64,
    scaling_folded: bool,
    target_modules: Vec<String>,
    layers: Vec<LayerInfo>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct LayerInfo {
    path: String,
    d_in: usize,
    d_out: usize,
    rank: usize,
    delta_frobenius: f64,
    msu_inf_norms: Vec<f64>,
}

fn inspect(adapter: &LoraAdapter) -> Result<InspectReport> {
    let layers = adapter
        .layers
        .iter()
        .map(|(path, layer)| {
            let msu_inf_norms = extract_msus(layer, &adapter.name, path)
                .iter()
                .map(|m| inf_norm(&m.combined()))
                .collect::<lora_lego::Result<Vec<f64>>>()?;
            Ok(LayerInfo {
                path: path.clone(),
                d_in: layer.d_in(),
                d_out: layer.d_out(),
                rank: layer.rank(),
                delta_frobenius: delta_weight(layer, adapter.scale()).frobenius_norm(),
                msu_inf_norms,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(InspectReport {
        name: adapter.name.clone(),
        rank: adapter.rank,
        alpha: adapter.alpha,
        scale: adapter.scale(),
        scaling_folded: adapter.scaling_folded,
        target_modules: adapter.target_modules.clone(),
        layers,
    })
}

fn cmd_inspect(args: InspectArgs) -> Result<()> {
    let adapter = load(&args.adapter, args.ignore_extra)?;
    let report = inspect(&adapter)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
        return Ok(());
    }
    println!(
        "{}: rank {}, alpha {}, scale {}, {} layers",
        report.name,
        report.rank,
        report.alpha,
        report.scale,
        report.layers.len()
    );
    for layer in &report.layers {
        println!(
            "{}  d_in={} d_out={} rank={} |dW|_F={:.6e}",
            layer.path, layer.d_in, layer.d_out, layer.rank, layer.delta_frobenius
        );
        for (i, n) in layer.msu_inf_norms.iter().enumerate() {
            println!("  msu {i:>3}  inf_norm={n:.6e}");
        }
    }
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let mut rng = Rng::new(args.seed);
    let r = args.r.unwrap_or(8);
    let report: ExperimentReport = match args.experiment {
        Experiment::Misalignment => misalignment_trials(args.d.unwrap_or(64), r, args.trials.unwrap_or(100), &mut rng)?,
        Experiment::Variance => {
            let p = args.p.unwrap_or(64);
            let ks = args.ks.clone().unwrap_or_else(|| vec![r, 2 * r, 4 * r]);
            let trials = args.trials.unwrap_or_else(|| 100_000usize.div_ceil(p * p));
            variance_sweep(p, r, &ks, trials, &mut rng)?
        }
        Experiment::NormDecay => norm_decay_trials(
            args.d.unwrap_or(32),
            r,
            args.n_adapters.unwrap_or(3),
            args.k.unwrap_or(2 * r),
            args.trials.unwrap_or(100),
            &mut rng,
        )?,
        Experiment::PruningCurve => {
            let fractions = args.fractions.clone().unwrap_or_else(|| vec![0.125, 0.25, 0.5, 0.75, 1.0]);
            structured_pruning_curve(args.d.unwrap_or(32), r, args.prototypes.unwrap_or(2), &fractions, &mut rng)?
        }
        Experiment::Conflict => conflict_trials(args.d.unwrap_or(32), args.r.unwrap_or(6), args.trials.unwrap_or(50), &mut rng)?,
    };
    let (csv, json) = report.write(&args.out)?;
    println!("wrote {} and {} ({} rows)", csv.display(), json.display(), report.rows.len());
    Ok(())
}

/// Helpers shared with the verify suites.
pub(crate) fn permuted_adapter(adapter: &LoraAdapter, rng: &mut Rng) -> lora_lego::Result<LoraAdapter> {
    let mut out = adapter.clone();
    for layer in out.layers.values_mut() {
        *layer = permute_layer(layer, &Permutation::random(layer.rank(), rng))?;
    }
    Ok(out)
}

pub(crate) fn max_delta_diff(x: &LoraAdapter, y: &LoraAdapter) -> f64 {
    x.layers
        .keys()
        .map(|p| match (adapter_delta(x, p), adapter_delta(y, p)) {
            (Some(a), Some(b)) => a.max_abs_diff(&b).unwrap_or(f64::INFINITY),
            _ => f64::INFINITY,
        })
        .fold(0.0, f64::max)
}

pub(crate) fn random_layer(rng: &mut Rng, d_in: usize, d_out: usize, r: usize) -> LoraLayer {
    LoraLayer::new(Matrix::gaussian(r, d_in, rng), Matrix::gaussian(d_out, r, rng)).expect("positive dims")
}
