use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use wgflow_core::experiments::{
    merge_patch, paper_scale_overrides, prepare_output_dir, resolve, run_experiment, run_flow,
    ExperimentName, ExperimentSpec, FlowRunConfig,
};
use wgflow_core::filtering::FilterMethod;

#[derive(Parser, Debug)]
#[command(name = "wgflow", version, about = "Regularized Wasserstein gradient flows for diffusions")]
struct Cli {
    /// Base seed, patched into the experiment configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Use the larger replicate counts and dimension ranges.
    #[arg(long, global = true)]
    paper_scale: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON merge patch applied to the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inline JSON merge patch, applied after `--config`.
    #[arg(long)]
    set: Option<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Bimodal OU flow against the grid solver.
    Fig1(Common),
    /// OU prediction accuracy as the dimension grows.
    OuScaling(Common),
    /// Sine-potential filtering benchmark.
    FilterBench {
        #[command(flatten)]
        common: Common,
        /// Methods to score (repeatable); default is the configured list.
        #[arg(long = "method")]
        methods: Vec<FilterMethod>,
        /// Number of simulated observation sequences.
        #[arg(long)]
        n_runs: Option<usize>,
    },
    /// A single flow from a Gaussian mixture, dumped at snapshot times.
    Flow(Common),
    /// Print the default configuration of an experiment.
    Defaults {
        #[arg(value_parser = ["fig1", "ou-scaling", "filter-bench", "flow"])]
        experiment: String,
    },
}

fn read_patch(common: &Common) -> Result<Value> {
    let mut patch = json!({});
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let v: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        merge_patch(&mut patch, &v);
    }
    if let Some(s) = &common.set {
        let v: Value = serde_json::from_str(s).context("parsing --set")?;
        merge_patch(&mut patch, &v);
    }
    Ok(patch)
}

fn run_named(cli: &Cli, name: ExperimentName, common: &Common, extra: Value) -> Result<Value> {
    let mut overrides = if cli.paper_scale {
        paper_scale_overrides(name)
    } else {
        json!({})
    };
    merge_patch(&mut overrides, &read_patch(common)?);
    merge_patch(&mut overrides, &extra);
    if let Some(seed) = cli.seed {
        merge_patch(&mut overrides, &json!({ "seed": seed }));
    }
    let spec = ExperimentSpec {
        name,
        overrides,
        output_dir: common.out.clone(),
    };
    Ok(run_experiment(&spec)?)
}

fn check_failures(result: &Value) -> Result<()> {
    if let Some(f) = result.get("failures").and_then(Value::as_array) {
        if !f.is_empty() {
            for item in f {
                eprintln!("failure: {}", item.as_str().map(str::to_owned).unwrap_or_else(|| item.to_string()));
            }
            bail!("{} failed step(s)", f.len());
        }
    }
    Ok(())
}

fn run_flow_command(cli: &Cli, common: &Common) -> Result<Value> {
    let mut patch = read_patch(common)?;
    if let Some(seed) = cli.seed {
        merge_patch(&mut patch, &json!({ "seed": seed }));
    }
    let config: FlowRunConfig = resolve(&FlowRunConfig::defaults(), &patch)?;
    prepare_output_dir(&common.out)?;
    let steps = run_flow(&config, &common.out)?;
    let last = steps.last().context("flow produced no steps")?;
    Ok(json!({
        "steps": steps.len(),
        "final_status": format!("{:?}", last.solve_report.status),
        "final_normalization": last.normalization,
        "output_dir": display(&common.out),
    }))
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn defaults(which: &str) -> Result<Value> {
    use wgflow_core::experiments::{Fig1Config, OuScalingConfig, SineFilteringConfig};
    Ok(match which {
        "fig1" => serde_json::to_value(Fig1Config::defaults())?,
        "ou-scaling" => serde_json::to_value(OuScalingConfig::defaults())?,
        "filter-bench" => serde_json::to_value(SineFilteringConfig::defaults())?,
        _ => serde_json::to_value(FlowRunConfig::defaults())?,
    })
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            bail!("--workers must be positive");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let result = match &cli.command {
        Command::Fig1(c) => run_named(cli, ExperimentName::Fig1OuBimodal, c, json!({}))?,
        Command::OuScaling(c) => run_named(cli, ExperimentName::OuDimensionScaling, c, json!({}))?,
        Command::FilterBench {
            common,
            methods,
            n_runs,
        } => {
            let mut extra = json!({});
            if !methods.is_empty() {
                extra["methods"] = serde_json::to_value(methods)?;
            }
            if let Some(n) = n_runs {
                extra["n_runs"] = json!(n);
            }
            run_named(cli, ExperimentName::SineFiltering, common, extra)?
        }
        Command::Flow(c) => run_flow_command(cli, c)?,
        Command::Defaults { experiment } => defaults(experiment)?,
    };
    println!("{}", serde_json::to_string_pretty(&result)?);
    check_failures(&result)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
