//! `redteam`: calibrate, predict, evaluate, edit, and synthesize from the
//! command line. Every command reads files and writes files into `--out`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use indexmap::IndexMap;
use log::info;

use redteam_core::edit::zoom::CropRect;
use redteam_core::edit::{
    backends, build_factor_batch, read_observation_dir, BatchConfig, Camera, RetryPolicy, TemplateLibrary,
};
use redteam_core::evaluation::{evaluate_predictions, render_factor_table, render_table};
use redteam_core::predictor::{calibrate_sets, predict_loaded, rank_factors, select_worst, ReportDocument};
use redteam_core::synth::{generate_world, run_ablation_manifest, AblationGrid, SynthWorldSpec};
use redteam_core::{Manifest, PredictOptions};

#[derive(Parser)]
#[command(
    name = "redteam",
    version,
    about = "Predict policy success rates under environmental factors"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score the validation set and write the conformal threshold.
    Calibrate(PredictArgs),
    /// Predict per-factor success rates.
    Predict {
        #[command(flatten)]
        args: PredictArgs,
        /// Also list the N factors predicted to hurt the policy most.
        #[arg(long, value_name = "N")]
        worst: Option<usize>,
    },
    /// Compare a prediction report with measured success rates.
    Evaluate(EvaluateArgs),
    /// Generate an edited observation batch for one factor.
    Edit(EditArgs),
    /// Generate a synthetic embedding world.
    Synth(SynthArgs),
    /// Sweep k and reference-set size over a world with known ground truth.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Neighbours averaged by the anomaly score.
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Nominal success rate, overriding the manifest.
    #[arg(long = "r-nom")]
    r_nom: Option<f64>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Report written by `predict`.
    #[arg(long)]
    report: PathBuf,
    /// JSON object mapping factor to measured success rate.
    #[arg(long, required_unless_present = "manifest")]
    measured: Option<PathBuf>,
    /// Take measured rates from this manifest's `measured_success`.
    #[arg(long, conflicts_with = "measured")]
    manifest: Option<PathBuf>,
    /// Column label in the rendered table.
    #[arg(long, default_value = "policy")]
    label: String,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Backend {
    Mock,
    Remote,
}

#[derive(Args)]
struct EditArgs {
    /// Directory of `<id>__<camera>.<ext>` images.
    #[arg(long)]
    observations: PathBuf,
    /// Name of the factor being generated.
    #[arg(long)]
    factor: String,
    /// Edit template, e.g. `background` or `table_height`.
    #[arg(long)]
    template: String,
    /// Placeholder value, e.g. `--set "target color=blue"`. Repeatable.
    #[arg(long = "set", value_name = "NAME=VALUE")]
    substitutions: Vec<String>,
    /// Directory of `.txt` templates overriding the builtins.
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "mock")]
    backend: Backend,
    /// Editor endpoint; with the mock backend, `mock:` options.
    #[arg(long = "editor-url")]
    editor_url: Option<String>,
    /// Critic endpoint; with the mock backend, `mock:` options.
    #[arg(long = "critic-url")]
    critic_url: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "n-variants", default_value_t = 4)]
    n_variants: usize,
    #[arg(long = "max-in-flight", default_value_t = 4)]
    max_in_flight: usize,
    #[arg(long = "max-attempts", default_value_t = 3)]
    max_attempts: u32,
    /// Central crop kept by the zoom; applied by default to `table_height`.
    #[arg(long = "zoom-fraction")]
    zoom_fraction: Option<f64>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    spec: PathBuf,
    /// Overrides the seed given in the world description.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    grid: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

fn write_output(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("cannot write {}", path.display()))?;
    info!("wrote {}", path.display());
    Ok(path)
}

fn load_manifest(path: &Path) -> Result<Manifest> {
    Manifest::from_path(path).with_context(|| format!("loading manifest {}", path.display()))
}

fn options(args: &PredictArgs) -> Result<PredictOptions> {
    let mut options = PredictOptions::new(args.k);
    if let Some(r) = args.r_nom {
        if !(0.0..=1.0).contains(&r) {
            bail!("--r-nom must lie in [0, 1], got {r}");
        }
        options = options.with_r_nom(r);
    }
    Ok(options)
}

fn calibrate(args: &PredictArgs) -> Result<()> {
    let manifest = load_manifest(&args.manifest)?;
    let options = options(args)?;
    let sets = manifest.load_sets().context("loading embeddings")?;
    let r_nom = options.r_nom_override.unwrap_or(manifest.r_nom);
    let result = calibrate_sets(&sets.nominal, &sets.validation, options.k, r_nom).context("calibration failed")?;
    let json = serde_json::to_string_pretty(&result)? + "\n";
    let path = write_output(&args.out, "calibration.json", &json)?;
    println!(
        "tau = {} (order statistic {} of {}), written to {}",
        result.tau,
        result.quantile_index,
        result.n_val,
        path.display()
    );
    Ok(())
}

fn predict(args: &PredictArgs, worst: Option<usize>) -> Result<()> {
    let manifest = load_manifest(&args.manifest)?;
    let options = options(args)?;
    let sets = manifest.load_sets().context("loading embeddings")?;
    let report = predict_loaded(&sets, &manifest, &options).context("prediction failed")?;
    let path = write_output(&args.out, "report.json", &report.to_document().to_json())?;

    println!(
        "tau = {}, k = {}, r_nom = {}",
        report.calibration.tau, report.k, report.calibration.r_nom
    );
    println!("{:>6}  {:<24} {:>9} {:>8}", "rank", "factor", "predicted", "anomaly");
    for ranked in rank_factors(&report) {
        let p = report
            .predictions
            .iter()
            .find(|p| p.factor == ranked.factor)
            .expect("ranked factor is predicted");
        println!(
            "{:>6}  {:<24} {:>9.3} {:>8.3}",
            ranked.rank, p.factor, p.predicted_success, p.anomaly_rate
        );
    }
    if let Some(n) = worst {
        let chosen = select_worst(&report, n)?;
        println!("worst {n}: {}", chosen.join(", "));
    }
    println!("report written to {}", path.display());
    Ok(())
}

fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let text = fs::read_to_string(&args.report).with_context(|| format!("reading {}", args.report.display()))?;
    let document: ReportDocument =
        serde_json::from_str(&text).with_context(|| format!("parsing report {}", args.report.display()))?;
    let measured: IndexMap<String, f64> = match (&args.measured, &args.manifest) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing measured rates {}", path.display()))?
        }
        (None, Some(path)) => load_manifest(path)?
            .measured_success
            .with_context(|| format!("{} has no measured_success", path.display()))?,
        (None, None) => bail!("either --measured or --manifest is required"),
    };
    let evaluation = evaluate_predictions(&document.predictions(), &measured).context("evaluation failed")?;
    write_output(&args.out, "evaluation.json", &evaluation.to_json())?;
    let table = render_table("Predicted vs measured", &[(&args.label, &evaluation)]);
    let per_factor = render_factor_table(&evaluation);
    write_output(&args.out, "evaluation.txt", &format!("{table}\n{per_factor}"))?;
    print!("{table}\n{per_factor}");
    Ok(())
}

fn parse_substitutions(pairs: &[String]) -> Result<BTreeMap<String, String>> {
    pairs
        .iter()
        .map(|pair| {
            pair.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.to_string()))
                .with_context(|| format!("--set expects NAME=VALUE, got '{pair}'"))
        })
        .collect()
}

fn edit(args: &EditArgs) -> Result<()> {
    let (editor_url, critic_url) = match args.backend {
        Backend::Mock => {
            let pick = |url: &Option<String>| -> Result<String> {
                match url {
                    None => Ok("mock:".to_string()),
                    Some(u) if u.starts_with("mock:") => Ok(u.clone()),
                    Some(u) => bail!("the mock backend takes mock: URLs, got '{u}'"),
                }
            };
            (pick(&args.editor_url)?, pick(&args.critic_url)?)
        }
        Backend::Remote => match (&args.editor_url, &args.critic_url) {
            (Some(e), Some(c)) => (e.clone(), c.clone()),
            _ => bail!("the remote backend needs both --editor-url and --critic-url"),
        },
    };
    let (editor, critic) = backends(&editor_url, &critic_url, args.seed).map_err(anyhow::Error::msg)?;

    let library = match &args.templates {
        Some(dir) => TemplateLibrary::with_dir(dir)?,
        None => TemplateLibrary::builtin(),
    };
    let mut substitutions = parse_substitutions(&args.substitutions)?;
    let short_instruction = library.render_short(&args.template, &substitutions)?;
    substitutions.insert("short edit instruction".to_string(), short_instruction.clone());
    let critic_prompt = library.render("critic", &substitutions)?;

    let zoom = match (args.zoom_fraction, args.template.as_str()) {
        (Some(f), _) => Some(CropRect::centered(f)),
        (None, "table_height") => Some(CropRect::default()),
        (None, _) => None,
    };
    let config = BatchConfig {
        overhead_prompt: library.render_full(&args.template, Camera::Overhead, &substitutions)?,
        wrist_prompt: library.render_full(&args.template, Camera::Wrist, &substitutions)?,
        short_instruction,
        critic_template: critic_prompt,
        n_variants: args.n_variants,
        zoom,
        retry: RetryPolicy {
            max_attempts: args.max_attempts,
            ..RetryPolicy::default()
        },
        max_in_flight: args.max_in_flight,
    };

    let observations = read_observation_dir(&args.observations)?;
    if observations.is_empty() {
        bail!("no <id>__<camera>.<ext> images in {}", args.observations.display());
    }
    let batch = build_factor_batch(&observations, &args.factor, &config, &editor, &critic)?;
    fs::create_dir_all(&args.out).with_context(|| format!("cannot create {}", args.out.display()))?;
    batch.write_dir(&args.out)?;
    println!(
        "factor '{}': {} retained, {} discarded, {} failed (retention {:.3}); batch written to {}",
        batch.factor,
        batch.retained_observations().len(),
        batch.discarded_count(),
        batch.failed_count(),
        batch.retention_rate,
        args.out.display()
    );
    Ok(())
}

fn synth(args: &SynthArgs) -> Result<()> {
    let mut spec = SynthWorldSpec::from_path(&args.spec)?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    fs::create_dir_all(&args.out).with_context(|| format!("cannot create {}", args.out.display()))?;
    let world = generate_world(&spec, &args.out)?;
    println!(
        "{} factors, {} nominal, {} validation; manifest written to {}",
        world.ground_truth.len(),
        spec.n_nominal,
        spec.n_val,
        world.manifest_path.display()
    );
    Ok(())
}

fn ablate(args: &AblateArgs) -> Result<()> {
    let manifest = load_manifest(&args.manifest)?;
    let grid = AblationGrid::from_path(&args.grid)?;
    let table = run_ablation_manifest(&manifest, &grid, args.seed)?;
    let csv = table.to_csv();
    let path = write_output(&args.out, "ablation.csv", &csv)?;
    print!("{csv}");
    println!("table written to {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Calibrate(args) => calibrate(args),
        Command::Predict { args, worst } => predict(args, *worst),
        Command::Evaluate(args) => evaluate(args),
        Command::Edit(args) => edit(args),
        Command::Synth(args) => synth(args),
        Command::Ablate(args) => ablate(args),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
