use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::{info, warn};
use parity_curriculum::experiments::{cell_dataset, read_records, summarize, write_summary, GroupField, PresetName, Scale};
use parity_curriculum::data::cube;
use parity_curriculum::rng::seeded;
use parity_curriculum::theory::{
    build_explicit_second_layer, cp_bruteforce, cp_exact, cp_monte_carlo, explicit_layer_output, lemma_cp_bound,
    negative_bound, solve_span_coefficients, CpMethod,
};
use parity_curriculum::{reproduce_preset, run_matrix, Error, ExperimentConfig, MixtureParams};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "lab", version, about = "Curriculum vs standard training on sparse/dense parity data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Io {
    /// JSON config for the subcommand.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write the offline training sets of an experiment config.
    Generate(Io),
    /// Run an experiment matrix (resumable) and summarize it.
    Train(Io),
    /// Cross-predictability over a (d, k, rho, mu) grid.
    Cp(Io),
    /// Accuracy bound for noisy SGD without curriculum.
    Bound(Io),
    /// Explicit second layer or span coefficients.
    Construct(Io),
    /// Run a figure preset.
    Reproduce(Io),
    /// Mean and 95% half-width per group of run CSVs.
    Summarize(Io),
}

fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(BufWriter::new(file), value)?;
    Ok(())
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn generate(io: &Io) -> Result<()> {
    let cfg = ExperimentConfig::from_file(&io.config)?;
    let mut written = 0;
    let mut seen = std::collections::HashSet::new();
    for cell in cfg.cells() {
        if !seen.insert((cell.data_index, cell.seed)) {
            continue;
        }
        let Some(data) = cell_dataset(&cfg, &cell)? else {
            bail!("generate needs an offline config; fresh batches have no fixed training set");
        };
        let stem = format!("data_{:04}_seed{}", cell.data_index, cell.seed);
        let file = File::create(io.out.join(format!("{stem}.txt")))?;
        data.write_text(BufWriter::new(file))?;
        let params = MixtureParams::new(cell.rho, cell.mu, cfg.d)?;
        write_json(&io.out.join(format!("{stem}.json")), &data.metadata(&params, &cell.target.build(cfg.d)?))?;
        written += 1;
    }
    info!("wrote {written} datasets to {}", io.out.display());
    Ok(())
}

fn train(io: &Io) -> Result<()> {
    let cfg = ExperimentConfig::from_file(&io.config)?;
    write_json(&io.out.join("config.json"), &cfg)?;
    let runs = cfg.output.clone().unwrap_or_else(|| io.out.join("runs.csv"));
    let records = run_matrix(&cfg, Some(&runs))?;
    let failed = records.iter().filter(|r| !r.is_ok()).count();
    info!("{} records in {} ({failed} failed)", records.len(), runs.display());
    let group = [GroupField::K, GroupField::Rho, GroupField::Mu, GroupField::M, GroupField::Method];
    match summarize(&records, &group) {
        Ok(rows) => write_summary(&io.out.join("summary.csv"), &rows)?,
        Err(e @ Error::GroupTooSmall { .. }) => warn!("no summary written: {e}"),
        Err(e) => return Err(e.into()),
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(rename_all = "snake_case")]
enum CpChoice {
    Exact,
    BruteForce,
    MonteCarlo,
}

#[derive(Deserialize)]
struct CpConfig {
    d: Vec<usize>,
    k: Vec<usize>,
    rho: Vec<f64>,
    mu: Vec<f64>,
    #[serde(default = "default_cp_method")]
    method: CpChoice,
    #[serde(default = "default_pairs")]
    n_pairs: usize,
    #[serde(default)]
    seed: u64,
}

fn default_cp_method() -> CpChoice {
    CpChoice::Exact
}

fn default_pairs() -> usize {
    100_000
}

#[derive(Serialize)]
struct CpRow {
    d: usize,
    k: usize,
    rho: f64,
    mu: f64,
    method: &'static str,
    value: f64,
    sigma: Option<f64>,
    lemma_bound: f64,
}

fn cp(io: &Io) -> Result<()> {
    let cfg: CpConfig = read_config(&io.config)?;
    let mut rng = seeded(cfg.seed);
    let mut rows = Vec::new();
    for &d in &cfg.d {
        for &k in &cfg.k {
            for &rho in &cfg.rho {
                for &mu in &cfg.mu {
                    let r = match cfg.method {
                        CpChoice::Exact => cp_exact(d, k, rho, mu)?,
                        CpChoice::BruteForce => cp_bruteforce(d, k, rho, mu)?,
                        CpChoice::MonteCarlo => cp_monte_carlo(d, k, rho, mu, cfg.n_pairs, &mut rng)?,
                    };
                    let (method, sigma) = match r.method {
                        CpMethod::Exact => ("exact", None),
                        CpMethod::BruteForce => ("brute_force", None),
                        CpMethod::MonteCarlo { sigma } => ("monte_carlo", Some(sigma)),
                    };
                    rows.push(CpRow { d, k, rho, mu, method, value: r.value, sigma, lemma_bound: lemma_cp_bound(d, k, rho, mu) });
                }
            }
        }
    }
    write_csv(&io.out.join("cp.csv"), &rows)
}

#[derive(Deserialize)]
struct BoundConfig {
    d: usize,
    k: usize,
    rho: f64,
    mu: f64,
    /// Step counts to evaluate.
    steps: Vec<f64>,
    /// Number of parameters.
    params: f64,
    /// Gradient range.
    range: f64,
    tau: f64,
    batch_size: f64,
}

#[derive(Serialize)]
struct BoundRow {
    steps: f64,
    cp: f64,
    bound: f64,
}

fn bound(io: &Io) -> Result<()> {
    let cfg: BoundConfig = read_config(&io.config)?;
    let cp = cp_exact(cfg.d, cfg.k, cfg.rho, cfg.mu)?.value;
    let rows = cfg
        .steps
        .iter()
        .map(|&t| Ok(BoundRow { steps: t, cp, bound: negative_bound(t, cfg.params, cfg.range, cfg.tau, cfg.batch_size, cp)? }))
        .collect::<Result<Vec<_>>>()?;
    write_csv(&io.out.join("bound.csv"), &rows)
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ConstructConfig {
    Explicit { k: usize, delta: f64 },
    Span { d: usize, k: usize },
}

fn construct(io: &Io) -> Result<()> {
    match read_config(&io.config)? {
        ConstructConfig::Explicit { k, delta } => {
            let (a, b) = build_explicit_second_layer(k, delta)?;
            let mut max_err = 0.0f64;
            for x in cube(k) {
                let x: Vec<f64> = x.iter().map(|&v| v as f64).collect();
                let chi: f64 = x.iter().product();
                max_err = max_err.max((explicit_layer_output(&a, &b, delta, &x) - 2.0 * chi).abs());
            }
            info!("explicit layer: max error {max_err:e} over all {k}-bit inputs");
            write_json(
                &io.out.join("explicit_layer.json"),
                &serde_json::json!({ "k": k, "delta": delta, "a": a, "b": b, "max_error": max_err }),
            )
        }
        ConstructConfig::Span { d, k } => {
            let sol = solve_span_coefficients(d, k)?;
            info!("span solve: residual {:e}, max |a| {}", sol.residual, sol.max_abs);
            write_json(&io.out.join("span_coefficients.json"), &sol)
        }
    }
}

#[derive(Deserialize)]
struct ReproduceConfig {
    preset: String,
    #[serde(default = "default_scale")]
    scale: String,
    #[serde(default)]
    seeds: Option<Vec<u64>>,
}

fn default_scale() -> String {
    "desk".into()
}

fn reproduce(io: &Io) -> Result<()> {
    let cfg: ReproduceConfig = read_config(&io.config)?;
    let name: PresetName = cfg.preset.parse()?;
    let scale: Scale = cfg.scale.parse()?;
    let path = reproduce_preset(name, scale, &io.out, cfg.seeds)?;
    info!("figure data in {}", path.display());
    Ok(())
}

#[derive(Deserialize)]
struct SummarizeConfig {
    inputs: Vec<PathBuf>,
    group_by: Vec<GroupField>,
}

fn summarize_cmd(io: &Io) -> Result<()> {
    let cfg: SummarizeConfig = read_config(&io.config)?;
    let base = io.config.parent().unwrap_or(Path::new("."));
    let mut records = Vec::new();
    for input in &cfg.inputs {
        let path = if input.is_absolute() { input.clone() } else { base.join(input) };
        records.extend(read_records(&path)?);
    }
    let rows = summarize(&records, &cfg.group_by)?;
    write_summary(&io.out.join("summary.csv"), &rows)?;
    info!("{} summary rows from {} records", rows.len(), records.len());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let io = match &cli.command {
        Command::Generate(io)
        | Command::Train(io)
        | Command::Cp(io)
        | Command::Bound(io)
        | Command::Construct(io)
        | Command::Reproduce(io)
        | Command::Summarize(io) => io,
    };
    fs::create_dir_all(&io.out).with_context(|| format!("creating {}", io.out.display()))?;
    match &cli.command {
        Command::Generate(io) => generate(io),
        Command::Train(io) => train(io),
        Command::Cp(io) => cp(io),
        Command::Bound(io) => bound(io),
        Command::Construct(io) => construct(io),
        Command::Reproduce(io) => reproduce(io),
        Command::Summarize(io) => summarize_cmd(io),
    }
}
