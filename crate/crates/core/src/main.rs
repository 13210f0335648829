use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use fastive::bench::{format_table, run_grid, Grid};
use fastive::metrics::{input_output_sir, EvalReport, DEFAULT_FILTER_LEN};
use fastive::roomsim::{render, MixtureSet};
use fastive::scenario::ScenarioFile;
use fastive::wav::{read_wav, write_wav, WavFormat};
use fastive::{extract, ContrastModel, SolverConfig, StftConfig, WindowKind};

#[derive(Parser)]
#[command(name = "fastive", version, about = "Dominant speaker extraction with fast independent vector extraction")]
struct Cli {
    /// Seed recorded in every output manifest.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract the dominant source from a multichannel WAV.
    Extract(ExtractArgs),
    /// Render a scenario file to mixture and image WAVs.
    Simulate(SimulateArgs),
    /// Score an estimate against the images written by `simulate`.
    Evaluate(EvaluateArgs),
    /// Run a grid of simulated trials.
    Bench(BenchArgs),
}

#[derive(Args)]
struct ExtractArgs {
    input: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    /// JSON report path; defaults to the output path with a .json extension.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value = "t")]
    prior: String,
    #[arg(long, default_value_t = 4.0)]
    nu: f64,
    #[arg(long, default_value_t = 2048)]
    fft_size: usize,
    #[arg(long, default_value_t = 512)]
    hop: usize,
    #[arg(long, default_value = "hann")]
    window: WindowKind,
    #[arg(long, default_value_t = 100)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    ref_mic: usize,
    /// Whitening rank; all channels when omitted.
    #[arg(long)]
    rank: Option<usize>,
}

#[derive(Args)]
struct SimulateArgs {
    scenario: PathBuf,
    #[arg(short, long)]
    output_dir: PathBuf,
    /// Override a scenario key, e.g. `--set input_sir_db=5` or `--set room.rt60=0.3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Directory written by `simulate`.
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    estimate: PathBuf,
    /// Extraction report supplying runtime and iteration count.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_FILTER_LEN)]
    filter_len: usize,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    grid: PathBuf,
    #[arg(short, long)]
    output_dir: PathBuf,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_path: &'a Path,
    overrides: &'a [String],
    output_dir: Option<&'a Path>,
    seed: u64,
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Parses `text` as TOML and applies dotted `key=value` overrides.
fn with_overrides(text: &str, overrides: &[String]) -> anyhow::Result<String> {
    let mut doc: toml::Table = text.parse()?;
    for item in overrides {
        let Some((key, raw)) = item.split_once('=') else {
            bail!("override '{item}' is not KEY=VALUE");
        };
        let value: toml::Value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let parts: Vec<&str> = key.trim().split('.').collect();
        let mut table = &mut doc;
        for part in &parts[..parts.len() - 1] {
            table = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()))
                .as_table_mut()
                .with_context(|| format!("override '{key}': '{part}' is not a table"))?;
        }
        table.insert(parts[parts.len() - 1].to_string(), value);
    }
    Ok(toml::to_string(&doc)?)
}

fn cmd_extract(args: &ExtractArgs, seed: u64) -> anyhow::Result<()> {
    let audio = read_wav(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let config = SolverConfig {
        max_iter: args.max_iter,
        tol: args.tol,
        ref_mic: args.ref_mic,
        prior: ContrastModel::from_name(&args.prior, args.nu)?,
        rank: args.rank,
    };
    let stft = StftConfig::new(args.fft_size, args.hop, args.window)?;
    let result = extract(&audio, &config, &stft)?;
    write_wav(&args.output, &result.audio, WavFormat::Float32)?;
    let report_path = args.report.clone().unwrap_or_else(|| args.output.with_extension("json"));
    let report = json!({
        "manifest": Manifest {
            command: "extract",
            config_path: &args.input,
            overrides: &[],
            output_dir: args.output.parent(),
            seed,
        },
        "solver": config,
        "stft": stft,
        "input": args.input,
        "output": args.output,
        "channels": audio.num_channels(),
        "sample_rate_hz": audio.sample_rate_hz,
        "iterations": result.iterations_used,
        "converged": result.state.converged,
        "last_change": result.state.last_change,
        "runtime_s": result.runtime_seconds,
        "cost_history": result.state.cost_history,
    });
    write_json(&report_path, &report)?;
    println!(
        "{} iterations, converged: {}, {:.3} s -> {}",
        result.iterations_used,
        result.state.converged,
        result.runtime_seconds,
        args.output.display()
    );
    Ok(())
}

fn cmd_simulate(args: &SimulateArgs, seed: u64) -> anyhow::Result<()> {
    let text = fs::read_to_string(&args.scenario).with_context(|| format!("reading {}", args.scenario.display()))?;
    let file = ScenarioFile::from_toml(&with_overrides(&text, &args.overrides)?)?;
    let base = args.scenario.parent().unwrap_or(Path::new("."));
    let (resolved, scenario) = file.resolve(base)?;
    let mix = render(&scenario, resolved.sample_rate_hz)?;
    fs::create_dir_all(&args.output_dir)?;
    let dir = &args.output_dir;
    write_wav(dir.join("mixture.wav"), &mix.mixture, WavFormat::Float32)?;
    for (i, img) in mix.images.iter().enumerate() {
        write_wav(dir.join(format!("image_{i}.wav")), img, WavFormat::Float32)?;
    }
    fs::write(dir.join("scenario.toml"), resolved.to_toml()?)?;
    write_json(
        &dir.join("manifest.json"),
        &json!({
            "manifest": Manifest {
                command: "simulate",
                config_path: &args.scenario,
                overrides: &args.overrides,
                output_dir: Some(dir),
                seed,
            },
            "scenario": resolved,
            "soi_gain": mix.soi_gain,
            "num_samples": mix.mixture.num_samples(),
        }),
    )?;
    println!(
        "{} sources, {} mics -> {}",
        mix.images.len(),
        mix.mixture.num_channels(),
        dir.display()
    );
    Ok(())
}

fn load_truth(dir: &Path) -> anyhow::Result<(ScenarioFile, MixtureSet)> {
    let file = ScenarioFile::load(&dir.join("scenario.toml"))
        .with_context(|| format!("{} is not a simulate output directory", dir.display()))?;
    let mixture = read_wav(dir.join("mixture.wav"))?;
    let n = file.sources.as_ref().map_or(0, Vec::len);
    let images = (0..n)
        .map(|i| read_wav(dir.join(format!("image_{i}.wav"))))
        .collect::<fastive::Result<Vec<_>>>()?;
    Ok((
        file,
        MixtureSet {
            mixture,
            images,
            soi_gain: f64::NAN,
        },
    ))
}

fn cmd_evaluate(args: &EvaluateArgs, seed: u64) -> anyhow::Result<()> {
    let (file, truth) = load_truth(&args.truth)?;
    let estimate = read_wav(&args.estimate)?;
    let (runtime, iterations, algorithm) = match &args.report {
        Some(p) => {
            let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(p)?)?;
            let prior = v["solver"]["prior"]["kind"]["kind"].as_str().unwrap_or("unknown");
            (
                v["runtime_s"].as_f64().unwrap_or(f64::NAN),
                v["iterations"].as_u64().unwrap_or(0) as usize,
                format!("fastive-{prior}"),
            )
        }
        None => (f64::NAN, 0, "unknown".to_string()),
    };
    let (input, output) = input_output_sir(
        &estimate.channel(0),
        &truth,
        file.soi_index,
        file.ref_mic,
        args.filter_len,
    )?;
    let id = args.truth.display().to_string();
    let report = EvalReport::new(id, algorithm, input, output, runtime, iterations);
    let value = json!({
        "manifest": Manifest {
            command: "evaluate",
            config_path: &args.truth,
            overrides: &[],
            output_dir: args.output.as_deref().and_then(Path::parent),
            seed,
        },
        "scenario_seed": file.seed,
        "filter_len": args.filter_len,
        "report": report,
    });
    match &args.output {
        Some(p) => write_json(p, &value)?,
        None => println!("{}", serde_json::to_string_pretty(&value)?),
    }
    Ok(())
}

fn cmd_bench(args: &BenchArgs, seed: u64) -> anyhow::Result<()> {
    let text = fs::read_to_string(&args.grid).with_context(|| format!("reading {}", args.grid.display()))?;
    let grid = Grid::from_toml(&with_overrides(&text, &args.overrides)?)?;
    let report = run_grid(&grid, args.jobs)?;
    fs::create_dir_all(&args.output_dir)?;
    let mut out = fs::File::create(args.output_dir.join("records.jsonl"))?;
    for record in &report.records {
        let mut value = serde_json::to_value(record)?;
        value["grid_seed"] = json!(grid.seed);
        writeln!(out, "{}", serde_json::to_string(&value)?)?;
    }
    let table = format_table(&report.cells);
    fs::write(args.output_dir.join("summary.txt"), &table)?;
    write_json(
        &args.output_dir.join("summary.json"),
        &json!({
            "manifest": Manifest {
                command: "bench",
                config_path: &args.grid,
                overrides: &args.overrides,
                output_dir: Some(&args.output_dir),
                seed,
            },
            "grid": report.grid,
            "cells": report.cells,
        }),
    )?;
    print!("{table}");
    let failed = report.records.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        eprintln!("{failed} of {} trials failed; see records.jsonl", report.records.len());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Extract(a) => cmd_extract(a, cli.seed),
        Command::Simulate(a) => cmd_simulate(a, cli.seed),
        Command::Evaluate(a) => cmd_evaluate(a, cli.seed),
        Command::Bench(a) => cmd_bench(a, cli.seed),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
