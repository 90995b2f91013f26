use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use opsr_core::discovery::{discover_options, DiscoveryConfig, DiscoveryTask, ExtendedOptionSet, Trajectory};
use opsr_core::domains::{compile, enumerate_mini_domain, load_task, CompiledTask};
use opsr_core::harness::{
    emit_report, evaluate, extract_story, optimal_trace, paired_t_test, run_protocol, training_data, ExperimentReport, ProtocolConfig,
    ReportFormat, TrainingData,
};
use opsr_core::mdp::solve_optimal;
use opsr_core::opsr::{union_fingerprint_labels, union_opsr_classes, OpsrVariant};
use opsr_core::outcomes::{check_reward_decomposition, FingerprintConfig};
use opsr_core::verify::{run_all, TheoryConfig};

#[derive(Parser)]
#[command(name = "opsr", version, about = "Outcome-based abstraction, option discovery and transfer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Enumerate the mini gridworld family and count its outcome-equivalence classes
    /// (fingerprints keep terminal states apart; OPSR vectors map them to zero).
    EnumerateMini {
        #[arg(long, default_value_t = 6)]
        horizon: usize,
        /// Write per-state class labels and a summary here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve one task file and print its optimal value and trace.
    Solve { taskfile: PathBuf },
    /// Write training tasks and their optimal demonstrations for a protocol config.
    Traces {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Discover options from demonstrations.
    Discover {
        /// Discovery settings (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Directory of `<id>.task` files with matching `<id>.trace.json` demonstrations.
        #[arg(long)]
        traces: PathBuf,
        /// Output option set (JSON); the training log goes next to it as CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train option-less and option-enabled agents on test tasks.
    Evaluate {
        /// Protocol settings (TOML).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        options: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Discovery followed by evaluation.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-emit a stored report in other formats.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "csv,svg")]
        formats: Vec<String>,
    },
    /// Check the abstraction and transfer results by brute force.
    VerifyTheory {
        #[arg(long, default_value_t = 4)]
        max_states: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        mdps: usize,
        /// Print JSON instead of one line per check.
        #[arg(long)]
        json: bool,
    },
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn enumerate_mini(horizon: usize, out: Option<&Path>) -> Result<()> {
    let tasks = enumerate_mini_domain()?;
    let views: Vec<_> = tasks.iter().map(|t| (&t.mdp, &t.outcomes)).collect();
    let labels = union_fingerprint_labels(&views, FingerprintConfig::new(horizon))?;
    let n_states = labels.len();
    let classes = labels.iter().collect::<std::collections::BTreeSet<_>>().len();
    let opsr_classes = union_opsr_classes(&views, horizon, OpsrVariant::TerminalUpTo)?;
    println!("tasks {} states {n_states} horizon {horizon} fingerprint classes {classes} opsr vector classes {opsr_classes}", tasks.len());
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut csv = String::from("task,state,x,y,class\n");
        let mut labels = labels.iter();
        for (i, task) in tasks.iter().enumerate() {
            for (s, g) in task.states.iter().enumerate() {
                let label = labels.next().context("fewer labels than states")?;
                csv.push_str(&format!("{i},{s},{},{},{}\n", g.x, g.y, label.0));
            }
        }
        fs::write(dir.join("classes.csv"), csv)?;
        let summary = BTreeMap::from([
            ("tasks", tasks.len()),
            ("states", n_states),
            ("horizon", horizon),
            ("classes", classes),
            ("opsr_classes", opsr_classes),
        ]);
        write_json(&dir.join("summary.json"), &summary)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct Solution {
    domain: String,
    states: usize,
    start_value: f64,
    reward_decomposition: bool,
    actions: Vec<String>,
    story: Vec<String>,
}

fn solve(path: &Path) -> Result<()> {
    let task = compile(&load_task(path)?)?;
    let (_, v) = solve_optimal(&task.mdp, 1e-10)?;
    let trace = optimal_trace("task", &task.mdp, task.start(), 10_000)?;
    let sol = Solution {
        domain: task.spec.kind.to_string(),
        states: task.mdp.n_states(),
        start_value: v[task.start()],
        reward_decomposition: check_reward_decomposition(&task.mdp, &task.outcomes, 1e-9)?,
        actions: trace.actions.iter().map(|&a| task.action_names[a].clone()).collect(),
        story: extract_story(&trace, &task.outcomes)?,
    };
    println!("{}", serde_json::to_string_pretty(&sol)?);
    Ok(())
}

fn write_traces(config: &Path, out: &Path) -> Result<()> {
    let cfg: ProtocolConfig = read_toml(config)?;
    let (tasks, traces) = training_data(&cfg)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for ((id, task), tau) in tasks.iter().zip(&traces) {
        fs::write(out.join(format!("{id}.task")), task.spec.render())?;
        write_json(&out.join(format!("{id}.trace.json")), tau)?;
    }
    println!("wrote {} tasks and demonstrations to {}", tasks.len(), out.display());
    Ok(())
}

/// Loads `<id>.trace.json` files and the task files they name, sorted by id.
fn load_demonstrations(dir: &Path) -> Result<TrainingData> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    let mut traces = Vec::new();
    let mut tasks: BTreeMap<String, CompiledTask> = BTreeMap::new();
    for path in entries.iter().filter(|p| p.to_string_lossy().ends_with(".trace.json")) {
        let tau: Trajectory = read_json(path)?;
        tau.validate()?;
        if !tasks.contains_key(&tau.task_id) {
            let task_path = dir.join(format!("{}.task", tau.task_id));
            let task = compile(&load_task(&task_path).with_context(|| format!("task for trace {}", path.display()))?)?;
            tasks.insert(tau.task_id.clone(), task);
        }
        traces.push(tau);
    }
    if traces.is_empty() {
        bail!("no *.trace.json files in {}", dir.display());
    }
    Ok((tasks.into_iter().collect(), traces))
}

fn discover(config: &Path, traces_dir: &Path, out: &Path) -> Result<()> {
    let cfg: DiscoveryConfig = read_toml(config)?;
    let (tasks, traces) = load_demonstrations(traces_dir)?;
    let dtasks: Vec<DiscoveryTask<'_>> = tasks.iter().map(|(id, t)| DiscoveryTask { id, view: t.view() }).collect();
    let result = discover_options(&traces, &dtasks, &cfg)?;
    write_json(out, &result.set)?;
    let log_path = out.with_extension("log.csv");
    fs::write(&log_path, result.log_csv()).with_context(|| format!("writing {}", log_path.display()))?;
    println!(
        "stop {:?} after {} epochs, log-likelihood {:.6}; options in {}",
        result.stop,
        result.log.len(),
        result.best_log_likelihood,
        out.display()
    );
    Ok(())
}

fn summarize(report: &ExperimentReport) -> Result<()> {
    let (flat, options) = report.paired_aurc();
    if flat.len() >= 2 {
        let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
        let test = paired_t_test(&options, &flat)?;
        println!(
            "mean AURC options {:.2} primitive {:.2}; paired t {:.4}, one-sided p {:.3e} (n={})",
            mean(&options),
            mean(&flat),
            test.t,
            test.p_value,
            test.n
        );
    }
    if let Some(msg) = &report.partial {
        println!("partial report: {msg}");
    }
    Ok(())
}

const ALL_FORMATS: [ReportFormat; 3] = [ReportFormat::Csv, ReportFormat::Json, ReportFormat::Svg];

fn run() -> Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::EnumerateMini { horizon, out } => enumerate_mini(horizon, out.as_deref())?,
        Command::Solve { taskfile } => solve(&taskfile)?,
        Command::Traces { config, out } => write_traces(&config, &out)?,
        Command::Discover { config, traces, out } => discover(&config, &traces, &out)?,
        Command::Evaluate { config, options, out } => {
            let cfg: ProtocolConfig = read_toml(&config)?;
            let set: ExtendedOptionSet = read_json(&options)?;
            let report = evaluate(&cfg, &set)?;
            emit_report(&report, &ALL_FORMATS, &out)?;
            summarize(&report)?;
        }
        Command::Run { config, out } => {
            let cfg: ProtocolConfig = read_toml(&config)?;
            let (report, set) = run_protocol(&cfg)?;
            emit_report(&report, &ALL_FORMATS, &out)?;
            write_json(&out.join("options.json"), &set)?;
            summarize(&report)?;
        }
        Command::Report { input, formats } => {
            let report: ExperimentReport = read_json(&input.join("report.json"))?;
            let formats = formats.iter().map(|f| f.parse()).collect::<std::result::Result<Vec<ReportFormat>, _>>()?;
            for p in emit_report(&report, &formats, &input)? {
                println!("{}", p.display());
            }
            summarize(&report)?;
        }
        Command::VerifyTheory { max_states, seed, mdps, json } => {
            let cfg = TheoryConfig { seed, max_states, random_mdps: mdps, ..TheoryConfig::default() };
            let reports = run_all(&cfg)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&reports)?);
            } else {
                for r in &reports {
                    println!("{}", r.line());
                }
            }
            if reports.iter().any(|r| !r.passed) {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
