mod plot;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use cdasim::adversarial::{generate_challenging, is_plausible, load_scene, search_rng, AsgConfig, AsgOutcome, SceneFile};
use cdasim::datalog::{load_replay, FrameRecord};
use cdasim::evaluation::{evaluate_run, frame_time_gaps, report_csv, ttc_series, EvaluationConfig, RunReport};
use cdasim::perception::FusionMode;
use cdasim::platoon::MergePolicy;
use cdasim::scenario::{load_scenario, run_scenario, ScenarioConfig, TerminatedBy};
use cdasim::world::AgentId;

use plot::{Chart, Series};

#[derive(Parser)]
#[command(name = "cdasim", version, about = "Deterministic cooperative driving simulator")]
struct Cli {
    /// More output on stdout.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and write log, metrics, summary and plots.
    Run(RunArgs),
    /// Recompute metrics and plots from a saved log.
    ReplayEval(ReplayArgs),
    /// Generate challenging variants of a scene corpus.
    Adversarial(AdversarialArgs),
    /// Compare several logs in one table.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum FusionArg {
    No,
    Late,
    Early,
}

impl From<FusionArg> for FusionMode {
    fn from(f: FusionArg) -> Self {
        match f {
            FusionArg::No => FusionMode::NoFusion,
            FusionArg::Late => FusionMode::Late,
            FusionArg::Early => FusionMode::Early,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Heuristic,
    Gfs,
}

impl From<PolicyArg> for MergePolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Heuristic => MergePolicy::Heuristic,
            PolicyArg::Gfs => MergePolicy::Gfs,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    fusion: Option<FusionArg>,
    #[arg(long, value_enum)]
    merge_policy: Option<PolicyArg>,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    log: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AdversarialArgs {
    /// Directory of scene JSON files.
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    budget: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Restrict to one fusion mode; all three by default.
    #[arg(long, value_enum)]
    fusion: Option<FusionArg>,
}

#[derive(Args)]
struct ReportArgs {
    /// Logs to tabulate, one block per log.
    #[arg(long = "log", required = true)]
    logs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    let verbose = cli.verbose;
    match cli.command {
        Command::Run(a) => cmd_run(a, verbose),
        Command::ReplayEval(a) => cmd_replay_eval(a, verbose),
        Command::Adversarial(a) => cmd_adversarial(a, verbose),
        Command::Report(a) => cmd_report(a),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct Summary<'a> {
    scenario: &'a str,
    seed: u64,
    merge_policy: MergePolicy,
    fusion: &'a str,
    report: &'a RunReport,
}

/// Metrics CSV, summary JSON and plots; shared by `run` and `replay-eval` so
/// the two produce identical files.
fn write_artifacts(out: &Path, cfg: &ScenarioConfig, frames: &[FrameRecord], report: &RunReport) -> Result<()> {
    write(&out.join("metrics.csv"), report_csv(report))?;
    let summary = Summary {
        scenario: &cfg.name,
        seed: cfg.seed,
        merge_policy: cfg.merge_policy,
        fusion: cfg.fusion.label(),
        report,
    };
    write(&out.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    write_plots(&out.join("plots"), cfg, frames)
}

fn write_plots(dir: &Path, cfg: &ScenarioConfig, frames: &[FrameRecord]) -> Result<()> {
    let mut gaps: BTreeMap<AgentId, Vec<(f64, f64)>> = BTreeMap::new();
    for f in frames {
        for (id, g) in frame_time_gaps(f) {
            gaps.entry(id).or_default().push((f.time, g.unwrap_or(f64::NAN)));
        }
    }
    let chart = Chart {
        title: "Platoon time gap",
        x_label: "time [s]",
        y_label: "time gap [s]",
        series: gaps
            .into_iter()
            .map(|(id, points)| Series {
                label: format!("vehicle {id}"),
                points,
            })
            .collect(),
        reference: Some(cfg.desired_time_gap),
        equal_aspect: false,
    };
    write(&dir.join("time_gap.svg"), plot::render(&chart))?;

    const TTC_CAP: f64 = 20.0;
    let times: Vec<f64> = frames.iter().map(|f| f.time).collect();
    let chart = Chart {
        title: "Time to collision (capped at 20 s)",
        x_label: "time [s]",
        y_label: "TTC [s]",
        series: ttc_series(frames)
            .into_iter()
            .filter(|(_, s)| s.iter().any(|t| t.is_finite()))
            .map(|(id, s)| Series {
                label: format!("vehicle {id}"),
                points: times.iter().zip(s).map(|(&t, v)| (t, if v.is_finite() { v.min(TTC_CAP) } else { f64::NAN })).collect(),
            })
            .collect(),
        reference: Some(cfg.evaluation.ttc_threshold),
        equal_aspect: false,
    };
    write(&dir.join("ttc.svg"), plot::render(&chart))?;

    let mut tracks: BTreeMap<AgentId, Vec<(f64, f64)>> = BTreeMap::new();
    for f in frames.iter().step_by(5) {
        for (&id, a) in &f.agents {
            tracks.entry(id).or_default().push((a.state.pose.x, a.state.pose.y));
        }
    }
    let chart = Chart {
        title: "Trajectories",
        x_label: "x [m]",
        y_label: "y [m]",
        series: tracks
            .into_iter()
            .map(|(id, points)| Series {
                label: format!("vehicle {id}"),
                points,
            })
            .collect(),
        reference: None,
        equal_aspect: false,
    };
    write(&dir.join("trajectories.svg"), plot::render(&chart))
}

fn print_report(report: &RunReport) {
    print!("{}", report_csv(report));
    if let Some(g) = report.steady_time_gap {
        println!("steady time gap {g:.3} s");
    }
}

fn cmd_run(a: RunArgs, verbose: u8) -> Result<ExitCode> {
    let (mut cfg, map) = load_scenario(&a.scenario).with_context(|| format!("loading {}", a.scenario.display()))?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(f) = a.fusion {
        cfg.fusion = f.into();
    }
    if let Some(p) = a.merge_policy {
        cfg.merge_policy = p.into();
    }
    let outcome = run_scenario(&cfg, &map)?;
    write(&a.out.join("log.jsonl"), &outcome.log)?;
    write_artifacts(&a.out, &cfg, &outcome.frames, &outcome.report)?;
    println!(
        "{}: {} after {:.2} s, {} hazard events",
        cfg.name,
        outcome.terminated_by.label(),
        outcome.report.duration,
        outcome.report.hf_total
    );
    for (x, y) in &outcome.collisions {
        println!("collision between {x} and {y}");
    }
    if verbose > 0 {
        print_report(&outcome.report);
    }
    Ok(match outcome.terminated_by {
        TerminatedBy::TaskComplete => ExitCode::SUCCESS,
        TerminatedBy::Collision => ExitCode::from(2),
        TerminatedBy::Timeout => ExitCode::from(3),
    })
}

/// Scenario settings stored in a log header, or defaults for logs without one.
fn header_config(header: Option<&cdasim::datalog::LogHeader>) -> Result<Option<ScenarioConfig>> {
    header
        .map(|h| serde_json::from_value(h.config.clone()).context("log header does not hold a scenario config"))
        .transpose()
}

fn cmd_replay_eval(a: ReplayArgs, verbose: u8) -> Result<ExitCode> {
    let replay = load_replay(&a.log).with_context(|| format!("loading {}", a.log.display()))?;
    if replay.frames.is_empty() {
        bail!("{} holds no frames", a.log.display());
    }
    let cfg = header_config(replay.header.as_ref())?;
    let eval = cfg.as_ref().map(|c| c.evaluation.clone()).unwrap_or_default();
    let report = evaluate_run(&replay.frames, &eval);
    match &cfg {
        Some(cfg) => write_artifacts(&a.out, cfg, &replay.frames, &report)?,
        None => {
            write(&a.out.join("metrics.csv"), report_csv(&report))?;
            write(&a.out.join("summary.json"), serde_json::to_string_pretty(&report)? + "\n")?;
        }
    }
    println!("{} frames evaluated, {} hazard events", replay.frames.len(), report.hf_total);
    if verbose > 0 {
        print_report(&report);
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct ChallengingScene<'a> {
    name: &'a str,
    fusion: &'a str,
    collaborators: &'a [AgentId],
    perturbations: &'a BTreeMap<AgentId, [f64; 3]>,
    normal_ap: f64,
    challenging_ap: f64,
    scene: SceneFile,
}

fn cmd_adversarial(a: AdversarialArgs, verbose: u8) -> Result<ExitCode> {
    let mut paths: Vec<PathBuf> = fs::read_dir(&a.scenes)
        .with_context(|| format!("reading {}", a.scenes.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no scene files in {}", a.scenes.display());
    }
    let scenes = paths
        .iter()
        .map(|p| load_scene(p).with_context(|| format!("loading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let cfg = AsgConfig {
        budget: a.budget,
        ..Default::default()
    };
    cfg.validate()?;
    let modes: Vec<FusionMode> = match a.fusion {
        Some(f) => vec![f.into()],
        None => FusionMode::ALL.to_vec(),
    };
    let jobs: Vec<(usize, FusionMode)> = (0..scenes.len()).flat_map(|i| modes.iter().map(move |&m| (i, m))).collect();
    let results = jobs
        .par_iter()
        .map(|&(i, mode)| {
            let (name, scene) = &scenes[i];
            let mut rng = search_rng(a.seed, i, mode);
            let (outcome, candidate) = generate_challenging(scene, mode, &cfg, &mut rng).with_context(|| format!("scene {name}"))?;
            if !is_plausible(&candidate, &cfg) {
                bail!("scene {name}: search returned an implausible scene");
            }
            Ok((i, outcome, candidate))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut csv = String::from("scene,fusion,normal_ap,challenging_ap,drop\n");
    let mut per_mode: BTreeMap<&str, Vec<&AsgOutcome>> = BTreeMap::new();
    for (i, outcome, candidate) in &results {
        let name = &scenes[*i].0;
        let label = outcome.mode.label();
        csv.push_str(&format!(
            "{name},{label},{:.6},{:.6},{:.6}\n",
            outcome.normal_ap,
            outcome.challenging_ap,
            outcome.drop()
        ));
        let doc = ChallengingScene {
            name,
            fusion: label,
            collaborators: &outcome.collaborators,
            perturbations: &outcome.perturbations,
            normal_ap: outcome.normal_ap,
            challenging_ap: outcome.challenging_ap,
            scene: SceneFile::from_scene(name.clone(), &candidate.realized()),
        };
        write(&a.out.join("scenes").join(format!("{name}_{label}.json")), serde_json::to_string_pretty(&doc)? + "\n")?;
        per_mode.entry(label).or_default().push(outcome);
        if verbose > 0 {
            println!("{name} {label}: {:.3} -> {:.3}", outcome.normal_ap, outcome.challenging_ap);
        }
    }
    write(&a.out.join("asg.csv"), csv)?;

    let mut table = String::from("fusion,normal_ap,challenging_ap,drop\n");
    for mode in &modes {
        let rows = &per_mode[mode.label()];
        let n = rows.len() as f64;
        let normal = rows.iter().map(|o| o.normal_ap).sum::<f64>() / n;
        let hard = rows.iter().map(|o| o.challenging_ap).sum::<f64>() / n;
        table.push_str(&format!("{},{normal:.6},{hard:.6},{:.6}\n", mode.label(), normal - hard));
        println!(
            "{:<9} AP@0.5 normal {:5.1}  challenging {:5.1}  drop {:5.1}",
            mode.label(),
            100.0 * normal,
            100.0 * hard,
            100.0 * (normal - hard)
        );
    }
    write(&a.out.join("asg_summary.csv"), table)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_report(a: ReportArgs) -> Result<ExitCode> {
    let mut csv = String::from("log,scenario,merge_policy,vehicle,role,attc,hf,atg,tg_std,acc_std,tcm,acc_std_maneuver\n");
    for path in &a.logs {
        let replay = load_replay(path).with_context(|| format!("loading {}", path.display()))?;
        let cfg = header_config(replay.header.as_ref())?;
        let eval = cfg.as_ref().map(|c| c.evaluation.clone()).unwrap_or_else(EvaluationConfig::default);
        let report = evaluate_run(&replay.frames, &eval);
        let (name, policy) = match &cfg {
            Some(c) => (c.name.clone(), serde_json::to_value(c.merge_policy)?.as_str().unwrap_or_default().to_owned()),
            None => (String::from("NA"), String::from("NA")),
        };
        for row in report_csv(&report).lines().skip(1) {
            csv.push_str(&format!("{},{name},{policy},{row}\n", path.display()));
        }
        println!("{} ({name}, {policy}): hf {} steady gap {}", path.display(), report.hf_total, report.steady_time_gap.map_or("NA".into(), |g| format!("{g:.3}")));
    }
    write(&a.out.join("report.csv"), &csv)?;
    Ok(ExitCode::SUCCESS)
}
