//! The `run` and `trace` subcommands: configuration layering, scenario
//! loading, concurrent execution and report files.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde::Deserialize;

use osmosim::metrics::compare_text;
use osmosim::traffic::{build_trace, format_trace, parse_trace, TraceRecord};
use osmosim::{
    preset, FragmentSize, FragmentationMode, PuSchedulerKind, Scenario, SimConfig, SimError, SimReport, Simulator,
};

use crate::{RunArgs, ScenarioSource, SimFlags, TraceArgs};

/// Environment variable consulted for the seed when neither the flag nor
/// the configuration file sets one.
pub const SEED_ENV: &str = "OSMOSIM_SEED";

const DEFAULT_OUT: &str = "osmosim-out";

/// Failure classes, each mapped to its own exit status.
#[derive(Debug)]
pub enum CliError {
    Config(anyhow::Error),
    Scenario(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Scenario(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let e = match self {
            CliError::Config(e) | CliError::Scenario(e) => e,
        };
        if f.alternate() {
            write!(f, "{e:#}")
        } else {
            write!(f, "{e}")
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(_) => CliError::Config(e.into()),
            SimError::Ectx(_) | SimError::Scenario(_) => CliError::Scenario(e.into()),
        }
    }
}

fn config_err(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Config(e.into())
}

fn scenario_err(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Scenario(e.into())
}

/// Run options that may also come from the `[run]` table of the config file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunSection {
    preset: Option<String>,
    scenario: Option<PathBuf>,
    trace: Option<PathBuf>,
    compare: Option<bool>,
    out: Option<PathBuf>,
}

struct Loaded {
    cfg: SimConfig,
    run: RunSection,
}

/// Layers flag > config file > default, with `OSMOSIM_SEED` below the file.
fn load_config(flags: &SimFlags) -> Result<Loaded, CliError> {
    let mut table = match &flags.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))
                .map_err(config_err)?;
            text.parse::<toml::Table>()
                .with_context(|| format!("parsing config {}", path.display()))
                .map_err(config_err)?
        }
        None => toml::Table::new(),
    };
    let run = match table.remove("run") {
        Some(v) => v.try_into::<RunSection>().context("parsing [run] table").map_err(config_err)?,
        None => RunSection::default(),
    };
    let file_seed = table.contains_key("seed");
    let mut cfg: SimConfig = toml::Value::Table(table).try_into().context("parsing config").map_err(config_err)?;

    if let Some(s) = &flags.sched {
        cfg.pu_scheduler = s.parse::<PuSchedulerKind>().map_err(config_err)?;
    }
    if let Some(f) = &flags.frag {
        cfg.fragmentation_mode = f.parse::<FragmentationMode>().map_err(config_err)?;
    }
    if let Some(f) = &flags.frag_size {
        cfg.fragment_size = parse_fragment_size(f).map_err(config_err)?;
    }
    if let Some(c) = flags.cycles {
        cfg.max_cycles = c;
    }
    match flags.seed {
        Some(seed) => cfg.seed = seed,
        None if !file_seed => {
            if let Ok(v) = std::env::var(SEED_ENV) {
                cfg.seed =
                    v.trim().parse().map_err(|_| config_err(anyhow!("{SEED_ENV}=`{v}` is not an unsigned integer")))?;
            }
        }
        None => {}
    }
    cfg.validate().map_err(config_err)?;
    Ok(Loaded { cfg, run })
}

fn parse_fragment_size(s: &str) -> anyhow::Result<FragmentSize> {
    if s == "off" {
        return Ok(FragmentSize::Off);
    }
    let bytes: u32 = s.parse().map_err(|_| anyhow!("fragment size `{s}` is neither a byte count nor `off`"))?;
    Ok(if bytes == 0 { FragmentSize::Off } else { FragmentSize::Bytes(bytes) })
}

fn load_scenarios(source: &ScenarioSource, run: &RunSection) -> Result<Vec<Scenario>, CliError> {
    let (preset_name, file) = match (&source.preset, &source.scenario) {
        (None, None) => (run.preset.as_ref(), run.scenario.as_ref()),
        (p, f) => (p.as_ref(), f.as_ref()),
    };
    match (preset_name, file) {
        (Some(_), Some(_)) => Err(scenario_err(anyhow!("give either a preset or a scenario file, not both"))),
        (Some(name), None) => preset(name).map_err(scenario_err),
        (None, Some(path)) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading scenario {}", path.display()))
                .map_err(scenario_err)?;
            let scenario: Scenario = toml::from_str(&text)
                .with_context(|| format!("parsing scenario {}", path.display()))
                .map_err(scenario_err)?;
            Ok(vec![scenario])
        }
        (None, None) => Err(scenario_err(anyhow!("no scenario: pass --preset or --scenario"))),
    }
}

struct Job {
    dir: PathBuf,
    label: String,
    scenario: Scenario,
    cfg: SimConfig,
}

fn execute(job: &Job, trace: Option<&[TraceRecord]>) -> Result<SimReport, SimError> {
    let sim = match trace {
        Some(t) => Simulator::with_trace(&job.cfg, &job.scenario, t.to_vec())?,
        None => Simulator::new(&job.cfg, &job.scenario)?,
    };
    Ok(sim.run_to_end())
}

/// Runs all jobs on scoped worker threads; results keep job order.
fn execute_all(jobs: &[Job], trace: Option<&[TraceRecord]>) -> Vec<Result<SimReport, SimError>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len()).max(1);
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<Option<Result<SimReport, SimError>>>> =
        jobs.iter().map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                let Some(job) = jobs.get(i) else { break };
                let r = execute(job, trace);
                *slots[i].lock().expect("result slot") = Some(r);
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().expect("result slot").expect("every job ran")).collect()
}

/// Writes via a temporary sibling and rename so readers never see partial files.
fn write_atomic(path: &Path, contents: &str) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents)
        .and_then(|()| fs::rename(&tmp, path))
        .with_context(|| format!("writing {}", path.display()))
        .map_err(config_err)
}

fn write_report_dir(dir: &Path, report: &SimReport) -> Result<(), CliError> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).map_err(config_err)?;
    write_atomic(&dir.join("summary.csv"), &report.summary_csv())?;
    for (name, body) in report.series_csvs() {
        write_atomic(&dir.join(name), &body)?;
    }
    write_atomic(&dir.join("report.txt"), &report.render_text())
}

fn grid(cfg: &SimConfig) -> Vec<(String, SimConfig)> {
    let fragmented = match cfg.fragmentation_mode {
        FragmentationMode::None => FragmentationMode::Hardware,
        other => other,
    };
    let mut out = Vec::new();
    for sched in [PuSchedulerKind::Rr, PuSchedulerKind::Wlbvt] {
        for frag in [FragmentationMode::None, fragmented] {
            let c = SimConfig { pu_scheduler: sched, fragmentation_mode: frag, ..cfg.clone() };
            out.push((format!("{}-{}", sched.as_str(), frag.as_str()), c));
        }
    }
    out
}

fn pct(base: f64, new: f64) -> String {
    if base == 0.0 {
        "none".into()
    } else {
        format!("{:.4}", (new - base) / base * 100.0)
    }
}

/// `config,metric,flow_id,value` rows comparing each grid point to the first.
fn delta_csv(labels: &[&str], reports: &[&SimReport]) -> String {
    let mut s = String::from("# osmosim csv v1\nconfig,metric,flow_id,value\n");
    let base = reports[0];
    for (label, r) in labels.iter().zip(reports).skip(1) {
        if let (Some(b), Some(m)) = (base.fairness, r.fairness) {
            s.push_str(&format!("{label},fairness_change_pct,all,{}\n", pct(b, m)));
        }
        for (i, (fb, fr)) in base.flows.iter().zip(&r.flows).enumerate() {
            if let (Some(b), Some(m)) = (fb.fct, fr.fct) {
                s.push_str(&format!("{label},fct_change_pct,{i},{}\n", pct(b as f64, m as f64)));
            }
            if let (Some(b), Some(m)) = (fb.kernel_time, fr.kernel_time) {
                s.push_str(&format!("{label},kernel_p50_change_pct,{i},{}\n", pct(b.p50 as f64, m.p50 as f64)));
            }
        }
    }
    s
}

pub fn cmd_run(args: &RunArgs) -> Result<(), CliError> {
    let Loaded { cfg, run } = load_config(&args.sim)?;
    let scenarios = load_scenarios(&args.source, &run)?;
    let out = args.out.clone().or(run.out).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    let compare = args.compare || run.compare.unwrap_or(false);
    let trace = match args.trace.as_ref().or(run.trace.as_ref()) {
        Some(path) => {
            if scenarios.len() != 1 {
                return Err(scenario_err(anyhow!("a trace can only be replayed against a single scenario")));
            }
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading trace {}", path.display()))
                .map_err(scenario_err)?;
            Some(parse_trace(&text).map_err(scenario_err)?)
        }
        None => None,
    };

    let nested = scenarios.len() > 1;
    let mut jobs = Vec::new();
    for sc in &scenarios {
        let base = if nested { out.join(&sc.name) } else { out.clone() };
        if compare {
            for (label, c) in grid(&cfg) {
                jobs.push(Job { dir: base.join(&label), label, scenario: sc.clone(), cfg: c });
            }
        } else {
            jobs.push(Job { dir: base, label: String::new(), scenario: sc.clone(), cfg: cfg.clone() });
        }
    }

    let results = execute_all(&jobs, trace.as_deref());
    let mut reports = Vec::with_capacity(results.len());
    for r in results {
        reports.push(r?);
    }
    for (job, report) in jobs.iter().zip(&reports) {
        write_report_dir(&job.dir, report)?;
    }

    let per_scenario = if compare { 4 } else { 1 };
    let mut combined = String::new();
    for (chunk_jobs, chunk) in jobs.chunks(per_scenario).zip(reports.chunks(per_scenario)) {
        let text = if compare {
            let base_dir = chunk_jobs[0].dir.parent().expect("grid runs live in a subdirectory").to_path_buf();
            let labels: Vec<&str> = chunk_jobs.iter().map(|j| j.label.as_str()).collect();
            let refs: Vec<&SimReport> = chunk.iter().collect();
            let mut delta = String::new();
            for (label, r) in labels.iter().zip(&refs).skip(1) {
                delta.push_str(&compare_text(labels[0], refs[0], label, r));
            }
            write_atomic(&base_dir.join("delta.txt"), &delta)?;
            write_atomic(&base_dir.join("delta.csv"), &delta_csv(&labels, &refs))?;
            write_atomic(&base_dir.join("report.txt"), &delta)?;
            delta
        } else {
            chunk[0].render_text()
        };
        combined.push_str(&text);
        combined.push('\n');
    }
    if nested {
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display())).map_err(config_err)?;
        write_atomic(&out.join("report.txt"), &combined)?;
    }
    print!("{combined}");
    Ok(())
}

pub fn cmd_trace(args: &TraceArgs) -> Result<(), CliError> {
    let Loaded { cfg, run } = load_config(&args.sim)?;
    let scenarios = load_scenarios(&args.source, &run)?;
    let ingress = cfg.validate().map_err(config_err)?.ingress;
    if scenarios.len() > 1 {
        let dir = args
            .out
            .as_ref()
            .ok_or_else(|| scenario_err(anyhow!("preset expands to {} scenarios; pass -o <dir>", scenarios.len())))?;
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).map_err(config_err)?;
        for sc in &scenarios {
            let trace = build_trace(sc, ingress, cfg.seed).map_err(scenario_err)?;
            write_atomic(&dir.join(format!("{}.trace.csv", sc.name)), &format_trace(&trace))?;
        }
        return Ok(());
    }
    let trace = build_trace(&scenarios[0], ingress, cfg.seed).map_err(scenario_err)?;
    let text = format_trace(&trace);
    match &args.out {
        Some(path) => write_atomic(path, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
