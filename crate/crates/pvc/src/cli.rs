//! Command-line entry point. Exit status: 0 success, 1 runtime failure,
//! 2 usage error.

use std::fs;
use std::io::Write as _;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use pvc_core::coordinator::{JobConfig, DEFAULT_PORT};
use pvc_core::processors::{self, interleave_check};
use pvc_core::simnet::{check_trace_properties, simulate_with, SimConfig, SimWorkerSpec};
use pvc_core::{Mutant, TaskSpec};
use serde_json::{json, Map, Value};
use tokio::io::{AsyncBufRead, AsyncWrite, BufReader};
use tokio::net::TcpListener;

use crate::master::{run_master, MasterOptions};
use crate::worker::{run_worker, WorkerConfig};

#[derive(Debug, Parser)]
#[command(
    name = "pvc",
    version,
    about = "Personal volunteer computing: stream a map over whatever devices join"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Coordinate a job: read NDJSON values, lend them to workers, write ordered results.
    Serve(ServeArgs),
    /// Join a coordinator as a native worker.
    Work(WorkArgs),
    /// Run a fleet through the discrete-event simulator and check its trace.
    Simulate(SimulateArgs),
    /// Random-interleaving test of the stream lender over a range of seeds.
    Interleave(InterleaveArgs),
    /// Measure one processor's throughput on this machine.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Processor every worker applies to each value.
    #[arg(long, value_parser = parse_processor)]
    pub processor: String,
    /// Task parameter as KEY=VALUE; VALUE is read as JSON when it parses, else as a string.
    #[arg(long = "param", value_name = "KEY=VALUE", value_parser = parse_param)]
    pub params: Vec<(String, Value)>,
    /// Unsettled items each worker may hold.
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u32).range(1..))]
    pub window: u32,
    /// TCP port; 0 picks a free one.
    #[arg(long, env = "PVC_PORT", default_value_t = DEFAULT_PORT)]
    pub port: u16,
    /// Address to listen on.
    #[arg(long, default_value = "0.0.0.0")]
    pub bind: std::net::IpAddr,
    /// Seconds between heartbeat pings.
    #[arg(long, default_value_t = 5.0, value_parser = parse_positive_secs)]
    pub heartbeat_period: f64,
    /// Missed heartbeat periods before a worker's items are lent elsewhere.
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u32).range(1..))]
    pub heartbeat_misses: u32,
    /// How far lending may run ahead of ordered output [default: max(1024, 8 × total window)].
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub high_water: Option<u64>,
    /// Read values from FILE instead of standard input.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Write results to FILE instead of standard output.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Directory with the browser worker page, served at `/`.
    #[arg(long)]
    pub assets: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct WorkArgs {
    /// Coordinator URL, e.g. ws://localhost:8080
    pub url: String,
    /// Parallel sessions, one per core to use.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    pub lanes: u32,
    /// Device name shown in the coordinator's report.
    #[arg(long, default_value = "native")]
    pub label: String,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// JSON list of workers: {label, rate, latency_ms?, join_at?, fail_at?, window?}.
    #[arg(long)]
    pub fleet: PathBuf,
    /// Stream length.
    #[arg(long, default_value_t = 1000)]
    pub items: u64,
    /// Seed for service-time jitter.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Service-time jitter in percent.
    #[arg(long, default_value_t = 0.0, value_parser = parse_percent)]
    pub jitter: f64,
    /// Seconds between simulated heartbeat pings.
    #[arg(long, default_value_t = 5.0, value_parser = parse_positive_secs)]
    pub heartbeat_period: f64,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u32).range(1..))]
    pub heartbeat_misses: u32,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub high_water: Option<u64>,
    /// Run the scheduler over a deliberately broken lender.
    #[arg(long, value_parser = parse_mutant)]
    pub mutant: Option<Mutant>,
    /// Write the event trace as NDJSON to FILE.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InterleaveArgs {
    /// Half-open seed range A..B.
    #[arg(long, default_value = "0..1000", value_parser = parse_seed_range)]
    pub seeds: (u64, u64),
    /// Random events per seed.
    #[arg(long, default_value_t = 200, value_parser = clap::value_parser!(u64).range(1..))]
    pub ops: u64,
    /// Check a deliberately broken lender instead of the shipped one.
    #[arg(long, value_parser = parse_mutant)]
    pub mutant: Option<Mutant>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_parser = parse_processor)]
    pub processor: String,
    /// Overrides a field of the synthetic inputs, as KEY=VALUE.
    #[arg(long = "param", value_name = "KEY=VALUE", value_parser = parse_param)]
    pub params: Vec<(String, Value)>,
    /// Seconds to run.
    #[arg(long, default_value_t = 5.0, value_parser = parse_positive_secs)]
    pub duration: f64,
    /// Threads, each processing its own share of the inputs.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    pub lanes: u32,
}

fn parse_processor(name: &str) -> Result<String, String> {
    match processors::lookup(name) {
        Ok(_) => Ok(name.to_owned()),
        Err(_) => Err(format!(
            "unknown processor; expected one of: {}",
            processors::names().collect::<Vec<_>>().join(", ")
        )),
    }
}

fn parse_param(text: &str) -> Result<(String, Value), String> {
    let (key, raw) = text.split_once('=').ok_or("expected KEY=VALUE")?;
    if key.is_empty() {
        return Err("empty key".into());
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    Ok((key.to_owned(), value))
}

fn parse_positive_secs(text: &str) -> Result<f64, String> {
    match text.parse::<f64>() {
        Ok(x) if x > 0.0 && x.is_finite() => Ok(x),
        _ => Err("expected a positive number of seconds".into()),
    }
}

fn parse_percent(text: &str) -> Result<f64, String> {
    match text.parse::<f64>() {
        Ok(x) if (0.0..=100.0).contains(&x) => Ok(x),
        _ => Err("expected a percentage within 0..=100".into()),
    }
}

fn parse_mutant(name: &str) -> Result<Mutant, String> {
    Mutant::from_name(name).ok_or_else(|| {
        let known: Vec<&str> = Mutant::ALL.iter().map(|m| m.name()).collect();
        format!("unknown mutant; expected one of: {}", known.join(", "))
    })
}

/// Parses a half-open range `A..B` with `A <= B`.
pub fn parse_seed_range(text: &str) -> Result<(u64, u64), String> {
    let (a, b) = text.split_once("..").ok_or("expected A..B")?;
    let a: u64 = a.trim().parse().map_err(|_| "range start is not an integer")?;
    let b: u64 = b.trim().parse().map_err(|_| "range end is not an integer")?;
    if a > b {
        return Err("range start exceeds its end".into());
    }
    Ok((a, b))
}

fn params_map(params: &[(String, Value)]) -> Map<String, Value> {
    params.iter().cloned().collect()
}

pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("pvc: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Runs one subcommand. `Ok(false)` means it ran but found a failure.
pub fn dispatch(command: Command) -> Result<bool> {
    match command {
        Command::Serve(args) => runtime()?.block_on(serve(args)).map(|()| true),
        Command::Work(args) => runtime()?.block_on(work(args)).map(|()| true),
        Command::Simulate(args) => simulate(&args),
        Command::Interleave(args) => Ok(interleave(&args)),
        Command::Bench(args) => bench(&args).map(|()| true),
    }
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .context("starting the async runtime")
}

async fn serve(args: ServeArgs) -> Result<()> {
    let mut config = JobConfig::new(TaskSpec {
        processor: args.processor,
        params: params_map(&args.params),
    });
    config.window = args.window;
    config.port = args.port;
    config.heartbeat_period = Duration::from_secs_f64(args.heartbeat_period);
    config.heartbeat_misses = args.heartbeat_misses;
    config.high_water = args.high_water;

    let listener = TcpListener::bind(SocketAddr::new(args.bind, args.port))
        .await
        .with_context(|| format!("binding port {}", args.port))?;
    let addr = listener.local_addr()?;
    eprintln!("pvc: serving {} on ws://{addr}/volunteer", config.task.processor);

    let input: Box<dyn AsyncBufRead + Unpin + Send> = match &args.input {
        Some(path) => {
            let file = tokio::fs::File::open(path)
                .await
                .with_context(|| format!("opening {}", path.display()))?;
            Box::new(BufReader::new(file))
        }
        None => Box::new(BufReader::new(tokio::io::stdin())),
    };
    let output: Box<dyn AsyncWrite + Unpin + Send> = match &args.output {
        Some(path) => Box::new(
            tokio::fs::File::create(path)
                .await
                .with_context(|| format!("creating {}", path.display()))?,
        ),
        None => Box::new(tokio::io::stdout()),
    };
    let options = MasterOptions { assets: args.assets };
    let summary = run_master(config, listener, options, input, output).await?;
    eprintln!(
        "pvc: {} item(s) in {:.3} s\n{}",
        summary.items,
        summary.wall.as_secs_f64(),
        summary.report
    );
    Ok(())
}

async fn work(args: WorkArgs) -> Result<()> {
    let config = WorkerConfig {
        master_url: args.url,
        lanes: args.lanes,
        label: args.label,
    };
    let summary = run_worker(&config).await?;
    eprintln!(
        "pvc: processed {} item(s), busy {:.0} ms",
        summary.items, summary.busy_ms
    );
    Ok(())
}

fn simulate(args: &SimulateArgs) -> Result<bool> {
    let text = fs::read_to_string(&args.fleet).with_context(|| format!("reading {}", args.fleet.display()))?;
    let fleet: Vec<SimWorkerSpec> =
        serde_json::from_str(&text).with_context(|| format!("parsing fleet file {}", args.fleet.display()))?;
    let mut config = SimConfig::new(args.items, args.seed, args.jitter);
    config.heartbeat_period = Duration::from_secs_f64(args.heartbeat_period);
    config.heartbeat_misses = args.heartbeat_misses;
    config.high_water = args.high_water;
    config.mutant = args.mutant;
    let trace = simulate_with(&fleet, &config)?;
    let verdict = check_trace_properties(&trace);
    if let Some(path) = &args.trace {
        fs::write(path, trace.to_ndjson()).with_context(|| format!("writing {}", path.display()))?;
    }
    let workers: Vec<Value> = trace
        .labels
        .iter()
        .zip(&trace.completed)
        .map(|(label, completed)| json!({"label": label, "completed": completed}))
        .collect();
    let summary = json!({
        "items": trace.n_items,
        "seed": args.seed,
        "jitter_pct": args.jitter,
        "makespan_s": trace.makespan_s,
        "executions": trace.executions(),
        "workers": workers,
        "report": trace.report,
        "violations": verdict.violations,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    eprintln!("{}", trace.report);
    for v in &verdict.violations {
        eprintln!("violation: {v}");
    }
    Ok(verdict.is_ok())
}

fn interleave(args: &InterleaveArgs) -> bool {
    let (start, end) = args.seeds;
    let seeds: Vec<u64> = (start..end).collect();
    let threads = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(seeds.len().max(1));
    let chunk = seeds.len().div_ceil(threads).max(1);
    let reports: Vec<_> = std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|seed| interleave_check(*seed, args.ops, args.mutant))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("interleaving thread panicked"))
            .collect()
    });
    let violations: u64 = reports.iter().map(|r| r.violations).sum();
    let failing = reports.iter().filter(|r| r.violations > 0).count();
    let first = reports.iter().find(|r| r.violations > 0);
    let summary = json!({
        "seeds": format!("{start}..{end}"),
        "ops": args.ops,
        "mutant": args.mutant.map(Mutant::name),
        "runs": reports.len(),
        "violations": violations,
        "failing_seeds": failing,
        "first_failure": first,
    });
    println!(
        "{}",
        serde_json::to_string_pretty(&summary).expect("summary serializes")
    );
    eprintln!("{} run(s), {failing} failing, {violations} violation(s)", reports.len());
    violations == 0
}

fn bench_input(processor: &str, params: &Map<String, Value>, k: u64) -> Result<Value> {
    let mut value = processors::sample_input(processor, k)?;
    if !params.is_empty() {
        let object = value
            .as_object_mut()
            .ok_or_else(|| anyhow!("{processor} inputs take no parameters"))?;
        object.extend(params.clone());
    }
    Ok(value)
}

fn bench(args: &BenchArgs) -> Result<()> {
    let params = params_map(&args.params);
    let task = TaskSpec::new(args.processor.clone());
    bench_input(&args.processor, &params, 0)?;
    let duration = Duration::from_secs_f64(args.duration);
    let lanes = u64::from(args.lanes);
    let started = Instant::now();
    let counts: Vec<Result<u64>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..lanes)
            .map(|lane| {
                let (task, params) = (&task, &params);
                scope.spawn(move || -> Result<u64> {
                    let mut done = 0u64;
                    let mut k = lane;
                    while started.elapsed() < duration {
                        let value = bench_input(&task.processor, params, k)?;
                        let out = processors::process_item(task, &value)?;
                        if let Err(e) = out.outcome {
                            bail!("item {k} failed: {e}");
                        }
                        done += 1;
                        k += lanes;
                    }
                    Ok(done)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("bench thread panicked"))
            .collect()
    });
    let seconds = started.elapsed().as_secs_f64();
    let mut items = 0;
    for count in counts {
        items += count?;
    }
    let rate = items as f64 / seconds;
    println!(
        "{}",
        json!({"processor": args.processor, "lanes": args.lanes, "items": items, "seconds": seconds, "items_per_s": rate})
    );
    let _ = writeln!(std::io::stderr(), "{}: {rate:.2} items/s", args.processor);
    Ok(())
}
