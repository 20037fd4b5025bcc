//! `pbmorl`: train, evaluate, check frontiers, and serve preference queries.

mod artifacts;
mod config;

use std::fmt;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use pbmorl_core::checkpoint::Checkpoint;
use pbmorl_core::domain::{DiscountConfig, WeightGrid};
use pbmorl_core::eql::{evaluate, run_eql_oracle, run_pbmorl, RunArtifacts, RunHooks, TrainerConfig};
use pbmorl_core::envs::{EnvConfig, EnvKind};
use pbmorl_core::pareto::{
    brute_force_frontier, convex_frontier, enumerate_policies, nonconvex_frontier, nonconvex_frontier_pairwise, EnumerateOptions,
    FinitePolicySet, FrontierConfig,
};
use pbmorl_core::teacher::ScriptedTeacher;
use pbmorl_service::{spawn_server, HttpTeacher, QueryQueue, QueueConfig, ServiceHooks, WaitMode};
use serde::Deserialize;

use crate::artifacts::{Both, FileHooks, RunDir, CHECKPOINT, CONFIG};
use crate::config::{Overrides, RunConfig, ServiceFlags, TeacherMode};

/// A mistake in how the program was invoked (exit code 1).
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Parser)]
#[command(name = "pbmorl", version, about = "Preference-based multi-objective reinforcement learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train with a scripted teacher (or on true rewards with --oracle).
    Train(TrainArgs),
    /// Evaluate a checkpoint: expected utility and hypervolume.
    Eval(EvalArgs),
    /// Compute a Pareto frontier from teacher preferences.
    Pareto(ParetoArgs),
    /// Train while serving queries to external labelers over HTTP.
    Serve(ServeArgs),
}

fn parse_env(s: &str) -> Result<EnvKind, String> {
    s.parse().map_err(|e: pbmorl_core::envs::EnvError| e.to_string())
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, value_parser = parse_env)]
    env: Option<EnvKind>,
    /// TOML config; flags given here take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Total environment steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Run directory [default: runs/<command>-<env>-seed<seed>]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace an existing run directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_enum)]
    teacher: Option<TeacherMode>,
    /// Learn from true rewards; no teacher, no reward model.
    #[arg(long)]
    oracle: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Export {
    Csv,
    Json,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file, or a run directory containing one.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Evaluation seed [default: the run's]
    #[arg(long)]
    seed: Option<u64>,
    /// Number of uniform weights for expected utility.
    #[arg(long)]
    weights: Option<usize>,
    #[arg(long, value_enum)]
    export: Option<Export>,
    /// Export path [default: eval.<ext> beside the checkpoint]
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Algo {
    Brute,
    Convex,
    Nonconvex,
    Pairwise,
}

#[derive(Args)]
struct ParetoArgs {
    /// Enumerate the policies of a small deterministic task.
    #[arg(long, value_parser = parse_env, conflicts_with = "instance", required_unless_present = "instance")]
    env: Option<EnvKind>,
    /// JSON file of return vectors: `[[..], ..]` or `{"points": [[..], ..]}`.
    #[arg(long)]
    instance: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "nonconvex")]
    algo: Algo,
    /// Compare against the brute-force frontier and fail on a mismatch.
    #[arg(long)]
    check: bool,
    /// Weight-grid resolution for the convex algorithm.
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long, default_value_t = 0.99)]
    gamma: f64,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value = "127.0.0.1")]
    host: IpAddr,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    /// Most pending queries held at once.
    #[arg(long)]
    capacity: Option<usize>,
    /// Seconds before an unanswered query expires.
    #[arg(long)]
    expiry_secs: Option<u64>,
    /// Hold each feedback round until its queries are answered or expire.
    #[arg(long)]
    wait: bool,
    #[arg(long)]
    wait_timeout_secs: Option<u64>,
    /// Include true rewards in query envelopes (for scripted labelers).
    #[arg(long)]
    reveal_ground_truth: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .format_target(false)
        .init();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Pareto(a) => cmd_pareto(a),
        Command::Serve(a) => cmd_serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn overrides(run: &RunArgs) -> Overrides {
    Overrides {
        env: run.env,
        seed: run.seed,
        steps: run.steps,
        ..Default::default()
    }
}

fn out_dir(run: &RunArgs, command: &str, cfg: &RunConfig) -> PathBuf {
    run.out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(format!("{command}-{}-seed{}", cfg.env, cfg.seed)))
}

struct StopFlag(Arc<AtomicBool>);

impl RunHooks for StopFlag {
    fn should_stop(&mut self) -> bool {
        self.0.load(Ordering::Relaxed)
    }
}

/// Runs `f` on the first Ctrl-C. Returns once the handler is installed.
fn on_interrupt(f: impl FnOnce() + Send + 'static) -> anyhow::Result<()> {
    let (tx, rx) = std::sync::mpsc::channel::<std::io::Result<()>>();
    std::thread::Builder::new().name("interrupt".into()).spawn(move || {
        let rt = match tokio::runtime::Builder::new_current_thread().enable_all().build() {
            Ok(rt) => rt,
            Err(e) => {
                let _ = tx.send(Err(e));
                return;
            }
        };
        rt.block_on(async move {
            #[cfg(unix)]
            {
                use tokio::signal::unix::{signal, SignalKind};
                let mut sig = match signal(SignalKind::interrupt()) {
                    Ok(s) => s,
                    Err(e) => {
                        let _ = tx.send(Err(e));
                        return;
                    }
                };
                let _ = tx.send(Ok(()));
                if sig.recv().await.is_some() {
                    f();
                }
            }
            #[cfg(not(unix))]
            {
                let _ = tx.send(Ok(()));
                if tokio::signal::ctrl_c().await.is_ok() {
                    f();
                }
            }
        });
    })?;
    rx.recv().context("installing the interrupt handler")??;
    Ok(())
}

fn save_run(dir: &RunDir, cfg: &RunConfig, run: &RunArtifacts) -> anyhow::Result<()> {
    Checkpoint::from_run(cfg.env, cfg.trainer.gamma, run)
        .save(&dir.file(CHECKPOINT))
        .context("saving checkpoint")?;
    let summary = dir.finish(run)?;
    let fmt = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!(
        "{}: {} steps, {} preferences, eu {}, hv {}{}",
        dir.path.display(),
        summary.steps_completed,
        summary.preferences,
        fmt(summary.eu),
        fmt(summary.hv),
        if summary.stopped_early { " (stopped early)" } else { "" }
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    if a.teacher == Some(TeacherMode::Http) {
        return Err(Usage("the http teacher needs the preference service; use `pbmorl serve`".into()).into());
    }
    let mut over = overrides(&a.run);
    over.teacher = a.teacher;
    over.oracle = a.oracle;
    let cfg = RunConfig::resolve(a.run.config.as_deref(), &over)?;
    if cfg.teacher == TeacherMode::Http {
        return Err(Usage("config asks for the http teacher; use `pbmorl serve`".into()).into());
    }
    let env = cfg.env_config()?.build(cfg.trainer.gamma)?;
    let dir = RunDir::create(&out_dir(&a.run, "train", &cfg), a.run.force)?;
    dir.start("train", &cfg, a.run.config.as_deref(), None)?;

    let stop = Arc::new(AtomicBool::new(false));
    {
        let stop = stop.clone();
        on_interrupt(move || {
            log::warn!("interrupt received; checkpointing");
            stop.store(true, Ordering::Relaxed);
        })?;
    }
    let mut files = FileHooks::new(&dir)?;
    let mut flag = StopFlag(stop);
    log::info!("training on {} for {} steps (seed {})", cfg.env, cfg.trainer.total_timesteps, cfg.seed);
    let run = {
        let mut hooks = Both(&mut files, &mut flag);
        if cfg.oracle {
            run_eql_oracle(env.as_ref(), &cfg.trainer, cfg.seed, &mut hooks)?
        } else {
            let mut teacher = ScriptedTeacher::new(DiscountConfig::new(cfg.trainer.gamma)?);
            run_pbmorl(env.as_ref(), &mut teacher, &cfg.trainer, cfg.seed, &mut hooks)?
        }
    };
    files.close()?;
    save_run(&dir, &cfg, &run)
}

fn cmd_serve(a: ServeArgs) -> anyhow::Result<()> {
    let mut over = overrides(&a.run);
    over.teacher = Some(TeacherMode::Http);
    over.service = ServiceFlags {
        capacity: a.capacity,
        expiry_secs: a.expiry_secs,
        wait: a.wait,
        wait_timeout_secs: a.wait_timeout_secs,
        reveal_ground_truth: a.reveal_ground_truth,
    };
    let cfg = RunConfig::resolve(a.run.config.as_deref(), &over)?;
    if cfg.oracle {
        return Err(Usage("serve always learns from labels; drop `oracle`".into()).into());
    }
    let env = cfg.env_config()?.build(cfg.trainer.gamma)?;
    let dir = RunDir::create(&out_dir(&a.run, "serve", &cfg), a.run.force)?;

    let svc = &cfg.service;
    let queue = Arc::new(QueryQueue::new(QueueConfig {
        capacity: svc.capacity,
        expiry: svc.expiry_secs.map(Duration::from_secs),
        reveal_ground_truth: svc.reveal_ground_truth,
    }));
    let addr = SocketAddr::new(a.host, a.port);
    let server = spawn_server(addr, queue.clone()).with_context(|| format!("binding {addr}"))?;
    let endpoint = format!("http://{}", server.addr);

    let stop = Arc::new(AtomicBool::new(false));
    {
        let stop = stop.clone();
        let queue = queue.clone();
        on_interrupt(move || {
            log::warn!("interrupt received; checkpointing");
            stop.store(true, Ordering::Relaxed);
            queue.interrupt();
        })?;
    }
    dir.start("serve", &cfg, a.run.config.as_deref(), Some(endpoint.clone()))?;
    log::info!("serving preference queries at {endpoint}");

    let mode = if svc.wait {
        WaitMode::Wait(svc.wait_timeout_secs.map(Duration::from_secs))
    } else {
        WaitMode::NonBlocking
    };
    let mut teacher = HttpTeacher::new(queue.clone(), env.clone_box(), mode);
    let mut files = FileHooks::new(&dir)?;
    let mut service_hooks = ServiceHooks::new(queue.clone(), stop);
    let run = run_pbmorl(
        env.as_ref(),
        &mut teacher,
        &cfg.trainer,
        cfg.seed,
        &mut Both(&mut files, &mut service_hooks),
    )?;
    if teacher.dropped() > 0 {
        log::warn!("{} queries were dropped because the queue was full", teacher.dropped());
    }
    files.close()?;
    queue.set_finished();
    let saved = save_run(&dir, &cfg, &run);
    server.shutdown().context("stopping the preference service")?;
    saved
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    let path = if a.checkpoint.is_dir() {
        a.checkpoint.join(CHECKPOINT)
    } else {
        a.checkpoint.clone()
    };
    let ck = Checkpoint::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let snapshot = dir.join(CONFIG);
    let (mut cfg, env_cfg) = if snapshot.is_file() {
        let text = std::fs::read_to_string(&snapshot)?;
        let rc = RunConfig::from_toml(&text).with_context(|| format!("reading {}", snapshot.display()))?;
        if rc.env != ck.env {
            bail!("{} is for {}, but the checkpoint is for {}", snapshot.display(), rc.env, ck.env);
        }
        let env_cfg = rc.env_config()?;
        (rc.trainer, env_cfg)
    } else {
        let cfg = TrainerConfig {
            gamma: ck.gamma,
            ..TrainerConfig::desk(ck.env)
        };
        (cfg, EnvConfig::bundled(ck.env))
    };
    if let Some(s) = a.seed {
        cfg.eval_seed = s;
    }
    if let Some(n) = a.weights {
        cfg.eval_weights = n;
    }
    let env = env_cfg.build(cfg.gamma)?;
    let rec = evaluate(env.as_ref(), &ck.q, &cfg, ck.step)?;
    println!("step {} eu {:.6} hv {:.6}", rec.step, rec.eu, rec.hv);
    if let Some(kind) = a.export {
        let (ext, body) = match kind {
            Export::Csv => ("csv", format!("step,eu,hv\n{},{},{}\n", rec.step, rec.eu, rec.hv)),
            Export::Json => ("json", serde_json::to_string_pretty(&rec)? + "\n"),
        };
        let out = a.output.unwrap_or_else(|| dir.join(format!("eval.{ext}")));
        std::fs::write(&out, body).with_context(|| format!("writing {}", out.display()))?;
        log::info!("wrote {}", out.display());
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(untagged)]
enum InstanceFile {
    Bare(Vec<Vec<f64>>),
    Wrapped { points: Vec<Vec<f64>> },
}

fn load_instance(path: &Path) -> anyhow::Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let parsed: InstanceFile = serde_json::from_str(&text)
        .map_err(|e| anyhow::anyhow!("{}: expected an array of return vectors ({e})", path.display()))?;
    let points = match parsed {
        InstanceFile::Bare(p) | InstanceFile::Wrapped { points: p } => p,
    };
    let Some(m) = points.first().map(Vec::len) else {
        bail!("{}: instance has no points", path.display());
    };
    if m == 0 {
        bail!("{}: return vectors are empty", path.display());
    }
    if let Some(i) = points.iter().position(|p| p.len() != m) {
        bail!("{}: point {i} has {} objectives, expected {m}", path.display(), points[i].len());
    }
    if points.iter().flatten().any(|x| !x.is_finite()) {
        bail!("{}: returns must be finite", path.display());
    }
    Ok(points)
}

fn cmd_pareto(a: ParetoArgs) -> anyhow::Result<()> {
    let discount = DiscountConfig::new(a.gamma).map_err(|e| Usage(e.to_string()))?;
    let ps = match (&a.instance, a.env) {
        (Some(path), _) => FinitePolicySet::from_returns(&load_instance(path)?),
        (None, Some(kind)) => {
            if !kind.is_enumerable() {
                return Err(Usage(format!("{kind} is not small and deterministic; frontiers need dst or ft")).into());
            }
            let env = EnvConfig::bundled(kind).build(a.gamma)?;
            enumerate_policies(env.as_ref(), &EnumerateOptions::default())?
        }
        (None, None) => return Err(Usage("give --env or --instance".into()).into()),
    };
    let returns = ps.returns(a.gamma);
    let teacher = ScriptedTeacher::new(discount);
    let fcfg = FrontierConfig::new(discount);
    let h = ps.longest();
    let m = ps.m()?;
    let brute = brute_force_frontier(&returns)?;
    let found = match a.algo {
        Algo::Brute => brute.clone(),
        Algo::Nonconvex => nonconvex_frontier(&ps, &teacher, h, &fcfg)?,
        Algo::Pairwise => nonconvex_frontier_pairwise(&ps, &teacher, h, &fcfg)?,
        Algo::Convex => {
            let grid = match a.resolution {
                Some(r) => WeightGrid::new(m, r).map_err(|e| Usage(e.to_string()))?,
                None => WeightGrid::evaluation(m)?,
            };
            convex_frontier(&ps, grid.points(), &teacher, h, &fcfg)?
        }
    };
    for &i in &found {
        let r: Vec<String> = returns[i].iter().map(|x| format!("{x:.4}")).collect();
        log::info!("{i}: {} [{}]", ps.policies[i].name, r.join(", "));
    }
    println!("{}", serde_json::to_string(&found)?);
    if a.check {
        let ok = if a.algo == Algo::Convex {
            found.iter().all(|i| brute.contains(i))
        } else {
            found == brute
        };
        if !ok {
            bail!("check failed: {found:?} against brute force {brute:?}");
        }
        log::info!("check passed: {} of {} policies on the frontier", found.len(), ps.len());
    }
    Ok(())
}
