use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;

use anyhow::{Context, Result, bail};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use reid_annotate::config::{KEYS, RunConfig, Strategy};
use reid_annotate::dataset::{
    CountDist, DatasetManifest, LoadOptions, SyntheticParams, generate_synthetic, load_manifest_with, write_manifest,
};
use reid_annotate::eval::{Protocol, estimate_t_pa, evaluate_reid_cached, gained_tp_ratio};
use reid_annotate::ledger::load_ledger;
use reid_annotate::metric::DistanceCache;
use reid_annotate::model_hook::{CentroidPull, ExternalTrainer, ModelHook, read_snapshot};
use reid_annotate::oracle::{SharedQueue, SimulatedOracle};
use reid_annotate::run::{Engine, OracleMode, compare, replay_ledger};
use reid_annotate::server::{AppState, ServiceView, router};

#[derive(Parser)]
#[command(name = "reid-annotate", version, about = "Active pairwise annotation for video person re-identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic multi-camera manifest.
    Generate(GenerateArgs),
    /// Run the loop with a simulated oracle.
    Run(RunArgs),
    /// Run the loop with human verdicts collected over HTTP.
    Serve(ServeArgs),
    /// Rebuild label state from a ledger and print a summary.
    Replay(ReplayArgs),
    /// Score re-ID ranking (CMC, mAP) for a manifest or snapshot.
    Eval(EvalArgs),
    /// Estimate the random-annotation total used as the annotation-ratio denominator.
    EstimateTpa(TpaArgs),
    /// Run several strategies on one manifest and export their curves.
    Compare(CompareArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    identities: usize,
    #[arg(long, default_value_t = 2)]
    cameras: usize,
    #[arg(long, default_value_t = 2)]
    tracklets_per_camera: usize,
    #[arg(long, default_value_t = 5)]
    images_per_tracklet: usize,
    #[arg(long, default_value_t = 32)]
    dimension: usize,
    #[arg(long, default_value_t = 0.35)]
    within_std: f64,
    /// Std of the per-(identity, camera) appearance offset; 0 turns the view bias off.
    #[arg(long, default_value_t = 0.7)]
    shift_std: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Overrides for individual config keys; they win over `--config`.
#[derive(Args, Default)]
struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    s1: Option<String>,
    #[arg(long)]
    s2: Option<String>,
    #[arg(long)]
    s3: Option<String>,
    #[arg(long)]
    s4: Option<String>,
    #[arg(long)]
    t0: Option<String>,
    #[arg(long)]
    allow_schedule_override: Option<String>,
    #[arg(long)]
    k_dist: Option<String>,
    #[arg(long)]
    k_recip: Option<String>,
    #[arg(long)]
    sigma: Option<String>,
    #[arg(long)]
    dbscan_eps: Option<String>,
    #[arg(long)]
    dbscan_min_pts: Option<String>,
    #[arg(long)]
    prop_max_iters: Option<String>,
    #[arg(long)]
    prop_tol: Option<String>,
    #[arg(long)]
    refresh_alpha: Option<String>,
    #[arg(long)]
    max_iterations: Option<String>,
    #[arg(long)]
    stop_when_pools_exhausted: Option<String>,
    #[arg(long)]
    random_budget: Option<String>,
    #[arg(long)]
    kmeans_k: Option<String>,
    #[arg(long)]
    kmeans_per_iteration: Option<String>,
    #[arg(long)]
    tpa_runs: Option<String>,
    #[arg(long)]
    exclude_same_camera: Option<String>,
}

impl ConfigArgs {
    fn overrides(&self) -> Vec<(&'static str, &String)> {
        let fields = [
            ("strategy", &self.strategy),
            ("s1", &self.s1),
            ("s2", &self.s2),
            ("s3", &self.s3),
            ("s4", &self.s4),
            ("t0", &self.t0),
            ("allow_schedule_override", &self.allow_schedule_override),
            ("k_dist", &self.k_dist),
            ("k_recip", &self.k_recip),
            ("sigma", &self.sigma),
            ("dbscan_eps", &self.dbscan_eps),
            ("dbscan_min_pts", &self.dbscan_min_pts),
            ("prop_max_iters", &self.prop_max_iters),
            ("prop_tol", &self.prop_tol),
            ("refresh_alpha", &self.refresh_alpha),
            ("max_iterations", &self.max_iterations),
            ("stop_when_pools_exhausted", &self.stop_when_pools_exhausted),
            ("random_budget", &self.random_budget),
            ("kmeans_k", &self.kmeans_k),
            ("kmeans_per_iteration", &self.kmeans_per_iteration),
            ("tpa_runs", &self.tpa_runs),
            ("exclude_same_camera", &self.exclude_same_camera),
        ];
        debug_assert!(fields.iter().all(|(k, _)| KEYS.contains(k)));
        fields.into_iter().filter_map(|(k, v)| v.as_ref().map(|v| (k, v))).collect()
    }

    fn build(&self, seed: Option<u64>) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for (key, value) in self.overrides() {
            config.set(key, value)?;
        }
        if let Some(s) = seed {
            config.seed = s;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args)]
struct ManifestArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Scale every feature vector to unit length on load.
    #[arg(long)]
    l2_normalize: bool,
}

impl ManifestArgs {
    fn load(&self) -> Result<DatasetManifest> {
        load_manifest_with(&self.manifest, LoadOptions { l2_normalize: self.l2_normalize })
            .with_context(|| format!("loading {}", self.manifest.display()))
    }
}

#[derive(Args)]
struct HookArgs {
    /// External trainer program, run as `<program> <args..> <manifest> <labels> <snapshot-in> <snapshot-out>`.
    #[arg(long)]
    trainer: Option<PathBuf>,
    #[arg(long, allow_hyphen_values = true, num_args = 1..)]
    trainer_arg: Vec<String>,
}

impl HookArgs {
    fn build(&self, config: &RunConfig, out_dir: &Path) -> Box<dyn ModelHook> {
        match &self.trainer {
            Some(program) => Box::new(ExternalTrainer {
                program: program.clone(),
                args: self.trainer_arg.clone(),
                workdir: out_dir.join("trainer"),
            }),
            None => Box::new(CentroidPull { alpha: config.refresh_alpha }),
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    manifest: ManifestArgs,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Continue the run in `--out-dir` from its last completed iteration.
    #[arg(long)]
    resume: bool,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    hook: HookArgs,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    manifest: ManifestArgs,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    /// Require this value in the `x-api-token` header.
    #[arg(long, env = "REID_ANNOTATE_TOKEN")]
    token: Option<String>,
    /// Seconds before an unanswered hand-out goes to the next annotator.
    #[arg(long, default_value_t = 300)]
    lease_secs: u64,
    #[arg(long)]
    resume: bool,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    hook: HookArgs,
}

#[derive(Args)]
struct ReplayArgs {
    #[command(flatten)]
    manifest: ManifestArgs,
    #[arg(long)]
    ledger: PathBuf,
    /// Stop after this many iterations.
    #[arg(long)]
    iterations: Option<u32>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    manifest: ManifestArgs,
    /// Embedding snapshot to score instead of the manifest features.
    #[arg(long)]
    snapshot: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    k_dist: usize,
    /// Keep same-camera true matches in the gallery.
    #[arg(long)]
    include_same_camera: bool,
    /// Distance cache file, reused when it matches and written otherwise.
    #[arg(long)]
    cache: Option<PathBuf>,
}

#[derive(Args)]
struct TpaArgs {
    /// Take identities from this manifest.
    #[arg(long, conflicts_with_all = ["tracklets", "identities"])]
    manifest: Option<PathBuf>,
    /// Or: this many tracklets spread evenly over `--identities`.
    #[arg(long, requires = "identities")]
    tracklets: Option<usize>,
    #[arg(long)]
    identities: Option<usize>,
    #[arg(long, default_value_t = 50)]
    runs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    manifest: ManifestArgs,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Comma-separated strategies; all of them by default.
    #[arg(long, value_delimiter = ',')]
    strategies: Vec<String>,
    #[command(flatten)]
    config: ConfigArgs,
}

fn print_json(v: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn generate(a: GenerateArgs) -> Result<()> {
    let params = SyntheticParams {
        identities: a.identities,
        cameras: a.cameras,
        tracklets_per_identity_per_camera: CountDist::Fixed(a.tracklets_per_camera),
        images_per_tracklet: CountDist::Fixed(a.images_per_tracklet),
        dimension: a.dimension,
        within_id_std: a.within_std,
        cross_camera_shift_std: a.shift_std,
        seed: a.seed,
    };
    let m = generate_synthetic(&params)?;
    write_manifest(&m, &a.out)?;
    eprintln!("wrote {} tracklets ({} images) to {}", m.tracklet_count(), m.image_count(), a.out.display());
    Ok(())
}

fn run(a: RunArgs) -> Result<()> {
    let manifest = a.manifest.load()?;
    let truth = manifest.ground_truth().context("the simulated oracle needs identities in the manifest")?;
    let oracle = OracleMode::Simulated(SimulatedOracle::new(truth));
    let mut engine = if a.resume {
        let config = RunConfig::load(&a.out_dir.join("config.txt"))?;
        if config.seed != a.seed {
            bail!("--seed {} differs from the run's seed {}", a.seed, config.seed);
        }
        Engine::resume(&manifest, oracle, a.hook.build(&config, &a.out_dir), &a.out_dir)?
    } else {
        let config = a.config.build(Some(a.seed))?;
        let hook = a.hook.build(&config, &a.out_dir);
        Engine::new(&manifest, config, oracle, hook, Some(&a.out_dir))?
    };
    let stop = engine.run_to_end()?;
    let last = engine.history().last().cloned();
    print_json(&json!({
        "stop": stop,
        "iterations": engine.iteration(),
        "T_pa": engine.t_pa(),
        "final": last,
        "out_dir": a.out_dir,
    }))
}

fn serve(a: ServeArgs) -> Result<()> {
    let manifest = a.manifest.load()?;
    let queue = SharedQueue::new(Duration::from_secs(a.lease_secs));
    let shutdown = Arc::new(AtomicBool::new(false));
    let oracle = OracleMode::Human {
        queue: queue.clone(),
        shutdown: shutdown.clone(),
    };
    let mut engine = if a.resume {
        let config = RunConfig::load(&a.out_dir.join("config.txt"))?;
        Engine::resume(&manifest, oracle, a.hook.build(&config, &a.out_dir), &a.out_dir)?
    } else {
        let config = a.config.build(a.seed)?;
        let hook = a.hook.build(&config, &a.out_dir);
        Engine::new(&manifest, config, oracle, hook, Some(&a.out_dir))?
    };
    let view = ServiceView::shared(&manifest);
    engine.attach_view(view.clone());
    let worker = std::thread::spawn(move || engine.run_to_end());

    let state = AppState {
        view,
        queue: queue.clone(),
        token: a.token.map(Into::into),
    };
    let runtime = tokio::runtime::Runtime::new()?;
    let stop = shutdown.clone();
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(a.addr).await?;
        eprintln!("serving on http://{}", listener.local_addr()?);
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async move {
                let _ = tokio::signal::ctrl_c().await;
                stop.store(true, Ordering::SeqCst);
            })
            .await?;
        anyhow::Ok(())
    })?;
    shutdown.store(true, Ordering::SeqCst);
    queue.notify();
    match worker.join().expect("engine thread panicked") {
        Ok(reason) => eprintln!("run finished: {reason:?}"),
        Err(reid_annotate::run::RunError::Interrupted) => eprintln!("stopped; resume with --resume"),
        Err(e) => return Err(e.into()),
    }
    Ok(())
}

fn replay_cmd(a: ReplayArgs) -> Result<()> {
    let manifest = a.manifest.load()?;
    let config = a.config.build(None)?;
    let records = load_ledger(&a.ledger)?;
    let state = replay_ledger(&manifest.without_identities(), &records, &config, a.iterations)?;
    let c = state.counters();
    let truth = manifest.ground_truth();
    print_json(&json!({
        "records": records.len(),
        "manual": c.manual,
        "auto_positive": c.auto_positive,
        "auto_negative": c.auto_negative,
        "clusters": state.cluster_count(),
        "must_link": state.graph().must_link_count(),
        "cannot_link": state.graph().cannot_link_count(),
        "undecided": state.undecided_count(),
        "gained_TP_ratio": truth.as_ref().map(|g| gained_tp_ratio(&state, g)),
    }))
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let manifest = a.manifest.load()?;
    let truth = manifest.ground_truth().context("scoring needs identities in the manifest")?;
    let stripped = manifest.without_identities();
    let (features, stamp) = match &a.snapshot {
        Some(p) => {
            let s = read_snapshot(&stripped, p)?;
            (s.vectors, s.stamp)
        }
        None => (stripped.features(), 0),
    };
    let hash = stripped.with_features(&features).content_hash();
    let cached = match &a.cache {
        Some(p) if p.exists() => DistanceCache::read_file(p, &hash, stamp)?,
        _ => None,
    };
    let cache = match cached {
        Some(c) => c,
        None => {
            let c = DistanceCache::compute(&stripped, &features, a.k_dist, stamp)?;
            if let Some(p) = &a.cache {
                c.write_file(p, &hash)?;
            }
            c
        }
    };
    let all = stripped.tracklet_ids();
    let protocol = Protocol {
        exclude_same_camera: !a.include_same_camera,
    };
    let r = evaluate_reid_cached(&cache, &stripped, &truth, &all, &all, protocol)?;
    print_json(&json!({
        "rank1": r.rank(1),
        "rank5": r.rank(5),
        "rank10": r.rank(10),
        "rank20": r.rank(20),
        "mAP": r.map,
        "evaluated": r.evaluated,
        "skipped": r.skipped,
    }))
}

fn tpa(a: TpaArgs) -> Result<()> {
    let identities: Vec<u32> = match (&a.manifest, a.tracklets, a.identities) {
        (Some(p), _, _) => {
            let m = load_manifest_with(p, LoadOptions::default())?;
            m.ground_truth().context("the manifest has no identities")?.identities().to_vec()
        }
        (None, Some(c), Some(k)) if k >= 1 => (0..c).map(|i| (i % k) as u32).collect(),
        _ => bail!("give --manifest, or --tracklets with --identities"),
    };
    if a.runs == 0 {
        bail!("--runs must be at least 1");
    }
    let e = estimate_t_pa(&identities, a.runs, a.seed);
    print_json(&json!({
        "tracklets": identities.len(),
        "T_pa": e.mean,
        "std": e.std,
        "relative_std": e.relative_std(),
        "relative_error": e.relative_error(),
        "runs": a.runs,
    }))
}

fn compare_cmd(a: CompareArgs) -> Result<()> {
    let manifest = a.manifest.load()?;
    let config = a.config.build(Some(a.seed))?;
    let strategies: Vec<Strategy> = if a.strategies.is_empty() {
        Strategy::ALL.to_vec()
    } else {
        a.strategies.iter().map(|s| s.parse()).collect::<Result<_, _>>().map_err(anyhow::Error::msg)?
    };
    std::fs::create_dir_all(&a.out_dir)?;
    let out = compare(
        &manifest,
        &config,
        &strategies,
        &|c| Box::new(CentroidPull { alpha: c.refresh_alpha }),
        Some(&a.out_dir),
    )?;
    let summary: Vec<_> = out
        .iter()
        .map(|o| {
            json!({
                "strategy": o.strategy,
                "stop": o.stop,
                "iterations": o.history.len(),
                "manual_to_0.90": o.to_reach_90,
                "manual_to_0.95": o.to_reach_95,
                "manual_to_0.99": o.to_reach_99,
            })
        })
        .collect();
    print_json(&json!(summary))
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Generate(a) => generate(a),
        Command::Run(a) => run(a),
        Command::Serve(a) => serve(a),
        Command::Replay(a) => replay_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::EstimateTpa(a) => tpa(a),
        Command::Compare(a) => compare_cmd(a),
    }
}
