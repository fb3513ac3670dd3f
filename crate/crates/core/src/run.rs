//! The iterative loop. Each iteration refreshes the embedding, rebuilds the
//! distance pools, selects a batch, screens it (resampling strategy only),
//! collects verdicts, closes them over the constraint graph, merges
//! pseudo-labels and scores the result.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig, SigmaMode, Strategy};
use crate::dataset::{DatasetManifest, GroundTruth};
use crate::eval::{Protocol, annotations_to_reach, budget_report, estimate_t_pa, evaluate_reid_cached};
use crate::kmeans::KMeansError;
use crate::labels::{LabelError, LabelState, Verdict};
use crate::ledger::{AnnotationLedger, Clock, LedgerError, LedgerRecord, replay};
use crate::metric::{DistanceCache, DistancePools, MetricError, PairKey, PoolEntry, build_distance_pools};
use crate::model_hook::{EmbeddingSnapshot, HookError, ModelHook, read_snapshot, write_snapshot};
use crate::oracle::{OracleError, SharedQueue, SimulatedOracle};
use crate::resample::{NeighborTable, ResampleError, build_transition, propagate};
use crate::sampler::{
    CandidateBatch, ScheduleError, SamplingSchedule, identity_queries, select_kmeans, select_mixed, select_random,
    select_view_aware,
};
use crate::server::{ServiceView, SharedView};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Hook(#[from] HookError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Resample(#[from] ResampleError),
    #[error(transparent)]
    KMeans(#[from] KMeansError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("the simulated oracle needs ground-truth identities in the manifest")]
    NoGroundTruth,
    #[error("cannot resume: {0}")]
    Resume(String),
    #[error("interrupted")]
    Interrupted,
}

/// One line of the metrics export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: u32,
    pub tp_manual: u64,
    pub auto_count: u64,
    #[serde(rename = "AR")]
    pub ar: Option<f64>,
    #[serde(rename = "gained_TP_ratio")]
    pub gained_tp_ratio: Option<f64>,
    pub rank1: Option<f64>,
    pub rank5: Option<f64>,
    pub rank10: Option<f64>,
    pub rank20: Option<f64>,
    #[serde(rename = "mAP")]
    pub map: Option<f64>,
}

pub const CSV_HEADER: &str = "iteration,tp_manual,auto_count,AR,gained_TP_ratio,rank1,rank5,rank10,rank20,mAP";

fn opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.iteration,
            self.tp_manual,
            self.auto_count,
            opt(self.ar),
            opt(self.gained_tp_ratio),
            opt(self.rank1),
            opt(self.rank5),
            opt(self.rank10),
            opt(self.rank20),
            opt(self.map)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIterations,
    PoolsExhausted,
    NoGain,
}

/// Where verdicts come from.
pub enum OracleMode {
    Simulated(SimulatedOracle),
    /// Verdicts arrive through the shared queue; setting `shutdown` makes a
    /// waiting iteration return [`RunError::Interrupted`].
    Human { queue: SharedQueue, shutdown: Arc<AtomicBool> },
}

/// A human verdict that contradicted the constraint graph. It is not
/// applied; it waits for review.
#[derive(Debug, Clone, PartialEq)]
pub struct Conflict {
    pub iteration: u32,
    pub pair: PairKey,
    pub verdict: Verdict,
    pub existing: Verdict,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationReport {
    pub record: MetricsRecord,
    /// Pairs in the batch handed to the oracle.
    pub selected: usize,
    /// Batch pairs removed by the reciprocal screen.
    pub screened_out: usize,
    /// Queries actually answered and applied.
    pub asked: usize,
    /// Batch pairs already decided by earlier answers in the same batch.
    pub skipped: usize,
    /// Newly decided pairs, manual and automatic.
    pub gained: usize,
    pub stop: Option<StopReason>,
}

#[derive(Serialize, Deserialize)]
struct StateFile {
    iteration: u32,
    zero_gain_streak: u32,
    stopped: Option<StopReason>,
    kmeans_labeled: Vec<usize>,
    t_pa: Option<f64>,
    snapshot: String,
    manifest_hash: String,
}

const CONFIG_FILE: &str = "config.txt";
const LEDGER_FILE: &str = "ledger.jsonl";
const METRICS_FILE: &str = "metrics.jsonl";
const TABLE_FILE: &str = "metrics.csv";
const STATE_FILE: &str = "run_state.json";

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent seed per (run seed, iteration, purpose).
pub fn derive_seed(seed: u64, iteration: u32, salt: u64) -> u64 {
    splitmix(seed ^ splitmix(((iteration as u64) << 8) | salt))
}

const SALT_SELECT: u64 = 1;
const SALT_KMEANS: u64 = 2;
const SALT_TPA: u64 = 3;

/// The annotation engine for one run.
pub struct Engine {
    manifest: DatasetManifest,
    truth: Option<GroundTruth>,
    config: RunConfig,
    hook: Box<dyn ModelHook>,
    oracle: OracleMode,
    ledger: AnnotationLedger,
    out: Option<PathBuf>,
    labels: LabelState,
    snapshot: EmbeddingSnapshot,
    iteration: u32,
    history: Vec<MetricsRecord>,
    kmeans_labeled: BTreeSet<usize>,
    zero_gain_streak: u32,
    stopped: Option<StopReason>,
    t_pa: Option<f64>,
    review: Vec<Conflict>,
    cache: Option<Arc<DistanceCache>>,
    view: Option<SharedView>,
    generation: u64,
}

impl Engine {
    /// Starts a fresh run. With `out_dir`, the directory receives the
    /// config, ledger, metrics and snapshots, and existing run files in it
    /// are replaced.
    pub fn new(
        manifest: &DatasetManifest,
        config: RunConfig,
        oracle: OracleMode,
        hook: Box<dyn ModelHook>,
        out_dir: Option<&Path>,
    ) -> Result<Self, RunError> {
        config.validate()?;
        let truth = manifest.ground_truth();
        if matches!(oracle, OracleMode::Simulated(_)) && truth.is_none() {
            return Err(RunError::NoGroundTruth);
        }
        let clock = match oracle {
            OracleMode::Simulated(_) => Clock::Zero,
            OracleMode::Human { .. } => Clock::Wall,
        };
        let ledger = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                std::fs::write(dir.join(CONFIG_FILE), config.to_kv_string())?;
                File::create(dir.join(METRICS_FILE))?;
                std::fs::write(dir.join(TABLE_FILE), format!("{CSV_HEADER}\n"))?;
                AnnotationLedger::create(&dir.join(LEDGER_FILE))?
            }
            None => AnnotationLedger::in_memory(),
        }
        .with_clock(clock);
        let t_pa = truth
            .as_ref()
            .map(|g| estimate_t_pa(g.identities(), config.tpa_runs, derive_seed(config.seed, 0, SALT_TPA)).mean);
        let stripped = manifest.without_identities();
        let engine = Self {
            labels: LabelState::init(&stripped),
            snapshot: EmbeddingSnapshot::initial(&stripped),
            manifest: stripped,
            truth,
            config,
            hook,
            oracle,
            ledger,
            out: out_dir.map(Path::to_path_buf),
            iteration: 0,
            history: Vec::new(),
            kmeans_labeled: BTreeSet::new(),
            zero_gain_streak: 0,
            stopped: None,
            t_pa,
            review: Vec::new(),
            cache: None,
            view: None,
            generation: 0,
        };
        if let Some(dir) = &engine.out {
            write_snapshot(&engine.manifest, &engine.snapshot, &dir.join(snapshot_name(0)))?;
            engine.write_state()?;
        }
        Ok(engine)
    }

    /// Continues a run from its output directory: the config is read back,
    /// the ledger is cut at the last completed iteration and replayed, and
    /// the embedding is loaded from that iteration's snapshot.
    pub fn resume(
        manifest: &DatasetManifest,
        oracle: OracleMode,
        hook: Box<dyn ModelHook>,
        out_dir: &Path,
    ) -> Result<Self, RunError> {
        let config = RunConfig::load(&out_dir.join(CONFIG_FILE))?;
        let state: StateFile = serde_json::from_str(&std::fs::read_to_string(out_dir.join(STATE_FILE))?)
            .map_err(|e| RunError::Resume(format!("{STATE_FILE}: {e}")))?;
        if state.manifest_hash != hex(&manifest.without_identities().content_hash()) {
            return Err(RunError::Resume("the manifest differs from the one this run started with".into()));
        }
        let stripped = manifest.without_identities();
        let snapshot = read_snapshot(&stripped, &out_dir.join(&state.snapshot))?;
        let clock = match oracle {
            OracleMode::Simulated(_) => Clock::Zero,
            OracleMode::Human { .. } => Clock::Wall,
        };
        let ledger = AnnotationLedger::resume(&out_dir.join(LEDGER_FILE), state.iteration)?.with_clock(clock);
        let mut labels = LabelState::init(&stripped);
        replay(&mut labels, ledger.records(), state.iteration, config.dbscan_eps, config.dbscan_min_pts)?;
        let history = read_metrics(&out_dir.join(METRICS_FILE))?
            .into_iter()
            .take_while(|r| r.iteration <= state.iteration)
            .collect::<Vec<_>>();
        if history.len() != state.iteration as usize {
            return Err(RunError::Resume(format!(
                "{METRICS_FILE} holds {} iterations, the run state says {}",
                history.len(),
                state.iteration
            )));
        }
        if let Some(last) = history.last() {
            if last.tp_manual != labels.counters().manual {
                return Err(RunError::Resume("the ledger does not reproduce the recorded manual count".into()));
            }
        }
        let engine = Self {
            truth: manifest.ground_truth(),
            manifest: stripped,
            config,
            hook,
            oracle,
            ledger,
            out: Some(out_dir.to_path_buf()),
            labels,
            snapshot,
            iteration: state.iteration,
            history,
            kmeans_labeled: state.kmeans_labeled.into_iter().collect(),
            zero_gain_streak: state.zero_gain_streak,
            stopped: state.stopped,
            t_pa: state.t_pa,
            review: Vec::new(),
            cache: None,
            view: None,
            generation: 0,
        };
        engine.write_metrics_files()?;
        Ok(engine)
    }

    pub fn attach_view(&mut self, view: SharedView) {
        self.view = Some(view);
        self.publish();
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn labels(&self) -> &LabelState {
        &self.labels
    }

    pub fn snapshot(&self) -> &EmbeddingSnapshot {
        &self.snapshot
    }

    pub fn iteration(&self) -> u32 {
        self.iteration
    }

    pub fn history(&self) -> &[MetricsRecord] {
        &self.history
    }

    pub fn ledger(&self) -> &[LedgerRecord] {
        self.ledger.records()
    }

    pub fn truth(&self) -> Option<&GroundTruth> {
        self.truth.as_ref()
    }

    pub fn t_pa(&self) -> Option<f64> {
        self.t_pa
    }

    pub fn stopped(&self) -> Option<StopReason> {
        self.stopped
    }

    pub fn review_queue(&self) -> &[Conflict] {
        &self.review
    }

    /// Runs iterations until a stopping rule fires.
    pub fn run_to_end(&mut self) -> Result<StopReason, RunError> {
        loop {
            if let Some(reason) = self.stopped {
                return Ok(reason);
            }
            self.step()?;
        }
    }

    /// Runs one iteration, or records exhaustion without running one.
    pub fn step(&mut self) -> Result<IterationReport, RunError> {
        if let Some(reason) = self.stopped {
            return Err(RunError::Resume(format!("the run has already stopped ({reason:?})")));
        }
        let t = self.iteration + 1;
        let snapshot = self.hook.refresh(&self.manifest, &self.snapshot, &self.labels)?;
        let pools = build_distance_pools(&self.manifest, &snapshot.vectors, self.config.k_dist, snapshot.stamp)?;
        self.cache = Some(Arc::new(pools.cache.clone()));
        let (batch, screened_out) = self.select(t, &pools, &snapshot)?;
        let decided_before = self.labels.graph().decided_count();
        let (asked, skipped) = match &self.oracle {
            OracleMode::Simulated(_) => self.answer_simulated(t, &batch)?,
            OracleMode::Human { .. } => self.answer_human(t, &batch)?,
        };
        self.labels.merge_labels(self.config.dbscan_eps, self.config.dbscan_min_pts);
        let gained = self.labels.graph().decided_count() - decided_before;
        self.snapshot = snapshot;
        self.iteration = t;
        let record = self.score(t, &pools);
        self.history.push(record.clone());

        self.zero_gain_streak = if gained == 0 { self.zero_gain_streak + 1 } else { 0 };
        self.stopped = if self.labels.undecided_count() == 0 && self.config.stop_when_pools_exhausted {
            Some(StopReason::PoolsExhausted)
        } else if self.zero_gain_streak >= 2 {
            Some(StopReason::NoGain)
        } else if t >= self.config.max_iterations {
            Some(StopReason::MaxIterations)
        } else {
            None
        };
        self.persist()?;
        self.publish();
        tracing::info!(
            iteration = t,
            selected = batch.len(),
            asked,
            gained,
            clusters = self.labels.cluster_count(),
            "iteration done"
        );
        Ok(IterationReport {
            record,
            selected: batch.len(),
            screened_out,
            asked,
            skipped,
            gained,
            stop: self.stopped,
        })
    }

    fn select(
        &mut self,
        t: u32,
        pools: &DistancePools,
        snapshot: &EmbeddingSnapshot,
    ) -> Result<(CandidateBatch, usize), RunError> {
        let schedule = self.config.schedule(pools.same_view.len(), pools.cross_view.len());
        let seed = derive_seed(self.config.seed, t, SALT_SELECT);
        Ok(match self.config.strategy {
            Strategy::ViewAwareOnly => (select_view_aware(pools, &self.labels, t, &schedule)?, 0),
            Strategy::MixedView => (select_mixed(pools, &self.labels, t, &schedule)?, 0),
            Strategy::ViewAwareResample => self.select_screened(t, pools, &schedule)?,
            Strategy::Random => {
                let (m1, m2) = schedule.counts(t)?;
                let budget = self.config.random_budget.unwrap_or(m1 + m2);
                (select_random(&pools.cache, &self.labels, budget, t, seed), 0)
            }
            Strategy::KMeans => {
                let c = self.manifest.tracklet_count();
                let k = self.config.kmeans_k.unwrap_or_else(|| ((c as f64).sqrt().round() as usize).max(1)).min(c);
                let per = self.config.kmeans_per_iteration.unwrap_or((c / 20).max(1));
                let chosen = select_kmeans(
                    &self.manifest,
                    &snapshot.vectors,
                    &self.kmeans_labeled,
                    k,
                    per,
                    derive_seed(self.config.seed, t, SALT_KMEANS),
                )?;
                (identity_queries(&chosen, &mut self.kmeans_labeled, &self.labels, &pools.cache, t), 0)
            }
        })
    }

    /// View-aware selection through the reciprocal screen. Screened-out
    /// pairs stay undecided and come back next iteration. If nothing
    /// passes, the unscreened batch is used.
    fn select_screened(
        &self,
        t: u32,
        pools: &DistancePools,
        schedule: &SamplingSchedule,
    ) -> Result<(CandidateBatch, usize), RunError> {
        let batch = select_view_aware(pools, &self.labels, t, schedule)?;
        let sigma = match self.config.sigma {
            SigmaMode::MedianSq => pools.cache.median_squared(),
            SigmaMode::Fixed(s) => s,
        };
        let sigma = if sigma > 0.0 { sigma } else { f64::MIN_POSITIVE };
        let transition = build_transition(&pools.cache, sigma)?;
        let soft = propagate(&transition, &self.labels, self.config.prop_max_iters, self.config.prop_tol)?;
        let kept = NeighborTable::new(&soft, self.config.k_recip).filter(&batch);
        let out = batch.len() - kept.len();
        if kept.is_empty() {
            return Ok((batch, out));
        }
        Ok((kept, out))
    }

    fn apply(&mut self, t: u32, pair: &PairKey, verdict: Verdict) -> Result<bool, RunError> {
        match self.labels.apply_annotation(pair, verdict) {
            Ok(auto) => {
                self.ledger.record(t, pair, verdict, &auto)?;
                Ok(true)
            }
            Err(LabelError::AlreadyKnown { .. }) => Ok(false),
            Err(LabelError::Contradiction { existing, .. }) => {
                tracing::warn!(%pair, ?verdict, ?existing, "verdict contradicts known constraints; parked for review");
                self.review.push(Conflict {
                    iteration: t,
                    pair: *pair,
                    verdict,
                    existing,
                });
                Ok(false)
            }
            Err(e) => Err(e.into()),
        }
    }

    fn answer_simulated(&mut self, t: u32, batch: &CandidateBatch) -> Result<(usize, usize), RunError> {
        let (mut asked, mut skipped) = (0, 0);
        for e in &batch.pairs {
            if self.labels.is_decided_at(e.a_index as usize, e.b_index as usize) {
                skipped += 1;
                continue;
            }
            let OracleMode::Simulated(oracle) = &self.oracle else {
                unreachable!("simulated oracle")
            };
            let v = oracle.answer(&e.pair)?;
            self.apply(t, &e.pair, v.verdict)?;
            asked += 1;
        }
        Ok((asked, skipped))
    }

    fn answer_human(&mut self, t: u32, batch: &CandidateBatch) -> Result<(usize, usize), RunError> {
        let OracleMode::Human { queue, shutdown } = &self.oracle else {
            unreachable!("human oracle")
        };
        let (queue, shutdown) = (queue.clone(), shutdown.clone());
        let fresh: Vec<PoolEntry> = batch
            .pairs
            .iter()
            .filter(|e| !self.labels.is_decided_at(e.a_index as usize, e.b_index as usize))
            .copied()
            .collect();
        let skipped = batch.len() - fresh.len();
        queue.lock().enqueue(&CandidateBatch::new(t, fresh));
        self.publish();
        let mut asked = 0;
        loop {
            if shutdown.load(Ordering::SeqCst) {
                return Err(RunError::Interrupted);
            }
            match queue.wait_verdict(Duration::from_millis(100)) {
                Some(v) => {
                    if self.apply(t, &v.pair, v.verdict)? {
                        asked += 1;
                    }
                    let labels = &self.labels;
                    queue.lock().prune(|p| labels.is_decided(p));
                    self.publish();
                }
                None => {
                    if queue.lock().is_idle() {
                        break;
                    }
                }
            }
        }
        Ok((asked, skipped))
    }

    fn score(&self, t: u32, pools: &DistancePools) -> MetricsRecord {
        let budget = budget_report(&self.labels, self.truth.as_ref(), self.t_pa);
        let reid = self.truth.as_ref().and_then(|g| {
            let all = self.manifest.tracklet_ids();
            let protocol = Protocol {
                exclude_same_camera: self.config.exclude_same_camera,
            };
            evaluate_reid_cached(&pools.cache, &self.manifest, g, &all, &all, protocol).ok()
        });
        MetricsRecord {
            iteration: t,
            tp_manual: budget.tp_manual,
            auto_count: budget.auto_count,
            ar: budget.ar,
            gained_tp_ratio: budget.gained_tp_ratio,
            rank1: reid.as_ref().map(|r| r.rank(1)),
            rank5: reid.as_ref().map(|r| r.rank(5)),
            rank10: reid.as_ref().map(|r| r.rank(10)),
            rank20: reid.as_ref().map(|r| r.rank(20)),
            map: reid.as_ref().map(|r| r.map),
        }
    }

    fn write_state(&self) -> Result<(), RunError> {
        let Some(dir) = &self.out else { return Ok(()) };
        let state = StateFile {
            iteration: self.iteration,
            zero_gain_streak: self.zero_gain_streak,
            stopped: self.stopped,
            kmeans_labeled: self.kmeans_labeled.iter().copied().collect(),
            t_pa: self.t_pa,
            snapshot: snapshot_name(self.iteration),
            manifest_hash: hex(&self.manifest.content_hash()),
        };
        let tmp = dir.join(format!("{STATE_FILE}.tmp"));
        std::fs::write(&tmp, serde_json::to_string_pretty(&state).map_err(std::io::Error::from)?)?;
        std::fs::rename(&tmp, dir.join(STATE_FILE))?;
        Ok(())
    }

    fn write_metrics_files(&self) -> Result<(), RunError> {
        let Some(dir) = &self.out else { return Ok(()) };
        let mut jsonl = String::new();
        let mut csv = format!("{CSV_HEADER}\n");
        for r in &self.history {
            jsonl.push_str(&serde_json::to_string(r).map_err(std::io::Error::from)?);
            jsonl.push('\n');
            csv.push_str(&r.csv_row());
            csv.push('\n');
        }
        std::fs::write(dir.join(METRICS_FILE), jsonl)?;
        std::fs::write(dir.join(TABLE_FILE), csv)?;
        Ok(())
    }

    /// Snapshot first, then metrics, then the run state that points at
    /// both; the previous snapshot goes last.
    fn persist(&self) -> Result<(), RunError> {
        let Some(dir) = &self.out else { return Ok(()) };
        write_snapshot(&self.manifest, &self.snapshot, &dir.join(snapshot_name(self.iteration)))?;
        let record = self.history.last().expect("an iteration was recorded");
        let mut f = std::fs::OpenOptions::new().append(true).open(dir.join(METRICS_FILE))?;
        writeln!(f, "{}", serde_json::to_string(record).map_err(std::io::Error::from)?)?;
        f.sync_data()?;
        let mut f = std::fs::OpenOptions::new().append(true).open(dir.join(TABLE_FILE))?;
        writeln!(f, "{}", record.csv_row())?;
        self.write_state()?;
        let old = dir.join(snapshot_name(self.iteration - 1));
        if old.exists() {
            std::fs::remove_file(old)?;
        }
        Ok(())
    }

    fn publish(&mut self) {
        let Some(view) = &self.view else { return };
        self.generation += 1;
        let budget = budget_report(&self.labels, self.truth.as_ref(), self.t_pa);
        let mut v = view.write().expect("view lock poisoned");
        *v = ServiceView {
            generation: self.generation,
            iteration: self.iteration,
            manifest: v.manifest.clone(),
            labels: Arc::new(self.labels.clone()),
            cache: self.cache.clone(),
            budget,
            history: self.history.clone(),
            stopped: self.stopped,
            review: self.review.len(),
        };
    }
}

fn snapshot_name(iteration: u32) -> String {
    format!("snapshot-{iteration}.jsonl")
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>, RunError> {
    let mut out = Vec::new();
    for (n, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(r) => out.push(r),
            Err(e) if e.is_eof() => break,
            Err(e) => return Err(RunError::Resume(format!("{}:{}: {e}", path.display(), n + 1))),
        }
    }
    Ok(out)
}

/// Rebuilds label state from a ledger: the state after `iterations`
/// iterations (all recorded ones when `None`).
pub fn replay_ledger(
    manifest: &DatasetManifest,
    records: &[LedgerRecord],
    config: &RunConfig,
    iterations: Option<u32>,
) -> Result<LabelState, RunError> {
    let last = iterations.unwrap_or_else(|| records.iter().map(|r| r.iteration).max().unwrap_or(0));
    let mut state = LabelState::init(manifest);
    replay(&mut state, records, last, config.dbscan_eps, config.dbscan_min_pts)?;
    Ok(state)
}

/// One strategy's outcome in a comparison.
#[derive(Debug, Clone, Serialize)]
pub struct StrategyOutcome {
    pub strategy: Strategy,
    pub stop: StopReason,
    pub history: Vec<MetricsRecord>,
    /// Manual annotations spent when the gained-TP ratio first reached
    /// 0.90, 0.95 and 0.99.
    pub to_reach_90: Option<u64>,
    pub to_reach_95: Option<u64>,
    pub to_reach_99: Option<u64>,
}

/// Runs each strategy on the same manifest with the same seed. With
/// `out_dir`, each run writes to a subdirectory named after the strategy
/// and a wide table of all curves goes to `compare.csv`.
pub fn compare(
    manifest: &DatasetManifest,
    base: &RunConfig,
    strategies: &[Strategy],
    make_hook: &dyn Fn(&RunConfig) -> Box<dyn ModelHook>,
    out_dir: Option<&Path>,
) -> Result<Vec<StrategyOutcome>, RunError> {
    let truth = manifest.ground_truth().ok_or(RunError::NoGroundTruth)?;
    let mut outcomes = Vec::new();
    for &strategy in strategies {
        let config = RunConfig {
            strategy,
            ..base.clone()
        };
        let dir = out_dir.map(|d| d.join(strategy.name()));
        let mut engine = Engine::new(
            manifest,
            config.clone(),
            OracleMode::Simulated(SimulatedOracle::new(truth.clone())),
            make_hook(&config),
            dir.as_deref(),
        )?;
        let stop = engine.run_to_end()?;
        let ledger = engine.ledger();
        outcomes.push(StrategyOutcome {
            strategy,
            stop,
            history: engine.history().to_vec(),
            to_reach_90: annotations_to_reach(ledger, &truth, 0.90),
            to_reach_95: annotations_to_reach(ledger, &truth, 0.95),
            to_reach_99: annotations_to_reach(ledger, &truth, 0.99),
        });
    }
    if let Some(dir) = out_dir {
        std::fs::write(dir.join("compare.csv"), compare_table(&outcomes))?;
        std::fs::write(
            dir.join("summary.json"),
            serde_json::to_string_pretty(&outcomes).map_err(std::io::Error::from)?,
        )?;
    }
    Ok(outcomes)
}

/// Wide table: one row per iteration, five columns per strategy.
pub fn compare_table(outcomes: &[StrategyOutcome]) -> String {
    let mut out = String::from("iteration");
    for o in outcomes {
        for col in ["tp_manual", "AR", "gained_TP_ratio", "rank1", "mAP"] {
            out.push_str(&format!(",{}_{col}", o.strategy));
        }
    }
    out.push('\n');
    let rows = outcomes.iter().map(|o| o.history.len()).max().unwrap_or(0);
    for i in 0..rows {
        out.push_str(&(i + 1).to_string());
        for o in outcomes {
            match o.history.get(i) {
                Some(r) => out.push_str(&format!(
                    ",{},{},{},{},{}",
                    r.tp_manual,
                    opt(r.ar),
                    opt(r.gained_tp_ratio),
                    opt(r.rank1),
                    opt(r.map)
                )),
                None => out.push_str(",,,,,"),
            }
        }
        out.push('\n');
    }
    out
}
