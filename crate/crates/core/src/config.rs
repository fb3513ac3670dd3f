//! Run configuration and its flat `key = value` text form.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys,
//! repeated keys and out-of-range values are errors.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sampler::SamplingSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    ViewAwareResample,
    ViewAwareOnly,
    MixedView,
    Random,
    KMeans,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::ViewAwareResample,
        Strategy::ViewAwareOnly,
        Strategy::MixedView,
        Strategy::Random,
        Strategy::KMeans,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::ViewAwareResample => "view_aware_resample",
            Strategy::ViewAwareOnly => "view_aware_only",
            Strategy::MixedView => "mixed_view",
            Strategy::Random => "random",
            Strategy::KMeans => "kmeans",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| format!("unknown strategy {s:?}"))
    }
}

/// Bandwidth of the propagation kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SigmaMode {
    /// Median of the squared pairwise distances of the current iteration.
    MedianSq,
    Fixed(f64),
}

impl fmt::Display for SigmaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SigmaMode::MedianSq => f.write_str("median_sq"),
            SigmaMode::Fixed(x) => write!(f, "{x}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub strategy: Strategy,
    /// Schedule counts; `None` derives them from the pool sizes.
    pub s1: Option<usize>,
    pub s2: Option<usize>,
    pub s3: Option<usize>,
    pub s4: Option<usize>,
    pub t0: u32,
    pub allow_schedule_override: bool,
    pub k_dist: usize,
    pub k_recip: usize,
    pub sigma: SigmaMode,
    pub dbscan_eps: f64,
    pub dbscan_min_pts: usize,
    pub prop_max_iters: usize,
    pub prop_tol: f64,
    pub refresh_alpha: f64,
    pub max_iterations: u32,
    pub stop_when_pools_exhausted: bool,
    pub seed: u64,
    /// Pairs per iteration for the random baseline; `None` spends what the
    /// view-aware schedule would.
    pub random_budget: Option<usize>,
    /// Cluster count for the k-means baseline; `None` uses `sqrt(C)`.
    pub kmeans_k: Option<usize>,
    /// Tracklets labeled per iteration by the k-means baseline; `None`
    /// uses `C / 20`.
    pub kmeans_per_iteration: Option<usize>,
    /// Monte-Carlo runs behind the annotation-ratio denominator.
    pub tpa_runs: usize,
    pub exclude_same_camera: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::ViewAwareResample,
            s1: None,
            s2: None,
            s3: None,
            s4: None,
            t0: 5,
            allow_schedule_override: false,
            k_dist: 3,
            k_recip: 5,
            sigma: SigmaMode::MedianSq,
            dbscan_eps: 0.01,
            dbscan_min_pts: 2,
            prop_max_iters: 50,
            prop_tol: 1e-6,
            refresh_alpha: 0.3,
            max_iterations: 200,
            stop_when_pools_exhausted: true,
            seed: 0,
            random_budget: None,
            kmeans_k: None,
            kmeans_per_iteration: None,
            tpa_runs: 10,
            exclude_same_camera: true,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key {key:?} given twice")]
    Duplicate { line: usize, key: String },
    #[error("{key} = {value:?}: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("reading config: {0}")]
    Io(String),
}

pub const KEYS: [&str; 23] = [
    "strategy",
    "s1",
    "s2",
    "s3",
    "s4",
    "t0",
    "allow_schedule_override",
    "k_dist",
    "k_recip",
    "sigma",
    "dbscan_eps",
    "dbscan_min_pts",
    "prop_max_iters",
    "prop_tol",
    "refresh_alpha",
    "max_iterations",
    "stop_when_pools_exhausted",
    "seed",
    "random_budget",
    "kmeans_k",
    "kmeans_per_iteration",
    "tpa_runs",
    "exclude_same_camera",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn parse_auto<T: FromStr>(key: &str, value: &str) -> Result<Option<T>, ConfigError>
where
    T::Err: fmt::Display,
{
    if value == "auto" { Ok(None) } else { parse(key, value).map(Some) }
}

fn auto_str<T: fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "auto".to_string(), T::to_string)
}

impl RunConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "strategy" => self.strategy = parse(key, v)?,
            "s1" => self.s1 = parse_auto(key, v)?,
            "s2" => self.s2 = parse_auto(key, v)?,
            "s3" => self.s3 = parse_auto(key, v)?,
            "s4" => self.s4 = parse_auto(key, v)?,
            "t0" => self.t0 = parse(key, v)?,
            "allow_schedule_override" => self.allow_schedule_override = parse(key, v)?,
            "k_dist" => self.k_dist = parse(key, v)?,
            "k_recip" => self.k_recip = parse(key, v)?,
            "sigma" => {
                self.sigma = if v == "median_sq" {
                    SigmaMode::MedianSq
                } else {
                    SigmaMode::Fixed(parse(key, v)?)
                }
            }
            "dbscan_eps" => self.dbscan_eps = parse(key, v)?,
            "dbscan_min_pts" => self.dbscan_min_pts = parse(key, v)?,
            "prop_max_iters" => self.prop_max_iters = parse(key, v)?,
            "prop_tol" => self.prop_tol = parse(key, v)?,
            "refresh_alpha" => self.refresh_alpha = parse(key, v)?,
            "max_iterations" => self.max_iterations = parse(key, v)?,
            "stop_when_pools_exhausted" => self.stop_when_pools_exhausted = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "random_budget" => self.random_budget = parse_auto(key, v)?,
            "kmeans_k" => self.kmeans_k = parse_auto(key, v)?,
            "kmeans_per_iteration" => self.kmeans_per_iteration = parse_auto(key, v)?,
            "tpa_runs" => self.tpa_runs = parse(key, v)?,
            "exclude_same_camera" => self.exclude_same_camera = parse(key, v)?,
            _ => {
                return Err(ConfigError::UnknownKey {
                    line: 0,
                    key: key.into(),
                });
            }
        }
        Ok(())
    }

    /// Text form of one key.
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "strategy" => self.strategy.to_string(),
            "s1" => auto_str(&self.s1),
            "s2" => auto_str(&self.s2),
            "s3" => auto_str(&self.s3),
            "s4" => auto_str(&self.s4),
            "t0" => self.t0.to_string(),
            "allow_schedule_override" => self.allow_schedule_override.to_string(),
            "k_dist" => self.k_dist.to_string(),
            "k_recip" => self.k_recip.to_string(),
            "sigma" => self.sigma.to_string(),
            "dbscan_eps" => self.dbscan_eps.to_string(),
            "dbscan_min_pts" => self.dbscan_min_pts.to_string(),
            "prop_max_iters" => self.prop_max_iters.to_string(),
            "prop_tol" => self.prop_tol.to_string(),
            "refresh_alpha" => self.refresh_alpha.to_string(),
            "max_iterations" => self.max_iterations.to_string(),
            "stop_when_pools_exhausted" => self.stop_when_pools_exhausted.to_string(),
            "seed" => self.seed.to_string(),
            "random_budget" => auto_str(&self.random_budget),
            "kmeans_k" => auto_str(&self.kmeans_k),
            "kmeans_per_iteration" => auto_str(&self.kmeans_per_iteration),
            "tpa_runs" => self.tpa_runs.to_string(),
            "exclude_same_camera" => self.exclude_same_camera.to_string(),
            _ => return None,
        })
    }

    pub fn to_kv_string(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&self.get(key).expect("listed key"));
            out.push('\n');
        }
        out
    }

    /// Parses a config document over the defaults and validates it.
    pub fn from_kv_str(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or(ConfigError::Syntax { line })?;
            let key = key.trim();
            if !KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey { line, key: key.into() });
            }
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::Duplicate { line, key: key.into() });
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        Self::from_kv_str(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: &str| Err(ConfigError::Invalid(msg.into()));
        if self.t0 == 0 {
            return bad("t0 must be at least 1");
        }
        if self.k_dist == 0 || self.k_recip == 0 {
            return bad("k_dist and k_recip must be at least 1");
        }
        if let SigmaMode::Fixed(s) = self.sigma {
            if !(s > 0.0 && s.is_finite()) {
                return bad("sigma must be positive");
            }
        }
        // merge distances are 0 or 1, so eps must separate them
        if !(self.dbscan_eps >= 0.0 && self.dbscan_eps < 1.0) {
            return bad("dbscan_eps must lie in [0, 1)");
        }
        if !(1..=2).contains(&self.dbscan_min_pts) {
            return bad("dbscan_min_pts must be 1 or 2");
        }
        if self.prop_max_iters == 0 {
            return bad("prop_max_iters must be at least 1");
        }
        if !(self.prop_tol >= 0.0 && self.prop_tol.is_finite()) {
            return bad("prop_tol must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.refresh_alpha) {
            return bad("refresh_alpha must lie in [0, 1]");
        }
        if self.max_iterations == 0 {
            return bad("max_iterations must be at least 1");
        }
        if self.tpa_runs == 0 {
            return bad("tpa_runs must be at least 1");
        }
        if self.random_budget == Some(0) || self.kmeans_k == Some(0) || self.kmeans_per_iteration == Some(0) {
            return bad("explicit budgets must be positive");
        }
        if let (Some(s1), Some(s2), Some(s3), Some(s4)) = (self.s1, self.s2, self.s3, self.s4) {
            SamplingSchedule { s1, s2, s3, s4, t0: self.t0 }
                .validate(self.allow_schedule_override)
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        Ok(())
    }

    /// The schedule for pools of the given sizes: explicit counts where
    /// set, size-relative defaults elsewhere.
    pub fn schedule(&self, same_view_pairs: usize, cross_view_pairs: usize) -> SamplingSchedule {
        let d = SamplingSchedule::scaled(same_view_pairs, cross_view_pairs);
        SamplingSchedule {
            s1: self.s1.unwrap_or(d.s1),
            s2: self.s2.unwrap_or(d.s2),
            s3: self.s3.unwrap_or(d.s3),
            s4: self.s4.unwrap_or(d.s4),
            t0: self.t0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, proptest, prop_assert_eq};
    use proptest::strategy::Strategy as _;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_kv_str(&c.to_kv_string()).unwrap(), c);
        assert_eq!(RunConfig::from_kv_str("").unwrap(), c);
    }

    #[test]
    fn errors_name_the_line() {
        assert_eq!(
            RunConfig::from_kv_str("# hi\nk_dsit = 3\n"),
            Err(ConfigError::UnknownKey { line: 2, key: "k_dsit".into() })
        );
        assert_eq!(RunConfig::from_kv_str("seed\n"), Err(ConfigError::Syntax { line: 1 }));
        assert_eq!(
            RunConfig::from_kv_str("seed = 1\nseed = 2\n"),
            Err(ConfigError::Duplicate { line: 2, key: "seed".into() })
        );
        assert!(matches!(RunConfig::from_kv_str("k_dist = three"), Err(ConfigError::BadValue { .. })));
        assert!(matches!(RunConfig::from_kv_str("strategy = best"), Err(ConfigError::BadValue { .. })));
        assert!(matches!(RunConfig::from_kv_str("dbscan_eps = 1.5"), Err(ConfigError::Invalid(_))));
        assert!(matches!(RunConfig::from_kv_str("sigma = -1"), Err(ConfigError::Invalid(_))));
        assert!(matches!(RunConfig::from_kv_str("refresh_alpha = 2"), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn explicit_schedule_is_checked() {
        let inverted = "s1 = 1\ns2 = 5\ns3 = 9\ns4 = 2\n";
        assert!(matches!(RunConfig::from_kv_str(inverted), Err(ConfigError::Invalid(_))));
        let forced = format!("{inverted}allow_schedule_override = true\n");
        let c = RunConfig::from_kv_str(&forced).unwrap();
        assert_eq!(c.schedule(100, 100).s3, 9);
    }

    #[test]
    fn auto_schedule_scales_with_pools() {
        let s = RunConfig::default().schedule(159_600, 160_000);
        assert_eq!((s.s1, s.s2, s.s3, s.s4, s.t0), (319, 159, 80, 320, 5));
    }

    fn arb_config() -> impl proptest::strategy::Strategy<Value = RunConfig> {
        let opt = || proptest::option::of(1usize..10_000);
        (
            (0usize..5, opt(), opt(), opt(), opt(), 1u32..50),
            (1usize..20, 1usize..20, proptest::option::of(1e-6f64..1e6), 0.0f64..0.999, 1usize..=2),
            (1usize..200, 0.0f64..1.0, 0.0f64..=1.0, 1u32..10_000, any::<bool>(), any::<u64>()),
            (opt(), opt(), opt(), 1usize..100, any::<bool>()),
        )
            .prop_map(|(a, b, c, d)| RunConfig {
                strategy: Strategy::ALL[a.0],
                s1: a.1,
                s2: a.2,
                s3: a.3,
                s4: a.4,
                t0: a.5,
                allow_schedule_override: true,
                k_dist: b.0,
                k_recip: b.1,
                sigma: b.2.map_or(SigmaMode::MedianSq, SigmaMode::Fixed),
                dbscan_eps: b.3,
                dbscan_min_pts: b.4,
                prop_max_iters: c.0,
                prop_tol: c.1,
                refresh_alpha: c.2,
                max_iterations: c.3,
                stop_when_pools_exhausted: c.4,
                seed: c.5,
                random_budget: d.0,
                kmeans_k: d.1,
                kmeans_per_iteration: d.2,
                tpa_runs: d.3,
                exclude_same_camera: d.4,
            })
    }

    proptest! {
        #[test]
        fn text_form_is_lossless(c in arb_config()) {
            let text = c.to_kv_string();
            prop_assert_eq!(RunConfig::from_kv_str(&text).unwrap(), c);
        }
    }
}
