//! Answers to pair queries: simulated from ground truth, or collected from
//! human annotators through a shared queue.

use std::collections::{HashSet, VecDeque};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::GroundTruth;
use crate::labels::Verdict;
use crate::metric::{PairKey, PoolEntry};
use crate::sampler::CandidateBatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VerdictSource {
    Simulated,
    Human,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OracleVerdict {
    pub pair: PairKey,
    pub verdict: Verdict,
    pub latency: Duration,
    pub source: VerdictSource,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OracleError {
    #[error("no ground-truth identity for tracklet {0}")]
    MissingTruth(u32),
}

/// Truthful oracle: `Match` iff both tracklets share an identity.
#[derive(Debug, Clone)]
pub struct SimulatedOracle {
    truth: GroundTruth,
}

impl SimulatedOracle {
    pub fn new(truth: GroundTruth) -> Self {
        Self { truth }
    }

    pub fn truth(&self) -> &GroundTruth {
        &self.truth
    }

    pub fn answer(&self, pair: &PairKey) -> Result<OracleVerdict, OracleError> {
        let a = self.truth.identity_of(pair.a).ok_or(OracleError::MissingTruth(pair.a))?;
        let b = self.truth.identity_of(pair.b).ok_or(OracleError::MissingTruth(pair.b))?;
        Ok(OracleVerdict {
            pair: *pair,
            verdict: if a == b { Verdict::Match } else { Verdict::NoMatch },
            latency: Duration::ZERO,
            source: VerdictSource::Simulated,
        })
    }
}

/// What an annotator can answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HumanAnswer {
    Match,
    #[serde(rename = "nomatch")]
    NoMatch,
    Skip,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum QueueError {
    #[error("pair {0} was already answered")]
    AlreadyAnswered(String),
    #[error("no pending pair {0}")]
    UnknownPair(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PendingQuery {
    pub pair_id: String,
    pub entry: PoolEntry,
    issued: Option<Instant>,
}

/// Pending human queries. Each pair is handed to at most one annotator at a
/// time; an unanswered hand-out is re-issued after the lease expires.
/// Skipped pairs go to the back of the queue.
#[derive(Debug)]
pub struct HumanQueue {
    pending: VecDeque<PendingQuery>,
    closed: HashSet<String>,
    verdicts: VecDeque<OracleVerdict>,
    lease: Duration,
    skips: u64,
}

pub fn pair_id(pair: &PairKey) -> String {
    pair.to_string()
}

impl HumanQueue {
    pub fn new(lease: Duration) -> Self {
        Self {
            pending: VecDeque::new(),
            closed: HashSet::new(),
            verdicts: VecDeque::new(),
            lease,
            skips: 0,
        }
    }

    /// Queues the batch in order, ignoring pairs already pending.
    pub fn enqueue(&mut self, batch: &CandidateBatch) {
        for e in &batch.pairs {
            let id = pair_id(&e.pair);
            if self.pending.iter().any(|p| p.pair_id == id) {
                continue;
            }
            self.closed.remove(&id);
            self.pending.push_back(PendingQuery {
                pair_id: id,
                entry: *e,
                issued: None,
            });
        }
    }

    /// Hands out the first pair that is not leased to someone else.
    pub fn next(&mut self, now: Instant) -> Option<PendingQuery> {
        let lease = self.lease;
        let q = self.pending.iter_mut().find(|q| match q.issued {
            None => true,
            Some(t) => now.saturating_duration_since(t) >= lease,
        })?;
        q.issued = Some(now);
        Some(q.clone())
    }

    pub fn submit(&mut self, id: &str, answer: HumanAnswer, now: Instant) -> Result<(), QueueError> {
        if self.closed.contains(id) {
            return Err(QueueError::AlreadyAnswered(id.to_string()));
        }
        let pos = self
            .pending
            .iter()
            .position(|q| q.pair_id == id)
            .ok_or_else(|| QueueError::UnknownPair(id.to_string()))?;
        let mut q = self.pending.remove(pos).expect("position is valid");
        let verdict = match answer {
            HumanAnswer::Skip => {
                self.skips += 1;
                q.issued = None;
                self.pending.push_back(q);
                return Ok(());
            }
            HumanAnswer::Match => Verdict::Match,
            HumanAnswer::NoMatch => Verdict::NoMatch,
        };
        let latency = q.issued.map_or(Duration::ZERO, |t| now.saturating_duration_since(t));
        self.closed.insert(q.pair_id);
        self.verdicts.push_back(OracleVerdict {
            pair: q.entry.pair,
            verdict,
            latency,
            source: VerdictSource::Human,
        });
        Ok(())
    }

    pub fn dequeue_verdict(&mut self) -> Option<OracleVerdict> {
        self.verdicts.pop_front()
    }

    /// Drops pending pairs that `decided` reports as already known; later
    /// answers for them are rejected as already answered.
    pub fn prune(&mut self, decided: impl Fn(&PairKey) -> bool) {
        let closed = &mut self.closed;
        self.pending.retain(|q| {
            let keep = !decided(&q.entry.pair);
            if !keep {
                closed.insert(q.pair_id.clone());
            }
            keep
        });
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn pending(&self) -> impl Iterator<Item = &PendingQuery> {
        self.pending.iter()
    }

    pub fn skips(&self) -> u64 {
        self.skips
    }

    /// Nothing pending and nothing waiting to be applied.
    pub fn is_idle(&self) -> bool {
        self.pending.is_empty() && self.verdicts.is_empty()
    }
}

/// A [`HumanQueue`] shared between the annotation service and the engine,
/// with a condition variable signalled on every submission.
#[derive(Debug, Clone)]
pub struct SharedQueue(Arc<(Mutex<HumanQueue>, Condvar)>);

impl SharedQueue {
    pub fn new(lease: Duration) -> Self {
        Self(Arc::new((Mutex::new(HumanQueue::new(lease)), Condvar::new())))
    }

    pub fn lock(&self) -> MutexGuard<'_, HumanQueue> {
        self.0 .0.lock().expect("queue lock poisoned")
    }

    pub fn submit(&self, id: &str, answer: HumanAnswer) -> Result<(), QueueError> {
        let res = self.lock().submit(id, answer, Instant::now());
        self.0 .1.notify_all();
        res
    }

    /// Blocks until a verdict is available or `timeout` passes.
    pub fn wait_verdict(&self, timeout: Duration) -> Option<OracleVerdict> {
        let guard = self.lock();
        let (mut guard, _) = self
            .0
             .1
            .wait_timeout_while(guard, timeout, |q| q.verdicts.is_empty())
            .expect("queue lock poisoned");
        guard.dequeue_verdict()
    }

    pub fn notify(&self) {
        self.0 .1.notify_all();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metric::ViewClass;

    fn truth() -> GroundTruth {
        GroundTruth::new(vec![1, 2, 3], vec![7, 7, 9])
    }

    #[test]
    fn simulated_answers_follow_identity() {
        let o = SimulatedOracle::new(truth());
        let same = PairKey::new(1, 2, ViewClass::SameView);
        let diff = PairKey::new(2, 3, ViewClass::CrossView);
        assert_eq!(o.answer(&same).unwrap().verdict, Verdict::Match);
        assert_eq!(o.answer(&diff).unwrap().verdict, Verdict::NoMatch);
        assert_eq!(o.answer(&same), o.answer(&same));
        assert_eq!(o.answer(&same).unwrap().latency, Duration::ZERO);
        assert_eq!(
            o.answer(&PairKey::new(1, 4, ViewClass::SameView)),
            Err(OracleError::MissingTruth(4))
        );
    }

    fn entry(a: u32, b: u32) -> PoolEntry {
        PoolEntry {
            pair: PairKey::new(a, b, ViewClass::SameView),
            a_index: a,
            b_index: b,
            distance: 0.5,
        }
    }

    #[test]
    fn queue_order_skip_and_double_submit() {
        let mut q = HumanQueue::new(Duration::from_secs(30));
        q.enqueue(&CandidateBatch::new(1, vec![entry(0, 1), entry(0, 2), entry(1, 2)]));
        let t0 = Instant::now();
        let first = q.next(t0).unwrap();
        assert_eq!(first.pair_id, "0-1");
        // leased to the first caller, so a second caller gets the next pair
        assert_eq!(q.next(t0).unwrap().pair_id, "0-2");
        q.submit("0-1", HumanAnswer::Skip, t0).unwrap();
        assert_eq!(q.pending().map(|p| p.pair_id.as_str()).collect::<Vec<_>>(), ["0-2", "1-2", "0-1"]);
        q.submit("0-2", HumanAnswer::Match, t0).unwrap();
        assert_eq!(q.submit("0-2", HumanAnswer::NoMatch, t0), Err(QueueError::AlreadyAnswered("0-2".into())));
        assert_eq!(q.submit("5-6", HumanAnswer::Match, t0), Err(QueueError::UnknownPair("5-6".into())));
        let v = q.dequeue_verdict().unwrap();
        assert_eq!((v.pair.ids(), v.verdict, v.source), ([0, 2], Verdict::Match, VerdictSource::Human));
        assert!(q.dequeue_verdict().is_none());
        assert_eq!(q.skips(), 1);
    }

    #[test]
    fn expired_lease_is_reissued() {
        let mut q = HumanQueue::new(Duration::from_millis(10));
        q.enqueue(&CandidateBatch::new(1, vec![entry(0, 1)]));
        let t0 = Instant::now();
        assert!(q.next(t0).is_some());
        assert!(q.next(t0).is_none());
        assert!(q.next(t0 + Duration::from_millis(11)).is_some());
    }

    #[test]
    fn prune_closes_auto_resolved_pairs() {
        let mut q = HumanQueue::new(Duration::from_secs(1));
        q.enqueue(&CandidateBatch::new(1, vec![entry(0, 1), entry(0, 2)]));
        q.prune(|p| p.ids() == [0, 2]);
        assert_eq!(q.pending_len(), 1);
        assert!(matches!(q.submit("0-2", HumanAnswer::Match, Instant::now()), Err(QueueError::AlreadyAnswered(_))));
    }

    #[test]
    fn shared_queue_wakes_waiter() {
        let shared = SharedQueue::new(Duration::from_secs(5));
        shared.lock().enqueue(&CandidateBatch::new(1, vec![entry(3, 4)]));
        let s2 = shared.clone();
        let h = std::thread::spawn(move || s2.wait_verdict(Duration::from_secs(5)));
        std::thread::sleep(Duration::from_millis(20));
        shared.submit("3-4", HumanAnswer::NoMatch).unwrap();
        let v = h.join().unwrap().unwrap();
        assert_eq!(v.verdict, Verdict::NoMatch);
    }
}
