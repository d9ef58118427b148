//! Labeling queue for human-in-the-loop runs.
//!
//! The harness publishes each acquired batch and blocks until every tuple of
//! it is labeled. Labelers lease items with [`LabelQueue::next_items`] and
//! answer with [`LabelQueue::submit_label`]. Every state change goes through
//! one mutex and is appended (and fsynced) to the label log before it is
//! acknowledged; a snapshot of the queue is rewritten every
//! [`SNAPSHOT_EVERY`] events. Leases live in memory only, so after a restart
//! every unlabeled item is pending again.
//!
//! A tuple keeps the first label committed for it. Later submissions with
//! the same value are acknowledged as duplicates; a different value is a
//! conflict and is logged as an `extra` event.

mod log;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::feature_store::PreferenceTuple;
use crate::harness::{self, HarnessError, LabelSource, RoundMetrics, TupleTexts};

pub use log::{parse_log, Event, ItemTexts, LogRecord};

pub const LOG_FILE: &str = "label_log.ndjson";
pub const SNAPSHOT_FILE: &str = "queue_snapshot.json";
pub const SNAPSHOT_EVERY: u64 = 50;
const DEFAULT_SESSION: &str = "default";

#[derive(Debug, Error)]
pub enum LabelServiceError {
    #[error("unknown tuple {0:?}")]
    UnknownTuple(String),
    #[error("tuple {0:?} is not leased to this session")]
    NotLeased(String),
    #[error("tuple {0:?} is leased to another session")]
    LeaseHeld(String),
    #[error("tuple {tuple_id:?} already labeled {stored}")]
    Conflict { tuple_id: String, stored: u8 },
    #[error("round {0} is still being labeled")]
    BatchOpen(usize),
    #[error("the experiment has finished")]
    Finished,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("label log: {0}")]
    Log(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl LabelServiceError {
    /// Machine-readable code for the wire format.
    pub fn code(&self) -> &'static str {
        match self {
            Self::UnknownTuple(_) => "unknown_tuple",
            Self::NotLeased(_) => "not_leased",
            Self::LeaseHeld(_) => "lease_held",
            Self::Conflict { .. } => "conflict",
            Self::BatchOpen(_) => "batch_open",
            Self::Finished => "finished",
            Self::InvalidRequest(_) => "invalid_request",
            Self::Log(_) | Self::Io(_) => "internal",
        }
    }

    pub fn http_status(&self) -> u16 {
        match self {
            Self::UnknownTuple(_) => 404,
            Self::NotLeased(_) | Self::LeaseHeld(_) | Self::Conflict { .. } | Self::BatchOpen(_) | Self::Finished => 409,
            Self::InvalidRequest(_) => 400,
            Self::Log(_) | Self::Io(_) => 500,
        }
    }
}

pub type Result<T, E = LabelServiceError> = std::result::Result<T, E>;

/// A labeler's answer. On the wire: `1`, `2` or `"skip"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preference {
    One,
    Two,
    Skip,
}

impl Preference {
    fn code(self) -> Option<u8> {
        match self {
            Preference::One => Some(1),
            Preference::Two => Some(2),
            Preference::Skip => None,
        }
    }
}

impl Serialize for Preference {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self.code() {
            Some(c) => s.serialize_u8(c),
            None => s.serialize_str("skip"),
        }
    }
}

impl<'de> Deserialize<'de> for Preference {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u64),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(1) => Ok(Preference::One),
            Raw::N(2) => Ok(Preference::Two),
            Raw::S(s) if s == "skip" => Ok(Preference::Skip),
            Raw::S(s) if s == "1" => Ok(Preference::One),
            Raw::S(s) if s == "2" => Ok(Preference::Two),
            _ => Err(serde::de::Error::custom("preference must be 1, 2 or \"skip\"")),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// No batch published yet.
    #[default]
    Idle,
    Labeling,
    /// The current batch is fully labeled; the harness is training.
    Training,
    Finished,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemStatus {
    Pending,
    Labeled,
    /// Skipped at least once and back in the pending pool.
    Skipped,
}

/// An item as handed to a labeler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingItem {
    pub tuple_id: String,
    pub prompt_text: Option<String>,
    pub completion1_text: Option<String>,
    pub completion2_text: Option<String>,
    pub round: usize,
    /// Unix milliseconds of publication.
    pub issued_at: u64,
    pub status: ItemStatus,
    pub lease_expires_at: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ack {
    Recorded,
    /// Same label as the one already stored.
    Duplicate,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlPoint {
    pub round: usize,
    pub labels_used: usize,
    pub test_ll: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Status {
    pub round: usize,
    pub phase: Phase,
    pub batch_size: usize,
    /// Unlabeled items, leased or not, including skipped ones.
    pub pending: usize,
    pub leased: usize,
    pub labeled: usize,
    pub skipped: usize,
    pub labels_used: usize,
    pub latest_test_ll: Option<f64>,
    pub ll_curve: Vec<LlPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ItemState {
    texts: ItemTexts,
    issued_at: u64,
    status: ItemStatus,
    skips: u32,
}

/// Everything the log determines. Snapshots serialize this.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct QueueState {
    seq: u64,
    round: usize,
    phase: Phase,
    items: Vec<ItemState>,
    labels: BTreeMap<String, bool>,
    labels_used: usize,
    ll_curve: Vec<LlPoint>,
    extras: usize,
}

impl QueueState {
    fn apply(&mut self, rec: &LogRecord) {
        self.seq = rec.seq;
        match &rec.event {
            Event::Publish { round, items } => {
                self.round = *round;
                self.phase = Phase::Labeling;
                self.items = items
                    .iter()
                    .map(|t| ItemState { texts: t.clone(), issued_at: rec.at_ms, status: ItemStatus::Pending, skips: 0 })
                    .collect();
            }
            Event::Label { tuple_id, preference, .. } => {
                self.labels.insert(tuple_id.clone(), *preference == 1);
                if let Some(it) = self.items.iter_mut().find(|i| &i.texts.tuple_id == tuple_id) {
                    it.status = ItemStatus::Labeled;
                }
                if self.phase == Phase::Labeling && self.items.iter().all(|i| i.status == ItemStatus::Labeled) {
                    self.phase = Phase::Training;
                    self.labels_used += self.items.len();
                }
            }
            Event::Skip { tuple_id, .. } => {
                if let Some(it) = self.items.iter_mut().find(|i| &i.texts.tuple_id == tuple_id) {
                    it.status = ItemStatus::Skipped;
                    it.skips += 1;
                }
            }
            Event::Extra { .. } => self.extras += 1,
            Event::Report { round, labels_used, test_ll } => {
                self.ll_curve.push(LlPoint { round: *round, labels_used: *labels_used, test_ll: *test_ll })
            }
            Event::Finish => self.phase = Phase::Finished,
        }
    }

    fn position(&self, tuple_id: &str) -> Option<usize> {
        self.items.iter().position(|i| i.texts.tuple_id == tuple_id)
    }
}

#[derive(Debug, Clone)]
struct Lease {
    session: String,
    expires_at: u64,
}

struct Inner {
    state: QueueState,
    leases: HashMap<String, Lease>,
    log: Option<(log::LogWriter, PathBuf)>,
}

pub type Clock = Arc<dyn Fn() -> u64 + Send + Sync>;

/// Wall-clock Unix milliseconds.
pub fn system_clock() -> Clock {
    Arc::new(|| SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0))
}

pub struct LabelQueue {
    inner: Mutex<Inner>,
    changed: Condvar,
    ttl_ms: u64,
    clock: Clock,
}

impl LabelQueue {
    /// A queue without persistence.
    pub fn in_memory(lease_ttl: Duration) -> Self {
        Self::from_parts(QueueState::default(), None, lease_ttl)
    }

    /// Open (or create) a persistent queue in `dir`, recovering its state from
    /// the snapshot and the log records after it.
    pub fn open(dir: &Path, lease_ttl: Duration) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let snap_path = dir.join(SNAPSHOT_FILE);
        let mut state = match fs::read(&snap_path) {
            Ok(bytes) => serde_json::from_slice::<QueueState>(&bytes)
                .map_err(|e| LabelServiceError::Log(format!("snapshot: {e}")))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => QueueState::default(),
            Err(e) => return Err(e.into()),
        };
        let log_path = dir.join(LOG_FILE);
        if log_path.exists() {
            let bytes = fs::read(&log_path)?;
            let records = parse_log(&bytes)?;
            let from = state.seq;
            let replayed = records.iter().filter(|r| r.seq > from).count();
            for rec in records.iter().filter(|r| r.seq > from) {
                state.apply(rec);
            }
            // Drop a torn tail so that new records start on a fresh line.
            if !bytes.is_empty() && !bytes.ends_with(b"\n") {
                let keep = bytes.iter().rposition(|&b| b == b'\n').map(|p| p + 1).unwrap_or(0);
                fs::OpenOptions::new().write(true).open(&log_path)?.set_len(keep as u64)?;
            }
            tracing::info!(replayed, seq = state.seq, round = state.round, "recovered label queue");
        }
        let writer = log::LogWriter::open(&log_path)?;
        Ok(Self::from_parts(state, Some((writer, snap_path)), lease_ttl))
    }

    fn from_parts(state: QueueState, log: Option<(log::LogWriter, PathBuf)>, lease_ttl: Duration) -> Self {
        Self {
            inner: Mutex::new(Inner { state, leases: HashMap::new(), log }),
            changed: Condvar::new(),
            ttl_ms: lease_ttl.as_millis() as u64,
            clock: system_clock(),
        }
    }

    pub fn with_clock(mut self, clock: Clock) -> Self {
        self.clock = clock;
        self
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Log, apply and announce one event.
    fn commit(&self, inner: &mut Inner, event: Event, now: u64) -> Result<()> {
        let rec = LogRecord { seq: inner.state.seq + 1, at_ms: now, event };
        if let Some((writer, _)) = inner.log.as_mut() {
            writer.append(&rec)?;
        }
        inner.state.apply(&rec);
        if let Some((_, snap)) = &inner.log {
            if rec.seq % SNAPSHOT_EVERY == 0 || rec.event == Event::Finish {
                write_snapshot(snap, &inner.state)?;
            }
        }
        self.changed.notify_all();
        Ok(())
    }

    fn expire(&self, inner: &mut Inner, now: u64) {
        inner.leases.retain(|_, l| l.expires_at > now);
    }

    /// Open a new batch. Re-publishing the current round with the same tuples
    /// is a no-op, which lets a resumed harness ask again.
    pub fn publish_batch(&self, round: usize, items: Vec<ItemTexts>) -> Result<()> {
        let mut inner = self.lock();
        let st = &inner.state;
        let same_batch = st.phase != Phase::Idle
            && st.round == round
            && st.items.len() == items.len()
            && st.items.iter().zip(&items).all(|(a, b)| a.texts.tuple_id == b.tuple_id);
        if same_batch {
            return Ok(());
        }
        match st.phase {
            Phase::Finished => return Err(LabelServiceError::Finished),
            Phase::Labeling => return Err(LabelServiceError::BatchOpen(st.round)),
            Phase::Training if round <= st.round => {
                return Err(LabelServiceError::InvalidRequest(format!("round {round} is not after {}", st.round)))
            }
            _ => {}
        }
        if items.is_empty() {
            return Err(LabelServiceError::InvalidRequest("empty batch".into()));
        }
        let mut seen = HashSet::new();
        for it in &items {
            if !seen.insert(it.tuple_id.as_str()) || st.labels.contains_key(&it.tuple_id) {
                return Err(LabelServiceError::InvalidRequest(format!("tuple {:?} repeated or already labeled", it.tuple_id)));
            }
        }
        inner.leases.clear();
        let now = (self.clock)();
        self.commit(&mut inner, Event::Publish { round, items }, now)
    }

    /// Lease up to `count` unlabeled items to `session`. Items it already
    /// holds come first and have their leases renewed.
    pub fn next_items(&self, session: Option<&str>, count: usize) -> Result<Vec<PendingItem>> {
        let session = session.unwrap_or(DEFAULT_SESSION);
        let now = (self.clock)();
        let mut inner = self.lock();
        self.expire(&mut inner, now);
        if inner.state.phase != Phase::Labeling {
            return Ok(Vec::new());
        }
        let inner = &mut *inner;
        let mut mine: Vec<usize> = Vec::new();
        let mut free: Vec<usize> = Vec::new();
        for (i, it) in inner.state.items.iter().enumerate() {
            if it.status == ItemStatus::Labeled {
                continue;
            }
            match inner.leases.get(&it.texts.tuple_id) {
                Some(l) if l.session == session => mine.push(i),
                Some(_) => {}
                None => free.push(i),
            }
        }
        free.sort_by_key(|&i| (inner.state.items[i].skips, i));
        let expires_at = now + self.ttl_ms;
        let mut out = Vec::new();
        for i in mine.into_iter().chain(free).take(count) {
            let it = &inner.state.items[i];
            inner.leases.insert(it.texts.tuple_id.clone(), Lease { session: session.to_string(), expires_at });
            out.push(PendingItem {
                tuple_id: it.texts.tuple_id.clone(),
                prompt_text: it.texts.prompt_text.clone(),
                completion1_text: it.texts.completion1_text.clone(),
                completion2_text: it.texts.completion2_text.clone(),
                round: inner.state.round,
                issued_at: it.issued_at,
                status: it.status,
                lease_expires_at: Some(expires_at),
            });
        }
        Ok(out)
    }

    pub fn submit_label(&self, tuple_id: &str, preference: Preference, session: Option<&str>) -> Result<Ack> {
        let session = session.unwrap_or(DEFAULT_SESSION);
        let now = (self.clock)();
        let mut inner = self.lock();
        self.expire(&mut inner, now);
        if let Some(&stored) = inner.state.labels.get(tuple_id) {
            let stored = if stored { 1 } else { 2 };
            let event = Event::Extra { tuple_id: tuple_id.into(), preference: preference.code(), session: session.into() };
            if preference.code() == Some(stored) {
                return Ok(Ack::Duplicate);
            }
            self.commit(&mut inner, event, now)?;
            return Err(LabelServiceError::Conflict { tuple_id: tuple_id.into(), stored });
        }
        if inner.state.phase != Phase::Labeling || inner.state.position(tuple_id).is_none() {
            return Err(LabelServiceError::UnknownTuple(tuple_id.into()));
        }
        match inner.leases.get(tuple_id) {
            None => return Err(LabelServiceError::NotLeased(tuple_id.into())),
            Some(l) if l.session != session => return Err(LabelServiceError::LeaseHeld(tuple_id.into())),
            Some(_) => {}
        }
        inner.leases.remove(tuple_id);
        let (event, ack) = match preference.code() {
            Some(p) => (Event::Label { tuple_id: tuple_id.into(), preference: p, session: session.into() }, Ack::Recorded),
            None => (Event::Skip { tuple_id: tuple_id.into(), session: session.into() }, Ack::Skipped),
        };
        self.commit(&mut inner, event, now)?;
        Ok(ack)
    }

    pub fn status(&self) -> Status {
        let now = (self.clock)();
        let mut inner = self.lock();
        self.expire(&mut inner, now);
        let st = &inner.state;
        let count = |s: ItemStatus| st.items.iter().filter(|i| i.status == s).count();
        let labeled = count(ItemStatus::Labeled);
        Status {
            round: st.round,
            phase: st.phase,
            batch_size: st.items.len(),
            pending: st.items.len() - labeled,
            leased: inner.leases.len(),
            labeled,
            skipped: count(ItemStatus::Skipped),
            labels_used: st.labels_used,
            latest_test_ll: st.ll_curve.iter().rev().find_map(|p| p.test_ll),
            ll_curve: st.ll_curve.clone(),
        }
    }

    /// Record an evaluated round for the status curve.
    pub fn report(&self, round: usize, labels_used: usize, test_ll: Option<f64>) -> Result<()> {
        let now = (self.clock)();
        let mut inner = self.lock();
        let test_ll = test_ll.filter(|x| x.is_finite());
        self.commit(&mut inner, Event::Report { round, labels_used, test_ll }, now)
    }

    pub fn finish(&self) -> Result<()> {
        let now = (self.clock)();
        let mut inner = self.lock();
        if inner.state.phase == Phase::Finished {
            return Ok(());
        }
        self.commit(&mut inner, Event::Finish, now)
    }

    /// Stored label of a tuple.
    pub fn label(&self, tuple_id: &str) -> Option<bool> {
        self.lock().state.labels.get(tuple_id).copied()
    }

    /// Block until every id in `ids` is labeled. `None` on timeout.
    pub fn wait_for_labels(&self, ids: &[String], timeout: Duration) -> Option<HashMap<String, bool>> {
        let deadline = Instant::now() + timeout;
        let mut inner = self.lock();
        loop {
            let labels = &inner.state.labels;
            if ids.iter().all(|id| labels.contains_key(id)) {
                return Some(ids.iter().map(|id| (id.clone(), labels[id])).collect());
            }
            let left = deadline.checked_duration_since(Instant::now())?;
            // Wake up periodically so that lease expiry does not depend on
            // traffic.
            let (guard, _) = self
                .changed
                .wait_timeout(inner, left.min(Duration::from_secs(1)))
                .unwrap_or_else(|p| p.into_inner());
            inner = guard;
        }
    }

    /// Write a snapshot now (persistent queues only).
    pub fn snapshot(&self) -> Result<()> {
        let inner = self.lock();
        match &inner.log {
            Some((_, snap)) => write_snapshot(snap, &inner.state),
            None => Ok(()),
        }
    }
}

fn write_snapshot(path: &Path, state: &QueueState) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let bytes = serde_json::to_vec(state).map_err(|e| LabelServiceError::Log(e.to_string()))?;
    fs::write(&tmp, bytes)?;
    fs::File::open(&tmp)?.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Harness label source backed by a [`LabelQueue`].
pub struct ServiceLabelSource {
    queue: Arc<LabelQueue>,
    texts: HashMap<String, TupleTexts>,
    timeout: Duration,
}

impl ServiceLabelSource {
    pub fn new(queue: Arc<LabelQueue>, texts: HashMap<String, TupleTexts>, timeout: Duration) -> Self {
        Self { queue, texts, timeout }
    }
}

impl LabelSource for ServiceLabelSource {
    fn request(&mut self, round: usize, tuples: &[&PreferenceTuple]) -> harness::Result<HashMap<String, bool>> {
        let items: Vec<ItemTexts> = tuples
            .iter()
            .map(|t| {
                let tx = self.texts.get(&t.tuple_id).cloned().unwrap_or_default();
                ItemTexts {
                    tuple_id: t.tuple_id.clone(),
                    prompt_text: tx.prompt,
                    completion1_text: tx.completion1,
                    completion2_text: tx.completion2,
                }
            })
            .collect();
        let ids: Vec<String> = items.iter().map(|i| i.tuple_id.clone()).collect();
        self.queue.publish_batch(round, items).map_err(|e| HarnessError::Labels(e.to_string()))?;
        self.queue.wait_for_labels(&ids, self.timeout).ok_or(HarnessError::LabelTimeout { round })
    }

    fn report(&mut self, m: &RoundMetrics) {
        if let Err(e) = self.queue.report(m.round, m.labels_used, m.test_mean_ll) {
            tracing::error!(error = %e, "could not record round metrics in the label log");
        }
    }

    fn finish(&mut self) {
        if let Err(e) = self.queue.finish() {
            tracing::error!(error = %e, "could not mark the label queue finished");
        }
    }
}
