//! The review queue and its append-only event log.
//!
//! The log (`events.jsonl`) is the source of truth: one JSON event per line,
//! either an assignment (a lease) or a verdict. Opening a store replays the
//! log onto the candidate list, so a restarted service has exactly the state
//! it had before. All mutations go through one mutex, which is also where the
//! log is appended, so assignment and verdicts are serialized.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use convseg_core::{save_manifest, DatasetManifest};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::candidates::{Candidate, Decision};
use crate::clock::Clock;
use crate::error::ReviewError;

pub const DEFAULT_LEASE_MS: u64 = 10 * 60 * 1000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub candidate_id: String,
    pub decision: Decision,
    pub annotator_id: String,
    /// Unix milliseconds.
    pub decided_at: u64,
    pub ai_suggestion_at_decision: Decision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lease {
    pub session: String,
    pub assigned_at: u64,
    pub expires_at: u64,
}

impl Lease {
    pub fn is_live(&self, now: u64) -> bool {
        now < self.expires_at
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum Event {
    Assigned {
        candidate_id: String,
        session: String,
        assigned_at: u64,
        expires_at: u64,
    },
    Verdict(VerdictRecord),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pending,
    Assigned,
    Decided,
}

/// Everything the log determines. Two stores with equal snapshots behave
/// identically.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct StoreSnapshot {
    /// Latest lease per candidate, live or not.
    pub leases: BTreeMap<String, Lease>,
    pub verdicts: BTreeMap<String, VerdictRecord>,
    pub events: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct QueueStats {
    pub total: usize,
    pub pending: usize,
    pub assigned: usize,
    pub decided: usize,
    pub accepted: usize,
    pub rejected: usize,
}

/// Rows are the AI suggestion, columns the human decision.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub ai_accept_human_accept: usize,
    pub ai_accept_human_reject: usize,
    pub ai_reject_human_accept: usize,
    pub ai_reject_human_reject: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.ai_accept_human_accept + self.ai_accept_human_reject + self.ai_reject_human_accept + self.ai_reject_human_reject
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgreementStats {
    pub n_decided: usize,
    pub agreement_rate: f64,
    pub confusion: Confusion,
}

/// What `next_candidate` hands out.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Assignment {
    pub candidate: Candidate,
    pub lease: Lease,
}

struct Inner {
    leases: HashMap<String, Lease>,
    verdicts: HashMap<String, VerdictRecord>,
    events: usize,
    log: File,
}

pub struct ReviewStore {
    candidates: Vec<Candidate>,
    index: HashMap<String, usize>,
    inner: Mutex<Inner>,
    clock: Arc<dyn Clock>,
    lease_ms: u64,
    log_path: PathBuf,
}

fn apply(inner: &mut Inner, event: Event) {
    match event {
        Event::Assigned {
            candidate_id,
            session,
            assigned_at,
            expires_at,
        } => {
            inner.leases.insert(
                candidate_id,
                Lease {
                    session,
                    assigned_at,
                    expires_at,
                },
            );
        }
        Event::Verdict(v) => {
            inner.verdicts.insert(v.candidate_id.clone(), v);
        }
    }
    inner.events += 1;
}

impl ReviewStore {
    /// Opens the store over `candidates`, replaying `log_path` if it exists.
    /// A torn final line (a crash mid-append) is cut off; any other bad line
    /// is an error.
    pub fn open(
        candidates: Vec<Candidate>,
        log_path: &Path,
        clock: Arc<dyn Clock>,
        lease_ms: u64,
    ) -> Result<Self, ReviewError> {
        let mut index = HashMap::with_capacity(candidates.len());
        for (i, c) in candidates.iter().enumerate() {
            if index.insert(c.candidate_id.clone(), i).is_some() {
                return Err(ReviewError::Input(format!("duplicate candidate id `{}`", c.candidate_id)));
            }
        }
        if let Some(dir) = log_path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| ReviewError::io(dir, e))?;
        }
        let mut log = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(log_path)
            .map_err(|e| ReviewError::io(log_path, e))?;
        let mut inner = Inner {
            leases: HashMap::new(),
            verdicts: HashMap::new(),
            events: 0,
            log: log.try_clone().map_err(|e| ReviewError::io(log_path, e))?,
        };

        let bad = |line: usize, message: String| ReviewError::Log {
            path: log_path.to_path_buf(),
            line,
            message,
        };
        log.seek(SeekFrom::Start(0)).map_err(|e| ReviewError::io(log_path, e))?;
        let mut reader = BufReader::new(&log);
        let mut offset = 0u64;
        let mut line_no = 0;
        let mut buf = String::new();
        loop {
            buf.clear();
            let n = reader.read_line(&mut buf).map_err(|e| ReviewError::io(log_path, e))?;
            if n == 0 {
                break;
            }
            line_no += 1;
            let complete = buf.ends_with('\n');
            let event: Event = match serde_json::from_str(buf.trim_end()) {
                Ok(e) if complete => e,
                Ok(_) | Err(_) if !complete => {
                    warn!("{}: dropping torn final line {line_no}", log_path.display());
                    inner.log.set_len(offset).map_err(|e| ReviewError::io(log_path, e))?;
                    break;
                }
                Err(e) => return Err(bad(line_no, e.to_string())),
                Ok(_) => unreachable!("complete lines parse or fail above"),
            };
            let id = match &event {
                Event::Assigned { candidate_id, .. } => candidate_id,
                Event::Verdict(v) => &v.candidate_id,
            };
            if !index.contains_key(id) {
                return Err(bad(line_no, format!("unknown candidate `{id}`")));
            }
            if let (Event::Verdict(v), Some(prev)) = (&event, inner.verdicts.get(id)) {
                if prev.decision != v.decision || prev.annotator_id != v.annotator_id {
                    return Err(bad(line_no, format!("second verdict for `{id}`")));
                }
            }
            apply(&mut inner, event);
            offset += n as u64;
        }
        if inner.events > 0 {
            info!("replayed {} events from {}", inner.events, log_path.display());
        }
        Ok(ReviewStore {
            candidates,
            index,
            inner: Mutex::new(inner),
            clock,
            lease_ms,
            log_path: log_path.to_path_buf(),
        })
    }

    pub fn log_path(&self) -> &Path {
        &self.log_path
    }

    pub fn candidates(&self) -> &[Candidate] {
        &self.candidates
    }

    pub fn candidate(&self, id: &str) -> Option<&Candidate> {
        self.index.get(id).map(|&i| &self.candidates[i])
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Appends and applies one event. The event is on disk before any caller
    /// can observe its effect.
    fn commit(&self, inner: &mut Inner, event: Event) -> Result<(), ReviewError> {
        let mut line = serde_json::to_string(&event).expect("event serializes");
        line.push('\n');
        inner
            .log
            .write_all(line.as_bytes())
            .and_then(|_| inner.log.sync_data())
            .map_err(|e| ReviewError::io(&self.log_path, e))?;
        apply(inner, event);
        Ok(())
    }

    pub fn status(&self, id: &str) -> Option<Status> {
        let inner = self.lock();
        self.index.get(id)?;
        Some(status_of(&inner, id, self.clock.now_ms()))
    }

    /// The session's current live assignment, or else the oldest pending
    /// candidate under a fresh lease; `None` when nothing is pending.
    pub fn next_candidate(&self, session: &str) -> Result<Option<Assignment>, ReviewError> {
        if session.trim().is_empty() {
            return Err(ReviewError::EmptySession);
        }
        let mut inner = self.lock();
        let now = self.clock.now_ms();
        let held = self.candidates.iter().find(|c| {
            let id = &c.candidate_id;
            !inner.verdicts.contains_key(id)
                && inner.leases.get(id).is_some_and(|l| l.session == session && l.is_live(now))
        });
        if let Some(c) = held {
            let lease = inner.leases[&c.candidate_id].clone();
            return Ok(Some(Assignment {
                candidate: c.clone(),
                lease,
            }));
        }
        let Some(c) = self
            .candidates
            .iter()
            .find(|c| status_of(&inner, &c.candidate_id, now) == Status::Pending)
        else {
            return Ok(None);
        };
        let lease = Lease {
            session: session.to_string(),
            assigned_at: now,
            expires_at: now.saturating_add(self.lease_ms),
        };
        self.commit(
            &mut inner,
            Event::Assigned {
                candidate_id: c.candidate_id.clone(),
                session: lease.session.clone(),
                assigned_at: lease.assigned_at,
                expires_at: lease.expires_at,
            },
        )?;
        Ok(Some(Assignment {
            candidate: c.clone(),
            lease,
        }))
    }

    /// Records a decision by the annotator the candidate was last assigned
    /// to. Resubmitting the same decision returns the stored record; a
    /// different decision on a decided candidate is a conflict.
    pub fn record_verdict(
        &self,
        candidate_id: &str,
        decision: Decision,
        annotator_id: &str,
        reason: Option<String>,
    ) -> Result<VerdictRecord, ReviewError> {
        let c = self
            .candidate(candidate_id)
            .ok_or_else(|| ReviewError::UnknownCandidate(candidate_id.to_string()))?;
        let mut inner = self.lock();
        if let Some(existing) = inner.verdicts.get(candidate_id) {
            if existing.decision == decision && existing.annotator_id == annotator_id {
                return Ok(existing.clone());
            }
            return Err(ReviewError::Conflict {
                candidate_id: candidate_id.to_string(),
                existing: existing.decision,
                annotator_id: existing.annotator_id.clone(),
            });
        }
        // an expired lease still counts unless someone else has taken it over
        if inner.leases.get(candidate_id).map(|l| l.session.as_str()) != Some(annotator_id) {
            return Err(ReviewError::NotAssigned {
                candidate_id: candidate_id.to_string(),
                annotator_id: annotator_id.to_string(),
            });
        }
        let record = VerdictRecord {
            candidate_id: candidate_id.to_string(),
            decision,
            annotator_id: annotator_id.to_string(),
            decided_at: self.clock.now_ms(),
            ai_suggestion_at_decision: c.ai_suggestion,
            reason: reason.filter(|r| !r.trim().is_empty()),
        };
        self.commit(&mut inner, Event::Verdict(record.clone()))?;
        Ok(record)
    }

    pub fn snapshot(&self) -> StoreSnapshot {
        let inner = self.lock();
        StoreSnapshot {
            leases: inner.leases.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
            verdicts: inner.verdicts.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
            events: inner.events,
        }
    }

    pub fn stats(&self) -> QueueStats {
        let inner = self.lock();
        let now = self.clock.now_ms();
        let mut s = QueueStats {
            total: self.candidates.len(),
            ..QueueStats::default()
        };
        for c in &self.candidates {
            match status_of(&inner, &c.candidate_id, now) {
                Status::Pending => s.pending += 1,
                Status::Assigned => s.assigned += 1,
                Status::Decided => s.decided += 1,
            }
        }
        s.accepted = inner.verdicts.values().filter(|v| v.decision == Decision::Accept).count();
        s.rejected = s.decided - s.accepted;
        s
    }

    /// Verdicts in candidate order.
    pub fn verdicts(&self) -> Vec<VerdictRecord> {
        let inner = self.lock();
        self.candidates
            .iter()
            .filter_map(|c| inner.verdicts.get(&c.candidate_id).cloned())
            .collect()
    }

    /// The accepted candidates' samples in candidate order, written to
    /// `out_path` when given.
    pub fn export_accepted(&self, out_path: Option<&Path>) -> Result<DatasetManifest, ReviewError> {
        let accepted: Vec<_> = self
            .verdicts()
            .into_iter()
            .filter(|v| v.decision == Decision::Accept)
            .map(|v| self.candidates[self.index[&v.candidate_id]].sample.clone())
            .collect();
        let manifest = DatasetManifest::new(accepted).with_metadata("source", "human_review");
        manifest.validate()?;
        if let Some(path) = out_path {
            if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| ReviewError::io(dir, e))?;
            }
            save_manifest(&manifest, path)?;
        }
        Ok(manifest)
    }

    pub fn agreement_report(&self) -> Result<AgreementStats, ReviewError> {
        agreement(&self.verdicts())
    }
}

fn status_of(inner: &Inner, id: &str, now: u64) -> Status {
    if inner.verdicts.contains_key(id) {
        Status::Decided
    } else if inner.leases.get(id).is_some_and(|l| l.is_live(now)) {
        Status::Assigned
    } else {
        Status::Pending
    }
}

/// Fraction of verdicts that match the AI suggestion shown at decision time,
/// with the full confusion table.
pub fn agreement(verdicts: &[VerdictRecord]) -> Result<AgreementStats, ReviewError> {
    if verdicts.is_empty() {
        return Err(ReviewError::NoDecisions);
    }
    let mut c = Confusion::default();
    for v in verdicts {
        match (v.ai_suggestion_at_decision, v.decision) {
            (Decision::Accept, Decision::Accept) => c.ai_accept_human_accept += 1,
            (Decision::Accept, Decision::Reject) => c.ai_accept_human_reject += 1,
            (Decision::Reject, Decision::Accept) => c.ai_reject_human_accept += 1,
            (Decision::Reject, Decision::Reject) => c.ai_reject_human_reject += 1,
        }
    }
    let agree = c.ai_accept_human_accept + c.ai_reject_human_reject;
    Ok(AgreementStats {
        n_decided: verdicts.len(),
        agreement_rate: agree as f64 / verdicts.len() as f64,
        confusion: c,
    })
}
