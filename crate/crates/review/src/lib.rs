//! Human verification of engine candidates: a leased work queue backed by
//! an append-only event log, an accepted-set export, and a human-vs-AI
//! agreement report, served over a small JSON HTTP API.

pub mod candidates;
pub mod clock;
pub mod error;
pub mod server;
pub mod store;

pub use candidates::{
    candidates_from_manifest, load_candidate_lines, prepare_candidates, render_overlay, Candidate, CandidateLine,
    Decision,
};
pub use clock::{Clock, ManualClock, SystemClock};
pub use error::ReviewError;
pub use server::{router, serve, serve_blocking, CandidateView, ServerConfig, DEFAULT_PORT};
pub use store::{
    agreement, AgreementStats, Assignment, Confusion, Lease, QueueStats, ReviewStore, Status, StoreSnapshot,
    VerdictRecord, DEFAULT_LEASE_MS,
};
