//! DAG execution across MOP masters.
//!
//! The executor never talks to sites itself. [`Executor::dispatch_step`]
//! turns ready nodes into [`DispatchAction`]s, the driver carries them out
//! on the fabric, and reports what happened back through the `on_*` and
//! [`Executor::report`] methods. Every node state change is appended to the
//! event log.
//!
//! Each dispatched node holds one tracked-process slot on its master until
//! it leaves the in-flight states; ready nodes beyond the master's capacity
//! wait in its ready queue. Deeper nodes go first, so DAGs already under
//! way finish before new ones start; ties go to the earlier job.

use std::cmp::Reverse;
use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dagwrap::{validate_dag, Dag, NodeId, NodeKind, Payload};
use crate::error::ExecutorError;
use crate::gridsim::{ExecId, FailureCause};

pub const DEFAULT_MAX_TRACKED: usize = 400;
pub const DEFAULT_MAX_ATTEMPTS: u32 = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MasterConfig {
    pub master_id: String,
    pub max_tracked_processes: usize,
}

impl MasterConfig {
    pub fn new(master_id: impl Into<String>, max_tracked_processes: usize) -> Self {
        Self {
            master_id: master_id.into(),
            max_tracked_processes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FailureClass {
    Transient,
    Permanent,
    Unknown,
}

pub fn default_classifier(cause: FailureCause) -> FailureClass {
    match cause {
        FailureCause::DiskFull => FailureClass::Permanent,
        FailureCause::TransferFailed
        | FailureCause::SiteOutage
        | FailureCause::LostContact
        | FailureCause::SiteDown
        | FailureCause::AuthDenied => FailureClass::Transient,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    /// `None` retries forever.
    pub max_attempts: Option<u32>,
    /// Attempts with one repeated cause after which a node is reported as looping.
    pub loop_threshold: u32,
    /// Resubmit failures classified as permanent too (blanket auto-restart).
    pub retry_permanent: bool,
    pub classify: fn(FailureCause) -> FailureClass,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: Some(DEFAULT_MAX_ATTEMPTS),
            loop_threshold: 3,
            retry_permanent: false,
            classify: default_classifier,
        }
    }
}

impl RetryPolicy {
    /// Restart everything, whatever the cause.
    pub fn auto_restart(max_attempts: Option<u32>) -> Self {
        Self {
            max_attempts,
            retry_permanent: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ExecutorError> {
        if self.max_attempts == Some(0) {
            return Err(ExecutorError::InvalidPolicy("max_attempts must be at least 1"));
        }
        if self.loop_threshold == 0 {
            return Err(ExecutorError::InvalidPolicy("loop_threshold must be at least 1"));
        }
        Ok(())
    }

    pub fn may_retry(&self, cause: FailureCause, attempts: u32) -> bool {
        if (self.classify)(cause) == FailureClass::Permanent && !self.retry_permanent {
            return false;
        }
        self.max_attempts.is_none_or(|m| attempts < m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NodeState {
    Idle,
    Ready,
    Dispatched,
    Running,
    Completed,
    Failed,
    Abandoned,
}

impl NodeState {
    pub fn is_terminal(self) -> bool {
        matches!(self, NodeState::Completed | NodeState::Abandoned)
    }

    pub fn in_flight(self) -> bool {
        matches!(self, NodeState::Dispatched | NodeState::Running)
    }

    pub fn name(self) -> &'static str {
        match self {
            NodeState::Idle => "Idle",
            NodeState::Ready => "Ready",
            NodeState::Dispatched => "Dispatched",
            NodeState::Running => "Running",
            NodeState::Completed => "Completed",
            NodeState::Failed => "Failed",
            NodeState::Abandoned => "Abandoned",
        }
    }
}

impl fmt::Display for NodeState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Transitions the state machine allows. Self-transitions annotate the log.
pub fn is_legal_transition(from: NodeState, to: NodeState) -> bool {
    use NodeState::*;
    from == to
        || matches!(
            (from, to),
            (Idle, Ready)
                | (Idle, Abandoned)
                | (Ready, Dispatched)
                | (Ready, Completed)
                | (Dispatched, Running)
                | (Dispatched, Completed)
                | (Dispatched, Failed)
                | (Running, Completed)
                | (Running, Failed)
                | (Failed, Ready)
                | (Failed, Abandoned)
        )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Success,
    Failure(FailureCause),
    /// Contact with the execution was lost; `execution_alive` when it keeps
    /// running remotely.
    Lost {
        cause: FailureCause,
        execution_alive: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cause {
    None,
    Ok,
    Events(u64),
    Failure(FailureCause),
    Resubmit(u32),
    LostNoRetry,
    Upstream,
    DuplicateResolved,
    Timeout(u32),
    FtshRetry(u32),
    Parked(FailureCause),
    Saturated(usize),
}

impl fmt::Display for Cause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cause::None => f.write_str("-"),
            Cause::Ok => f.write_str("OK"),
            Cause::Events(n) => write!(f, "OK events={n}"),
            Cause::Failure(c) => f.write_str(c.tag()),
            Cause::Resubmit(n) => write!(f, "RESUBMIT {n}"),
            Cause::LostNoRetry => f.write_str("LOST no-retry"),
            Cause::Upstream => f.write_str("UPSTREAM_ABANDONED"),
            Cause::DuplicateResolved => f.write_str("DUPLICATE_RESOLVED"),
            Cause::Timeout(n) => write!(f, "TIMEOUT attempt={n}"),
            Cause::FtshRetry(n) => write!(f, "RETRY {n}"),
            Cause::Parked(c) => write!(f, "DEFERRED {}", c.tag()),
            Cause::Saturated(n) => write!(f, "SATURATED deferred={n}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub from: NodeState,
    pub to: NodeState,
    pub cause: Cause,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeRunState {
    pub node_id: NodeId,
    pub state: NodeState,
    pub attempts: u32,
    pub wasted_cpu_seconds: f64,
    pub failure_causes: Vec<FailureCause>,
    current: Option<ExecId>,
    live: Vec<ExecId>,
}

impl NodeRunState {
    pub fn new(node_id: NodeId) -> Self {
        Self {
            node_id,
            state: NodeState::Idle,
            attempts: 0,
            wasted_cpu_seconds: 0.0,
            failure_causes: Vec::new(),
            current: None,
            live: Vec::new(),
        }
    }

    /// A node mid-flight, for exercising the outcome rules directly.
    pub fn in_flight(node_id: NodeId, state: NodeState, attempts: u32) -> Self {
        Self {
            state,
            attempts,
            ..Self::new(node_id)
        }
    }

    fn set(&mut self, to: NodeState, cause: Cause) -> Transition {
        let from = self.state;
        debug_assert!(is_legal_transition(from, to), "{from}->{to}");
        self.state = to;
        Transition { from, to, cause }
    }

    /// Apply the auto-restart rules to an outcome of the in-flight attempt.
    pub fn handle_outcome(
        &mut self,
        outcome: Outcome,
        policy: &RetryPolicy,
    ) -> Result<Vec<Transition>, ExecutorError> {
        if self.state.is_terminal() {
            return Err(ExecutorError::OutcomeForTerminalNode(self.node_id));
        }
        if !self.state.in_flight() {
            return Err(ExecutorError::NotInFlight {
                node: self.node_id,
                state: self.state,
            });
        }
        let mut out = Vec::with_capacity(2);
        match outcome {
            Outcome::Success => out.push(self.set(NodeState::Completed, Cause::Ok)),
            Outcome::Failure(cause) => {
                self.failure_causes.push(cause);
                out.push(self.set(NodeState::Failed, Cause::Failure(cause)));
                out.push(self.after_failure(cause, policy));
            }
            Outcome::Lost {
                cause,
                execution_alive,
            } => {
                if policy.may_retry(cause, self.attempts) {
                    self.failure_causes.push(cause);
                    out.push(self.set(NodeState::Failed, Cause::Failure(cause)));
                    out.push(self.set(NodeState::Ready, Cause::Resubmit(self.attempts + 1)));
                } else if execution_alive {
                    out.push(Transition {
                        from: self.state,
                        to: self.state,
                        cause: Cause::LostNoRetry,
                    });
                } else {
                    self.failure_causes.push(cause);
                    out.push(self.set(NodeState::Failed, Cause::Failure(cause)));
                    out.push(self.set(NodeState::Abandoned, Cause::Failure(cause)));
                }
            }
        }
        Ok(out)
    }

    fn after_failure(&mut self, cause: FailureCause, policy: &RetryPolicy) -> Transition {
        if policy.may_retry(cause, self.attempts) {
            self.set(NodeState::Ready, Cause::Resubmit(self.attempts + 1))
        } else {
            self.set(NodeState::Abandoned, Cause::Failure(cause))
        }
    }

    /// Failure cause if every failed attempt had the same one and there
    /// were at least `threshold` attempts.
    pub fn looping_cause(&self, threshold: u32) -> Option<FailureCause> {
        let first = *self.failure_causes.first()?;
        (self.attempts >= threshold
            && self.failure_causes.len() as u32 >= threshold
            && self.failure_causes.iter().all(|c| *c == first))
        .then_some(first)
    }
}

/// Who owns a job and what it is worth.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobOwner {
    pub dn: String,
    pub request_id: String,
    pub events: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JobStatus {
    Active,
    Completed,
    Abandoned,
}

#[derive(Debug, Clone)]
pub struct JobRun {
    pub dag: Dag,
    pub site: usize,
    pub master: usize,
    pub owner: JobOwner,
    pub nodes: Vec<NodeRunState>,
    pub status: JobStatus,
    pub output_completed_at: Option<f64>,
    pub useful_cpu_seconds: f64,
    pub failed_cpu_seconds: f64,
}

impl JobRun {
    pub fn wasted_cpu_seconds(&self) -> f64 {
        self.nodes.iter().map(|n| n.wasted_cpu_seconds).sum()
    }

    fn stage_out(&self) -> NodeId {
        self.dag
            .find_kind(NodeKind::StageOut)
            .next()
            .expect("validated dag")
            .id
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DispatchAction {
    Transfer {
        job: usize,
        node: NodeId,
        site: usize,
        files: u32,
        size_mb: f64,
        inbound: bool,
    },
    Batch {
        job: usize,
        node: NodeId,
        site: usize,
        work_ghz_seconds: f64,
    },
    Cleanup {
        job: usize,
        node: NodeId,
        site: usize,
    },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DispatchReport {
    pub actions: Vec<DispatchAction>,
    pub deferred: usize,
    pub saturated: bool,
}

/// Answers whether a node may be sent to a site right now.
pub trait DispatchGate {
    fn site_up(&self, site: usize) -> bool;
    fn authorize(&self, site: usize, dn: &str) -> Option<String>;

    /// How many more batch nodes `site` will take right now.
    fn batch_room(&self, _site: usize) -> usize {
        usize::MAX
    }
}

/// Gate that lets everything through; handy for tests.
pub struct OpenGate;

impl DispatchGate for OpenGate {
    fn site_up(&self, _site: usize) -> bool {
        true
    }

    fn authorize(&self, _site: usize, _dn: &str) -> Option<String> {
        Some("any".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchRecord {
    pub time: f64,
    pub job: usize,
    pub node: NodeId,
    pub site: usize,
    pub dn: String,
    pub account: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    pub time: f64,
    pub master: u32,
    /// `None` for master-level records.
    pub job: Option<(u32, u32)>,
    pub from: NodeState,
    pub to: NodeState,
    pub cause: Cause,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobCompletion {
    pub time: f64,
    pub job: usize,
    pub site: usize,
    pub request_id: String,
    pub events: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaEntry {
    pub job_id: String,
    pub request_id: String,
    pub files: u32,
    pub size_mb: f64,
    pub pfn: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryLoop {
    pub job_id: String,
    pub node: String,
    pub attempts: u32,
    pub cause: FailureCause,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MasterStats {
    pub master_id: String,
    pub jobs: usize,
    pub tracked: usize,
    pub peak_tracked: usize,
    pub saturation_incidents: u32,
}

type ReadyKey = (Reverse<NodeId>, usize);

/// Ready nodes of one master, split by site and by whether they need a
/// batch slot there.
#[derive(Debug)]
struct ReadyQueue {
    batch: Vec<BTreeSet<ReadyKey>>,
    other: Vec<BTreeSet<ReadyKey>>,
    len: usize,
}

impl ReadyQueue {
    fn new(sites: usize) -> Self {
        Self {
            batch: vec![BTreeSet::new(); sites],
            other: vec![BTreeSet::new(); sites],
            len: 0,
        }
    }

    fn insert(&mut self, site: usize, batch: bool, job: usize, node: NodeId) {
        let set = if batch { &mut self.batch[site] } else { &mut self.other[site] };
        if set.insert((Reverse(node), job)) {
            self.len += 1;
        }
    }

    /// Best node over all sites, skipping batch nodes for sites without room.
    fn pop_best(&mut self, has_room: impl Fn(usize) -> bool) -> Option<(usize, NodeId)> {
        let mut best: Option<(ReadyKey, usize, bool)> = None;
        for site in 0..self.batch.len() {
            let mut consider = |key: Option<&ReadyKey>, batch: bool| {
                if let Some(&k) = key {
                    if best.map_or(true, |(b, _, _)| k < b) {
                        best = Some((k, site, batch));
                    }
                }
            };
            consider(self.other[site].first(), false);
            if has_room(site) {
                consider(self.batch[site].first(), true);
            }
        }
        let (key, site, batch) = best?;
        let set = if batch { &mut self.batch[site] } else { &mut self.other[site] };
        set.remove(&key);
        self.len -= 1;
        Some((key.1, key.0 .0))
    }

    fn len(&self) -> usize {
        self.len
    }
}

#[derive(Debug)]
struct MasterRun {
    config: MasterConfig,
    tracked: usize,
    peak_tracked: usize,
    ready: ReadyQueue,
    saturated: bool,
    incidents: u32,
    jobs: usize,
}

pub struct Executor {
    masters: Vec<MasterRun>,
    site_names: Vec<String>,
    jobs: Vec<JobRun>,
    job_index: HashMap<String, usize>,
    policy: RetryPolicy,
    exec_owner: HashMap<ExecId, (usize, NodeId)>,
    parked: Vec<Vec<(usize, NodeId)>>,
    wasted_by_site: Vec<f64>,
    log: Vec<LogRecord>,
    completions: Vec<JobCompletion>,
    audit: Vec<DispatchRecord>,
    active_jobs: usize,
    closed_at: Option<f64>,
    catalog_registered: bool,
}

impl Executor {
    pub fn new(
        masters: Vec<MasterConfig>,
        site_names: Vec<String>,
        policy: RetryPolicy,
    ) -> Result<Self, ExecutorError> {
        policy.validate()?;
        if masters.is_empty() {
            return Err(ExecutorError::NoMasters);
        }
        for (i, m) in masters.iter().enumerate() {
            if m.max_tracked_processes == 0 {
                return Err(ExecutorError::ZeroCapacity(m.master_id.clone()));
            }
            if masters[..i].iter().any(|o| o.master_id == m.master_id) {
                return Err(ExecutorError::DuplicateMaster(m.master_id.clone()));
            }
        }
        Ok(Self {
            masters: masters
                .into_iter()
                .map(|config| MasterRun {
                    config,
                    tracked: 0,
                    peak_tracked: 0,
                    ready: ReadyQueue::new(site_names.len()),
                    saturated: false,
                    incidents: 0,
                    jobs: 0,
                })
                .collect(),
            parked: vec![Vec::new(); site_names.len()],
            wasted_by_site: vec![0.0; site_names.len()],
            site_names,
            jobs: Vec::new(),
            job_index: HashMap::new(),
            policy,
            exec_owner: HashMap::new(),
            log: Vec::new(),
            completions: Vec::new(),
            audit: Vec::new(),
            active_jobs: 0,
            closed_at: None,
            catalog_registered: false,
        })
    }

    pub fn policy(&self) -> &RetryPolicy {
        &self.policy
    }

    pub fn master_index(&self, id: &str) -> Option<usize> {
        self.masters.iter().position(|m| m.config.master_id == id)
    }

    pub fn master_count(&self) -> usize {
        self.masters.len()
    }

    pub fn jobs(&self) -> &[JobRun] {
        &self.jobs
    }

    pub fn job(&self, job: usize) -> &JobRun {
        &self.jobs[job]
    }

    pub fn job_by_id(&self, id: &str) -> Option<usize> {
        self.job_index.get(id).copied()
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }

    pub fn completions(&self) -> &[JobCompletion] {
        &self.completions
    }

    pub fn dispatch_audit(&self) -> &[DispatchRecord] {
        &self.audit
    }

    pub fn tracked(&self, master: usize) -> usize {
        self.masters[master].tracked
    }

    pub fn ready_len(&self, master: usize) -> usize {
        self.masters[master].ready.len()
    }

    pub fn master_stats(&self) -> Vec<MasterStats> {
        self.masters
            .iter()
            .map(|m| MasterStats {
                master_id: m.config.master_id.clone(),
                jobs: m.jobs,
                tracked: m.tracked,
                peak_tracked: m.peak_tracked,
                saturation_incidents: m.incidents,
            })
            .collect()
    }

    pub fn is_finished(&self) -> bool {
        self.active_jobs == 0
    }

    pub fn closed_at(&self) -> Option<f64> {
        self.closed_at
    }

    /// Register a DAG with `master`, to run at `site`. Its root becomes ready.
    pub fn submit_dag(
        &mut self,
        dag: Dag,
        site: &str,
        master: &str,
        owner: JobOwner,
        now: f64,
    ) -> Result<usize, ExecutorError> {
        let site_idx = self
            .site_names
            .iter()
            .position(|s| s == site)
            .ok_or_else(|| ExecutorError::UnknownSite(site.to_string()))?;
        let master_idx = self
            .master_index(master)
            .ok_or_else(|| ExecutorError::UnknownMaster(master.to_string()))?;
        if self.job_index.contains_key(&dag.job_id) {
            return Err(ExecutorError::DuplicateJob(dag.job_id.clone()));
        }
        if self.closed_at.is_some() {
            return Err(ExecutorError::Closed);
        }
        validate_dag(&dag).map_err(|v| ExecutorError::InvalidDag {
            job: dag.job_id.clone(),
            violation: v,
        })?;
        let job = self.jobs.len();
        self.job_index.insert(dag.job_id.clone(), job);
        let nodes = (0..dag.nodes.len()).map(NodeRunState::new).collect();
        self.jobs.push(JobRun {
            dag,
            site: site_idx,
            master: master_idx,
            owner,
            nodes,
            status: JobStatus::Active,
            output_completed_at: None,
            useful_cpu_seconds: 0.0,
            failed_cpu_seconds: 0.0,
        });
        self.masters[master_idx].jobs += 1;
        self.active_jobs += 1;
        let root = self.jobs[job]
            .dag
            .find_kind(NodeKind::StageIn)
            .next()
            .expect("validated")
            .id;
        self.make_ready(job, root, now, Cause::None);
        Ok(job)
    }

    fn record(&mut self, job: usize, node: NodeId, t: Transition, now: f64) {
        let master = self.jobs[job].master as u32;
        self.log.push(LogRecord {
            time: now,
            master,
            job: Some((job as u32, node as u32)),
            from: t.from,
            to: t.to,
            cause: t.cause,
        });
    }

    fn transition(&mut self, job: usize, node: NodeId, to: NodeState, cause: Cause, now: f64) {
        let was_in_flight = self.jobs[job].nodes[node].state.in_flight();
        let t = self.jobs[job].nodes[node].set(to, cause);
        if was_in_flight && !to.in_flight() {
            self.release_slot(job);
        }
        self.record(job, node, t, now);
    }

    fn release_slot(&mut self, job: usize) {
        let m = &mut self.masters[self.jobs[job].master];
        debug_assert!(m.tracked > 0);
        m.tracked -= 1;
    }

    fn make_ready(&mut self, job: usize, node: NodeId, now: f64, cause: Cause) {
        self.transition(job, node, NodeState::Ready, cause, now);
        self.enqueue(job, node);
    }

    fn enqueue(&mut self, job: usize, node: NodeId) {
        let j = &self.jobs[job];
        let batch = j.dag.nodes[node].kind == NodeKind::Run;
        let (master, site) = (j.master, j.site);
        self.masters[master].ready.insert(site, batch, job, node);
    }

    /// Release ready nodes of `master` up to its free tracked-process slots.
    pub fn dispatch_step(&mut self, master: usize, now: f64, gate: &dyn DispatchGate) -> DispatchReport {
        let mut report = DispatchReport::default();
        let mut room: Vec<usize> = (0..self.site_names.len()).map(|s| gate.batch_room(s)).collect();
        while self.masters[master].tracked < self.masters[master].config.max_tracked_processes {
            let Some((job, node)) = self.masters[master].ready.pop_best(|site| room[site] > 0) else {
                break;
            };
            if self.jobs[job].nodes[node].state != NodeState::Ready {
                continue; // resolved while queued
            }
            let site = self.jobs[job].site;
            if !gate.site_up(site) {
                self.park(job, node, FailureCause::SiteDown, now);
                continue;
            }
            let Some(account) = gate.authorize(site, &self.jobs[job].owner.dn) else {
                self.park(job, node, FailureCause::AuthDenied, now);
                continue;
            };
            self.audit.push(DispatchRecord {
                time: now,
                job,
                node,
                site,
                dn: self.jobs[job].owner.dn.clone(),
                account,
            });
            if self.jobs[job].dag.nodes[node].kind == NodeKind::Run {
                room[site] = room[site].saturating_sub(1);
            }
            let n = &mut self.jobs[job].nodes[node];
            n.attempts += 1;
            let attempt = n.attempts;
            self.transition(job, node, NodeState::Dispatched, Cause::Resubmit(attempt), now);
            let m = &mut self.masters[master];
            m.tracked += 1;
            m.peak_tracked = m.peak_tracked.max(m.tracked);
            report.actions.push(self.action_for(job, node));
        }
        let m = &mut self.masters[master];
        report.deferred = m.ready.len();
        report.saturated = report.deferred > 0 && m.tracked >= m.config.max_tracked_processes;
        if report.saturated && !m.saturated {
            m.incidents += 1;
            self.log.push(LogRecord {
                time: now,
                master: master as u32,
                job: None,
                from: NodeState::Ready,
                to: NodeState::Ready,
                cause: Cause::Saturated(report.deferred),
            });
        }
        self.masters[master].saturated = report.saturated;
        report
    }

    fn park(&mut self, job: usize, node: NodeId, why: FailureCause, now: f64) {
        self.transition(job, node, NodeState::Ready, Cause::Parked(why), now);
        let site = self.jobs[job].site;
        self.parked[site].push((job, node));
    }

    /// Put nodes deferred for `site` back into their ready queues.
    pub fn unpark_site(&mut self, site: usize) {
        let parked = std::mem::take(&mut self.parked[site]);
        for (job, node) in parked {
            self.enqueue(job, node);
        }
    }

    pub fn unpark_all(&mut self) {
        for site in 0..self.parked.len() {
            self.unpark_site(site);
        }
    }

    pub fn parked_len(&self) -> usize {
        self.parked.iter().map(Vec::len).sum()
    }

    fn action_for(&self, job: usize, node: NodeId) -> DispatchAction {
        let j = &self.jobs[job];
        let n = &j.dag.nodes[node];
        match (&n.payload, n.kind) {
            (Payload::Transfer(fs), kind) => DispatchAction::Transfer {
                job,
                node,
                site: j.site,
                files: fs.files,
                size_mb: fs.size_mb,
                inbound: kind == NodeKind::StageIn,
            },
            (Payload::Run { stage, events }, _) => DispatchAction::Batch {
                job,
                node,
                site: j.site,
                work_ghz_seconds: stage.ghz_seconds_per_event() * *events as f64,
            },
            (Payload::Cleanup, _) => DispatchAction::Cleanup {
                job,
                node,
                site: j.site,
            },
        }
    }

    /// Associate a batch execution with the node that launched it.
    pub fn bind_exec(&mut self, job: usize, node: NodeId, exec: ExecId) {
        let n = &mut self.jobs[job].nodes[node];
        n.current = Some(exec);
        n.live.push(exec);
        self.exec_owner.insert(exec, (job, node));
    }

    pub fn exec_owner(&self, exec: ExecId) -> Option<(usize, NodeId)> {
        self.exec_owner.get(&exec).copied()
    }

    /// A dispatched node began executing (transfer or cleanup started, or a
    /// batch run got a CPU).
    pub fn mark_running(&mut self, job: usize, node: NodeId, now: f64) {
        if self.jobs[job].nodes[node].state == NodeState::Dispatched {
            self.transition(job, node, NodeState::Running, Cause::None, now);
        }
    }

    pub fn on_run_started(&mut self, exec: ExecId, now: f64) {
        if let Some(&(job, node)) = self.exec_owner.get(&exec) {
            if self.jobs[job].nodes[node].current == Some(exec) {
                self.mark_running(job, node, now);
            }
        }
    }

    /// Annotate the log without changing state (FTSH attempt history).
    pub fn annotate(&mut self, job: usize, node: NodeId, cause: Cause, now: f64) {
        let s = self.jobs[job].nodes[node].state;
        self.record(job, node, Transition { from: s, to: s, cause }, now);
    }

    /// A batch execution ended on its own.
    pub fn on_run_finished(
        &mut self,
        exec: ExecId,
        cpu_seconds: f64,
        result: Result<(), FailureCause>,
        now: f64,
    ) -> Result<(), ExecutorError> {
        let (job, node) = self
            .exec_owner
            .remove(&exec)
            .ok_or(ExecutorError::UnknownExec(exec))?;
        let n = &mut self.jobs[job].nodes[node];
        n.live.retain(|e| *e != exec);
        let is_current = n.current == Some(exec);
        if is_current {
            n.current = None;
        }
        if n.state.is_terminal() || self.closed_at.is_some() {
            self.add_wasted(job, node, cpu_seconds);
            return Ok(());
        }
        match result {
            Ok(()) => {
                self.jobs[job].useful_cpu_seconds += cpu_seconds;
                if is_current {
                    self.apply_outcome(job, node, Outcome::Success, now)
                } else {
                    // an earlier, superseded execution got there first; the
                    // resubmitted one becomes the duplicate
                    if let Some(cur) = self.jobs[job].nodes[node].current.take() {
                        debug_assert!(self.jobs[job].nodes[node].live.contains(&cur));
                    }
                    self.transition(job, node, NodeState::Completed, Cause::DuplicateResolved, now);
                    self.node_completed(job, node, now);
                    Ok(())
                }
            }
            Err(cause) => {
                if is_current {
                    self.jobs[job].failed_cpu_seconds += cpu_seconds;
                    self.apply_outcome(job, node, Outcome::Failure(cause), now)
                } else {
                    self.add_wasted(job, node, cpu_seconds);
                    Ok(())
                }
            }
        }
    }

    fn add_wasted(&mut self, job: usize, node: NodeId, cpu_seconds: f64) {
        self.jobs[job].nodes[node].wasted_cpu_seconds += cpu_seconds;
        self.wasted_by_site[self.jobs[job].site] += cpu_seconds;
    }

    /// Wasted CPU-seconds so far at each site.
    pub fn wasted_by_site(&self) -> &[f64] {
        &self.wasted_by_site
    }

    /// The master lost track of a running execution; it keeps running.
    pub fn on_contact_lost(&mut self, exec: ExecId, now: f64) -> Result<(), ExecutorError> {
        let &(job, node) = self
            .exec_owner
            .get(&exec)
            .ok_or(ExecutorError::UnknownExec(exec))?;
        let n = &self.jobs[job].nodes[node];
        if n.current != Some(exec) || !n.state.in_flight() || self.closed_at.is_some() {
            return Ok(());
        }
        self.apply_outcome(
            job,
            node,
            Outcome::Lost {
                cause: FailureCause::LostContact,
                execution_alive: true,
            },
            now,
        )
    }

    /// The execution died with its site.
    pub fn on_run_killed(&mut self, exec: ExecId, cpu_seconds: f64, now: f64) -> Result<(), ExecutorError> {
        let (job, node) = self
            .exec_owner
            .remove(&exec)
            .ok_or(ExecutorError::UnknownExec(exec))?;
        let n = &mut self.jobs[job].nodes[node];
        n.live.retain(|e| *e != exec);
        let is_current = n.current == Some(exec);
        if !is_current || n.state.is_terminal() || self.closed_at.is_some() {
            self.add_wasted(job, node, cpu_seconds);
            return Ok(());
        }
        n.current = None;
        self.jobs[job].failed_cpu_seconds += cpu_seconds;
        let alive = !self.jobs[job].nodes[node].live.is_empty();
        self.apply_outcome(
            job,
            node,
            Outcome::Lost {
                cause: FailureCause::SiteOutage,
                execution_alive: alive,
            },
            now,
        )
    }

    /// Outcome for a transfer or cleanup node.
    pub fn report(&mut self, job: usize, node: NodeId, outcome: Outcome, now: f64) -> Result<(), ExecutorError> {
        if self.closed_at.is_some() {
            return Ok(());
        }
        self.apply_outcome(job, node, outcome, now)
    }

    fn apply_outcome(&mut self, job: usize, node: NodeId, outcome: Outcome, now: f64) -> Result<(), ExecutorError> {
        let policy = self.policy;
        let was_in_flight = self.jobs[job].nodes[node].state.in_flight();
        let transitions = self.jobs[job].nodes[node].handle_outcome(outcome, &policy)?;
        let now_state = self.jobs[job].nodes[node].state;
        if was_in_flight && !now_state.in_flight() {
            self.release_slot(job);
        }
        for t in &transitions {
            self.record(job, node, *t, now);
        }
        match now_state {
            NodeState::Completed => self.node_completed(job, node, now),
            NodeState::Ready => {
                self.jobs[job].nodes[node].current = None;
                self.enqueue(job, node);
            }
            NodeState::Abandoned => self.node_abandoned(job, node, now),
            _ => {}
        }
        Ok(())
    }

    fn node_completed(&mut self, job: usize, node: NodeId, now: f64) {
        let kind = self.jobs[job].dag.nodes[node].kind;
        if kind == NodeKind::StageOut {
            let j = &mut self.jobs[job];
            j.output_completed_at = Some(now);
            if let Some(last) = self.log.last_mut() {
                if last.cause == Cause::Ok || last.cause == Cause::DuplicateResolved {
                    last.cause = Cause::Events(j.owner.events);
                }
            }
            self.completions.push(JobCompletion {
                time: now,
                job,
                site: j.site,
                request_id: j.owner.request_id.clone(),
                events: j.owner.events,
            });
        }
        if kind == NodeKind::Cleanup {
            self.finish_job(job);
            return;
        }
        self.release_children(job, node, now);
    }

    fn release_children(&mut self, job: usize, node: NodeId, now: f64) {
        let children: Vec<NodeId> = self.jobs[job].dag.children(node).collect();
        for c in children {
            if self.jobs[job].nodes[c].state != NodeState::Idle {
                continue;
            }
            let dag = &self.jobs[job].dag;
            let nodes = &self.jobs[job].nodes;
            let ready = if dag.nodes[c].kind == NodeKind::Cleanup {
                dag.parents(c).all(|p| nodes[p].state.is_terminal())
            } else {
                dag.parents(c).all(|p| nodes[p].state == NodeState::Completed)
            };
            if ready {
                self.make_ready(job, c, now, Cause::None);
            }
        }
    }

    fn node_abandoned(&mut self, job: usize, node: NodeId, now: f64) {
        if self.jobs[job].dag.nodes[node].kind == NodeKind::Cleanup {
            self.finish_job(job);
            return;
        }
        // skip everything downstream except cleanup, which still runs
        let mut stack: Vec<NodeId> = self.jobs[job].dag.children(node).collect();
        let mut cleanup_parents = Vec::new();
        while let Some(c) = stack.pop() {
            if self.jobs[job].dag.nodes[c].kind == NodeKind::Cleanup {
                continue;
            }
            if self.jobs[job].nodes[c].state == NodeState::Idle {
                self.transition(job, c, NodeState::Abandoned, Cause::Upstream, now);
                stack.extend(self.jobs[job].dag.children(c));
                cleanup_parents.push(c);
            }
        }
        self.release_children(job, node, now);
        for c in cleanup_parents {
            self.release_children(job, c, now);
        }
    }

    fn finish_job(&mut self, job: usize) {
        let out = self.jobs[job].stage_out();
        let j = &mut self.jobs[job];
        if j.status != JobStatus::Active {
            return;
        }
        j.status = if j.nodes[out].state == NodeState::Completed {
            JobStatus::Completed
        } else {
            JobStatus::Abandoned
        };
        self.active_jobs -= 1;
    }

    /// Stop the campaign (horizon reached). Late outcomes are ignored and
    /// any further CPU reported is counted as wasted.
    pub fn close(&mut self, now: f64) {
        if self.closed_at.is_none() {
            self.closed_at = Some(now);
        }
    }

    /// Catalog entries for every job whose output came back. Only valid once
    /// the campaign is over, and only once.
    pub fn register_replicas(&mut self) -> Result<Vec<ReplicaEntry>, ExecutorError> {
        if self.closed_at.is_none() && !self.is_finished() {
            return Err(ExecutorError::CampaignRunning(self.active_jobs));
        }
        if self.catalog_registered {
            return Err(ExecutorError::AlreadyRegistered);
        }
        self.catalog_registered = true;
        Ok(self.replica_entries())
    }

    fn replica_entries(&self) -> Vec<ReplicaEntry> {
        self.jobs
            .iter()
            .filter(|j| j.output_completed_at.is_some())
            .map(|j| {
                let out = &j.dag.nodes[j.stage_out()];
                let (files, size_mb) = match &out.payload {
                    Payload::Transfer(fs) => (fs.files, fs.size_mb),
                    _ => (0, 0.0),
                };
                ReplicaEntry {
                    job_id: j.dag.job_id.clone(),
                    request_id: j.owner.request_id.clone(),
                    files,
                    size_mb,
                    pfn: format!(
                        "gsiftp://{}/store/{}/{}",
                        self.masters[j.master].config.master_id, j.owner.request_id, j.dag.job_id
                    ),
                }
            })
            .collect()
    }

    pub fn retry_loops(&self) -> Vec<RetryLoop> {
        let threshold = self.policy.loop_threshold;
        self.jobs
            .iter()
            .flat_map(|j| {
                j.nodes.iter().filter_map(move |n| {
                    n.looping_cause(threshold).map(|cause| RetryLoop {
                        job_id: j.dag.job_id.clone(),
                        node: j.dag.nodes[n.node_id].name.clone(),
                        attempts: n.attempts,
                        cause,
                    })
                })
            })
            .collect()
    }

    /// One line per record:
    /// `<time> <master> <job> <node> <from>-><to> <cause>`.
    /// Master-level records use `*` for job, node and transition.
    pub fn render_log_line(&self, r: &LogRecord, out: &mut String) {
        let master = &self.masters[r.master as usize].config.master_id;
        match r.job {
            Some((job, node)) => {
                let j = &self.jobs[job as usize];
                let _ = writeln!(
                    out,
                    "{:.3} {} {} {} {}->{} {}",
                    r.time, master, j.dag.job_id, j.dag.nodes[node as usize].name, r.from, r.to, r.cause
                );
            }
            None => {
                let _ = writeln!(out, "{:.3} {} * * * {}", r.time, master, r.cause);
            }
        }
    }

    pub fn render_log(&self) -> String {
        let mut out = String::with_capacity(self.log.len() * 64);
        for r in &self.log {
            self.render_log_line(r, &mut out);
        }
        out
    }

    pub fn site_name(&self, site: usize) -> &str {
        &self.site_names[site]
    }
}
