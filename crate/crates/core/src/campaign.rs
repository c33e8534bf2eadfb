//! The campaign driver: one event loop tying the fabric, executor, FTSH
//! sessions, gridmap synchronisation and monitoring together.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dagwrap::{wrap_job, NodeId};
use crate::error::ExecutorError;
use crate::executor::{
    Cause, DispatchAction, DispatchGate, Executor, JobOwner, JobStatus, MasterStats, Outcome,
    ReplicaEntry, RetryLoop,
};
use crate::ftsh::{FtshSession, Step};
use crate::gridsim::{
    EventQueue, Fabric, FabricEvent, FailureCause, Notice, RunRequest, TransferId, TransferStart, Window,
};
use crate::monitor::{
    check_flat_spots, efficiency_csv, efficiency_report, flat_spots, progress_csv, theoretical_max, EfficiencyReport,
    FlatSpotCheck, MetricSample, ProgressPoint, FLAT_SPOT_MIN,
};
use crate::rng::RngStreams;
use crate::scenario::{Scenario, ValidationError};
use crate::vo::{GridUser, Gridmap, UserDirectory};
use crate::workload::chunk_request;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CampaignError {
    #[error("scenario is invalid: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<ValidationError>),
    #[error("setup failed: {0}")]
    Setup(String),
    #[error("executor: {0}")]
    Executor(#[from] ExecutorError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub windows: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
enum Ev {
    Fabric(FabricEvent),
    Sample,
    Sync,
    DirectoryUpdate(usize),
    FtshDeadline { session: usize, attempt: u32 },
    FtshResume { session: usize },
    CleanupDone { job: usize, node: NodeId },
    Horizon,
}

impl From<FabricEvent> for Ev {
    fn from(e: FabricEvent) -> Self {
        Ev::Fabric(e)
    }
}

struct XferSession {
    job: usize,
    node: NodeId,
    site: usize,
    files: u32,
    size_mb: f64,
    node_attempt: u32,
    ftsh: Option<FtshSession>,
    current: Option<TransferId>,
    active_attempt: Option<u32>,
    done: bool,
}

struct Gate<'a> {
    fabric: &'a Fabric,
    gridmap: &'a Gridmap,
    max_idle: Option<usize>,
}

impl DispatchGate for Gate<'_> {
    fn site_up(&self, site: usize) -> bool {
        self.fabric.is_up(site)
    }

    fn authorize(&self, _site: usize, dn: &str) -> Option<String> {
        self.gridmap.authorize(dn).map(str::to_string)
    }

    fn batch_room(&self, site: usize) -> usize {
        match self.max_idle {
            Some(limit) => {
                limit.saturating_sub(self.fabric.queued(site)) + self.fabric.idle_cpus(site) as usize
            }
            None => usize::MAX,
        }
    }
}

/// Smooth weighted round robin over indices.
struct Swrr {
    weights: Vec<f64>,
    current: Vec<f64>,
    total: f64,
}

impl Swrr {
    fn new(weights: Vec<f64>) -> Self {
        let total = weights.iter().sum();
        Self {
            current: vec![0.0; weights.len()],
            weights,
            total,
        }
    }

    fn next(&mut self) -> usize {
        let mut best = 0;
        for i in 0..self.weights.len() {
            self.current[i] += self.weights[i];
            if self.current[i] > self.current[best] {
                best = i;
            }
        }
        self.current[best] -= self.total;
        best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestSummary {
    pub id: String,
    pub pipeline: String,
    pub events: u64,
    pub jobs: u64,
    pub tracked: bool,
    pub events_completed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteSummary {
    pub name: String,
    pub worker_cpus: u32,
    pub cpu_speed: f64,
    pub peak_running: u32,
    pub cpu_seconds: f64,
    pub uptime_seconds: f64,
    pub wasted_cpu_seconds: f64,
    pub events_completed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub scenario: String,
    pub seed: u64,
    pub requests: Vec<RequestSummary>,
    pub events_requested: u64,
    pub jobs_total: usize,
    pub jobs_completed: usize,
    pub jobs_abandoned: usize,
    pub jobs_unfinished: usize,
    pub events_completed: u64,
    pub tracked_events_completed: u64,
    pub useful_cpu_seconds: f64,
    pub wasted_cpu_seconds: f64,
    pub failed_cpu_seconds: f64,
    pub saturation_incidents: u32,
    pub masters: Vec<MasterStats>,
    pub sites: Vec<SiteSummary>,
    pub campaign_end_seconds: f64,
    pub truncated: bool,
    pub ceiling_events_per_day: f64,
    pub formula_ceiling_events_per_day: f64,
    pub efficiency: f64,
    pub formula_efficiency: f64,
    pub retry_loops: Vec<RetryLoop>,
    pub flat_spots: FlatSpotCheck,
    pub replicas_registered: usize,
}

pub struct CampaignResult {
    pub summary: Summary,
    pub executor: Executor,
    pub events_log: String,
    pub progress: Vec<ProgressPoint>,
    pub samples: Vec<MetricSample>,
    pub efficiency: EfficiencyReport,
    pub formula_efficiency: EfficiencyReport,
    pub replicas: Vec<ReplicaEntry>,
    /// Gridmap text in force from each sync time onward.
    pub gridmap_history: Vec<(f64, String)>,
    pub site_names: Vec<String>,
}

impl CampaignResult {
    pub fn replicas_text(&self) -> String {
        let mut out = String::new();
        for r in &self.replicas {
            let _ = writeln!(
                out,
                "{} {} files={} mb={:.3} {}",
                r.job_id, r.request_id, r.files, r.size_mb, r.pfn
            );
        }
        out
    }

    /// Write `events.log`, `progress.csv`, `progress.json`, `efficiency.csv`,
    /// `replicas.txt` and `summary.json` into `dir`.
    pub fn write_to(&self, dir: &Path) -> io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("events.log"), &self.events_log)?;
        std::fs::write(dir.join("progress.csv"), progress_csv(&self.progress))?;
        std::fs::write(
            dir.join("progress.json"),
            serde_json::to_string(&self.progress).map_err(io::Error::other)?,
        )?;
        std::fs::write(dir.join("efficiency.csv"), efficiency_csv(&self.efficiency))?;
        std::fs::write(dir.join("replicas.txt"), self.replicas_text())?;
        let mut summary = serde_json::to_string_pretty(&self.summary).map_err(io::Error::other)?;
        summary.push('\n');
        std::fs::write(dir.join("summary.json"), summary)?;
        Ok(())
    }
}

struct Campaign<'s> {
    scenario: &'s Scenario,
    q: EventQueue<Ev>,
    fabric: Fabric,
    executor: Executor,
    directory: UserDirectory,
    gridmap: Gridmap,
    gridmap_history: Vec<(f64, String)>,
    sessions: Vec<XferSession>,
    xfer_session: HashMap<TransferId, usize>,
    tracked_request: HashMap<String, bool>,
    site_events: Vec<u64>,
    completion_cursor: usize,
    events_total: u64,
    tracked_total: u64,
    samples: Vec<MetricSample>,
    progress: Vec<ProgressPoint>,
    horizon: f64,
}

/// Validate and run `scenario` to completion or its horizon.
pub fn run(scenario: &Scenario, opts: RunOptions) -> Result<CampaignResult, CampaignError> {
    let mut scenario = scenario.clone();
    if let Some(seed) = opts.seed {
        scenario.seed = Some(seed);
    }
    if let Some(w) = opts.windows {
        scenario.monitor.windows = w;
    }
    let errors = scenario.validate();
    if !errors.is_empty() {
        return Err(CampaignError::Invalid(errors));
    }
    let mut c = Campaign::new(&scenario)?;
    let (end, truncated) = c.run()?;
    c.finish(end, truncated)
}

fn setup<E: ToString>(e: E) -> CampaignError {
    CampaignError::Setup(e.to_string())
}

impl<'s> Campaign<'s> {
    fn new(scenario: &'s Scenario) -> Result<Self, CampaignError> {
        let seed = scenario.seed.expect("validated");
        let streams = RngStreams::new(seed);
        let mut q = EventQueue::new();
        let mut fabric = Fabric::new(
            scenario.site_specs(),
            scenario.channel_specs(),
            scenario.failures.clone(),
            &streams,
        )
        .map_err(setup)?;
        for (site, windows) in scenario.outage_windows().into_iter().enumerate() {
            for w in windows {
                fabric.inject_outage(site, w, &mut q).map_err(setup)?;
            }
        }
        fabric.prime(&mut q);
        let site_names: Vec<String> = scenario.sites.iter().map(|s| s.name.clone()).collect();
        let executor = Executor::new(scenario.masters.clone(), site_names, scenario.retry_policy())?;
        let directory = scenario.directory().map_err(CampaignError::Setup)?;
        let horizon = scenario.horizon();
        let mut c = Self {
            scenario,
            q,
            fabric,
            executor,
            directory,
            gridmap: Gridmap::default(),
            gridmap_history: Vec::new(),
            sessions: Vec::new(),
            xfer_session: HashMap::new(),
            tracked_request: scenario.requests.iter().map(|r| (r.id.clone(), r.tracked)).collect(),
            site_events: vec![0; scenario.sites.len()],
            completion_cursor: 0,
            events_total: 0,
            tracked_total: 0,
            samples: Vec::new(),
            progress: Vec::new(),
            horizon,
        };
        c.q.schedule(horizon, Ev::Horizon).map_err(setup)?;
        c.sync_gridmap(0.0);
        for (i, u) in scenario.vo.updates.iter().enumerate() {
            c.q.schedule(u.at_hour * 3_600.0, Ev::DirectoryUpdate(i)).map_err(setup)?;
        }
        c.submit_jobs()?;
        c.sample(0.0);
        Ok(c)
    }

    /// Each site's share is its capacity times its uptime up to the point
    /// where the whole grid would have delivered `work_ghz_seconds`.
    fn default_site_weights(&self, work_ghz_seconds: f64) -> Vec<f64> {
        let sites = self.scenario.site_specs();
        let uptime = |site: usize, t: f64| -> f64 {
            let down: f64 = self
                .fabric
                .down_windows(site)
                .iter()
                .map(|w| (w.end.min(t) - w.start.max(0.0)).max(0.0))
                .sum();
            (t - down).max(0.0)
        };
        let delivered = |t: f64| -> f64 {
            sites
                .iter()
                .enumerate()
                .map(|(i, s)| s.capacity_ghz() * uptime(i, t))
                .sum()
        };
        let mut t = self.horizon;
        if delivered(t) > work_ghz_seconds {
            let (mut lo, mut hi) = (0.0, self.horizon);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if delivered(mid) >= work_ghz_seconds {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            t = hi;
        }
        sites
            .iter()
            .enumerate()
            .map(|(i, s)| s.capacity_ghz() * uptime(i, t))
            .collect()
    }

    fn submit_jobs(&mut self) -> Result<(), CampaignError> {
        let sc = self.scenario;
        let requests = sc.production_requests().map_err(CampaignError::Setup)?;
        let options = sc.stage_in_options();
        let work: f64 = requests
            .iter()
            .map(|r| r.total_events as f64 * r.pipeline.ghz_seconds_per_event())
            .sum();
        let default_weights = self.default_site_weights(work);
        let all_masters: Vec<usize> = (0..sc.masters.len()).collect();
        struct Plan {
            jobs: std::vec::IntoIter<crate::workload::JobSpec>,
            sites: Swrr,
            site_ids: Vec<usize>,
            masters: Vec<usize>,
            next_master: usize,
            owner: String,
        }
        let mut plans = Vec::new();
        let mut counts = Vec::new();
        for (req, cfg) in requests.iter().zip(&sc.requests) {
            let rule = sc.assignment.iter().find(|a| a.request == cfg.id);
            let (site_ids, weights): (Vec<usize>, Vec<f64>) = match rule {
                Some(r) if !r.sites.is_empty() => r
                    .sites
                    .iter()
                    .map(|(name, w)| (sc.site_index(name).expect("validated"), *w))
                    .unzip(),
                _ => default_weights.iter().copied().enumerate().filter(|(_, w)| *w > 0.0).unzip(),
            };
            if site_ids.is_empty() {
                return Err(CampaignError::Setup(format!("request {} has no usable site", cfg.id)));
            }
            let masters = match rule {
                Some(r) if !r.masters.is_empty() => r
                    .masters
                    .iter()
                    .map(|m| self.executor.master_index(m).expect("validated"))
                    .collect(),
                _ => all_masters.clone(),
            };
            let jobs = chunk_request(req);
            counts.push(jobs.len() as f64);
            plans.push(Plan {
                jobs: jobs.into_iter(),
                sites: Swrr::new(weights),
                site_ids,
                masters,
                next_master: 0,
                owner: cfg.owner.clone(),
            });
        }
        let total: f64 = counts.iter().sum();
        let mut order = Swrr::new(counts);
        for _ in 0..total as usize {
            let p = &mut plans[order.next()];
            let job = p.jobs.next().expect("smooth round robin deals exact counts");
            let site = p.site_ids[p.sites.next()];
            let master = p.masters[p.next_master % p.masters.len()];
            p.next_master += 1;
            let dag = wrap_job(&job, &options).map_err(setup)?;
            let owner = JobOwner {
                dn: p.owner.clone(),
                request_id: job.request_id.clone(),
                events: job.events(),
            };
            let site_name = sc.sites[site].name.clone();
            let master_name = sc.masters[master].master_id.clone();
            self.executor.submit_dag(dag, &site_name, &master_name, owner, 0.0)?;
        }
        Ok(())
    }

    fn sync_gridmap(&mut self, now: f64) {
        self.gridmap = Gridmap::from_directory(&self.directory);
        self.gridmap_history.push((now, crate::vo::mkgridmap(&self.directory)));
        for site in 0..self.fabric.site_count() {
            if self.fabric.is_up(site) {
                self.executor.unpark_site(site);
            }
        }
        let next = now + self.scenario.sync_interval();
        if next < self.horizon {
            let _ = self.q.schedule(next, Ev::Sync);
        }
    }

    fn run(&mut self) -> Result<(f64, bool), CampaignError> {
        self.dispatch_all(0.0)?;
        if self.executor.is_finished() {
            return Ok((0.0, false));
        }
        while let Some(ev) = self.q.advance() {
            let now = ev.time;
            match ev.payload {
                Ev::Horizon => return Ok((now, true)),
                Ev::Fabric(fe) => {
                    let notices = self.fabric.handle(fe, &mut self.q);
                    self.process_notices(notices, now)?;
                }
                Ev::Sample => self.sample(now),
                Ev::Sync => self.sync_gridmap(now),
                Ev::DirectoryUpdate(i) => {
                    let u = &self.scenario.vo.updates[i];
                    self.directory
                        .add_user(
                            GridUser {
                                dn: u.dn.clone(),
                                ca: u.ca,
                            },
                            &u.group,
                        )
                        .map_err(setup)?;
                }
                Ev::FtshDeadline { session, attempt } => self.ftsh_deadline(session, attempt, now)?,
                Ev::FtshResume { session } => {
                    let s = &mut self.sessions[session];
                    if !s.done {
                        let step = s.ftsh.as_mut().expect("ftsh session").resume(now).map_err(setup)?;
                        self.ftsh_step(session, step, now)?;
                    }
                }
                Ev::CleanupDone { job, node } => self.executor.report(job, node, Outcome::Success, now)?,
            }
            self.dispatch_all(now)?;
            if self.executor.is_finished() {
                return Ok((now, false));
            }
        }
        Ok((self.q.now(), false))
    }

    fn dispatch_all(&mut self, now: f64) -> Result<(), CampaignError> {
        for m in 0..self.executor.master_count() {
            let gate = Gate {
                fabric: &self.fabric,
                gridmap: &self.gridmap,
                max_idle: self.scenario.max_idle_per_site,
            };
            let report = self.executor.dispatch_step(m, now, &gate);
            for action in report.actions {
                self.perform(action, now)?;
            }
        }
        Ok(())
    }

    fn perform(&mut self, action: DispatchAction, now: f64) -> Result<(), CampaignError> {
        match action {
            DispatchAction::Transfer {
                job,
                node,
                site,
                files,
                size_mb,
                ..
            } => {
                self.executor.mark_running(job, node, now);
                let sid = self.sessions.len();
                let node_attempt = self.executor.job(job).nodes[node].attempts;
                let ftsh = self
                    .scenario
                    .ftsh
                    .enabled
                    .then(|| FtshSession::new(self.scenario.ftsh.spec()));
                self.sessions.push(XferSession {
                    job,
                    node,
                    site,
                    files,
                    size_mb,
                    node_attempt,
                    ftsh,
                    current: None,
                    active_attempt: None,
                    done: false,
                });
                if self.scenario.ftsh.enabled {
                    let step = self.sessions[sid].ftsh.as_mut().unwrap().begin(now).map_err(setup)?;
                    self.ftsh_step(sid, step, now)?;
                } else {
                    self.start_attempt(sid, node_attempt, now)?;
                }
            }
            DispatchAction::Batch {
                job,
                node,
                site,
                work_ghz_seconds,
            } => {
                let req = RunRequest {
                    job_key: job as u64,
                    work_ghz_seconds,
                };
                let (exec, _, notices) = self.fabric.enqueue_batch(site, req, &mut self.q).map_err(setup)?;
                self.executor.bind_exec(job, node, exec);
                self.process_notices(notices, now)?;
            }
            DispatchAction::Cleanup { job, node, .. } => {
                self.executor.mark_running(job, node, now);
                self.q
                    .schedule(now + self.scenario.cleanup_seconds, Ev::CleanupDone { job, node })
                    .map_err(setup)?;
            }
        }
        Ok(())
    }

    /// Start one transfer attempt. A down site fails the attempt at once.
    fn start_attempt(&mut self, sid: usize, hang_attempt: u32, now: f64) -> Result<(), CampaignError> {
        let s = &self.sessions[sid];
        if !self.fabric.is_up(s.site) {
            return self.transfer_finished(sid, false, now);
        }
        let (xfer, start) = self
            .fabric
            .start_transfer(s.site, s.files, s.size_mb, hang_attempt, &mut self.q)
            .map_err(setup)?;
        let s = &mut self.sessions[sid];
        s.current = Some(xfer);
        self.xfer_session.insert(xfer, sid);
        debug_assert!(start == TransferStart::Active || start == TransferStart::Hung);
        Ok(())
    }

    fn ftsh_step(&mut self, sid: usize, step: Step, now: f64) -> Result<(), CampaignError> {
        let (job, node) = (self.sessions[sid].job, self.sessions[sid].node);
        match step {
            Step::Attempt { index, deadline } => {
                if index > 1 {
                    self.executor.annotate(job, node, Cause::FtshRetry(index), now);
                }
                self.sessions[sid].active_attempt = Some(index);
                self.q
                    .schedule(deadline, Ev::FtshDeadline { session: sid, attempt: index })
                    .map_err(setup)?;
                self.start_attempt(sid, index, now)
            }
            Step::Backoff { resume_at } => {
                self.q.schedule(resume_at, Ev::FtshResume { session: sid }).map_err(setup)?;
                Ok(())
            }
            Step::Succeeded => {
                self.sessions[sid].done = true;
                self.executor.report(job, node, Outcome::Success, now)?;
                Ok(())
            }
            Step::Exhausted => {
                self.sessions[sid].done = true;
                self.executor
                    .report(job, node, Outcome::Failure(FailureCause::TransferFailed), now)?;
                Ok(())
            }
        }
    }

    fn transfer_finished(&mut self, sid: usize, success: bool, now: f64) -> Result<(), CampaignError> {
        let s = &mut self.sessions[sid];
        s.current = None;
        s.active_attempt = None;
        match s.ftsh.as_mut() {
            Some(f) => {
                let step = f.on_complete(now, success).map_err(setup)?;
                self.ftsh_step(sid, step, now)
            }
            None => {
                s.done = true;
                let (job, node) = (s.job, s.node);
                let outcome = if success {
                    Outcome::Success
                } else {
                    Outcome::Failure(FailureCause::SiteDown)
                };
                self.executor.report(job, node, outcome, now)?;
                Ok(())
            }
        }
    }

    fn ftsh_deadline(&mut self, sid: usize, attempt: u32, now: f64) -> Result<(), CampaignError> {
        let s = &mut self.sessions[sid];
        if s.done || s.active_attempt != Some(attempt) {
            return Ok(());
        }
        if let Some(xfer) = s.current.take() {
            self.xfer_session.remove(&xfer);
            self.fabric.cancel_transfer(xfer, &mut self.q);
        }
        let s = &mut self.sessions[sid];
        s.active_attempt = None;
        let (job, node) = (s.job, s.node);
        let step = s.ftsh.as_mut().expect("deadline implies ftsh").on_timeout(now).map_err(setup)?;
        self.executor.annotate(job, node, Cause::Timeout(attempt), now);
        self.ftsh_step(sid, step, now)
    }

    fn process_notices(&mut self, notices: Vec<Notice>, now: f64) -> Result<(), CampaignError> {
        for n in notices {
            match n {
                Notice::RunStarted { exec, .. } => self.executor.on_run_started(exec, now),
                Notice::RunFinished {
                    exec,
                    cpu_seconds,
                    result,
                    ..
                } => self.executor.on_run_finished(exec, cpu_seconds, result, now)?,
                Notice::ContactLost { exec } => self.executor.on_contact_lost(exec, now)?,
                Notice::RunKilled { exec, cpu_seconds, .. } => self.executor.on_run_killed(exec, cpu_seconds, now)?,
                Notice::TransferDone { xfer } => {
                    if let Some(sid) = self.xfer_session.remove(&xfer) {
                        self.transfer_finished(sid, true, now)?;
                    }
                }
                Notice::TransferKilled { xfer } => {
                    if let Some(sid) = self.xfer_session.remove(&xfer) {
                        let s = &mut self.sessions[sid];
                        s.done = true;
                        s.current = None;
                        s.active_attempt = None;
                        let (job, node) = (s.job, s.node);
                        debug_assert!(s.node_attempt >= 1);
                        self.executor.report(
                            job,
                            node,
                            Outcome::Lost {
                                cause: FailureCause::SiteOutage,
                                execution_alive: false,
                            },
                            now,
                        )?;
                    }
                }
                Notice::SiteDown { .. } => {}
                Notice::SiteUp { site } => self.executor.unpark_site(site),
            }
        }
        Ok(())
    }

    fn absorb_completions(&mut self) {
        let completions = self.executor.completions();
        for c in &completions[self.completion_cursor..] {
            self.site_events[c.site] += c.events;
            self.events_total += c.events;
            if self.tracked_request.get(&c.request_id).copied().unwrap_or(false) {
                self.tracked_total += c.events;
            }
        }
        self.completion_cursor = completions.len();
    }

    fn sample(&mut self, now: f64) {
        self.absorb_completions();
        let mut busy = 0;
        let mut queued = 0;
        for site in 0..self.fabric.site_count() {
            let st = self.fabric.stats(site, now);
            busy += st.running;
            queued += st.queued;
            if st.up {
                self.samples.push(MetricSample {
                    timestamp: now,
                    site_id: self.scenario.sites[site].name.clone(),
                    cpus_busy: st.running,
                    queue_length: st.queued,
                    events_completed: self.site_events[site],
                    wasted_cpu_seconds: self.executor.wasted_by_site()[site],
                });
            }
        }
        self.progress.push(ProgressPoint {
            time: now,
            events: self.events_total,
            tracked_events: self.tracked_total,
            cpus_busy: busy,
            queue_length: queued,
            wasted_cpu_seconds: self.executor.wasted_by_site().iter().sum(),
        });
        let next = now + self.scenario.monitor.sample_hours * 3_600.0;
        if next < self.horizon {
            let _ = self.q.schedule(next, Ev::Sample);
        }
    }

    fn finish(mut self, end: f64, truncated: bool) -> Result<CampaignResult, CampaignError> {
        self.executor.close(end);
        if self.progress.last().is_none_or(|p| p.time < end) {
            self.sample(end);
        }
        let replicas = self.executor.register_replicas()?;
        let sc = self.scenario;
        let specs = sc.site_specs();
        let tracked_pipeline = sc
            .requests
            .iter()
            .find(|r| r.tracked)
            .unwrap_or(&sc.requests[0])
            .pipeline
            .clone();
        let pipeline = sc.pipeline(&tracked_pipeline).map_err(CampaignError::Setup)?;
        let formula = theoretical_max(&specs, &pipeline).map_err(setup)?;
        let ceiling = sc.ceiling_events_per_day.unwrap_or(formula);
        let tracked: Vec<(f64, u64)> = self
            .executor
            .completions()
            .iter()
            .filter(|c| self.tracked_request[&c.request_id])
            .map(|c| (c.time, c.events))
            .collect();
        let span_end = end.max(f64::MIN_POSITIVE);
        let windows = sc.monitor.windows;
        let efficiency = efficiency_report(&tracked, 0.0, span_end, windows, ceiling).map_err(setup)?;
        let formula_efficiency = efficiency_report(&tracked, 0.0, span_end, windows, formula).map_err(setup)?;

        let flats = match (tracked.first(), tracked.last()) {
            (Some(first), Some(last)) => {
                let pts: Vec<ProgressPoint> = self
                    .progress
                    .iter()
                    .filter(|p| p.time >= first.0 && p.time <= last.0)
                    .copied()
                    .collect();
                let outages: Vec<Window> = sc
                    .global_outages()
                    .into_iter()
                    .filter(|o| o.start < last.0)
                    .collect();
                check_flat_spots(&flat_spots(&pts, FLAT_SPOT_MIN), &outages)
            }
            _ => FlatSpotCheck::default(),
        };

        let ex = &self.executor;
        let jobs = ex.jobs();
        let count = |st: JobStatus| jobs.iter().filter(|j| j.status == st).count();
        let mut per_request: BTreeMap<&str, u64> = BTreeMap::new();
        for c in ex.completions() {
            *per_request.entry(c.request_id.as_str()).or_default() += c.events;
        }
        let requests: Vec<RequestSummary> = sc
            .requests
            .iter()
            .map(|r| RequestSummary {
                id: r.id.clone(),
                pipeline: r.pipeline.clone(),
                events: r.events,
                jobs: r.events.div_ceil(r.chunk_size),
                tracked: r.tracked,
                events_completed: per_request.get(r.id.as_str()).copied().unwrap_or(0),
            })
            .collect();
        let sites = (0..self.fabric.site_count())
            .map(|i| {
                let st = self.fabric.stats(i, end);
                SiteSummary {
                    name: sc.sites[i].name.clone(),
                    worker_cpus: sc.sites[i].worker_cpus,
                    cpu_speed: sc.sites[i].cpu_speed,
                    peak_running: st.peak_running,
                    cpu_seconds: st.cpu_seconds,
                    uptime_seconds: st.uptime,
                    wasted_cpu_seconds: ex.wasted_by_site()[i],
                    events_completed: self.site_events[i],
                }
            })
            .collect();
        let masters = ex.master_stats();
        let summary = Summary {
            scenario: sc.name.clone(),
            seed: sc.seed.expect("validated"),
            events_requested: requests.iter().map(|r| r.events).sum(),
            jobs_total: jobs.len(),
            requests,
            jobs_completed: count(JobStatus::Completed),
            jobs_abandoned: count(JobStatus::Abandoned),
            jobs_unfinished: count(JobStatus::Active),
            events_completed: self.events_total,
            tracked_events_completed: self.tracked_total,
            useful_cpu_seconds: jobs.iter().map(|j| j.useful_cpu_seconds).sum(),
            wasted_cpu_seconds: ex.wasted_by_site().iter().sum(),
            failed_cpu_seconds: jobs.iter().map(|j| j.failed_cpu_seconds).sum(),
            saturation_incidents: masters.iter().map(|m| m.saturation_incidents).sum(),
            masters,
            sites,
            campaign_end_seconds: end,
            truncated,
            ceiling_events_per_day: ceiling,
            formula_ceiling_events_per_day: formula,
            efficiency: efficiency.overall,
            formula_efficiency: formula_efficiency.overall,
            retry_loops: ex.retry_loops(),
            flat_spots: flats,
            replicas_registered: replicas.len(),
        };
        Ok(CampaignResult {
            summary,
            events_log: self.executor.render_log(),
            site_names: sc.sites.iter().map(|s| s.name.clone()).collect(),
            executor: self.executor,
            progress: self.progress,
            samples: self.samples,
            efficiency,
            formula_efficiency,
            replicas,
            gridmap_history: self.gridmap_history,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn swrr_deals_exact_shares() {
        let mut s = Swrr::new(vec![4000.0, 2000.0]);
        let picks: Vec<usize> = (0..6).map(|_| s.next()).collect();
        assert_eq!(picks, vec![0, 1, 0, 0, 1, 0]);
        let mut s = Swrr::new(vec![3.0, 1.0]);
        let mut counts = [0; 2];
        for _ in 0..400 {
            counts[s.next()] += 1;
        }
        assert_eq!(counts, [300, 100]);
    }
}
