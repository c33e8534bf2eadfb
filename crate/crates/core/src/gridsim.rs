//! Discrete-event grid fabric: clock and event queue, sites with FIFO batch
//! queues, master-to-site transfer channels with processor sharing, and
//! failure injection.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap, HashMap, VecDeque};
use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::GridError;
use crate::rng::RngStreams;

pub type SimTime = f64;

pub const HOUR: f64 = 3_600.0;
pub const DAY: f64 = 86_400.0;

/// Remaining volume (MB) below which a shared transfer counts as done.
const TRANSFER_EPSILON_MB: f64 = 1e-7;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SimClock {
    now: SimTime,
}

impl SimClock {
    pub fn starting_at(now: SimTime) -> Self {
        Self { now }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    /// Moves forward to `t`; never moves backwards.
    pub fn advance_to(&mut self, t: SimTime) {
        if t > self.now {
            self.now = t;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scheduled<E> {
    pub time: SimTime,
    pub seq: u64,
    pub payload: E,
}

struct Entry<E>(Scheduled<E>);

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<E> Eq for Entry<E> {}

impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Entry<E> {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .0
            .time
            .total_cmp(&self.0.time)
            .then_with(|| other.0.seq.cmp(&self.0.seq))
    }
}

/// Pending events ordered by (time, insertion sequence).
pub struct EventQueue<E> {
    heap: BinaryHeap<Entry<E>>,
    clock: SimClock,
    next_seq: u64,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self {
            heap: BinaryHeap::new(),
            clock: SimClock::default(),
            next_seq: 0,
        }
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> SimTime {
        self.clock.now()
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn peek_time(&self) -> Option<SimTime> {
        self.heap.peek().map(|e| e.0.time)
    }

    pub fn schedule(&mut self, time: SimTime, payload: E) -> Result<u64, GridError> {
        if time.is_nan() || time < self.clock.now() {
            return Err(GridError::ScheduledInPast {
                time,
                now: self.clock.now(),
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Entry(Scheduled { time, seq, payload }));
        Ok(seq)
    }

    /// Schedule `delay` seconds from now.
    pub fn schedule_in(&mut self, delay: f64, payload: E) -> u64 {
        let t = self.clock.now() + delay.max(0.0);
        self.schedule(t, payload).expect("future time")
    }

    /// Pop the next event and move the clock to it. `None` ends the run.
    pub fn advance(&mut self) -> Option<Scheduled<E>> {
        let Entry(ev) = self.heap.pop()?;
        self.clock.advance_to(ev.time);
        Some(ev)
    }
}

/// Half-open interval `[start, end)` in simulated seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub start: SimTime,
    pub end: SimTime,
}

impl Window {
    pub fn new(start: SimTime, end: SimTime) -> Result<Self, GridError> {
        if start.is_nan() || end.is_nan() || start < 0.0 || end <= start {
            return Err(GridError::BadWindow { start, end });
        }
        Ok(Self { start, end })
    }

    pub fn contains(&self, t: SimTime) -> bool {
        self.start <= t && t < self.end
    }

    pub fn len(&self) -> f64 {
        self.end - self.start
    }
}

/// Sort and merge overlapping or touching windows.
pub fn merge_windows(mut windows: Vec<Window>) -> Vec<Window> {
    windows.sort_by(|a, b| a.start.total_cmp(&b.start));
    let mut merged: Vec<Window> = Vec::with_capacity(windows.len());
    for w in windows {
        match merged.last_mut() {
            Some(last) if w.start <= last.end => last.end = last.end.max(w.end),
            _ => merged.push(w),
        }
    }
    merged
}

/// Complement of `up` within `[0, inf)`.
fn complement(up: &[Window]) -> Vec<Window> {
    let up = merge_windows(up.to_vec());
    let mut down = Vec::new();
    let mut cursor = 0.0;
    for w in &up {
        if w.start > cursor {
            down.push(Window { start: cursor, end: w.start });
        }
        cursor = cursor.max(w.end);
    }
    if cursor.is_finite() {
        down.push(Window {
            start: cursor,
            end: f64::INFINITY,
        });
    }
    down
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteSpec {
    pub name: String,
    /// CPUs the grid may use.
    pub worker_cpus: u32,
    /// CPUs installed; metadata only.
    pub hardware_cpus: u32,
    /// GHz.
    pub cpu_speed: f64,
    pub os: String,
    pub disk_free_mb: f64,
    /// When the site is up. Empty means always.
    pub availability_windows: Vec<Window>,
}

impl SiteSpec {
    pub fn new(name: impl Into<String>, worker_cpus: u32, cpu_speed: f64) -> Self {
        Self {
            name: name.into(),
            worker_cpus,
            hardware_cpus: worker_cpus,
            cpu_speed,
            os: String::new(),
            disk_free_mb: 1.0e6,
            availability_windows: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), GridError> {
        if !(self.cpu_speed > 0.0) || !self.cpu_speed.is_finite() {
            return Err(GridError::InvalidSite {
                site: self.name.clone(),
                field: "cpu_speed",
            });
        }
        if !(self.disk_free_mb >= 0.0) {
            return Err(GridError::InvalidSite {
                site: self.name.clone(),
                field: "disk_free_mb",
            });
        }
        Ok(())
    }

    /// GHz of usable capacity.
    pub fn capacity_ghz(&self) -> f64 {
        self.worker_cpus as f64 * self.cpu_speed
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    /// MB/s shared by concurrent transfers.
    pub bandwidth: f64,
    /// Seconds per file.
    pub latency: f64,
    /// Chance a transfer's first attempt hangs.
    pub hang_probability: f64,
    /// Chance a retried attempt hangs; defaults to `hang_probability`.
    pub retry_hang_probability: Option<f64>,
}

impl Default for ChannelSpec {
    fn default() -> Self {
        Self {
            bandwidth: 10.0,
            latency: 1.0,
            hang_probability: 0.01,
            retry_hang_probability: None,
        }
    }
}

impl ChannelSpec {
    pub fn validate(&self) -> Result<(), GridError> {
        if !(self.bandwidth > 0.0) || !self.bandwidth.is_finite() {
            return Err(GridError::InvalidChannel("bandwidth"));
        }
        if !(self.latency >= 0.0) || !self.latency.is_finite() {
            return Err(GridError::InvalidChannel("latency"));
        }
        if !is_probability(self.hang_probability) {
            return Err(GridError::InvalidChannel("hang_probability"));
        }
        if let Some(p) = self.retry_hang_probability {
            if !is_probability(p) {
                return Err(GridError::InvalidChannel("retry_hang_probability"));
            }
        }
        Ok(())
    }

    /// Unshared transfer time.
    pub fn solo_duration(&self, files: u32, size_mb: f64) -> f64 {
        files as f64 * self.latency + size_mb / self.bandwidth
    }

    fn hang_probability_for(&self, attempt: u32) -> f64 {
        if attempt <= 1 {
            self.hang_probability
        } else {
            self.retry_hang_probability.unwrap_or(self.hang_probability)
        }
    }
}

fn is_probability(p: f64) -> bool {
    (0.0..=1.0).contains(&p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureModel {
    pub disk_full_probability: f64,
    /// Seconds into a run at which a full disk is hit.
    pub disk_full_fail_after: f64,
    pub lost_contact_probability: f64,
    /// Seconds between losing contact and the master noticing.
    pub detection_delay: f64,
    /// Per-job service time multiplier drawn uniformly from `[1-j, 1+j]`.
    pub service_time_jitter: f64,
}

impl Default for FailureModel {
    fn default() -> Self {
        Self::none()
    }
}

impl FailureModel {
    pub fn none() -> Self {
        Self {
            disk_full_probability: 0.0,
            disk_full_fail_after: 600.0,
            lost_contact_probability: 0.0,
            detection_delay: HOUR,
            service_time_jitter: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), GridError> {
        if !is_probability(self.disk_full_probability) {
            return Err(GridError::InvalidFailureModel("disk_full_probability"));
        }
        if !is_probability(self.lost_contact_probability) {
            return Err(GridError::InvalidFailureModel("lost_contact_probability"));
        }
        if !(self.disk_full_fail_after >= 0.0) {
            return Err(GridError::InvalidFailureModel("disk_full_fail_after"));
        }
        if !(self.detection_delay >= 0.0) {
            return Err(GridError::InvalidFailureModel("detection_delay"));
        }
        if !(0.0..1.0).contains(&self.service_time_jitter) {
            return Err(GridError::InvalidFailureModel("service_time_jitter"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FailureCause {
    DiskFull,
    TransferFailed,
    SiteOutage,
    LostContact,
    SiteDown,
    AuthDenied,
}

impl FailureCause {
    pub fn tag(self) -> &'static str {
        match self {
            FailureCause::DiskFull => "DISK_FULL",
            FailureCause::TransferFailed => "TRANSFER_FAILED",
            FailureCause::SiteOutage => "SITE_OUTAGE",
            FailureCause::LostContact => "LOST",
            FailureCause::SiteDown => "SITE_DOWN",
            FailureCause::AuthDenied => "AUTH_DENIED",
        }
    }
}

impl fmt::Display for FailureCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ExecId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TransferId(pub u64);

/// Fabric-internal events; embed them in the driver's event type.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FabricEvent {
    RunDone(ExecId),
    LostContact(ExecId),
    LatencyDone(TransferId),
    ChannelWake { site: usize, version: u64 },
    SiteCheck(usize),
}

/// What a fabric event (or a call into the fabric) produced.
#[derive(Debug, Clone, PartialEq)]
pub enum Notice {
    RunStarted {
        exec: ExecId,
        site: usize,
    },
    RunFinished {
        exec: ExecId,
        site: usize,
        cpu_seconds: f64,
        result: Result<(), FailureCause>,
    },
    ContactLost {
        exec: ExecId,
    },
    RunKilled {
        exec: ExecId,
        site: usize,
        cpu_seconds: f64,
    },
    TransferDone {
        xfer: TransferId,
    },
    TransferKilled {
        xfer: TransferId,
    },
    SiteDown {
        site: usize,
    },
    SiteUp {
        site: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunRequest {
    /// Groups executions of the same job for per-job draws.
    pub job_key: u64,
    /// CPU work in GHz-seconds; duration is this over the site's clock speed.
    pub work_ghz_seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Admission {
    Started,
    /// Waiting in the batch queue at this 1-based position.
    Queued(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransferStart {
    Active,
    Hung,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum ExecState {
    Queued,
    Running { start: SimTime },
}

#[derive(Debug, Clone)]
struct Execution {
    site: usize,
    job_key: u64,
    duration: f64,
    fails_at: Option<f64>,
    state: ExecState,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum XferPhase {
    Latency,
    Sharing,
    Hung,
}

#[derive(Debug, Clone)]
struct Transfer {
    site: usize,
    size_mb: f64,
    /// Channel virtual clock value at which this transfer is done.
    finish_v: f64,
    phase: XferPhase,
}

#[derive(Debug, Clone)]
struct SiteState {
    spec: SiteSpec,
    down: Vec<Window>,
    up: bool,
    running: Vec<ExecId>,
    queue: VecDeque<ExecId>,
    peak_running: u32,
    cpu_seconds: f64,
    uptime_since: Option<SimTime>,
    uptime: f64,
}

#[derive(Debug, Clone)]
/// Processor sharing on a virtual clock: `virtual_mb` is what each active
/// transfer has received since the channel was last idle.
struct ChannelState {
    spec: ChannelSpec,
    sharing: BTreeSet<(u64, TransferId)>,
    virtual_mb: f64,
    last_update: SimTime,
    version: u64,
    peak_sharing: usize,
}

/// Per-site accounting snapshot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiteStats {
    pub up: bool,
    pub running: u32,
    pub queued: usize,
    pub peak_running: u32,
    pub cpu_seconds: f64,
    pub uptime: f64,
}

pub struct Fabric {
    sites: Vec<SiteState>,
    channels: Vec<ChannelState>,
    failures: FailureModel,
    execs: HashMap<ExecId, Execution>,
    transfers: HashMap<TransferId, Transfer>,
    next_exec: u64,
    next_xfer: u64,
    hang_rng: ChaCha8Rng,
    disk_rng: ChaCha8Rng,
    lost_rng: ChaCha8Rng,
    jitter_rng: ChaCha8Rng,
    disk_full: HashMap<u64, bool>,
    jitter: HashMap<u64, f64>,
    primed: bool,
}

impl Fabric {
    /// One channel per site, `channels[i]` linking the master to `sites[i]`.
    pub fn new(
        sites: Vec<SiteSpec>,
        channels: Vec<ChannelSpec>,
        failures: FailureModel,
        streams: &RngStreams,
    ) -> Result<Self, GridError> {
        if sites.len() != channels.len() {
            return Err(GridError::ChannelCount {
                sites: sites.len(),
                channels: channels.len(),
            });
        }
        failures.validate()?;
        let mut site_states = Vec::with_capacity(sites.len());
        for spec in sites {
            spec.validate()?;
            let down = if spec.availability_windows.is_empty() {
                Vec::new()
            } else {
                complement(&spec.availability_windows)
            };
            site_states.push(SiteState {
                down: merge_windows(down),
                spec,
                up: true,
                running: Vec::new(),
                queue: VecDeque::new(),
                peak_running: 0,
                cpu_seconds: 0.0,
                uptime_since: Some(0.0),
                uptime: 0.0,
            });
        }
        let mut channel_states = Vec::with_capacity(channels.len());
        for spec in channels {
            spec.validate()?;
            channel_states.push(ChannelState {
                spec,
                sharing: BTreeSet::new(),
                virtual_mb: 0.0,
                last_update: 0.0,
                version: 0,
                peak_sharing: 0,
            });
        }
        Ok(Self {
            sites: site_states,
            channels: channel_states,
            failures,
            execs: HashMap::new(),
            transfers: HashMap::new(),
            next_exec: 0,
            next_xfer: 0,
            hang_rng: streams.stream("transfer-hang"),
            disk_rng: streams.stream("disk-full"),
            lost_rng: streams.stream("lost-contact"),
            jitter_rng: streams.stream("service-jitter"),
            disk_full: HashMap::new(),
            jitter: HashMap::new(),
            primed: false,
        })
    }

    /// Schedule availability transitions. Call once before the first event.
    pub fn prime<E: From<FabricEvent>>(&mut self, q: &mut EventQueue<E>) {
        if self.primed {
            return;
        }
        self.primed = true;
        for site in 0..self.sites.len() {
            let now = q.now();
            let boundaries: Vec<f64> = self.sites[site]
                .down
                .iter()
                .flat_map(|w| [w.start, w.end])
                .filter(|t| t.is_finite() && *t >= now)
                .collect();
            for t in boundaries {
                let _ = q.schedule(t, FabricEvent::SiteCheck(site).into());
            }
        }
    }

    pub fn site_count(&self) -> usize {
        self.sites.len()
    }

    pub fn site_spec(&self, site: usize) -> &SiteSpec {
        &self.sites[site].spec
    }

    pub fn site_index(&self, name: &str) -> Option<usize> {
        self.sites.iter().position(|s| s.spec.name == name)
    }

    pub fn channel_spec(&self, site: usize) -> &ChannelSpec {
        &self.channels[site].spec
    }

    pub fn is_up(&self, site: usize) -> bool {
        self.sites[site].up
    }

    pub fn down_windows(&self, site: usize) -> &[Window] {
        &self.sites[site].down
    }

    /// Batch executions waiting for a CPU at `site`.
    pub fn queued(&self, site: usize) -> usize {
        self.sites[site].queue.len()
    }

    pub fn idle_cpus(&self, site: usize) -> u32 {
        let s = &self.sites[site];
        s.spec.worker_cpus.saturating_sub(s.running.len() as u32)
    }

    pub fn stats(&self, site: usize, now: SimTime) -> SiteStats {
        let s = &self.sites[site];
        let open = s.uptime_since.map(|t| (now - t).max(0.0)).unwrap_or(0.0);
        let running_cpu: f64 = s
            .running
            .iter()
            .filter_map(|e| match self.execs.get(e)?.state {
                ExecState::Running { start } => Some(now - start),
                ExecState::Queued => None,
            })
            .sum();
        SiteStats {
            up: s.up,
            running: s.running.len() as u32,
            queued: s.queue.len(),
            peak_running: s.peak_running,
            cpu_seconds: s.cpu_seconds + running_cpu,
            uptime: s.uptime + open,
        }
    }

    pub fn peak_channel_sharing(&self, site: usize) -> usize {
        self.channels[site].peak_sharing
    }

    /// Whether `job_key` is doomed to hit a full disk (drawn once per job).
    pub fn job_disk_full(&mut self, job_key: u64) -> bool {
        let p = self.failures.disk_full_probability;
        let rng = &mut self.disk_rng;
        *self
            .disk_full
            .entry(job_key)
            .or_insert_with(|| p > 0.0 && rng.gen::<f64>() < p)
    }

    fn job_jitter(&mut self, job_key: u64) -> f64 {
        let j = self.failures.service_time_jitter;
        let rng = &mut self.jitter_rng;
        *self
            .jitter
            .entry(job_key)
            .or_insert_with(|| if j > 0.0 { rng.gen_range(1.0 - j..=1.0 + j) } else { 1.0 })
    }

    /// Expected wall-clock seconds for `work_ghz_seconds` at `site`, before jitter.
    pub fn nominal_duration(&self, site: usize, work_ghz_seconds: f64) -> f64 {
        work_ghz_seconds / self.sites[site].spec.cpu_speed
    }

    /// Submit a run to the site's FIFO batch queue.
    pub fn enqueue_batch<E: From<FabricEvent>>(
        &mut self,
        site: usize,
        req: RunRequest,
        q: &mut EventQueue<E>,
    ) -> Result<(ExecId, Admission, Vec<Notice>), GridError> {
        let state = self.sites.get(site).ok_or(GridError::UnknownSiteIndex(site))?;
        if !state.up {
            return Err(GridError::SiteDown(state.spec.name.clone()));
        }
        let jitter = self.job_jitter(req.job_key);
        let duration = self.nominal_duration(site, req.work_ghz_seconds) * jitter;
        let fails_at = self
            .job_disk_full(req.job_key)
            .then(|| self.failures.disk_full_fail_after.min(duration));
        let exec = ExecId(self.next_exec);
        self.next_exec += 1;
        self.execs.insert(
            exec,
            Execution {
                site,
                job_key: req.job_key,
                duration,
                fails_at,
                state: ExecState::Queued,
            },
        );
        self.sites[site].queue.push_back(exec);
        let position = self.sites[site].queue.len();
        let mut notices = Vec::new();
        self.fill_cpus(site, q, &mut notices);
        let admission = if self.sites[site].running.contains(&exec) {
            Admission::Started
        } else {
            Admission::Queued(position)
        };
        Ok((exec, admission, notices))
    }

    fn fill_cpus<E: From<FabricEvent>>(
        &mut self,
        site: usize,
        q: &mut EventQueue<E>,
        notices: &mut Vec<Notice>,
    ) {
        let now = q.now();
        while self.sites[site].up
            && (self.sites[site].running.len() as u32) < self.sites[site].spec.worker_cpus
        {
            let Some(exec) = self.sites[site].queue.pop_front() else {
                break;
            };
            let ex = self.execs.get_mut(&exec).expect("queued exec exists");
            ex.state = ExecState::Running { start: now };
            let finish = ex.fails_at.unwrap_or(ex.duration);
            let duration = ex.duration;
            q.schedule_in(finish, FabricEvent::RunDone(exec).into());
            let p = self.failures.lost_contact_probability;
            if p > 0.0 && self.lost_rng.gen::<f64>() < p && self.failures.detection_delay < finish {
                q.schedule_in(self.failures.detection_delay, FabricEvent::LostContact(exec).into());
            }
            debug_assert!(duration >= 0.0);
            let s = &mut self.sites[site];
            s.running.push(exec);
            s.peak_running = s.peak_running.max(s.running.len() as u32);
            notices.push(Notice::RunStarted { exec, site });
        }
    }

    /// Start one attempt of a master-to-site transfer.
    pub fn start_transfer<E: From<FabricEvent>>(
        &mut self,
        site: usize,
        files: u32,
        size_mb: f64,
        attempt: u32,
        q: &mut EventQueue<E>,
    ) -> Result<(TransferId, TransferStart), GridError> {
        if site >= self.channels.len() {
            return Err(GridError::UnknownSiteIndex(site));
        }
        if !(size_mb >= 0.0) {
            return Err(GridError::NegativeSize(size_mb));
        }
        let xfer = TransferId(self.next_xfer);
        self.next_xfer += 1;
        let p = self.channels[site].spec.hang_probability_for(attempt);
        let hung = p > 0.0 && self.hang_rng.gen::<f64>() < p;
        if hung {
            self.transfers.insert(
                xfer,
                Transfer {
                    site,
                    size_mb,
                    finish_v: 0.0,
                    phase: XferPhase::Hung,
                },
            );
            return Ok((xfer, TransferStart::Hung));
        }
        self.transfers.insert(
            xfer,
            Transfer {
                site,
                size_mb,
                finish_v: 0.0,
                phase: XferPhase::Latency,
            },
        );
        let latency = files as f64 * self.channels[site].spec.latency;
        q.schedule_in(latency, FabricEvent::LatencyDone(xfer).into());
        Ok((xfer, TransferStart::Active))
    }

    /// Drop a transfer (timed out or no longer wanted). Unknown ids are ignored.
    pub fn cancel_transfer<E: From<FabricEvent>>(&mut self, xfer: TransferId, q: &mut EventQueue<E>) {
        let Some(t) = self.transfers.remove(&xfer) else {
            return;
        };
        if t.phase == XferPhase::Sharing {
            let site = t.site;
            self.update_channel(site, q.now());
            self.channels[site].sharing.remove(&(t.finish_v.to_bits(), xfer));
            self.reschedule_channel(site, q);
        }
    }

    pub fn transfer_in_flight(&self, xfer: TransferId) -> bool {
        self.transfers.contains_key(&xfer)
    }

    fn update_channel(&mut self, site: usize, now: SimTime) {
        let ch = &mut self.channels[site];
        let n = ch.sharing.len();
        if n > 0 {
            ch.virtual_mb += (now - ch.last_update) * ch.spec.bandwidth / n as f64;
        } else {
            ch.virtual_mb = 0.0;
        }
        ch.last_update = now;
    }

    fn reschedule_channel<E: From<FabricEvent>>(&mut self, site: usize, q: &mut EventQueue<E>) {
        let ch = &mut self.channels[site];
        ch.version += 1;
        let n = ch.sharing.len();
        let Some(&(first, _)) = ch.sharing.first() else {
            return;
        };
        let remaining = (f64::from_bits(first) - ch.virtual_mb).max(0.0);
        let delay = remaining * n as f64 / ch.spec.bandwidth;
        q.schedule_in(
            delay,
            FabricEvent::ChannelWake {
                site,
                version: ch.version,
            }
            .into(),
        );
    }

    /// Take a site down for `window`; returns the site's merged down windows.
    pub fn inject_outage<E: From<FabricEvent>>(
        &mut self,
        site: usize,
        window: Window,
        q: &mut EventQueue<E>,
    ) -> Result<Vec<Window>, GridError> {
        let s = self.sites.get_mut(site).ok_or(GridError::UnknownSiteIndex(site))?;
        let mut all = s.down.clone();
        all.push(window);
        s.down = merge_windows(all);
        if self.primed {
            for t in [window.start, window.end] {
                if t.is_finite() && t >= q.now() {
                    let _ = q.schedule(t, FabricEvent::SiteCheck(site).into());
                }
            }
        }
        Ok(self.sites[site].down.clone())
    }

    pub fn handle<E: From<FabricEvent>>(&mut self, ev: FabricEvent, q: &mut EventQueue<E>) -> Vec<Notice> {
        let mut notices = Vec::new();
        let now = q.now();
        match ev {
            FabricEvent::RunDone(exec) => {
                let Some(ex) = self.execs.get(&exec) else {
                    return notices;
                };
                let ExecState::Running { start } = ex.state else {
                    return notices;
                };
                let site = ex.site;
                let result = if ex.fails_at.is_some() {
                    Err(FailureCause::DiskFull)
                } else {
                    Ok(())
                };
                self.execs.remove(&exec);
                let cpu_seconds = now - start;
                let s = &mut self.sites[site];
                s.running.retain(|e| *e != exec);
                s.cpu_seconds += cpu_seconds;
                notices.push(Notice::RunFinished {
                    exec,
                    site,
                    cpu_seconds,
                    result,
                });
                self.fill_cpus(site, q, &mut notices);
            }
            FabricEvent::LostContact(exec) => {
                if matches!(
                    self.execs.get(&exec).map(|e| e.state),
                    Some(ExecState::Running { .. })
                ) {
                    notices.push(Notice::ContactLost { exec });
                }
            }
            FabricEvent::LatencyDone(xfer) => {
                let Some(t) = self.transfers.get(&xfer) else {
                    return notices;
                };
                if t.phase != XferPhase::Latency {
                    return notices;
                }
                let site = t.site;
                let size = t.size_mb;
                if size <= TRANSFER_EPSILON_MB {
                    self.transfers.remove(&xfer);
                    notices.push(Notice::TransferDone { xfer });
                    return notices;
                }
                self.update_channel(site, now);
                let finish_v = self.channels[site].virtual_mb + size;
                let t = self.transfers.get_mut(&xfer).unwrap();
                t.phase = XferPhase::Sharing;
                t.finish_v = finish_v;
                let ch = &mut self.channels[site];
                ch.sharing.insert((finish_v.to_bits(), xfer));
                ch.peak_sharing = ch.peak_sharing.max(ch.sharing.len());
                self.reschedule_channel(site, q);
            }
            FabricEvent::ChannelWake { site, version } => {
                if self.channels[site].version != version {
                    return notices;
                }
                self.update_channel(site, now);
                let ch = &mut self.channels[site];
                // A current wake was aimed at the head transfer, so it is done
                // even if rounding left a sliver behind.
                let mut done = Vec::new();
                while let Some(&(finish, xfer)) = ch.sharing.first() {
                    if !done.is_empty() && f64::from_bits(finish) - ch.virtual_mb > TRANSFER_EPSILON_MB {
                        break;
                    }
                    ch.sharing.pop_first();
                    done.push(xfer);
                }
                for xfer in done {
                    self.transfers.remove(&xfer);
                    notices.push(Notice::TransferDone { xfer });
                }
                self.reschedule_channel(site, q);
            }
            FabricEvent::SiteCheck(site) => {
                let should_be_up = !self.sites[site].down.iter().any(|w| w.contains(now));
                if should_be_up == self.sites[site].up {
                    return notices;
                }
                if should_be_up {
                    let s = &mut self.sites[site];
                    s.up = true;
                    s.uptime_since = Some(now);
                    notices.push(Notice::SiteUp { site });
                    self.fill_cpus(site, q, &mut notices);
                } else {
                    self.take_down(site, now, q, &mut notices);
                }
            }
        }
        notices
    }

    fn take_down<E: From<FabricEvent>>(
        &mut self,
        site: usize,
        now: SimTime,
        q: &mut EventQueue<E>,
        notices: &mut Vec<Notice>,
    ) {
        let s = &mut self.sites[site];
        s.up = false;
        if let Some(since) = s.uptime_since.take() {
            s.uptime += now - since;
        }
        notices.push(Notice::SiteDown { site });
        let running = std::mem::take(&mut self.sites[site].running);
        for exec in running {
            if let Some(ex) = self.execs.remove(&exec) {
                if let ExecState::Running { start } = ex.state {
                    let cpu_seconds = now - start;
                    self.sites[site].cpu_seconds += cpu_seconds;
                    notices.push(Notice::RunKilled {
                        exec,
                        site,
                        cpu_seconds,
                    });
                }
            }
        }
        self.update_channel(site, now);
        let mut killed: Vec<TransferId> = self
            .transfers
            .iter()
            .filter(|(_, t)| t.site == site)
            .map(|(x, _)| *x)
            .collect();
        killed.sort();
        for xfer in killed {
            self.transfers.remove(&xfer);
            notices.push(Notice::TransferKilled { xfer });
        }
        self.channels[site].sharing.clear();
        self.reschedule_channel(site, q);
    }

    /// Job key of a live execution.
    pub fn exec_job(&self, exec: ExecId) -> Option<u64> {
        self.execs.get(&exec).map(|e| e.job_key)
    }

    pub fn exec_site(&self, exec: ExecId) -> Option<usize> {
        self.execs.get(&exec).map(|e| e.site)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Clone, PartialEq)]
    enum Ev {
        Fabric(FabricEvent),
        Tag(u32),
    }

    impl From<FabricEvent> for Ev {
        fn from(e: FabricEvent) -> Self {
            Ev::Fabric(e)
        }
    }

    fn fabric(sites: Vec<SiteSpec>, failures: FailureModel) -> Fabric {
        let channels = sites
            .iter()
            .map(|_| ChannelSpec {
                hang_probability: 0.0,
                ..ChannelSpec::default()
            })
            .collect();
        Fabric::new(sites, channels, failures, &RngStreams::new(1)).unwrap()
    }

    /// Run the queue to exhaustion, collecting notices with their times.
    fn drain(f: &mut Fabric, q: &mut EventQueue<Ev>) -> Vec<(f64, Notice)> {
        let mut out = Vec::new();
        while let Some(ev) = q.advance() {
            if let Ev::Fabric(fe) = ev.payload {
                for n in f.handle(fe, q) {
                    out.push((ev.time, n));
                }
            }
        }
        out
    }

    #[test]
    fn queue_orders_by_time_then_insertion() {
        let mut q = EventQueue::new();
        q.schedule(5.0, Ev::Tag(1)).unwrap();
        q.schedule(3.0, Ev::Tag(2)).unwrap();
        q.schedule(3.0, Ev::Tag(3)).unwrap();
        let order: Vec<_> = std::iter::from_fn(|| q.advance()).map(|e| (e.time, e.payload)).collect();
        assert_eq!(
            order,
            vec![(3.0, Ev::Tag(2)), (3.0, Ev::Tag(3)), (5.0, Ev::Tag(1))]
        );
        assert!(q.advance().is_none());
        assert!(matches!(
            q.schedule(1.0, Ev::Tag(9)),
            Err(GridError::ScheduledInPast { .. })
        ));
    }

    #[test]
    fn merge_overlapping_windows() {
        let w = |a, b| Window::new(a, b).unwrap();
        assert_eq!(
            merge_windows(vec![w(5.0, 8.0), w(0.0, 2.0), w(1.0, 3.0), w(8.0, 9.0)]),
            vec![w(0.0, 3.0), w(5.0, 9.0)]
        );
        assert!(Window::new(3.0, 3.0).is_err());
    }

    #[test]
    fn fifo_admission_and_cpu_bound() {
        let mut f = fabric(vec![SiteSpec::new("a", 40, 1.0)], FailureModel::none());
        let mut q = EventQueue::new();
        f.prime(&mut q);
        let mut started = 0;
        for i in 0..40 {
            let (_, adm, _) = f
                .enqueue_batch(0, RunRequest { job_key: i, work_ghz_seconds: 100.0 }, &mut q)
                .unwrap();
            started += (adm == Admission::Started) as u32;
        }
        assert_eq!(started, 40);
        let (late, adm, _) = f
            .enqueue_batch(0, RunRequest { job_key: 99, work_ghz_seconds: 100.0 }, &mut q)
            .unwrap();
        assert_eq!(adm, Admission::Queued(1));
        let notices = drain(&mut f, &mut q);
        let late_start = notices
            .iter()
            .find(|(_, n)| *n == Notice::RunStarted { exec: late, site: 0 })
            .unwrap()
            .0;
        assert_eq!(late_start, 100.0);
        assert_eq!(f.stats(0, 200.0).peak_running, 40);
    }

    #[test]
    fn run_duration_scales_with_clock_speed() {
        let mut f = fabric(vec![SiteSpec::new("fast", 1, 2.4)], FailureModel::none());
        let mut q = EventQueue::new();
        // CMSIM, 250 events: 350 s/event at 0.75 GHz
        let work = 350.0 * 250.0 * 0.75;
        f.enqueue_batch(0, RunRequest { job_key: 0, work_ghz_seconds: work }, &mut q)
            .unwrap();
        let notices = drain(&mut f, &mut q);
        let (t, _) = notices
            .iter()
            .find(|(_, n)| matches!(n, Notice::RunFinished { .. }))
            .unwrap();
        assert!((t - 27_343.75).abs() < 1e-9);
    }

    #[test]
    fn solo_transfer_duration() {
        let mut f = fabric(vec![SiteSpec::new("a", 1, 1.0)], FailureModel::none());
        let mut q = EventQueue::new();
        f.start_transfer(0, 1, 500.0, 1, &mut q).unwrap();
        let notices = drain(&mut f, &mut q);
        assert_eq!(notices.len(), 1);
        assert_eq!(notices[0].0, 51.0);

        let mut q = EventQueue::new();
        f.start_transfer(0, 1, 0.0, 1, &mut q).unwrap();
        assert_eq!(drain(&mut f, &mut q)[0].0, 1.0);
    }

    #[test]
    fn hung_transfer_never_completes() {
        let sites = vec![SiteSpec::new("a", 1, 1.0)];
        let channels = vec![ChannelSpec {
            hang_probability: 1.0,
            retry_hang_probability: Some(0.0),
            ..ChannelSpec::default()
        }];
        let mut f = Fabric::new(sites, channels, FailureModel::none(), &RngStreams::new(3)).unwrap();
        let mut q = EventQueue::new();
        let (x, start) = f.start_transfer(0, 1, 500.0, 1, &mut q).unwrap();
        assert_eq!(start, TransferStart::Hung);
        assert!(drain(&mut f, &mut q).is_empty());
        assert!(f.transfer_in_flight(x));
        let (_, start) = f.start_transfer(0, 1, 500.0, 2, &mut q).unwrap();
        assert_eq!(start, TransferStart::Active);
    }

    #[test]
    fn fast_channel_late_in_campaign_terminates() {
        let sites = vec![SiteSpec::new("a", 1, 1.0)];
        let channels = vec![ChannelSpec {
            bandwidth: 1000.0,
            latency: 0.1,
            hang_probability: 0.0,
            retry_hang_probability: None,
        }];
        let mut f = Fabric::new(sites, channels, FailureModel::none(), &RngStreams::new(1)).unwrap();
        let mut q = EventQueue::new();
        q.schedule(5.0e6, Ev::Fabric(FabricEvent::SiteCheck(0))).unwrap();
        q.advance();
        for i in 0..50 {
            f.start_transfer(0, 40, 20.0 + i as f64 / 3.0, 1, &mut q).unwrap();
        }
        let notices = drain(&mut f, &mut q);
        assert_eq!(notices.len(), 50);
        assert!(q.is_empty());
    }

    #[test]
    fn concurrent_transfers_share_bandwidth() {
        let mut f = fabric(vec![SiteSpec::new("a", 1, 1.0)], FailureModel::none());
        let mut q = EventQueue::new();
        for _ in 0..4 {
            f.start_transfer(0, 1, 500.0, 1, &mut q).unwrap();
        }
        let notices = drain(&mut f, &mut q);
        assert_eq!(notices.len(), 4);
        for (t, _) in notices {
            // latency is not shared: 1 + 4 * 50
            assert!((t - 201.0).abs() < 1e-6, "{t}");
        }
    }

    #[test]
    fn outage_kills_running_and_blocks_admission() {
        let mut f = fabric(vec![SiteSpec::new("a", 40, 1.0)], FailureModel::none());
        let mut q = EventQueue::new();
        f.prime(&mut q);
        for i in 0..40 {
            f.enqueue_batch(0, RunRequest { job_key: i, work_ghz_seconds: 1_000.0 }, &mut q)
                .unwrap();
        }
        f.inject_outage(0, Window::new(10.0, 20.0).unwrap(), &mut q).unwrap();
        let mut killed = 0;
        while let Some(ev) = q.advance() {
            let Ev::Fabric(fe) = ev.payload else { continue };
            for n in f.handle(fe, &mut q) {
                match n {
                    Notice::RunKilled { cpu_seconds, .. } => {
                        assert_eq!(ev.time, 10.0);
                        assert_eq!(cpu_seconds, 10.0);
                        killed += 1;
                    }
                    Notice::SiteDown { .. } => {
                        assert!(f
                            .enqueue_batch(0, RunRequest { job_key: 0, work_ghz_seconds: 1.0 }, &mut q)
                            .is_err());
                    }
                    _ => {}
                }
            }
        }
        assert_eq!(killed, 40);
        assert!(f.is_up(0));
    }

    #[test]
    fn outage_on_idle_site_only_blocks() {
        let mut f = fabric(vec![SiteSpec::new("a", 4, 1.0)], FailureModel::none());
        let mut q = EventQueue::new();
        f.prime(&mut q);
        let merged = f.inject_outage(0, Window::new(0.0, 5.0).unwrap(), &mut q).unwrap();
        let merged2 = f.inject_outage(0, Window::new(3.0, 8.0).unwrap(), &mut q).unwrap();
        assert_eq!(merged.len(), 1);
        assert_eq!(merged2, vec![Window::new(0.0, 8.0).unwrap()]);
        let notices = drain(&mut f, &mut q);
        let kinds: Vec<_> = notices.iter().map(|(t, n)| (*t, n.clone())).collect();
        assert_eq!(
            kinds,
            vec![(0.0, Notice::SiteDown { site: 0 }), (8.0, Notice::SiteUp { site: 0 })]
        );
    }

    #[test]
    fn availability_window_delays_site() {
        let mut site = SiteSpec::new("late", 2, 1.0);
        site.availability_windows = vec![Window::new(15.0 * DAY, f64::INFINITY).unwrap()];
        let mut f = fabric(vec![site], FailureModel::none());
        let mut q = EventQueue::new();
        f.prime(&mut q);
        let notices = drain(&mut f, &mut q);
        assert_eq!(notices[0], (0.0, Notice::SiteDown { site: 0 }));
        assert_eq!(notices[1], (15.0 * DAY, Notice::SiteUp { site: 0 }));
    }

    #[test]
    fn lost_contact_reported_while_run_continues() {
        let failures = FailureModel {
            lost_contact_probability: 1.0,
            detection_delay: 50.0,
            ..FailureModel::none()
        };
        let mut f = fabric(vec![SiteSpec::new("a", 1, 1.0)], failures);
        let mut q = EventQueue::new();
        f.enqueue_batch(0, RunRequest { job_key: 0, work_ghz_seconds: 100.0 }, &mut q)
            .unwrap();
        let notices = drain(&mut f, &mut q);
        assert!(matches!(notices[0], (50.0, Notice::ContactLost { .. })), "{notices:?}");
        assert!(matches!(notices[1], (100.0, Notice::RunFinished { result: Ok(()), .. })));
    }

    #[test]
    fn disk_full_is_sticky_per_job() {
        let failures = FailureModel {
            disk_full_probability: 1.0,
            disk_full_fail_after: 30.0,
            ..FailureModel::none()
        };
        let mut f = fabric(vec![SiteSpec::new("a", 1, 1.0)], failures);
        let mut q = EventQueue::new();
        for _ in 0..2 {
            f.enqueue_batch(0, RunRequest { job_key: 5, work_ghz_seconds: 100.0 }, &mut q)
                .unwrap();
        }
        let fails: Vec<_> = drain(&mut f, &mut q)
            .into_iter()
            .filter_map(|(t, n)| match n {
                Notice::RunFinished { result: Err(c), .. } => Some((t, c)),
                _ => None,
            })
            .collect();
        assert_eq!(
            fails,
            vec![(30.0, FailureCause::DiskFull), (60.0, FailureCause::DiskFull)]
        );
    }

    #[test]
    fn invalid_parameters_rejected() {
        let bad = ChannelSpec {
            bandwidth: -1.0,
            ..ChannelSpec::default()
        };
        assert_eq!(bad.validate(), Err(GridError::InvalidChannel("bandwidth")));
        let fm = FailureModel {
            lost_contact_probability: 1.5,
            ..FailureModel::none()
        };
        assert!(fm.validate().is_err());
    }
}
