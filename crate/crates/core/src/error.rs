use thiserror::Error;

use crate::dagwrap::NodeId;
use crate::executor::NodeState;
use crate::gridsim::ExecId;
use crate::workload::Stage;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WorkloadError {
    #[error("stage {stage}: {field} must be positive and finite, got {value}")]
    InvalidProfile {
        stage: Stage,
        field: &'static str,
        value: f64,
    },
    #[error("pile-up ratio must be non-negative and finite, got {0}")]
    InvalidPileupRatio(f64),
    #[error("stage {after} cannot follow {before}")]
    StageOrder { before: Stage, after: Stage },
    #[error("chunk size must be at least 1")]
    ZeroChunkSize,
    #[error("cpu speed must be positive and finite, got {0}")]
    InvalidCpuSpeed(f64),
    #[error("configurator {configurator}: bad value {value:?} for {key}")]
    BadMetadata {
        configurator: String,
        key: String,
        value: String,
    },
    #[error("configurator {0} is already attached")]
    DuplicateConfigurator(String),
    #[error("no configurator named {0} is attached")]
    UnknownConfigurator(String),
    #[error("linker has no configurators")]
    EmptyLinker,
    #[error("configurator {configurator} needs an input stage that was not attached before it")]
    MissingInput { configurator: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DagError {
    #[error("job {0} has no stages")]
    EmptyPipeline(String),
    #[error("node {0} is not in the dag")]
    UnknownNode(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DagViolation {
    #[error("node at index {index} has id {id}")]
    NodeIdMismatch { index: usize, id: NodeId },
    #[error("edge {0}->{1} points outside the dag")]
    DanglingEdge(NodeId, NodeId),
    #[error("dag has a cycle")]
    Cycle,
    #[error("expected one stage-in node, found {0}")]
    StageInCount(usize),
    #[error("expected one root, found {0}")]
    Roots(usize),
    #[error("expected one cleanup node, found {0}")]
    CleanupCount(usize),
    #[error("expected one leaf, found {0}")]
    Leaves(usize),
    #[error("expected one stage-out node, found {0}")]
    StageOutCount(usize),
    #[error("stage-out must precede cleanup")]
    StageOutNotBeforeCleanup,
    #[error("run node {0} is not reachable from stage-in")]
    UnreachableRun(String),
    #[error("stage-out may not start before the final run node")]
    StageOutBeforeFinalRun,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FtshError {
    #[error("timeout must be positive and finite, got {0}")]
    InvalidTimeout(f64),
    #[error("max_attempts must be at least 1")]
    ZeroAttempts,
    #[error("backoff must be non-negative with factor >= 1")]
    InvalidBackoff,
    #[error("session already started")]
    AlreadyStarted,
    #[error("session is not waiting in backoff")]
    NotWaiting,
    #[error("no attempt is running")]
    NoAttemptRunning,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GridError {
    #[error("cannot schedule at {time} before now ({now})")]
    ScheduledInPast { time: f64, now: f64 },
    #[error("window [{start}, {end}) is empty or not finite")]
    BadWindow { start: f64, end: f64 },
    #[error("site {site}: invalid {field}")]
    InvalidSite { site: String, field: &'static str },
    #[error("channel: invalid {0}")]
    InvalidChannel(&'static str),
    #[error("failure model: invalid {0}")]
    InvalidFailureModel(&'static str),
    #[error("{sites} sites but {channels} channels")]
    ChannelCount { sites: usize, channels: usize },
    #[error("no site with index {0}")]
    UnknownSiteIndex(usize),
    #[error("site {0} is down")]
    SiteDown(String),
    #[error("transfer size must be non-negative, got {0}")]
    NegativeSize(f64),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VoError {
    #[error("group {0} already exists")]
    DuplicateGroup(String),
    #[error("bad local account {0:?}")]
    BadAccount(String),
    #[error("no group named {0}")]
    UnknownGroup(String),
    #[error("bad distinguished name {0:?}")]
    BadDn(String),
    #[error("{0} is already registered with a different CA")]
    ConflictingCa(String),
    #[error("gridmap line {line}: cannot parse {text:?}")]
    BadGridmapLine { line: usize, text: String },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExecutorError {
    #[error("invalid retry policy: {0}")]
    InvalidPolicy(&'static str),
    #[error("at least one master is required")]
    NoMasters,
    #[error("master {0} has zero tracked-process capacity")]
    ZeroCapacity(String),
    #[error("master {0} is declared twice")]
    DuplicateMaster(String),
    #[error("no master named {0}")]
    UnknownMaster(String),
    #[error("no site named {0}")]
    UnknownSite(String),
    #[error("job {0} is already submitted")]
    DuplicateJob(String),
    #[error("executor is closed")]
    Closed,
    #[error("job {job}: {violation}")]
    InvalidDag { job: String, violation: DagViolation },
    #[error("node {0} is already terminal")]
    OutcomeForTerminalNode(NodeId),
    #[error("node {node} is {state}, not in flight")]
    NotInFlight { node: NodeId, state: NodeState },
    #[error("unknown execution {0:?}")]
    UnknownExec(ExecId),
    #[error("campaign still has {0} active jobs")]
    CampaignRunning(usize),
    #[error("replicas were already registered")]
    AlreadyRegistered,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MonitorError {
    #[error("grid has zero capacity")]
    ZeroCapacity,
    #[error("window count must be at least 1")]
    ZeroWindows,
    #[error("campaign span must be positive, got {0}")]
    EmptySpan(f64),
}
