//! Scenario files: a JSON document describing one campaign.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dagwrap::WrapOptions;
use crate::executor::{MasterConfig, RetryPolicy};
use crate::ftsh::{Backoff, RetrySpec};
use crate::gridsim::{ChannelSpec, FailureModel, SiteSpec, Window, DAY, HOUR};
use crate::vo::{CertAuthority, GridUser, UserDirectory};
use crate::workload::{Configurator, Linker, PipelineSpec, ProductionRequest, Stage, DEFAULT_CHUNK_SIZE};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{} validation error(s): {}", .0.len(), join(.0))]
    Invalid(Vec<ValidationError>),
}

fn join(errors: &[ValidationError]) -> String {
    errors.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationError {
    pub path: String,
    pub message: String,
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteConfig {
    pub name: String,
    pub worker_cpus: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hardware_cpus: Option<u32>,
    pub cpu_speed: f64,
    #[serde(default)]
    pub os: String,
    #[serde(default = "default_disk")]
    pub disk_free_mb: f64,
    /// Day the site joins; shorthand for one availability window.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub available_from_day: Option<f64>,
}

fn default_disk() -> f64 {
    1.0e6
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelsConfig {
    #[serde(default)]
    pub default: ChannelSpec,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub overrides: BTreeMap<String, ChannelSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SiteSelector {
    /// The string `"all"`.
    All(String),
    List(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutageConfig {
    pub name: String,
    pub sites: SiteSelector,
    pub start_day: f64,
    pub end_day: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub stages: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pileup_ratio: Option<f64>,
    /// Per-stage configurator overrides, e.g. `{"CMSIM": {"time_per_event": "300"}}`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub configure: BTreeMap<String, BTreeMap<String, String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestConfig {
    pub id: String,
    pub events: u64,
    pub pipeline: String,
    #[serde(default = "default_chunk")]
    pub chunk_size: u64,
    pub owner: String,
    /// Counted in the progress curve and efficiency.
    #[serde(default = "yes")]
    pub tracked: bool,
}

fn default_chunk() -> u64 {
    DEFAULT_CHUNK_SIZE
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssignmentRule {
    pub request: String,
    /// Site weights; jobs are dealt out by smooth weighted round robin.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub sites: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub masters: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetryConfig {
    /// `null` retries forever.
    pub max_attempts: Option<u32>,
    #[serde(default = "default_loop")]
    pub loop_threshold: u32,
    /// Resubmit permanent failures too.
    #[serde(default)]
    pub restart_all: bool,
}

fn default_loop() -> u32 {
    3
}

impl Default for RetryConfig {
    fn default() -> Self {
        Self {
            max_attempts: Some(5),
            loop_threshold: 3,
            restart_all: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FtshConfig {
    pub enabled: bool,
    pub timeout: f64,
    pub max_attempts: u32,
    pub backoff: Backoff,
}

impl Default for FtshConfig {
    fn default() -> Self {
        let d = RetrySpec::default();
        Self {
            enabled: true,
            timeout: d.timeout,
            max_attempts: d.max_attempts,
            backoff: d.backoff,
        }
    }
}

impl FtshConfig {
    pub fn spec(&self) -> RetrySpec {
        RetrySpec {
            timeout: self.timeout,
            max_attempts: self.max_attempts,
            backoff: self.backoff,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoGroupConfig {
    pub name: String,
    pub account: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoUserConfig {
    pub dn: String,
    pub ca: CertAuthority,
    pub groups: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoUpdateConfig {
    pub at_hour: f64,
    pub dn: String,
    pub ca: CertAuthority,
    pub group: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoConfig {
    pub groups: Vec<VoGroupConfig>,
    pub users: Vec<VoUserConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub updates: Vec<VoUpdateConfig>,
    #[serde(default = "default_sync")]
    pub sync_hours: f64,
}

fn default_sync() -> f64 {
    6.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonitorConfig {
    #[serde(default = "default_sample")]
    pub sample_hours: f64,
    #[serde(default = "default_windows")]
    pub windows: usize,
}

fn default_sample() -> f64 {
    1.0
}

fn default_windows() -> usize {
    12
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            sample_hours: 1.0,
            windows: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub campaign_days: f64,
    /// Declared events/day ceiling for efficiency; the formula value is used
    /// when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ceiling_events_per_day: Option<f64>,
    pub sites: Vec<SiteConfig>,
    #[serde(default)]
    pub channels: ChannelsConfig,
    #[serde(default = "FailureModel::none")]
    pub failures: FailureModel,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub outages: Vec<OutageConfig>,
    pub pipelines: BTreeMap<String, PipelineConfig>,
    pub requests: Vec<RequestConfig>,
    pub masters: Vec<MasterConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub assignment: Vec<AssignmentRule>,
    #[serde(default)]
    pub retry: RetryConfig,
    #[serde(default)]
    pub ftsh: FtshConfig,
    #[serde(default)]
    pub stage_in: WrapOptions,
    pub vo: VoConfig,
    #[serde(default)]
    pub monitor: MonitorConfig,
    #[serde(default = "default_cleanup")]
    pub cleanup_seconds: f64,
    /// Queued batch nodes a site may hold before masters hold back more.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_idle_per_site: Option<usize>,
}

fn default_cleanup() -> f64 {
    5.0
}

impl Scenario {
    /// Parse without validating.
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        serde_json::from_str(text).map_err(|e| ScenarioError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text)
    }

    /// Parse and validate.
    pub fn from_str_validated(text: &str) -> Result<Self, ScenarioError> {
        let s = Self::parse(text)?;
        let errors = s.validate();
        if errors.is_empty() {
            Ok(s)
        } else {
            Err(ScenarioError::Invalid(errors))
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn horizon(&self) -> f64 {
        self.campaign_days * DAY
    }

    pub fn site_index(&self, name: &str) -> Option<usize> {
        self.sites.iter().position(|s| s.name == name)
    }

    /// Every problem in the scenario, each tagged with its field path.
    pub fn validate(&self) -> Vec<ValidationError> {
        let mut v = Validator::default();
        if self.schema_version != SCHEMA_VERSION {
            v.err("schema_version", format!("unsupported version {}", self.schema_version));
        }
        if self.seed.is_none() {
            v.err("seed", "missing; set it in the file or pass --seed");
        }
        if !(self.campaign_days > 0.0) || !self.campaign_days.is_finite() {
            v.err("campaign_days", "must be positive");
        }
        if let Some(c) = self.ceiling_events_per_day {
            if !(c > 0.0) {
                v.err("ceiling_events_per_day", "must be positive");
            }
        }
        self.validate_sites(&mut v);
        self.validate_channels(&mut v);
        if let Err(e) = self.failures.validate() {
            v.err("failures", e.to_string());
        }
        for (i, o) in self.outages.iter().enumerate() {
            let p = format!("outages[{i}]");
            if Window::new(o.start_day * DAY, o.end_day * DAY).is_err() || o.start_day < 0.0 {
                v.err(&format!("{p}.start_day"), "window must satisfy 0 <= start_day < end_day");
            }
            match &o.sites {
                SiteSelector::All(s) if s != "all" => {
                    v.err(&format!("{p}.sites"), format!("expected \"all\" or a list, got {s:?}"))
                }
                SiteSelector::List(names) => {
                    for n in names {
                        if self.site_index(n).is_none() {
                            v.err(&format!("{p}.sites"), format!("unknown site {n}"));
                        }
                    }
                }
                _ => {}
            }
        }
        for (name, p) in &self.pipelines {
            if let Err(e) = build_pipeline(p) {
                v.err(&format!("pipelines.{name}"), e);
            }
        }
        self.validate_requests(&mut v);
        self.validate_masters(&mut v);
        self.validate_assignment(&mut v);
        if self.retry.max_attempts == Some(0) {
            v.err("retry.max_attempts", "must be at least 1 or null");
        }
        if self.retry.loop_threshold == 0 {
            v.err("retry.loop_threshold", "must be at least 1");
        }
        if let Err(e) = self.ftsh.spec().validate() {
            v.err("ftsh", e.to_string());
        }
        if !(self.stage_in.helper_mb >= 0.0) || !(self.stage_in.app_distribution_mb >= 0.0) {
            v.err("stage_in", "sizes must be non-negative");
        }
        self.validate_vo(&mut v);
        if !(self.monitor.sample_hours > 0.0) {
            v.err("monitor.sample_hours", "must be positive");
        }
        if self.monitor.windows == 0 {
            v.err("monitor.windows", "must be at least 1");
        }
        if !(self.cleanup_seconds >= 0.0) {
            v.err("cleanup_seconds", "must be non-negative");
        }
        v.errors
    }

    fn validate_sites(&self, v: &mut Validator) {
        if self.sites.is_empty() {
            v.err("sites", "at least one site is required");
        }
        let mut seen = BTreeSet::new();
        for (i, s) in self.sites.iter().enumerate() {
            let p = format!("sites[{i}]");
            if s.name.is_empty() || !seen.insert(s.name.as_str()) {
                v.err(&format!("{p}.name"), format!("empty or duplicate name {:?}", s.name));
            }
            if !(s.cpu_speed > 0.0) || !s.cpu_speed.is_finite() {
                v.err(&format!("{p}.cpu_speed"), "must be positive");
            }
            if !(s.disk_free_mb >= 0.0) {
                v.err(&format!("{p}.disk_free_mb"), "must be non-negative");
            }
            if let Some(h) = s.hardware_cpus {
                if h < s.worker_cpus {
                    v.err(&format!("{p}.worker_cpus"), "exceeds hardware_cpus");
                }
            }
            if let Some(d) = s.available_from_day {
                if !(d >= 0.0) || !d.is_finite() {
                    v.err(&format!("{p}.available_from_day"), "must be a non-negative day");
                }
            }
        }
    }

    fn validate_channels(&self, v: &mut Validator) {
        check_channel(v, "channels.default", &self.channels.default);
        for (site, ch) in &self.channels.overrides {
            let p = format!("channels.overrides.{site}");
            if self.site_index(site).is_none() {
                v.err(&p, format!("unknown site {site}"));
            }
            check_channel(v, &p, ch);
        }
    }

    fn validate_requests(&self, v: &mut Validator) {
        if self.requests.is_empty() {
            v.err("requests", "at least one request is required");
        }
        let mut seen = BTreeSet::new();
        for (i, r) in self.requests.iter().enumerate() {
            let p = format!("requests[{i}]");
            if r.id.is_empty() || r.id.contains(char::is_whitespace) || !seen.insert(r.id.as_str()) {
                v.err(&format!("{p}.id"), format!("empty, duplicate or spaced id {:?}", r.id));
            }
            if r.events == 0 {
                v.err(&format!("{p}.events"), "must be at least 1");
            }
            if r.chunk_size == 0 {
                v.err(&format!("{p}.chunk_size"), "must be at least 1");
            }
            if !self.pipelines.contains_key(&r.pipeline) {
                v.err(&format!("{p}.pipeline"), format!("unknown pipeline {}", r.pipeline));
            }
            let known = self.vo.users.iter().any(|u| u.dn == r.owner)
                || self.vo.updates.iter().any(|u| u.dn == r.owner);
            if !known {
                v.err(&format!("{p}.owner"), "owner DN is not in the VO");
            }
        }
    }

    fn validate_masters(&self, v: &mut Validator) {
        if self.masters.is_empty() {
            v.err("masters", "at least one master is required");
        }
        let mut seen = BTreeSet::new();
        for (i, m) in self.masters.iter().enumerate() {
            let p = format!("masters[{i}]");
            if m.master_id.is_empty() || m.master_id.contains(char::is_whitespace) || !seen.insert(&m.master_id) {
                v.err(&format!("{p}.master_id"), format!("empty, duplicate or spaced id {:?}", m.master_id));
            }
            if m.max_tracked_processes == 0 {
                v.err(&format!("{p}.max_tracked_processes"), "must be at least 1");
            }
        }
    }

    fn validate_assignment(&self, v: &mut Validator) {
        let mut seen = BTreeSet::new();
        for (i, a) in self.assignment.iter().enumerate() {
            let p = format!("assignment[{i}]");
            if !self.requests.iter().any(|r| r.id == a.request) {
                v.err(&format!("{p}.request"), format!("unknown request {}", a.request));
            }
            if !seen.insert(a.request.as_str()) {
                v.err(&format!("{p}.request"), "request assigned twice");
            }
            for (site, w) in &a.sites {
                if self.site_index(site).is_none() {
                    v.err(&format!("{p}.sites"), format!("unknown site {site}"));
                }
                if !(*w > 0.0) || !w.is_finite() {
                    v.err(&format!("{p}.sites.{site}"), "weight must be positive");
                }
            }
            for m in &a.masters {
                if !self.masters.iter().any(|x| &x.master_id == m) {
                    v.err(&format!("{p}.masters"), format!("unknown master {m}"));
                }
            }
        }
    }

    fn validate_vo(&self, v: &mut Validator) {
        if let Err(e) = self.directory() {
            v.err("vo", e);
        }
        for (i, u) in self.vo.updates.iter().enumerate() {
            if !(u.at_hour >= 0.0) || !u.at_hour.is_finite() {
                v.err(&format!("vo.updates[{i}].at_hour"), "must be a non-negative hour");
            }
            if !self.vo.groups.iter().any(|g| g.name == u.group) {
                v.err(&format!("vo.updates[{i}].group"), format!("unknown group {}", u.group));
            }
        }
        if !(self.vo.sync_hours > 0.0) {
            v.err("vo.sync_hours", "must be positive");
        }
    }

    pub fn site_specs(&self) -> Vec<SiteSpec> {
        self.sites
            .iter()
            .map(|s| SiteSpec {
                name: s.name.clone(),
                worker_cpus: s.worker_cpus,
                hardware_cpus: s.hardware_cpus.unwrap_or(s.worker_cpus),
                cpu_speed: s.cpu_speed,
                os: s.os.clone(),
                disk_free_mb: s.disk_free_mb,
                availability_windows: match s.available_from_day {
                    Some(d) if d > 0.0 => vec![Window {
                        start: d * DAY,
                        end: f64::INFINITY,
                    }],
                    _ => Vec::new(),
                },
            })
            .collect()
    }

    pub fn channel_specs(&self) -> Vec<ChannelSpec> {
        self.sites
            .iter()
            .map(|s| *self.channels.overrides.get(&s.name).unwrap_or(&self.channels.default))
            .collect()
    }

    /// Outage windows per site index, in seconds.
    pub fn outage_windows(&self) -> Vec<Vec<Window>> {
        let mut out = vec![Vec::new(); self.sites.len()];
        for o in &self.outages {
            let w = Window {
                start: o.start_day * DAY,
                end: o.end_day * DAY,
            };
            match &o.sites {
                SiteSelector::All(_) => out.iter_mut().for_each(|v| v.push(w)),
                SiteSelector::List(names) => {
                    for n in names {
                        if let Some(i) = self.site_index(n) {
                            out[i].push(w);
                        }
                    }
                }
            }
        }
        out
    }

    /// Outages that take every site down at once.
    pub fn global_outages(&self) -> Vec<Window> {
        self.outages
            .iter()
            .filter(|o| match &o.sites {
                SiteSelector::All(_) => true,
                SiteSelector::List(n) => self.sites.iter().all(|s| n.contains(&s.name)),
            })
            .map(|o| Window {
                start: o.start_day * DAY,
                end: o.end_day * DAY,
            })
            .collect()
    }

    pub fn pipeline(&self, name: &str) -> Result<PipelineSpec, String> {
        let p = self
            .pipelines
            .get(name)
            .ok_or_else(|| format!("unknown pipeline {name}"))?;
        build_pipeline(p)
    }

    pub fn production_requests(&self) -> Result<Vec<ProductionRequest>, String> {
        self.requests
            .iter()
            .map(|r| {
                let pipeline = self.pipeline(&r.pipeline)?;
                ProductionRequest::new(r.id.clone(), r.events, pipeline, r.chunk_size).map_err(|e| e.to_string())
            })
            .collect()
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_attempts: self.retry.max_attempts,
            loop_threshold: self.retry.loop_threshold,
            retry_permanent: self.retry.restart_all,
            ..RetryPolicy::default()
        }
    }

    /// Directory as it stands at the start of the campaign.
    pub fn directory(&self) -> Result<UserDirectory, String> {
        let mut dir = UserDirectory::new();
        for g in &self.vo.groups {
            dir.create_group(&g.name, &g.account).map_err(|e| e.to_string())?;
        }
        for u in &self.vo.users {
            for g in &u.groups {
                dir.add_user(
                    GridUser {
                        dn: u.dn.clone(),
                        ca: u.ca,
                    },
                    g,
                )
                .map_err(|e| e.to_string())?;
            }
        }
        Ok(dir)
    }

    pub fn sync_interval(&self) -> f64 {
        self.vo.sync_hours * HOUR
    }

    pub fn stage_in_options(&self) -> WrapOptions {
        self.stage_in.clone()
    }
}

fn check_channel(v: &mut Validator, path: &str, ch: &ChannelSpec) {
    if let Err(e) = ch.validate() {
        let field = match e {
            crate::error::GridError::InvalidChannel(f) => f,
            _ => "channel",
        };
        v.err(&format!("{path}.{field}"), e.to_string());
    }
}

fn build_pipeline(p: &PipelineConfig) -> Result<PipelineSpec, String> {
    let mut linker = Linker::new();
    for name in &p.stages {
        let stage = Stage::from_name(name).ok_or_else(|| format!("unknown stage {name}"))?;
        linker.attach(Configurator::for_stage(stage)).map_err(|e| e.to_string())?;
    }
    for (conf, settings) in &p.configure {
        for (k, val) in settings {
            linker.configure(conf, k, val).map_err(|e| e.to_string())?;
        }
    }
    if let Some(r) = p.pileup_ratio {
        linker.set_pileup_ratio(r);
    }
    linker.emit_pipeline().map_err(|e| e.to_string())
}

#[derive(Default)]
struct Validator {
    errors: Vec<ValidationError>,
}

impl Validator {
    fn err(&mut self, path: &str, message: impl Into<String>) {
        self.errors.push(ValidationError {
            path: path.to_string(),
            message: message.into(),
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "schema_version": 1,
        "name": "tiny",
        "seed": 1,
        "campaign_days": 2,
        "sites": [{"name": "a", "worker_cpus": 4, "cpu_speed": 1.0}],
        "pipelines": {"sim": {"stages": ["CMKIN", "CMSIM"]}},
        "requests": [{"id": "r", "events": 1000, "pipeline": "sim", "owner": "/CN=prod"}],
        "masters": [{"master_id": "m", "max_tracked_processes": 10}],
        "vo": {
            "groups": [{"name": "uscms", "account": "uscms01"}],
            "users": [{"dn": "/CN=prod", "ca": "DOESG", "groups": ["uscms"]}]
        }
    }"#;

    #[test]
    fn minimal_scenario_is_valid() {
        let s = Scenario::from_str_validated(MINIMAL).unwrap();
        assert_eq!(s.production_requests().unwrap()[0].job_count(), 4);
        assert_eq!(s.ftsh, FtshConfig::default());
        let with_ftsh = MINIMAL.replace(
            "\"campaign_days\": 2,",
            "\"campaign_days\": 2, \"ftsh\": {\"enabled\": false, \"timeout\": 30, \"max_attempts\": 2, \"backoff\": {\"multiplicative\": {\"initial\": 1, \"factor\": 2}}},",
        );
        let s = Scenario::from_str_validated(&with_ftsh).unwrap();
        assert!(!s.ftsh.enabled);
        assert_eq!(s.ftsh.spec().backoff.delay(3), 4.0);
        assert_eq!(s.channel_specs()[0], ChannelSpec::default());
    }

    #[test]
    fn round_trip() {
        let s = Scenario::from_str_validated(MINIMAL).unwrap();
        let again = Scenario::from_str_validated(&s.to_json()).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn parse_error_has_position() {
        let err = Scenario::parse("{\n  \"schema_version\": 1,\n  oops\n}").unwrap_err();
        match err {
            ScenarioError::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    fn errors_for(edit: impl FnOnce(&mut serde_json::Value)) -> Vec<ValidationError> {
        let mut v: serde_json::Value = serde_json::from_str(MINIMAL).unwrap();
        edit(&mut v);
        Scenario::parse(&v.to_string()).unwrap().validate()
    }

    #[test]
    fn negative_bandwidth_names_field() {
        let errs = errors_for(|v| {
            v["channels"] = serde_json::json!({"default": {
                "bandwidth": -1.0, "latency": 1.0, "hang_probability": 0.0, "retry_hang_probability": null
            }});
        });
        assert_eq!(errs.len(), 1);
        assert_eq!(errs[0].path, "channels.default.bandwidth");
    }

    #[test]
    fn missing_seed_is_an_error() {
        let errs = errors_for(|v| {
            v.as_object_mut().unwrap().remove("seed");
        });
        assert_eq!(errs[0].path, "seed");
    }

    #[test]
    fn unknown_site_in_assignment() {
        let errs = errors_for(|v| {
            v["assignment"] = serde_json::json!([{"request": "r", "sites": {"nowhere": 1.0}}]);
        });
        assert_eq!(errs.len(), 1);
        assert_eq!(errs[0].path, "assignment[0].sites");
    }

    #[test]
    fn unknown_pipeline_and_owner() {
        let errs = errors_for(|v| {
            v["requests"][0]["pipeline"] = "nope".into();
            v["requests"][0]["owner"] = "/CN=stranger".into();
        });
        let paths: Vec<_> = errs.iter().map(|e| e.path.as_str()).collect();
        assert_eq!(paths, vec!["requests[0].pipeline", "requests[0].owner"]);
    }

    #[test]
    fn bad_stage_order_reported() {
        let errs = errors_for(|v| {
            v["pipelines"]["sim"]["stages"] = serde_json::json!(["CMSIM", "CMKIN"]);
        });
        assert_eq!(errs[0].path, "pipelines.sim");
    }
}
