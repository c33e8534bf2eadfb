//! Production requests, the CMS stage table, and Configurator/Linker
//! workflow composition.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::WorkloadError;

/// Clock speed (GHz) at which the stage table was measured.
pub const REFERENCE_SPEED_GHZ: f64 = 0.75;

/// Events per job used by production unless a request says otherwise.
pub const DEFAULT_CHUNK_SIZE: u64 = 250;

/// Pileup events mixed per signal event at design luminosity.
pub const DEFAULT_PILEUP_RATIO: f64 = 200.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "CMKIN")]
    Cmkin,
    #[serde(rename = "CMSIM")]
    Cmsim,
    #[serde(rename = "writeHits")]
    WriteHits,
    #[serde(rename = "writeDigisNoPU")]
    WriteDigisNoPu,
    #[serde(rename = "writeDigisPU")]
    WriteDigisPu,
    #[serde(rename = "ntuple")]
    Ntuple,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Cmkin,
        Stage::Cmsim,
        Stage::WriteHits,
        Stage::WriteDigisNoPu,
        Stage::WriteDigisPu,
        Stage::Ntuple,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Cmkin => "CMKIN",
            Stage::Cmsim => "CMSIM",
            Stage::WriteHits => "writeHits",
            Stage::WriteDigisNoPu => "writeDigisNoPU",
            Stage::WriteDigisPu => "writeDigisPU",
            Stage::Ntuple => "ntuple",
        }
    }

    pub fn from_name(name: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.name() == name)
    }

    /// Position in the production chain. Both writeDigis variants share a slot.
    pub fn chain_rank(self) -> u8 {
        match self {
            Stage::Cmkin => 0,
            Stage::Cmsim => 1,
            Stage::WriteHits => 2,
            Stage::WriteDigisNoPu | Stage::WriteDigisPu => 3,
            Stage::Ntuple => 4,
        }
    }

    /// The stage whose output this stage consumes.
    pub fn input_stage(self) -> Option<u8> {
        match self.chain_rank() {
            0 => None,
            r => Some(r - 1),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Boundedness {
    Cpu,
    Io,
    Both,
    Negligible,
}

/// Measured per-event behaviour of one executable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageProfile {
    pub stage: Stage,
    /// Seconds per event at `reference_speed`.
    pub time_per_event: f64,
    /// MB written per event.
    pub output_per_event: f64,
    pub boundedness: Boundedness,
    /// GHz.
    pub reference_speed: f64,
}

impl StageProfile {
    pub fn new(
        stage: Stage,
        time_per_event: f64,
        output_per_event: f64,
        boundedness: Boundedness,
        reference_speed: f64,
    ) -> Result<Self, WorkloadError> {
        if !(time_per_event >= 0.0) || !time_per_event.is_finite() {
            return Err(WorkloadError::InvalidProfile {
                stage,
                field: "time_per_event",
                value: time_per_event,
            });
        }
        if !(output_per_event >= 0.0) || !output_per_event.is_finite() {
            return Err(WorkloadError::InvalidProfile {
                stage,
                field: "output_per_event",
                value: output_per_event,
            });
        }
        if !(reference_speed > 0.0) || !reference_speed.is_finite() {
            return Err(WorkloadError::InvalidProfile {
                stage,
                field: "reference_speed",
                value: reference_speed,
            });
        }
        Ok(Self {
            stage,
            time_per_event,
            output_per_event,
            boundedness,
            reference_speed,
        })
    }

    /// Table row for `stage` as measured on the 750 MHz reference machine.
    /// ntuple is listed as "at most 1 s/event"; the bound is used.
    pub fn builtin(stage: Stage) -> Self {
        let (t, out, b) = match stage {
            Stage::Cmkin => (0.05, 0.05, Boundedness::Negligible),
            Stage::Cmsim => (350.0, 2.0, Boundedness::Cpu),
            Stage::WriteHits => (0.05, 1.0, Boundedness::Io),
            Stage::WriteDigisNoPu => (2.0, 0.3, Boundedness::Cpu),
            Stage::WriteDigisPu => (10.0, 3.0, Boundedness::Both),
            Stage::Ntuple => (1.0, 0.05, Boundedness::Both),
        };
        Self {
            stage,
            time_per_event: t,
            output_per_event: out,
            boundedness: b,
            reference_speed: REFERENCE_SPEED_GHZ,
        }
    }

    pub fn default_table() -> Vec<StageProfile> {
        Stage::ALL.into_iter().map(StageProfile::builtin).collect()
    }

    /// CPU work per event in GHz-seconds.
    pub fn ghz_seconds_per_event(&self) -> f64 {
        self.time_per_event * self.reference_speed
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DigiVariant {
    NoPileup,
    Pileup,
}

/// Ordered chain of stages every job of a request runs through.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSpec {
    stages: Vec<StageProfile>,
    pileup_ratio: f64,
}

impl PipelineSpec {
    pub fn new(stages: Vec<StageProfile>, pileup_ratio: f64) -> Result<Self, WorkloadError> {
        if !(pileup_ratio >= 0.0) || !pileup_ratio.is_finite() {
            return Err(WorkloadError::InvalidPileupRatio(pileup_ratio));
        }
        for pair in stages.windows(2) {
            if pair[1].stage.chain_rank() <= pair[0].stage.chain_rank() {
                return Err(WorkloadError::StageOrder {
                    before: pair[0].stage,
                    after: pair[1].stage,
                });
            }
        }
        Ok(Self {
            stages,
            pileup_ratio,
        })
    }

    pub fn full_chain(variant: DigiVariant) -> Self {
        let digis = match variant {
            DigiVariant::NoPileup => Stage::WriteDigisNoPu,
            DigiVariant::Pileup => Stage::WriteDigisPu,
        };
        let stages = [Stage::Cmkin, Stage::Cmsim, Stage::WriteHits, digis, Stage::Ntuple]
            .into_iter()
            .map(StageProfile::builtin)
            .collect();
        Self {
            stages,
            pileup_ratio: DEFAULT_PILEUP_RATIO,
        }
    }

    /// CMKIN followed by CMSIM; CMSIM reads the generator output.
    pub fn cmsim_only() -> Self {
        Self {
            stages: vec![
                StageProfile::builtin(Stage::Cmkin),
                StageProfile::builtin(Stage::Cmsim),
            ],
            pileup_ratio: DEFAULT_PILEUP_RATIO,
        }
    }

    pub fn stages(&self) -> &[StageProfile] {
        &self.stages
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn pileup_ratio(&self) -> f64 {
        self.pileup_ratio
    }

    /// CPU work per event in GHz-seconds summed over all stages.
    pub fn ghz_seconds_per_event(&self) -> f64 {
        self.stages.iter().map(StageProfile::ghz_seconds_per_event).sum()
    }

    /// Pileup hit data read locally per signal event (MB). Only the pileup
    /// digitization variant reads it; pileup events are stored as hits.
    pub fn pileup_read_per_event(&self) -> f64 {
        if self.stages.iter().any(|s| s.stage == Stage::WriteDigisPu) {
            self.pileup_ratio * StageProfile::builtin(Stage::WriteHits).output_per_event
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductionRequest {
    pub request_id: String,
    pub total_events: u64,
    pub pipeline: Arc<PipelineSpec>,
    pub chunk_size: u64,
}

impl ProductionRequest {
    pub fn new(
        request_id: impl Into<String>,
        total_events: u64,
        pipeline: PipelineSpec,
        chunk_size: u64,
    ) -> Result<Self, WorkloadError> {
        if chunk_size == 0 {
            return Err(WorkloadError::ZeroChunkSize);
        }
        Ok(Self {
            request_id: request_id.into(),
            total_events,
            pipeline: Arc::new(pipeline),
            chunk_size,
        })
    }

    pub fn job_count(&self) -> u64 {
        self.total_events.div_ceil(self.chunk_size)
    }
}

/// One chunk of a request. Event numbers are 1-based and inclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSpec {
    pub job_id: String,
    pub request_id: String,
    pub first_event: u64,
    pub last_event: u64,
    pub pipeline: Arc<PipelineSpec>,
}

impl JobSpec {
    pub fn events(&self) -> u64 {
        if self.last_event < self.first_event {
            0
        } else {
            self.last_event - self.first_event + 1
        }
    }

    /// A job covering `events` events, numbered from 1.
    pub fn single(job_id: impl Into<String>, events: u64, pipeline: PipelineSpec) -> Self {
        Self {
            job_id: job_id.into(),
            request_id: "adhoc".into(),
            first_event: 1,
            last_event: events,
            pipeline: Arc::new(pipeline),
        }
    }
}

/// Split a request into consecutive chunks; the last chunk takes the remainder.
pub fn chunk_request(request: &ProductionRequest) -> Vec<JobSpec> {
    let n = request.job_count();
    let width = n.max(1).to_string().len().max(5);
    (0..n)
        .map(|i| {
            let first = i * request.chunk_size + 1;
            let last = ((i + 1) * request.chunk_size).min(request.total_events);
            JobSpec {
                job_id: format!("{}-{:0width$}", request.request_id, i + 1, width = width),
                request_id: request.request_id.clone(),
                first_event: first,
                last_event: last,
                pipeline: Arc::clone(&request.pipeline),
            }
        })
        .collect()
}

/// Wall-clock seconds to run every stage of `job` on a CPU of `cpu_speed` GHz.
pub fn estimate_job_cost(job: &JobSpec, cpu_speed: f64) -> Result<f64, WorkloadError> {
    if !(cpu_speed > 0.0) || !cpu_speed.is_finite() {
        return Err(WorkloadError::InvalidCpuSpeed(cpu_speed));
    }
    let events = job.events() as f64;
    Ok(job
        .pipeline
        .stages()
        .iter()
        .map(|s| stage_cost(s, events, cpu_speed))
        .sum())
}

pub(crate) fn stage_cost(stage: &StageProfile, events: f64, cpu_speed: f64) -> f64 {
    stage.time_per_event * events * (stage.reference_speed / cpu_speed)
}

/// Output volume (MB) a job ships back after its last stage.
pub fn estimate_job_output(job: &JobSpec) -> f64 {
    let events = job.events() as f64;
    job.pipeline
        .stages()
        .iter()
        .map(|s| s.output_per_event * events)
        .sum()
}

type ProduceFn = dyn Fn(&BTreeMap<String, String>) -> Result<StageProfile, WorkloadError> + Send + Sync;

/// Knows how to run one application; callers only see its metadata.
pub struct Configurator {
    name: String,
    metadata: BTreeMap<String, String>,
    requires: Option<u8>,
    produce: Box<ProduceFn>,
}

impl fmt::Debug for Configurator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Configurator")
            .field("name", &self.name)
            .field("metadata", &self.metadata)
            .finish_non_exhaustive()
    }
}

impl Configurator {
    pub fn new<F>(name: impl Into<String>, produce: F) -> Self
    where
        F: Fn(&BTreeMap<String, String>) -> Result<StageProfile, WorkloadError> + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            metadata: BTreeMap::new(),
            requires: None,
            produce: Box::new(produce),
        }
    }

    /// Configurator for a table stage. `time_per_event` and
    /// `output_per_event` metadata override the table values.
    pub fn for_stage(stage: Stage) -> Self {
        let mut conf = Configurator::new(stage.name(), move |meta| {
            let base = StageProfile::builtin(stage);
            let time = parse_override(stage, meta, "time_per_event", base.time_per_event)?;
            let out = parse_override(stage, meta, "output_per_event", base.output_per_event)?;
            StageProfile::new(stage, time, out, base.boundedness, base.reference_speed)
        });
        conf.requires = stage.input_stage();
        conf
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn configure(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    pub fn produce(&self) -> Result<StageProfile, WorkloadError> {
        (self.produce)(&self.metadata)
    }
}

fn parse_override(
    stage: Stage,
    meta: &BTreeMap<String, String>,
    key: &'static str,
    default: f64,
) -> Result<f64, WorkloadError> {
    match meta.get(key) {
        None => Ok(default),
        Some(raw) => raw.trim().parse::<f64>().map_err(|_| WorkloadError::BadMetadata {
            configurator: stage.name().to_string(),
            key: key.to_string(),
            value: raw.clone(),
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LinkerCommand {
    Attach(String),
    Configure { name: String, key: String, value: String },
}

/// Registry of configurators; turns an abstract chain into a pipeline.
#[derive(Debug, Default)]
pub struct Linker {
    configurators: Vec<Configurator>,
    commands: Vec<LinkerCommand>,
    pileup_ratio: Option<f64>,
}

impl Linker {
    pub fn new() -> Self {
        Self::default()
    }

    /// Linker for the full five-stage chain.
    pub fn full_chain(variant: DigiVariant) -> Self {
        let digis = match variant {
            DigiVariant::NoPileup => Stage::WriteDigisNoPu,
            DigiVariant::Pileup => Stage::WriteDigisPu,
        };
        let mut linker = Linker::new();
        for stage in [Stage::Cmkin, Stage::Cmsim, Stage::WriteHits, digis, Stage::Ntuple] {
            linker
                .attach(Configurator::for_stage(stage))
                .expect("distinct stage names");
        }
        linker
    }

    pub fn cmsim_only() -> Self {
        let mut linker = Linker::new();
        for stage in [Stage::Cmkin, Stage::Cmsim] {
            linker
                .attach(Configurator::for_stage(stage))
                .expect("distinct stage names");
        }
        linker
    }

    pub fn attach(&mut self, conf: Configurator) -> Result<(), WorkloadError> {
        if self.configurators.iter().any(|c| c.name == conf.name) {
            return Err(WorkloadError::DuplicateConfigurator(conf.name));
        }
        self.commands.push(LinkerCommand::Attach(conf.name.clone()));
        self.configurators.push(conf);
        Ok(())
    }

    pub fn configure(
        &mut self,
        name: &str,
        key: impl Into<String>,
        value: impl Into<String>,
    ) -> Result<(), WorkloadError> {
        let (key, value) = (key.into(), value.into());
        let conf = self
            .configurators
            .iter_mut()
            .find(|c| c.name == name)
            .ok_or_else(|| WorkloadError::UnknownConfigurator(name.to_string()))?;
        conf.configure(key.clone(), value.clone());
        self.commands.push(LinkerCommand::Configure {
            name: name.to_string(),
            key,
            value,
        });
        Ok(())
    }

    pub fn set_pileup_ratio(&mut self, ratio: f64) {
        self.pileup_ratio = Some(ratio);
    }

    pub fn configurators(&self) -> &[Configurator] {
        &self.configurators
    }

    pub fn commands(&self) -> &[LinkerCommand] {
        &self.commands
    }

    pub fn emit_pipeline(&self) -> Result<PipelineSpec, WorkloadError> {
        if self.configurators.is_empty() {
            return Err(WorkloadError::EmptyLinker);
        }
        let mut stages: Vec<StageProfile> = Vec::with_capacity(self.configurators.len());
        for conf in &self.configurators {
            let profile = conf.produce()?;
            if let Some(rank) = conf.requires {
                let fed = stages.iter().any(|s| s.stage.chain_rank() == rank);
                if !fed {
                    return Err(WorkloadError::MissingInput {
                        configurator: conf.name.clone(),
                    });
                }
            }
            stages.push(profile);
        }
        PipelineSpec::new(stages, self.pileup_ratio.unwrap_or(DEFAULT_PILEUP_RATIO))
    }
}
