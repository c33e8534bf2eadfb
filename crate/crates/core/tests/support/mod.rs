//! Scenario builders and invariant checks shared by the property suites and
//! the acceptance report.

#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::PathBuf;

use igtsim_core::campaign::{self, CampaignResult, RunOptions};
use igtsim_core::dagwrap::{ready_nodes, wrap_job, NodeId, WrapOptions};
use igtsim_core::scenario::Scenario;
use igtsim_core::vo::{mkgridmap, CertAuthority, Gridmap, GridUser, UserDirectory};
use igtsim_core::workload::{JobSpec, PipelineSpec, Stage, StageProfile};
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;
use serde_json::json;

pub const PROD_DN: &str = "/DC=org/DC=doegrids/OU=Services/CN=mop/igt-production";

pub fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
}

pub fn load(name: &str) -> Scenario {
    Scenario::load(&scenario_path(name)).expect("scenario parses")
}

pub fn run(s: &Scenario) -> CampaignResult {
    campaign::run(s, RunOptions::default()).expect("campaign runs")
}

pub fn from_json(v: serde_json::Value) -> Scenario {
    Scenario::from_str_validated(&v.to_string()).expect("valid scenario")
}

/// One site, one single-stage request, one master.
pub fn single_site(channel: serde_json::Value, ftsh: serde_json::Value, days: f64) -> serde_json::Value {
    json!({
        "schema_version": 1,
        "name": "single-site",
        "seed": 5,
        "campaign_days": days,
        "sites": [{"name": "s", "worker_cpus": 1, "cpu_speed": 1.0}],
        "channels": {"default": channel},
        "pipelines": {"gen": {"stages": ["CMKIN"]}},
        "requests": [{"id": "r", "events": 250, "pipeline": "gen", "owner": PROD_DN}],
        "masters": [{"master_id": "m", "max_tracked_processes": 10}],
        "ftsh": ftsh,
        "vo": {
            "groups": [{"name": "uscms", "account": "uscms01"}],
            "users": [{"dn": PROD_DN, "ca": "DOESG", "groups": ["uscms"]}]
        }
    })
}

/// Times at which `node` of `job` moved into `to`, read back from an event log.
pub fn transitions(log: &str, job: &str, node: &str, to: &str) -> Vec<f64> {
    log.lines()
        .filter_map(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            (f.len() >= 5 && f[2] == job && f[3] == node && f[4].ends_with(&format!("->{to}")))
                .then(|| f[0].parse().unwrap())
        })
        .collect()
}

// ---- DAG structure ----------------------------------------------------

pub const CHAIN: [Stage; 5] = [
    Stage::Cmkin,
    Stage::Cmsim,
    Stage::WriteHits,
    Stage::WriteDigisNoPu,
    Stage::Ntuple,
];

pub fn pipeline_prefix(k: usize, pileup: bool) -> PipelineSpec {
    let stages = CHAIN[..k]
        .iter()
        .map(|&s| {
            let s = if pileup && s == Stage::WriteDigisNoPu {
                Stage::WriteDigisPu
            } else {
                s
            };
            StageProfile::builtin(s)
        })
        .collect();
    PipelineSpec::new(stages, 200.0).expect("chain prefix is a valid pipeline")
}

pub fn dag_strategy() -> impl Strategy<Value = (usize, bool, u64, bool)> {
    (1usize..=5, any::<bool>(), 1u64..=5_000, any::<bool>())
}

pub fn check_dag_counts((k, pileup, events, per_job): (usize, bool, u64, bool)) -> Result<(), TestCaseError> {
    let job = JobSpec::single("j", events, pipeline_prefix(k, pileup));
    let mode = if per_job {
        igtsim_core::dagwrap::StageInMode::PerJob
    } else {
        igtsim_core::dagwrap::StageInMode::PreInstalled
    };
    let dag = wrap_job(&job, &WrapOptions::with_mode(mode)).map_err(|e| TestCaseError::fail(e.to_string()))?;
    prop_assert_eq!(dag.nodes.len(), k + 3);
    prop_assert_eq!(dag.edges.len(), k + 2);
    Ok(())
}

pub fn release_strategy() -> impl Strategy<Value = (usize, Vec<usize>)> {
    (1usize..=5, prop::collection::vec(any::<usize>(), 8))
}

/// Complete released nodes in an arbitrary order and check every release
/// comes after all of the node's parents finished.
pub fn check_release_order((k, picks): (usize, Vec<usize>)) -> Result<(), TestCaseError> {
    let job = JobSpec::single("j", 250, pipeline_prefix(k, false));
    let dag = wrap_job(&job, &WrapOptions::default()).unwrap();
    let mut completed: BTreeSet<NodeId> = BTreeSet::new();
    let mut released: Vec<NodeId> = Vec::new();
    let mut step = 0;
    loop {
        let ready = ready_nodes(&dag, &completed).map_err(|e| TestCaseError::fail(e.to_string()))?;
        for &n in &ready {
            if !released.contains(&n) {
                for (p, c) in &dag.edges {
                    if *c == n {
                        prop_assert!(completed.contains(p), "node {} released before parent {}", n, p);
                    }
                }
                released.push(n);
            }
        }
        let pending: Vec<NodeId> = released.iter().copied().filter(|n| !completed.contains(n)).collect();
        if pending.is_empty() {
            break;
        }
        let pick = pending[picks[step % picks.len()] % pending.len()];
        completed.insert(pick);
        step += 1;
    }
    prop_assert_eq!(released.len(), dag.nodes.len());
    let mut sorted = released.clone();
    sorted.sort_unstable();
    sorted.dedup();
    prop_assert_eq!(sorted.len(), released.len());
    Ok(())
}

// ---- gridmap ----------------------------------------------------------

pub fn directory_strategy() -> impl Strategy<Value = (Vec<(u8, u8, bool)>, Vec<usize>)> {
    (
        prop::collection::vec((0u8..40, 0u8..3, any::<bool>()), 0..25),
        prop::collection::vec(any::<usize>(), 25),
    )
}

fn build_directory(entries: &[(u8, u8, bool)]) -> UserDirectory {
    let mut dir = UserDirectory::new();
    for (g, account) in [("uscms", "uscms01"), ("btev", "btev01"), ("ivdgl", "ivdgl01")] {
        dir.create_group(g, account).unwrap();
    }
    let groups = ["uscms", "btev", "ivdgl"];
    for &(user, group, globus) in entries {
        let user = GridUser {
            dn: format!("/O=Grid/OU=test/CN=user {user:02}"),
            ca: if globus { CertAuthority::Globus } else { CertAuthority::DoeSg },
        };
        // a DN that re-registers under another CA is rejected; that is fine here
        let _ = dir.add_user(user, groups[group as usize]);
    }
    dir
}

/// The same registrations in any order render the same bytes.
pub fn check_gridmap_determinism((entries, shuffle): (Vec<(u8, u8, bool)>, Vec<usize>)) -> Result<(), TestCaseError> {
    // keep only the first CA seen per DN so both orders accept the same set
    let mut seen = std::collections::BTreeMap::new();
    let entries: Vec<_> = entries
        .into_iter()
        .map(|(u, g, ca)| (u, g, *seen.entry(u).or_insert(ca)))
        .collect();
    let a = mkgridmap(&build_directory(&entries));
    let mut permuted = entries.clone();
    for i in (1..permuted.len()).rev() {
        permuted.swap(i, shuffle[i % shuffle.len()] % (i + 1));
    }
    let b = mkgridmap(&build_directory(&permuted));
    prop_assert_eq!(a.as_bytes(), b.as_bytes());
    prop_assert_eq!(mkgridmap(&build_directory(&entries)), a.clone());
    let parsed = Gridmap::parse(&a).map_err(|e| TestCaseError::fail(e.to_string()))?;
    prop_assert_eq!(parsed, Gridmap::from_directory(&build_directory(&entries)));
    Ok(())
}

// ---- randomized campaigns ----------------------------------------------

#[derive(Debug, Clone)]
pub struct MiniCampaign {
    pub seed: u64,
    pub sites: Vec<(u32, f64)>,
    pub jobs: u64,
    pub stages: usize,
    pub disk_full: f64,
    pub lost_contact: f64,
    pub hang: f64,
    pub jitter: f64,
    pub ftsh: bool,
    pub caps: Vec<usize>,
    pub max_idle: Option<usize>,
    pub outage: Option<(f64, f64)>,
    /// Hour at which the production DN is registered; `None` means from the start.
    pub late_owner: Option<f64>,
    pub sync_hours: f64,
}

pub fn mini_campaign() -> impl Strategy<Value = MiniCampaign> {
    (
        (
            any::<u64>(),
            prop::collection::vec((1u32..=4, prop::sample::select(vec![0.75, 1.0, 2.4])), 1..=3),
            1u64..=6,
            1usize..=2,
        ),
        (0.0..0.3f64, 0.0..0.3f64, 0.0..0.2f64, 0.0..0.3f64, any::<bool>()),
        (
            prop::collection::vec(1usize..=6, 1..=2),
            prop::option::of(1usize..=3),
            prop::option::of((0.0..2.0f64, 0.05..1.0f64)),
            prop::option::of(0.0..24.0f64),
            prop::sample::select(vec![1.0, 3.0, 6.0]),
        ),
    )
        .prop_map(
            |((seed, sites, jobs, stages), (disk_full, lost_contact, hang, jitter, ftsh), (caps, max_idle, outage, late_owner, sync_hours))| {
                MiniCampaign {
                    seed,
                    sites,
                    jobs,
                    stages,
                    disk_full,
                    lost_contact,
                    hang,
                    jitter,
                    ftsh,
                    caps,
                    max_idle,
                    outage: outage.map(|(s, len)| (s, s + len)),
                    late_owner,
                    sync_hours,
                }
            },
        )
}

impl MiniCampaign {
    pub fn scenario(&self) -> Scenario {
        let sites: Vec<_> = self
            .sites
            .iter()
            .enumerate()
            .map(|(i, (cpus, speed))| json!({"name": format!("site{i}"), "worker_cpus": cpus, "cpu_speed": speed}))
            .collect();
        let stages: Vec<&str> = ["CMKIN", "CMSIM"][..self.stages].to_vec();
        let masters: Vec<_> = self
            .caps
            .iter()
            .enumerate()
            .map(|(i, cap)| json!({"master_id": format!("m{i}"), "max_tracked_processes": cap}))
            .collect();
        let operator = "/O=Grid/O=Globus/OU=fnal.gov/CN=Operator";
        let (users, updates) = match self.late_owner {
            None => (
                vec![json!({"dn": PROD_DN, "ca": "DOESG", "groups": ["uscms"]})],
                vec![],
            ),
            Some(h) => (
                vec![json!({"dn": operator, "ca": "Globus", "groups": ["uscms"]})],
                vec![json!({"at_hour": h, "dn": PROD_DN, "ca": "DOESG", "group": "uscms"})],
            ),
        };
        let outages: Vec<_> = self
            .outage
            .iter()
            .map(|(s, e)| json!({"name": "down", "sites": ["site0"], "start_day": s, "end_day": e}))
            .collect();
        let mut v = json!({
            "schema_version": 1,
            "name": "mini",
            "seed": self.seed,
            "campaign_days": 20.0,
            "sites": sites,
            "channels": {"default": {"bandwidth": 10.0, "latency": 1.0, "hang_probability": self.hang, "retry_hang_probability": null}},
            "failures": {
                "disk_full_probability": self.disk_full,
                "disk_full_fail_after": 60.0,
                "lost_contact_probability": self.lost_contact,
                "detection_delay": 600.0,
                "service_time_jitter": self.jitter
            },
            "outages": outages,
            "pipelines": {"p": {"stages": stages}},
            "requests": [{"id": "r", "events": self.jobs * 250, "pipeline": "p", "owner": PROD_DN}],
            "masters": masters,
            "retry": {"max_attempts": 4},
            "ftsh": {"enabled": self.ftsh, "timeout": 600.0, "max_attempts": 3, "backoff": {"fixed": 30.0}},
            "vo": {
                "groups": [{"name": "uscms", "account": "uscms01"}],
                "users": users,
                "updates": updates,
                "sync_hours": self.sync_hours
            }
        });
        if let Some(m) = self.max_idle {
            v["max_idle_per_site"] = json!(m);
        }
        from_json(v)
    }
}

/// No site ever runs more executions than it has worker CPUs.
pub fn check_cpu_bound(c: MiniCampaign) -> Result<(), TestCaseError> {
    let s = c.scenario();
    let r = run(&s);
    for (site, cfg) in r.summary.sites.iter().zip(&s.sites) {
        prop_assert!(
            site.peak_running <= cfg.worker_cpus,
            "{} peaked at {} of {}",
            site.name,
            site.peak_running,
            cfg.worker_cpus
        );
    }
    for sample in &r.samples {
        let cpus = s.sites.iter().find(|x| x.name == sample.site_id).unwrap().worker_cpus;
        prop_assert!(sample.cpus_busy <= cpus);
    }
    Ok(())
}

/// Every dispatch was authorized by the gridmap in force at that moment.
pub fn check_authorization(c: MiniCampaign) -> Result<(), TestCaseError> {
    let s = c.scenario();
    let r = run(&s);
    let maps: Vec<(f64, Gridmap)> = r
        .gridmap_history
        .iter()
        .map(|(t, text)| (*t, Gridmap::parse(text).unwrap()))
        .collect();
    prop_assert!(!r.executor.dispatch_audit().is_empty(), "nothing was dispatched");
    for d in r.executor.dispatch_audit() {
        let (_, map) = maps
            .iter()
            .rev()
            .find(|(t, _)| *t <= d.time)
            .expect("a gridmap exists from time zero");
        prop_assert_eq!(map.authorize(&d.dn), Some(d.account.as_str()), "dispatch at {} for {}", d.time, d.dn);
    }
    if let Some(h) = c.late_owner {
        let first_map = maps
            .iter()
            .find(|(_, m)| m.authorize(PROD_DN).is_some())
            .map(|(t, _)| *t);
        if let (Some(first), Some(d)) = (first_map, r.executor.dispatch_audit().first()) {
            prop_assert!(d.time >= first && first >= h * 3600.0);
        }
    }
    Ok(())
}
