//! One PASS/FAIL line per acceptance criterion; exits nonzero if any fail.

mod support;

use std::process::ExitCode;
use std::time::Instant;

use igtsim_core::campaign::{self, RunOptions};
use igtsim_core::dagwrap::{wrap_job, WrapOptions};
use igtsim_core::executor::{Executor, JobOwner, MasterConfig, OpenGate, RetryPolicy};
use igtsim_core::monitor::ProgressPoint;
use igtsim_core::workload::{chunk_request, estimate_job_cost, DigiVariant, JobSpec, PipelineSpec, ProductionRequest};
use proptest::test_runner::{Config, TestRunner};
use serde_json::json;
use support::*;

const DAY: f64 = 86_400.0;

/// Seconds per event on the 750 MHz reference machine, full chain without pileup.
const FULL_CHAIN_TABLE: [f64; 5] = [0.05, 350.0, 0.05, 2.0, 1.0];

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn job_accounting() -> Outcome {
    let t = Instant::now();
    let full = ProductionRequest::new("full", 1_000_000, PipelineSpec::full_chain(DigiVariant::NoPileup), 250)
        .map_err(|e| e.to_string())?;
    let cmsim = ProductionRequest::new("cmsim", 500_000, PipelineSpec::cmsim_only(), 250).map_err(|e| e.to_string())?;
    let (a, b) = (chunk_request(&full), chunk_request(&cmsim));
    let elapsed = t.elapsed().as_secs_f64();
    ensure(a.len() == 4000 && full.job_count() == 4000, format!("{} full-chain jobs", a.len()))?;
    ensure(b.len() == 2000 && cmsim.job_count() == 2000, format!("{} CMSIM-only jobs", b.len()))?;
    ensure(a.iter().map(JobSpec::events).sum::<u64>() == 1_000_000, "full-chain events not conserved")?;
    ensure(elapsed < 1.0, format!("took {elapsed:.3} s"))?;
    Ok(format!("4000 + 2000 jobs in {:.1} ms", elapsed * 1e3))
}

fn cpu_hours() -> Outcome {
    let oracle = FULL_CHAIN_TABLE.iter().sum::<f64>() * 0.75 * 1_000_000.0 / 3600.0;
    let req = ProductionRequest::new("full", 1_000_000, PipelineSpec::full_chain(DigiVariant::NoPileup), 250)
        .map_err(|e| e.to_string())?;
    let mut seconds = 0.0;
    for job in chunk_request(&req) {
        seconds += estimate_job_cost(&job, 1.0).map_err(|e| e.to_string())?;
    }
    let hours = seconds / 3600.0;
    ensure((hours - oracle).abs() / oracle < 1e-3, format!("{hours:.1} vs hand arithmetic {oracle:.1}"))?;
    ensure((66_000.0..=110_000.0).contains(&hours), format!("{hours:.1} outside [66000, 110000]"))?;
    Ok(format!("{hours:.1} GHz-hours (hand arithmetic {oracle:.1})"))
}

/// Events/day the full hardware table can sustain on the full chain.
fn hardware_ceiling() -> f64 {
    let ghz = 40.0 * 0.8 + 40.0 * 2.4 + 80.0 * 0.75 + 80.0 * 1.0 + 40.0 * 0.8 + 40.0 * 2.4 + 72.0 * 2.4;
    ghz * DAY / (FULL_CHAIN_TABLE.iter().sum::<f64>() * 0.75)
}

fn window_rates(tracked: &[(f64, u64)], start: f64, end: f64, n: usize) -> Vec<f64> {
    let width = (end - start) / n as f64;
    let mut counts = vec![0u64; n];
    for &(t, e) in tracked {
        if t >= start && t <= end {
            let i = (((t - start) / width) as usize).min(n - 1);
            counts[i] += e;
        }
    }
    counts.iter().map(|&c| c as f64 / (width / DAY)).collect()
}

/// (time, events) for each increase of the tracked progress curve.
fn tracked_steps(points: &[ProgressPoint]) -> Vec<(f64, u64)> {
    let mut last = 0;
    let mut out = Vec::new();
    for p in points {
        if p.tracked_events > last {
            out.push((p.time, p.tracked_events - last));
            last = p.tracked_events;
        }
    }
    out
}

fn ceiling() -> Outcome {
    let s = load("clean.scenario");
    let t = Instant::now();
    let r = run(&s);
    let wall = t.elapsed().as_secs_f64();
    let oracle = hardware_ceiling();
    let model = r.summary.formula_ceiling_events_per_day;
    ensure((model - oracle).abs() / oracle < 1e-9, format!("formula ceiling {model:.1} vs {oracle:.1}"))?;
    let end = r.summary.campaign_end_seconds;
    ensure((end - 60.0 * DAY).abs() < 1e-6, format!("campaign ended at day {:.2}", end / DAY))?;
    let steps = tracked_steps(&r.progress);
    let total: u64 = steps.iter().map(|s| s.1).sum();
    ensure(total == r.summary.tracked_events_completed, "progress curve disagrees with the summary")?;
    let overall = total as f64 / (end / DAY) / oracle;
    let rates: Vec<f64> = window_rates(&steps, 0.0, end, 12).iter().map(|x| x / oracle).collect();
    let worst = rates[1..].iter().cloned().fold(f64::INFINITY, f64::min);
    ensure(overall >= 0.95, format!("overall {overall:.4}"))?;
    ensure(worst >= 0.95, format!("steady-state window at {worst:.4}"))?;
    ensure(wall < 60.0, format!("wall clock {wall:.1} s"))?;
    Ok(format!(
        "overall {overall:.4}, worst window after ramp-up {worst:.4}, ramp-up window {:.4}, {wall:.1} s wall",
        rates[0]
    ))
}

fn efficiency() -> Outcome {
    let s = load("fall2002.scenario");
    let r = run(&s);
    let declared = s.ceiling_events_per_day.ok_or("fall2002 declares no ceiling")?;
    let end = r.summary.campaign_end_seconds;
    let steps = tracked_steps(&r.progress);
    let rates = window_rates(&steps, 0.0, end, 12);
    let per_window: Vec<f64> = rates.iter().map(|x| x / declared).collect();
    let overall = per_window.iter().sum::<f64>() / 12.0;
    ensure(r.efficiency.windows.len() == 12, format!("{} windows", r.efficiency.windows.len()))?;
    ensure((overall - r.summary.efficiency).abs() < 1e-9, format!("reported {} vs recomputed {overall}", r.summary.efficiency))?;
    ensure((0.35..=0.40).contains(&overall), format!("overall {overall:.4}"))?;
    Ok(format!("overall {overall:.4} against {declared:.0}/day over 12 windows"))
}

fn flat_spots() -> Outcome {
    let s = load("fall2002.scenario");
    let r = run(&s);
    let pts = &r.progress;
    let first = pts.iter().find(|p| p.tracked_events > 0).ok_or("no tracked progress")?;
    let total = pts.last().unwrap().tracked_events;
    let last = pts.iter().find(|p| p.tracked_events == total).unwrap();
    // constant-value runs of the curve between first and last growth
    let mut flats = Vec::new();
    let span: Vec<&ProgressPoint> = pts.iter().filter(|p| p.time >= first.time && p.time <= last.time).collect();
    let mut i = 0;
    while i < span.len() {
        let mut j = i;
        while j + 1 < span.len() && span[j + 1].tracked_events == span[i].tracked_events {
            j += 1;
        }
        if span[j].time - span[i].time > 0.5 * DAY {
            flats.push((span[i].time / DAY, span[j].time / DAY));
        }
        i = j + 1;
    }
    let outages = [("SC2002", 15.0, 21.0), ("holidays", 47.0, 54.0)];
    let overlaps = |f: &(f64, f64), o: &(&str, f64, f64)| f.0 < o.2 && o.1 < f.1;
    for f in &flats {
        ensure(
            outages.iter().any(|o| overlaps(f, o)),
            format!("flat from day {:.2} to {:.2} matches no outage", f.0, f.1),
        )?;
    }
    for o in &outages {
        ensure(flats.iter().any(|f| overlaps(f, o)), format!("no flat during {}", o.0))?;
    }
    ensure(r.summary.flat_spots.unexplained_flats.is_empty(), "model reports unexplained flats")?;
    let shown: Vec<String> = flats.iter().map(|f| format!("{:.1}-{:.1}", f.0, f.1)).collect();
    Ok(format!("flats on days {}", shown.join(", ")))
}

fn saturation() -> Outcome {
    let dag = |i: usize| {
        wrap_job(&JobSpec::single(format!("j{i}"), 250, PipelineSpec::cmsim_only()), &WrapOptions::default())
            .map_err(|e| e.to_string())
    };
    let owner = || JobOwner { dn: PROD_DN.into(), request_id: "r".into(), events: 250 };
    let mut one = Executor::new(vec![MasterConfig::new("m", 400)], vec!["site".into()], RetryPolicy::default())
        .map_err(|e| e.to_string())?;
    for i in 0..500 {
        one.submit_dag(dag(i)?, "site", "m", owner(), 0.0).map_err(|e| e.to_string())?;
    }
    let rep = one.dispatch_step(0, 0.0, &OpenGate);
    let stats = &one.master_stats()[0];
    ensure(rep.actions.len() == 400 && stats.peak_tracked == 400, format!("one master ran {}", rep.actions.len()))?;
    ensure(rep.saturated && stats.saturation_incidents >= 1, "saturation not recorded")?;

    let mut two = Executor::new(
        vec![MasterConfig::new("a", 400), MasterConfig::new("b", 400)],
        vec!["site".into()],
        RetryPolicy::default(),
    )
    .map_err(|e| e.to_string())?;
    for i in 0..500 {
        let m = if i % 2 == 0 { "a" } else { "b" };
        two.submit_dag(dag(i)?, "site", m, owner(), 0.0).map_err(|e| e.to_string())?;
    }
    let total: usize = (0..2).map(|m| two.dispatch_step(m, 0.0, &OpenGate).actions.len()).sum();
    ensure(total == 500, format!("two masters ran {total}"))?;
    ensure(two.master_stats().iter().all(|m| m.saturation_incidents == 0), "split masters saturated")?;
    Ok("one master 400 and saturated, two masters 500".into())
}

fn duplicate_execution() -> Outcome {
    let events = 40 * 250;
    let s = from_json(json!({
        "schema_version": 1,
        "name": "lost-contact",
        "seed": 11,
        "campaign_days": 60.0,
        "sites": [
            {"name": "a", "worker_cpus": 8, "cpu_speed": 2.4},
            {"name": "b", "worker_cpus": 8, "cpu_speed": 1.0}
        ],
        "failures": {
            "disk_full_probability": 0.0,
            "disk_full_fail_after": 0.0,
            "lost_contact_probability": 0.5,
            "detection_delay": 1800.0,
            "service_time_jitter": 0.1
        },
        "pipelines": {"p": {"stages": ["CMKIN", "CMSIM"]}},
        "requests": [{"id": "r", "events": events, "pipeline": "p", "owner": PROD_DN}],
        "masters": [{"master_id": "m", "max_tracked_processes": 100}],
        "retry": {"max_attempts": null},
        "vo": {
            "groups": [{"name": "uscms", "account": "uscms01"}],
            "users": [{"dn": PROD_DN, "ca": "DOESG", "groups": ["uscms"]}]
        }
    }));
    let r = run(&s);
    let sm = &r.summary;
    ensure(sm.wasted_cpu_seconds > 0.0, "no wasted CPU")?;
    ensure(sm.jobs_completed == sm.jobs_total, format!("{} of {} jobs completed", sm.jobs_completed, sm.jobs_total))?;
    ensure(sm.events_completed == events, format!("{} events counted for a {events}-event request", sm.events_completed))?;
    let logged: u64 = r
        .events_log
        .lines()
        .filter_map(|l| l.split_whitespace().find_map(|f| f.strip_prefix("events=")))
        .map(|v| v.parse::<u64>().unwrap())
        .sum();
    ensure(logged == events, format!("event log counts {logged}"))?;
    Ok(format!("{events} events, {:.0} wasted CPU-s", sm.wasted_cpu_seconds))
}

fn ftsh_contrast() -> Outcome {
    let (bw, latency, timeout) = (10.0, 1.0, 600.0);
    let channel = json!({"bandwidth": bw, "latency": latency, "hang_probability": 1.0, "retry_hang_probability": 0.0});
    let ftsh = |enabled: bool| json!({"enabled": enabled, "timeout": timeout, "max_attempts": 3, "backoff": {"fixed": 0.0}});

    let bare = run(&from_json(single_site(channel.clone(), ftsh(false), 2.0)));
    ensure(bare.summary.truncated, "unwrapped run was not truncated")?;
    ensure(transitions(&bare.events_log, "r-00001", "stagein", "Completed").is_empty(), "unwrapped stage-in completed")?;
    ensure(bare.summary.jobs_completed == 0, "unwrapped job completed")?;

    let wrapped = run(&from_json(single_site(channel, ftsh(true), 2.0)));
    let opts = WrapOptions::default();
    let expected = timeout + opts.helper_files as f64 * latency + opts.helper_mb / bw;
    let done = transitions(&wrapped.events_log, "r-00001", "stagein", "Completed");
    ensure(done.len() == 1, format!("wrapped stage-in completed {} times", done.len()))?;
    ensure((done[0] - expected).abs() < 1e-6, format!("completed at {} vs {expected}", done[0]))?;
    ensure(wrapped.summary.jobs_completed == 1, "wrapped job did not finish")?;
    Ok(format!("unwrapped hangs to the horizon, wrapped stage-in done at {:.3} s", done[0]))
}

fn determinism() -> Outcome {
    let mut checked = Vec::new();
    for name in ["fall2002.scenario", "clean.scenario"] {
        let s = load(name);
        let a = run(&s);
        let b = run(&s);
        ensure(a.events_log.as_bytes() == b.events_log.as_bytes(), format!("{name}: same seed, different logs"))?;
        let seed = s.seed.unwrap_or(0).wrapping_add(1);
        let c = campaign::run(&s, RunOptions { seed: Some(seed), windows: None }).map_err(|e| e.to_string())?;
        ensure(a.events_log != c.events_log, format!("{name}: seeds {} and {seed} agree", s.seed.unwrap_or(0)))?;
        checked.push(format!("{name} ({} lines)", a.events_log.lines().count()));
    }
    Ok(checked.join(", "))
}

fn fail<T: std::fmt::Debug>(name: &str, e: proptest::test_runner::TestError<T>) -> String {
    format!("{name}: {e}")
}

fn invariants() -> Outcome {
    let t = Instant::now();
    let cfg = || Config { cases: 1000, failure_persistence: None, ..Config::default() };
    TestRunner::new(cfg()).run(&dag_strategy(), check_dag_counts).map_err(|e| fail("dag counts", e))?;
    TestRunner::new(cfg()).run(&release_strategy(), check_release_order).map_err(|e| fail("release order", e))?;
    TestRunner::new(cfg()).run(&mini_campaign(), check_cpu_bound).map_err(|e| fail("cpu bound", e))?;
    TestRunner::new(cfg()).run(&directory_strategy(), check_gridmap_determinism).map_err(|e| fail("gridmap", e))?;
    TestRunner::new(cfg()).run(&mini_campaign(), check_authorization).map_err(|e| fail("authorization", e))?;
    let secs = t.elapsed().as_secs_f64();
    ensure(secs < 300.0, format!("{secs:.1} s"))?;
    Ok(format!("5 suites x 1000 cases in {secs:.1} s"))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("job accounting", job_accounting),
        ("cpu-hour sanity", cpu_hours),
        ("ceiling", ceiling),
        ("efficiency calibration", efficiency),
        ("flat spots", flat_spots),
        ("master saturation", saturation),
        ("duplicate execution", duplicate_execution),
        ("ftsh contrast", ftsh_contrast),
        ("determinism", determinism),
        ("invariant suites", invariants),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
