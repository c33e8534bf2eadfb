//! Per-site sampling, grid aggregation, and production efficiency.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::MonitorError;
use crate::gridsim::{SiteSpec, Window, DAY};
use crate::workload::PipelineSpec;

/// Flat runs of the progress curve longer than this must be explained by an outage.
pub const FLAT_SPOT_MIN: f64 = 12.0 * 3_600.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSample {
    pub timestamp: f64,
    pub site_id: String,
    pub cpus_busy: u32,
    pub queue_length: usize,
    /// Cumulative events whose output returned from this site.
    pub events_completed: u64,
    pub wasted_cpu_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteView {
    pub site_id: String,
    pub stale: bool,
    pub sample: Option<MetricSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSnapshot {
    pub timestamp: f64,
    pub sites: Vec<SiteView>,
    pub cpus_busy: u32,
    pub queue_length: usize,
    pub events_completed: u64,
}

impl GridSnapshot {
    pub fn stale_sites(&self) -> impl Iterator<Item = &str> {
        self.sites.iter().filter(|s| s.stale).map(|s| s.site_id.as_str())
    }
}

/// Combine the samples taken at `timestamp`. Sites without one are marked
/// stale and left out of the totals.
pub fn aggregate(timestamp: f64, site_ids: &[String], samples: &[MetricSample]) -> GridSnapshot {
    let by_site: BTreeMap<&str, &MetricSample> = samples
        .iter()
        .filter(|s| s.timestamp == timestamp)
        .map(|s| (s.site_id.as_str(), s))
        .collect();
    let mut snap = GridSnapshot {
        timestamp,
        sites: Vec::with_capacity(site_ids.len()),
        cpus_busy: 0,
        queue_length: 0,
        events_completed: 0,
    };
    for id in site_ids {
        let sample = by_site.get(id.as_str()).map(|s| (*s).clone());
        if let Some(s) = &sample {
            snap.cpus_busy += s.cpus_busy;
            snap.queue_length += s.queue_length;
            snap.events_completed += s.events_completed;
        }
        snap.sites.push(SiteView {
            site_id: id.clone(),
            stale: sample.is_none(),
            sample,
        });
    }
    snap
}

/// Events per day the grid could produce if every usable CPU ran `pipeline`
/// back to back.
pub fn theoretical_max(sites: &[SiteSpec], pipeline: &PipelineSpec) -> Result<f64, MonitorError> {
    let ghz: f64 = sites.iter().map(SiteSpec::capacity_ghz).sum();
    let per_event = pipeline.ghz_seconds_per_event();
    if !(ghz > 0.0) || !(per_event > 0.0) {
        return Err(MonitorError::ZeroCapacity);
    }
    Ok(ghz * DAY / per_event)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowEfficiency {
    pub start: f64,
    pub end: f64,
    pub events: u64,
    pub events_per_day: f64,
    pub efficiency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub ceiling_per_day: f64,
    pub span_start: f64,
    pub span_end: f64,
    pub events: u64,
    pub windows: Vec<WindowEfficiency>,
    pub overall: f64,
}

/// Split `[span_start, span_end)` into `windows` equal windows and compare
/// the events completed in each with `ceiling_per_day`. A completion exactly
/// at `span_end` counts in the last window.
pub fn efficiency_report(
    completions: &[(f64, u64)],
    span_start: f64,
    span_end: f64,
    windows: usize,
    ceiling_per_day: f64,
) -> Result<EfficiencyReport, MonitorError> {
    if windows == 0 {
        return Err(MonitorError::ZeroWindows);
    }
    let span = span_end - span_start;
    if !(span > 0.0) {
        return Err(MonitorError::EmptySpan(span));
    }
    if !(ceiling_per_day > 0.0) {
        return Err(MonitorError::ZeroCapacity);
    }
    let width = span / windows as f64;
    let mut counts = vec![0u64; windows];
    for &(t, events) in completions {
        if t < span_start || t > span_end {
            continue;
        }
        let i = (((t - span_start) / width) as usize).min(windows - 1);
        counts[i] += events;
    }
    let days = width / DAY;
    let windows: Vec<WindowEfficiency> = counts
        .iter()
        .enumerate()
        .map(|(i, &events)| {
            let per_day = events as f64 / days;
            WindowEfficiency {
                start: span_start + i as f64 * width,
                end: span_start + (i + 1) as f64 * width,
                events,
                events_per_day: per_day,
                efficiency: per_day / ceiling_per_day,
            }
        })
        .collect();
    let events: u64 = counts.iter().sum();
    Ok(EfficiencyReport {
        ceiling_per_day,
        span_start,
        span_end,
        events,
        overall: events as f64 / (span / DAY) / ceiling_per_day,
        windows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProgressPoint {
    pub time: f64,
    pub events: u64,
    pub tracked_events: u64,
    pub cpus_busy: u32,
    pub queue_length: usize,
    pub wasted_cpu_seconds: f64,
}

/// Maximal runs over which `tracked_events` does not grow and that last
/// longer than `min_len`.
pub fn flat_spots(points: &[ProgressPoint], min_len: f64) -> Vec<Window> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < points.len() {
        let mut j = i;
        while j + 1 < points.len() && points[j + 1].tracked_events == points[i].tracked_events {
            j += 1;
        }
        let (start, end) = (points[i].time, points[j].time);
        if end - start > min_len {
            out.push(Window { start, end });
        }
        i = j + 1;
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FlatSpotCheck {
    pub flats: Vec<Window>,
    pub unexplained_flats: Vec<Window>,
    pub uncovered_outages: Vec<Window>,
}

impl FlatSpotCheck {
    pub fn passed(&self) -> bool {
        self.unexplained_flats.is_empty() && self.uncovered_outages.is_empty()
    }
}

fn overlaps(a: &Window, b: &Window) -> bool {
    a.start < b.end && b.start < a.end
}

/// Every flat run must overlap an outage and every outage must overlap a
/// flat run.
pub fn check_flat_spots(flats: &[Window], outages: &[Window]) -> FlatSpotCheck {
    FlatSpotCheck {
        flats: flats.to_vec(),
        unexplained_flats: flats
            .iter()
            .filter(|f| !outages.iter().any(|o| overlaps(f, o)))
            .copied()
            .collect(),
        uncovered_outages: outages
            .iter()
            .filter(|o| !flats.iter().any(|f| overlaps(f, o)))
            .copied()
            .collect(),
    }
}

pub fn progress_csv(points: &[ProgressPoint]) -> String {
    let mut out = String::from("time_s,day,events,tracked_events,cpus_busy,queue_length,wasted_cpu_s\n");
    for p in points {
        let _ = writeln!(
            out,
            "{:.0},{:.4},{},{},{},{},{:.1}",
            p.time,
            p.time / DAY,
            p.events,
            p.tracked_events,
            p.cpus_busy,
            p.queue_length,
            p.wasted_cpu_seconds
        );
    }
    out
}

pub fn efficiency_csv(report: &EfficiencyReport) -> String {
    let mut out = String::from("window,start_day,end_day,events,events_per_day,efficiency\n");
    for (i, w) in report.windows.iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{:.3},{:.3},{},{:.1},{:.4}",
            i,
            w.start / DAY,
            w.end / DAY,
            w.events,
            w.events_per_day,
            w.efficiency
        );
    }
    let _ = writeln!(
        out,
        "overall,{:.3},{:.3},{},{:.1},{:.4}",
        report.span_start / DAY,
        report.span_end / DAY,
        report.events,
        report.events as f64 / ((report.span_end - report.span_start) / DAY),
        report.overall
    );
    out
}
