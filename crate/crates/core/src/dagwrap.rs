//! Job-to-DAG wrapping with stage-in, run, stage-out and cleanup nodes.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{DagError, DagViolation};
use crate::workload::{estimate_job_output, JobSpec, StageProfile};

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NodeKind {
    StageIn,
    Run,
    StageOut,
    Cleanup,
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NodeKind::StageIn => "StageIn",
            NodeKind::Run => "Run",
            NodeKind::StageOut => "StageOut",
            NodeKind::Cleanup => "Cleanup",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageInMode {
    /// Application distribution shipped with every job.
    PerJob,
    /// Application already installed at the site; only helper files move.
    PreInstalled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileSet {
    pub files: u32,
    pub size_mb: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WrapOptions {
    pub stage_in_mode: StageInMode,
    pub helper_files: u32,
    pub helper_mb: f64,
    pub app_distribution_files: u32,
    pub app_distribution_mb: f64,
}

impl Default for WrapOptions {
    fn default() -> Self {
        Self {
            stage_in_mode: StageInMode::PreInstalled,
            helper_files: 40,
            helper_mb: 20.0,
            app_distribution_files: 1,
            app_distribution_mb: 1_500.0,
        }
    }
}

impl WrapOptions {
    pub fn with_mode(mode: StageInMode) -> Self {
        Self {
            stage_in_mode: mode,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Payload {
    Transfer(FileSet),
    Run { stage: StageProfile, events: u64 },
    Cleanup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DagNode {
    pub id: NodeId,
    pub name: String,
    pub kind: NodeKind,
    pub payload: Payload,
}

impl DagNode {
    fn payload_summary(&self) -> String {
        match &self.payload {
            Payload::Transfer(fs) => format!("files={} mb={:.3}", fs.files, fs.size_mb),
            Payload::Run { stage, events } => format!("stage={} events={}", stage.stage, events),
            Payload::Cleanup => "-".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dag {
    pub job_id: String,
    pub nodes: Vec<DagNode>,
    pub edges: Vec<(NodeId, NodeId)>,
}

impl Dag {
    pub fn node(&self, id: NodeId) -> Option<&DagNode> {
        self.nodes.get(id)
    }

    pub fn parents(&self, id: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        self.edges.iter().filter(move |e| e.1 == id).map(|e| e.0)
    }

    pub fn children(&self, id: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        self.edges.iter().filter(move |e| e.0 == id).map(|e| e.1)
    }

    pub fn find_kind(&self, kind: NodeKind) -> impl Iterator<Item = &DagNode> {
        self.nodes.iter().filter(move |n| n.kind == kind)
    }

    /// `NODE`/`EDGE` line format used for debugging and golden files.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for n in &self.nodes {
            let _ = writeln!(out, "NODE {} {} {}", n.name, n.kind, n.payload_summary());
        }
        for (p, c) in &self.edges {
            let _ = writeln!(out, "EDGE {} {}", self.nodes[*p].name, self.nodes[*c].name);
        }
        out
    }
}

/// Build the linear DAG for `job`: StageIn, one Run per stage, StageOut, Cleanup.
pub fn wrap_job(job: &JobSpec, options: &WrapOptions) -> Result<Dag, DagError> {
    if job.pipeline.is_empty() {
        return Err(DagError::EmptyPipeline(job.job_id.clone()));
    }
    let mut stage_in = FileSet {
        files: options.helper_files,
        size_mb: options.helper_mb,
    };
    if options.stage_in_mode == StageInMode::PerJob {
        stage_in.files += options.app_distribution_files;
        stage_in.size_mb += options.app_distribution_mb;
    }

    let mut nodes = Vec::with_capacity(job.pipeline.len() + 3);
    nodes.push(DagNode {
        id: 0,
        name: "stagein".into(),
        kind: NodeKind::StageIn,
        payload: Payload::Transfer(stage_in),
    });
    for stage in job.pipeline.stages() {
        let id = nodes.len();
        nodes.push(DagNode {
            id,
            name: format!("run:{}", stage.stage),
            kind: NodeKind::Run,
            payload: Payload::Run {
                stage: stage.clone(),
                events: job.events(),
            },
        });
    }
    let out_id = nodes.len();
    nodes.push(DagNode {
        id: out_id,
        name: "stageout".into(),
        kind: NodeKind::StageOut,
        payload: Payload::Transfer(FileSet {
            files: job.pipeline.len() as u32,
            size_mb: estimate_job_output(job),
        }),
    });
    nodes.push(DagNode {
        id: out_id + 1,
        name: "cleanup".into(),
        kind: NodeKind::Cleanup,
        payload: Payload::Cleanup,
    });
    let edges = (0..nodes.len() - 1).map(|i| (i, i + 1)).collect();
    Ok(Dag {
        job_id: job.job_id.clone(),
        nodes,
        edges,
    })
}

/// Check structural rules, reporting the first one violated.
pub fn validate_dag(dag: &Dag) -> Result<(), DagViolation> {
    let n = dag.nodes.len();
    for (i, node) in dag.nodes.iter().enumerate() {
        if node.id != i {
            return Err(DagViolation::NodeIdMismatch { index: i, id: node.id });
        }
    }
    for &(p, c) in &dag.edges {
        if p >= n || c >= n {
            return Err(DagViolation::DanglingEdge(p, c));
        }
    }
    let order = topo_order(dag).ok_or(DagViolation::Cycle)?;
    debug_assert_eq!(order.len(), n);

    let stage_ins: Vec<_> = dag.find_kind(NodeKind::StageIn).map(|x| x.id).collect();
    let [root] = stage_ins[..] else {
        return Err(DagViolation::StageInCount(stage_ins.len()));
    };
    let roots: Vec<_> = (0..n).filter(|&i| dag.parents(i).next().is_none()).collect();
    if roots != [root] {
        return Err(DagViolation::Roots(roots.len()));
    }

    let cleanups: Vec<_> = dag.find_kind(NodeKind::Cleanup).map(|x| x.id).collect();
    let [leaf] = cleanups[..] else {
        return Err(DagViolation::CleanupCount(cleanups.len()));
    };
    let leaves: Vec<_> = (0..n).filter(|&i| dag.children(i).next().is_none()).collect();
    if leaves != [leaf] {
        return Err(DagViolation::Leaves(leaves.len()));
    }

    let stage_outs: Vec<_> = dag.find_kind(NodeKind::StageOut).map(|x| x.id).collect();
    let [out] = stage_outs[..] else {
        return Err(DagViolation::StageOutCount(stage_outs.len()));
    };
    if !dag.edges.contains(&(out, leaf)) {
        return Err(DagViolation::StageOutNotBeforeCleanup);
    }

    let reachable = reachable_from(dag, root);
    if let Some(r) = dag
        .find_kind(NodeKind::Run)
        .find(|r| !reachable.contains(&r.id))
    {
        return Err(DagViolation::UnreachableRun(r.name.clone()));
    }
    // Final run: the last Run node in topological order.
    if let Some(&last_run) = order
        .iter()
        .rev()
        .find(|&&i| dag.nodes[i].kind == NodeKind::Run)
    {
        if !reachable_from(dag, last_run).contains(&out) {
            return Err(DagViolation::StageOutBeforeFinalRun);
        }
    }
    Ok(())
}

fn topo_order(dag: &Dag) -> Option<Vec<NodeId>> {
    let n = dag.nodes.len();
    let mut indegree = vec![0usize; n];
    for &(_, c) in &dag.edges {
        indegree[c] += 1;
    }
    let mut queue: VecDeque<NodeId> = (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(v) = queue.pop_front() {
        order.push(v);
        for &(p, c) in &dag.edges {
            if p == v {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    queue.push_back(c);
                }
            }
        }
    }
    (order.len() == n).then_some(order)
}

fn reachable_from(dag: &Dag, start: NodeId) -> BTreeSet<NodeId> {
    let mut seen = BTreeSet::from([start]);
    let mut stack = vec![start];
    while let Some(v) = stack.pop() {
        for c in dag.children(v) {
            if seen.insert(c) {
                stack.push(c);
            }
        }
    }
    seen
}

/// Nodes whose parents have all completed and which have not completed yet.
pub fn ready_nodes(dag: &Dag, completed: &BTreeSet<NodeId>) -> Result<BTreeSet<NodeId>, DagError> {
    if let Some(&bad) = completed.iter().find(|&&id| id >= dag.nodes.len()) {
        return Err(DagError::UnknownNode(bad));
    }
    Ok((0..dag.nodes.len())
        .filter(|id| !completed.contains(id))
        .filter(|&id| dag.parents(id).all(|p| completed.contains(&p)))
        .collect())
}
