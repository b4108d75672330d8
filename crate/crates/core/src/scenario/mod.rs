//! Scenario files, the (variant, approach) experiment matrix and reports.
//!
//! A scenario is a TOML document:
//!
//! ```toml
//! name = "demo"
//! seed = 7
//! horizon_us = 200000
//! approaches = ["A", "C"]          # default: all three
//!
//! [[variants]]
//! variant = "MESH_URLLC"           # optional upf_at, cp_core_at, split_option
//!
//! [calibration]                    # optional, defaults shown
//! proc_ran_us = 50
//! proc_core_us = 200
//! reinject_delay_us = 1000
//!
//! [[topology.nodes]]
//! id = 1
//! kind = "UE"
//!
//! [[topology.links]]
//! a = 1
//! b = 10
//! kind = "Uu"
//! latency_us = 300
//!
//! [[sessions]]
//! src_ue = 1
//! dst_ue = 2
//! at_us = 0
//! traffic = { start_us = 20000, interval_us = 1000, count = 100, size_bytes = 200 }
//!
//! [[failures]]
//! at_us = 60000
//! link = [10, 11]                  # or node = 12
//!
//! [[recoveries]]
//! at_us = 90000
//! link = [10, 11]
//!
//! [[releases]]
//! at_us = 150000
//! src_ue = 1
//! dst_ue = 2
//!
//! [[reliability]]
//! src = 1
//! dst = 2
//! k = 2
//! trials = 100000
//! ```

mod report;

use std::collections::BTreeSet;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{QosProfile, ServiceType, MAX_CHANNEL_QUALITY};
use crate::session::{Approach, TimerConfig};
use crate::sim::{
    self, reliability_estimate, Calibration, FailureTarget, Metrics, ReliabilityEstimate,
    RunConfig, SessionSpec, TraceLog, TrafficSpec, Workload,
};
use crate::topology::{
    LinkKind, LinkSpec, NodeId, NodeKind, NodeSpec, PlacementSpec, Topology, TopologySpec,
    ValidationError, Variant,
};

pub use report::{CellOutcome, CellReport, ComparisonReport, CSV_HEADER};

pub const FIG1_COMPARE: &str = include_str!("../../scenarios/fig1_compare.toml");
pub const IAB_VARIANTS: &str = include_str!("../../scenarios/iab_variants.toml");
pub const FAILURE_SELFHEAL: &str = include_str!("../../scenarios/failure_selfheal.toml");
pub const RELIABILITY_KPATHS: &str = include_str!("../../scenarios/reliability_kpaths.toml");

/// Bundled reference scenarios by name.
pub const BUNDLED: [(&str, &str); 4] = [
    ("fig1_compare", FIG1_COMPARE),
    ("iab_variants", IAB_VARIANTS),
    ("failure_selfheal", FAILURE_SELFHEAL),
    ("reliability_kpaths", RELIABILITY_KPATHS),
];

pub fn bundled(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

fn default_seed() -> u64 {
    1
}

fn default_approaches() -> Vec<Approach> {
    Approach::ALL.to_vec()
}

fn one() -> u8 {
    1
}

fn default_cq() -> u8 {
    10
}

fn default_max_latency() -> u32 {
    1_000
}

fn default_reliability_exp() -> u8 {
    5
}

fn default_service() -> ServiceType {
    ServiceType::Xurllc
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub horizon_us: u64,
    #[serde(default = "default_approaches")]
    pub approaches: Vec<Approach>,
    pub variants: Vec<PlacementSpec>,
    #[serde(default)]
    pub calibration: CalibrationSpec,
    pub topology: TopologyBody,
    #[serde(default)]
    pub sessions: Vec<SessionEntry>,
    #[serde(default)]
    pub failures: Vec<FailureEntry>,
    #[serde(default)]
    pub recoveries: Vec<RecoveryEntry>,
    #[serde(default)]
    pub releases: Vec<ReleaseEntry>,
    #[serde(default)]
    pub reliability: Vec<ReliabilityEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSpec {
    pub proc_ran_us: u64,
    pub proc_core_us: u64,
    pub reinject_delay_us: u64,
    pub timers: TimerConfig,
}

impl Default for CalibrationSpec {
    fn default() -> Self {
        let c = Calibration::default();
        CalibrationSpec {
            proc_ran_us: c.proc_ran_us,
            proc_core_us: c.proc_core_us,
            reinject_delay_us: c.reinject_delay_us,
            timers: c.timers,
        }
    }
}

impl From<&CalibrationSpec> for Calibration {
    fn from(c: &CalibrationSpec) -> Self {
        Calibration {
            proc_ran_us: c.proc_ran_us,
            proc_core_us: c.proc_core_us,
            reinject_delay_us: c.reinject_delay_us,
            timers: c.timers,
        }
    }
}

/// Nodes and links; the placement comes from each matrix cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyBody {
    pub nodes: Vec<NodeSpec>,
    pub links: Vec<LinkSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionEntry {
    pub src_ue: u32,
    pub dst_ue: u32,
    #[serde(default)]
    pub at_us: u64,
    #[serde(default = "default_max_latency")]
    pub max_latency_us: u32,
    /// Target error rate is `10^-reliability_exp`.
    #[serde(default = "default_reliability_exp")]
    pub reliability_exp: u8,
    #[serde(default = "default_service")]
    pub service_type: ServiceType,
    #[serde(default = "default_cq")]
    pub channel_quality: u8,
    #[serde(default = "one")]
    pub pdu_sessions: u8,
    #[serde(default)]
    pub traffic: Option<TrafficEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficEntry {
    pub start_us: u64,
    pub interval_us: u64,
    pub count: u64,
    pub size_bytes: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureEntry {
    pub at_us: u64,
    #[serde(default)]
    pub link: Option<[u32; 2]>,
    #[serde(default)]
    pub node: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecoveryEntry {
    pub at_us: u64,
    pub link: [u32; 2],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReleaseEntry {
    pub at_us: u64,
    pub src_ue: u32,
    pub dst_ue: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReliabilityEntry {
    pub src: u32,
    pub dst: u32,
    pub k: usize,
    pub trials: u64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScenarioError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
    #[error("topology: {0}")]
    Topology(#[from] ValidationError),
    #[error("no feasible (variant, approach) cell:\n{0}")]
    NoFeasibleCell(String),
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

/// Why a (variant, approach) cell cannot run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Infeasible {
    /// The topology does not satisfy the placement's requirements.
    Placement(String),
    /// The approach needs a gNB-to-gNB interface the topology lacks.
    Interface {
        approach: Approach,
        needs: LinkKind,
        gnb: NodeId,
    },
}

impl fmt::Display for Infeasible {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Infeasible::Placement(m) => write!(f, "placement: {m}"),
            Infeasible::Interface {
                approach,
                needs,
                gnb,
            } => write!(
                f,
                "interface rule: Approach {approach} requires a {needs} link between gNBs, \
                 but serving gNB {gnb} has none"
            ),
        }
    }
}

pub fn parse(text: &str) -> Result<Scenario, ScenarioError> {
    let s: Scenario = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
    s.validate()?;
    Ok(s)
}

/// Checks the approach interface rule: every serving gNB of a session must
/// have a gNB-to-gNB link of the approach's mesh interface (Uu for B, Xn for
/// A and C).
pub fn check_interfaces(
    topo: &Topology,
    approach: Approach,
    sessions: &[SessionSpec],
) -> Result<(), Infeasible> {
    let needs = approach.mesh_interface();
    let mut gnbs = BTreeSet::new();
    for s in sessions {
        gnbs.extend(topo.serving_gnb(s.src_ue));
        gnbs.extend(topo.serving_gnb(s.dst_ue));
    }
    for g in gnbs {
        let has = topo.neighbors(g).iter().any(|(l, n)| {
            topo.link(*l).kind == needs && topo.kind(*n).is_some_and(NodeKind::is_ran)
        });
        if !has {
            return Err(Infeasible::Interface {
                approach,
                needs,
                gnb: g,
            });
        }
    }
    Ok(())
}

impl Scenario {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.name.trim().is_empty() {
            return Err(invalid("name", "must not be empty"));
        }
        if self.horizon_us == 0 {
            return Err(invalid("horizon_us", "must be positive"));
        }
        if self.variants.is_empty() {
            return Err(invalid("variants", "at least one variant is required"));
        }
        if self.approaches.is_empty() {
            return Err(invalid("approaches", "at least one approach is required"));
        }
        let ids: BTreeSet<u32> = self.topology.nodes.iter().map(|n| n.id).collect();
        let kind_of = |id: u32| {
            self.topology
                .nodes
                .iter()
                .find(|n| n.id == id)
                .map(|n| n.kind)
        };
        let mut pairs = BTreeSet::new();
        for (i, s) in self.sessions.iter().enumerate() {
            let f = |k: &str| format!("sessions[{i}].{k}");
            for (k, ue) in [("src_ue", s.src_ue), ("dst_ue", s.dst_ue)] {
                if kind_of(ue) != Some(NodeKind::Ue) {
                    return Err(invalid(f(k), format!("node {ue} is not a UE")));
                }
            }
            if s.src_ue == s.dst_ue {
                return Err(invalid(f("dst_ue"), "must differ from src_ue"));
            }
            if !pairs.insert((s.src_ue, s.dst_ue)) {
                return Err(invalid(f("dst_ue"), "duplicate session for this UE pair"));
            }
            if s.max_latency_us == 0 {
                return Err(invalid(f("max_latency_us"), "must be positive"));
            }
            if !(3..=9).contains(&s.reliability_exp) {
                return Err(invalid(f("reliability_exp"), "must lie in 3..=9"));
            }
            if s.channel_quality > MAX_CHANNEL_QUALITY {
                return Err(invalid(f("channel_quality"), "must be at most 15"));
            }
            if s.pdu_sessions == 0 {
                return Err(invalid(f("pdu_sessions"), "must be at least 1"));
            }
            if let Some(t) = s.traffic {
                if t.size_bytes == 0 {
                    return Err(invalid(f("traffic.size_bytes"), "must be at least 1"));
                }
                if t.count > 0 && t.interval_us == 0 {
                    return Err(invalid(f("traffic.interval_us"), "must be positive"));
                }
            }
        }
        let link_exists = |[a, b]: [u32; 2]| {
            self.topology
                .links
                .iter()
                .any(|l| (l.a, l.b) == (a, b) || (l.a, l.b) == (b, a))
        };
        for (i, fl) in self.failures.iter().enumerate() {
            match (fl.link, fl.node) {
                (Some(l), None) if !link_exists(l) => {
                    return Err(invalid(
                        format!("failures[{i}].link"),
                        format!("no link {}-{}", l[0], l[1]),
                    ))
                }
                (None, Some(n)) if !ids.contains(&n) => {
                    return Err(invalid(
                        format!("failures[{i}].node"),
                        format!("no node {n}"),
                    ))
                }
                (Some(_), Some(_)) | (None, None) => {
                    return Err(invalid(
                        format!("failures[{i}]"),
                        "exactly one of `link` or `node` is required",
                    ))
                }
                _ => {}
            }
        }
        for (i, r) in self.recoveries.iter().enumerate() {
            if !link_exists(r.link) {
                return Err(invalid(
                    format!("recoveries[{i}].link"),
                    format!("no link {}-{}", r.link[0], r.link[1]),
                ));
            }
        }
        for (i, r) in self.releases.iter().enumerate() {
            if !pairs.contains(&(r.src_ue, r.dst_ue)) {
                return Err(invalid(
                    format!("releases[{i}]"),
                    format!("no session {} -> {}", r.src_ue, r.dst_ue),
                ));
            }
        }
        for (i, r) in self.reliability.iter().enumerate() {
            for (k, n) in [("src", r.src), ("dst", r.dst)] {
                if !ids.contains(&n) {
                    return Err(invalid(
                        format!("reliability[{i}].{k}"),
                        format!("no node {n}"),
                    ));
                }
            }
            if r.k == 0 {
                return Err(invalid(format!("reliability[{i}].k"), "must be at least 1"));
            }
        }
        Ok(())
    }

    pub fn topology_spec(&self, placement: &PlacementSpec) -> TopologySpec {
        TopologySpec {
            placement: placement.clone(),
            nodes: self.topology.nodes.clone(),
            links: self.topology.links.clone(),
        }
    }

    /// The workload in simulator terms, resolving link endpoints against
    /// `topo`.
    pub fn workload(&self, topo: &Topology) -> Workload {
        let link = |[a, b]: [u32; 2]| {
            topo.link_between(NodeId(a), NodeId(b))
                .expect("validated link endpoints")
        };
        Workload {
            sessions: self
                .sessions
                .iter()
                .map(|s| SessionSpec {
                    src_ue: NodeId(s.src_ue),
                    dst_ue: NodeId(s.dst_ue),
                    at_us: s.at_us,
                    qos: QosProfile {
                        max_latency_us: s.max_latency_us,
                        reliability_exp: s.reliability_exp,
                        service_type: s.service_type,
                    },
                    channel_quality: s.channel_quality,
                    pdu_sessions: s.pdu_sessions,
                    traffic: s.traffic.map(|t| TrafficSpec {
                        start_us: t.start_us,
                        interval_us: t.interval_us,
                        count: t.count,
                        size_bytes: t.size_bytes,
                    }),
                })
                .collect(),
            failures: self
                .failures
                .iter()
                .map(|f| {
                    let t = match (f.link, f.node) {
                        (Some(l), _) => FailureTarget::Link(link(l)),
                        (None, Some(n)) => FailureTarget::Node(NodeId(n)),
                        (None, None) => unreachable!("validated failure target"),
                    };
                    (f.at_us, t)
                })
                .collect(),
            recoveries: self
                .recoveries
                .iter()
                .map(|r| (r.at_us, link(r.link)))
                .collect(),
            releases: self
                .releases
                .iter()
                .map(|r| (r.at_us, NodeId(r.src_ue), NodeId(r.dst_ue)))
                .collect(),
        }
    }

    pub fn run_config(&self, seed: u64) -> RunConfig {
        RunConfig {
            seed,
            horizon_us: self.horizon_us,
            calibration: (&self.calibration).into(),
        }
    }

    /// All configured (variant, approach) cells in file order.
    pub fn cells(&self) -> Vec<(PlacementSpec, Approach)> {
        self.variants
            .iter()
            .flat_map(|v| self.approaches.iter().map(move |a| (v.clone(), *a)))
            .collect()
    }
}

/// Result of running one cell, with its trace.
#[derive(Debug, Clone)]
pub struct CellRun {
    pub report: CellReport,
    pub trace: Option<TraceLog>,
}

/// Builds the topology for one cell and runs it, or explains why not.
pub fn run_cell(
    scenario: &Scenario,
    placement: &PlacementSpec,
    approach: Approach,
    seed: u64,
) -> Result<CellRun, ScenarioError> {
    let variant = placement.variant;
    let infeasible = |why: Infeasible| CellRun {
        report: CellReport {
            scenario: scenario.name.clone(),
            variant,
            approach,
            outcome: CellOutcome::Infeasible(why.to_string()),
        },
        trace: None,
    };
    let topo = match scenario.topology_spec(placement).build() {
        Ok(t) => t,
        Err(e) => return Ok(infeasible(Infeasible::Placement(e.to_string()))),
    };
    let workload = scenario.workload(&topo);
    if let Err(why) = check_interfaces(&topo, approach, &workload.sessions) {
        return Ok(infeasible(why));
    }
    let out = sim::run(&topo, approach, &workload, &scenario.run_config(seed))
        .map_err(|e| invalid("sessions", e.to_string()))?;
    Ok(CellRun {
        report: CellReport {
            scenario: scenario.name.clone(),
            variant,
            approach,
            outcome: CellOutcome::Ran(Box::new(out.metrics)),
        },
        trace: Some(out.trace),
    })
}

/// Output of a whole scenario or matrix.
#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub report: ComparisonReport,
    /// Traces of feasible cells, in report order.
    pub traces: Vec<((Variant, Approach), TraceLog)>,
}

/// Runs every cell of every scenario concurrently with a common seed and
/// reduces the results into one report sorted by (variant, approach).
pub fn compare_matrix(scenarios: &[Scenario], seed: u64) -> Result<ScenarioRun, ScenarioError> {
    let jobs: Vec<(&Scenario, PlacementSpec, Approach)> = scenarios
        .iter()
        .flat_map(|s| s.cells().into_iter().map(move |(p, a)| (s, p, a)))
        .collect();
    let results: Vec<Result<CellRun, ScenarioError>> = jobs
        .par_iter()
        .map(|(s, p, a)| run_cell(s, p, *a, seed))
        .collect();
    let mut runs = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    // Stable sort keeps file order among equal keys (several scenarios).
    runs.sort_by_key(|r| (r.report.variant, r.report.approach));

    let mut reliability = Vec::new();
    for s in scenarios {
        reliability.extend(reliability_rows(s, seed)?);
    }
    let report = ComparisonReport {
        seed,
        cells: runs.iter().map(|r| r.report.clone()).collect(),
        reliability,
    };
    if report.cells.iter().all(|c| c.metrics().is_none()) {
        let why = report
            .cells
            .iter()
            .map(|c| format!("  {} {}: {}", c.variant, c.approach, c.outcome))
            .collect::<Vec<_>>()
            .join("\n");
        return Err(ScenarioError::NoFeasibleCell(why));
    }
    let traces = runs
        .into_iter()
        .filter_map(|r| Some(((r.report.variant, r.report.approach), r.trace?)))
        .collect();
    Ok(ScenarioRun { report, traces })
}

/// Runs one scenario file's matrix.
pub fn run_scenario(scenario: &Scenario, seed: u64) -> Result<ScenarioRun, ScenarioError> {
    compare_matrix(std::slice::from_ref(scenario), seed)
}

/// k-path reliability rows, computed on the first variant that builds.
fn reliability_rows(
    s: &Scenario,
    seed: u64,
) -> Result<Vec<(String, ReliabilityEstimate)>, ScenarioError> {
    if s.reliability.is_empty() {
        return Ok(Vec::new());
    }
    let topo = s
        .variants
        .iter()
        .find_map(|p| s.topology_spec(p).build().ok())
        .ok_or_else(|| invalid("reliability", "no variant yields a valid topology"))?;
    Ok(s.reliability
        .iter()
        .map(|r| {
            let label = format!("{}: {} -> {} k={}", s.name, r.src, r.dst, r.k);
            let est =
                reliability_estimate(&topo, NodeId(r.src), NodeId(r.dst), r.k, r.trials, seed);
            (label, est)
        })
        .collect())
}

impl CellReport {
    pub fn metrics(&self) -> Option<&Metrics> {
        match &self.outcome {
            CellOutcome::Ran(m) => Some(m),
            CellOutcome::Infeasible(_) => None,
        }
    }
}
