use std::fmt::{self, Write as _};

use crate::session::Approach;
use crate::sim::{Metrics, ReliabilityEstimate};
use crate::topology::Variant;

pub const CSV_HEADER: &str = "scenario,variant,approach,session_id,establishment_us,\
pkt_latency_p50_us,pkt_latency_p99_us,delivered,dropped,sig_msgs_ran,sig_msgs_agg,sig_msgs_core";

#[derive(Debug, Clone, PartialEq)]
pub enum CellOutcome {
    Ran(Box<Metrics>),
    /// The violated precondition.
    Infeasible(String),
}

impl fmt::Display for CellOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CellOutcome::Ran(m) => write!(
                f,
                "ran ({} delivered, {} dropped)",
                m.delivered(),
                m.dropped()
            ),
            CellOutcome::Infeasible(why) => write!(f, "infeasible: {why}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellReport {
    pub scenario: String,
    pub variant: Variant,
    pub approach: Approach,
    pub outcome: CellOutcome,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub seed: u64,
    /// Sorted by (variant, approach).
    pub cells: Vec<CellReport>,
    pub reliability: Vec<(String, ReliabilityEstimate)>,
}

fn opt(v: Option<u64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

fn opt_dash(v: Option<u64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| v.to_string())
}

fn ms(us: u64) -> String {
    format!("{}.{:03} ms", us / 1000, us % 1000)
}

impl ComparisonReport {
    pub fn feasible(&self) -> impl Iterator<Item = (&CellReport, &Metrics)> {
        self.cells
            .iter()
            .filter_map(|c| c.metrics().map(|m| (c, m)))
    }

    pub fn cell(&self, variant: Variant, approach: Approach) -> Option<&CellReport> {
        self.cells
            .iter()
            .find(|c| c.variant == variant && c.approach == approach)
    }

    /// Metrics CSV: one row per session (1-based index in the scenario
    /// file) and one `all` row per cell carrying the signalling totals.
    pub fn csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for (c, m) in self.feasible() {
            let prefix = format!("{},{},{}", c.scenario, c.variant, c.approach);
            for (i, s) in m.sessions.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{prefix},{},{},{},{},{},{},,,",
                    i + 1,
                    opt(s.establishment_us),
                    opt(s.p50_us()),
                    opt(s.p99_us()),
                    s.delivered,
                    s.dropped_total(),
                );
            }
            let sig = m.signalling;
            let _ = writeln!(
                out,
                "{prefix},all,{},{},{},{},{},{},{},{}",
                opt(m.max_establishment_us()),
                opt(m.p50_us()),
                opt(m.p99_us()),
                m.delivered(),
                m.dropped(),
                sig.ran,
                sig.agg,
                sig.core,
            );
        }
        out
    }
}

impl fmt::Display for ComparisonReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "seed {}", self.seed)?;
        writeln!(
            f,
            "{:<16} {:<3} {:>10} {:>10} {:>10} {:>9} {:>6} {:>6} {:>6} {:>6} {:>6} {:>10}",
            "variant",
            "app",
            "p50_us",
            "p99_us",
            "est_us",
            "delivery",
            "ran",
            "agg",
            "core",
            "donor",
            "msgs",
            "reconv_us"
        )?;
        for c in &self.cells {
            let Some(m) = c.metrics() else {
                writeln!(f, "{:<16} {:<3} {}", c.variant, c.approach, c.outcome)?;
                continue;
            };
            let delivery = match (m.injected(), m.delivered()) {
                (0, _) => "-".to_string(),
                (i, d) => format!("{:.4}", d as f64 / i as f64),
            };
            let reconv = if m.failures.is_empty() {
                "-".to_string()
            } else {
                m.failures
                    .iter()
                    .map(|r| {
                        r.reconvergence_us()
                            .map_or("never".into(), |v| v.to_string())
                    })
                    .collect::<Vec<_>>()
                    .join("/")
            };
            let sig = m.signalling;
            writeln!(
                f,
                "{:<16} {:<3} {:>10} {:>10} {:>10} {:>9} {:>6} {:>6} {:>6} {:>6} {:>6} {:>10}",
                c.variant,
                c.approach,
                opt_dash(m.p50_us()),
                opt_dash(m.p99_us()),
                opt_dash(m.max_establishment_us()),
                delivery,
                sig.ran,
                sig.agg,
                sig.core,
                sig.donor_hops,
                sig.total(),
                reconv
            )?;
        }
        let summaries: Vec<String> = self
            .feasible()
            .filter_map(|(c, m)| {
                let p50 = m.p50_us()?;
                let est = m.max_establishment_us().map_or_else(
                    || "not established".to_string(),
                    |e| format!("establishment {}", ms(e)),
                );
                Some(format!(
                    "  {}/{}: data p50 {}, {est}",
                    c.variant,
                    c.approach,
                    ms(p50)
                ))
            })
            .collect();
        if !summaries.is_empty() {
            writeln!(f, "summary:")?;
            for s in summaries {
                writeln!(f, "{s}")?;
            }
        }
        if !self.reliability.is_empty() {
            writeln!(f, "reliability:")?;
            for (label, e) in &self.reliability {
                writeln!(
                    f,
                    "  {label}: {} paths, analytic {:.6}, monte carlo {:.6} over {} trials ({})",
                    e.paths.len(),
                    e.analytic,
                    e.monte_carlo,
                    e.trials,
                    if e.within_sigmas(3.0) {
                        "within 3 sigma"
                    } else {
                        "OUTSIDE 3 sigma"
                    }
                )?;
            }
        }
        Ok(())
    }
}
