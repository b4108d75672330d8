use std::fmt;

use crate::topology::NodeId;

/// Event log, one line per event:
///
/// ```text
/// time_us | node | state_before -> state_after | msg_tag | path
/// ```
///
/// Missing states print as `-`; paths print as node ids joined by `>`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TraceLog {
    lines: Vec<TraceLine>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceLine {
    pub time_us: u64,
    pub node: NodeId,
    pub before: String,
    pub after: String,
    pub tag: String,
    pub path: Vec<NodeId>,
}

pub fn format_path(path: &[NodeId]) -> String {
    if path.is_empty() {
        return "-".to_string();
    }
    let parts: Vec<String> = path.iter().map(|n| n.0.to_string()).collect();
    parts.join(">")
}

impl fmt::Display for TraceLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} | {} | {} -> {} | {} | {}",
            self.time_us,
            self.node,
            self.before,
            self.after,
            self.tag,
            format_path(&self.path)
        )
    }
}

impl TraceLog {
    pub fn push(&mut self, line: TraceLine) {
        self.lines.push(line);
    }

    pub fn lines(&self) -> &[TraceLine] {
        &self.lines
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    /// Lines whose tag is a signalling message name.
    pub fn signalling(&self) -> impl Iterator<Item = &TraceLine> {
        self.lines.iter().filter(|l| {
            crate::protocol::MessageTag::ALL
                .iter()
                .any(|t| t.name() == l.tag)
        })
    }

    pub fn data(&self) -> impl Iterator<Item = &TraceLine> {
        self.lines.iter().filter(|l| l.tag == "DATA")
    }
}

impl fmt::Display for TraceLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.lines {
            writeln!(f, "{l}")?;
        }
        Ok(())
    }
}
