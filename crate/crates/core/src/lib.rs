//! Deterministic discrete-event simulation of coreless session establishment
//! in a mesh-connected radio access network.

pub mod protocol;
pub mod scenario;
pub mod session;
pub mod sim;
pub mod topology;

pub use topology::{
    compute_path, k_disjoint_paths, FailureSet, Link, LinkId, LinkKind, NoPathError, Node, NodeId,
    NodeKind, Path, Placement, Plane, Router, Topology, TopologySpec, ValidationError, Variant,
};
