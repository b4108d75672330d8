use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::NodeKind;

/// Architecture variant: where the UPF and the control-plane core functions
/// live, and how the RAN is split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Variant {
    /// Everything centralized in the core, split option 7.
    EmbbCentral,
    /// Core and most RAN functions as cloud micro-services; routes like `EmbbCentral`.
    CloudConverged,
    /// UPF with the CU in the aggregation site, CP core still remote.
    AggUpf,
    /// UPF in the gNBs, CP core at the aggregation site.
    MeshUrllc,
    /// IAB with the CU moved from the donor into the core.
    IabCentral,
    /// Core functions merged into the donor CU.
    IabCoreInCu,
    /// Core functions imported into the IAB-node DUs.
    IabCoreInDu,
    /// Plain donor CU with direct peer-to-peer links among RAN nodes.
    IabP2p,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::EmbbCentral,
        Variant::CloudConverged,
        Variant::AggUpf,
        Variant::MeshUrllc,
        Variant::IabCentral,
        Variant::IabCoreInCu,
        Variant::IabCoreInDu,
        Variant::IabP2p,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::EmbbCentral => "EMBB_CENTRAL",
            Variant::CloudConverged => "CLOUD_CONVERGED",
            Variant::AggUpf => "AGG_UPF",
            Variant::MeshUrllc => "MESH_URLLC",
            Variant::IabCentral => "IAB_CENTRAL",
            Variant::IabCoreInCu => "IAB_CORE_IN_CU",
            Variant::IabCoreInDu => "IAB_CORE_IN_DU",
            Variant::IabP2p => "IAB_P2P",
        }
    }

    /// Session signalling never leaves RAN-level nodes.
    pub fn is_coreless(self) -> bool {
        matches!(
            self,
            Variant::IabCoreInCu | Variant::IabCoreInDu | Variant::IabP2p
        )
    }

    pub fn default_placement(self) -> Placement {
        use NodeKind::*;
        let (upf_at, cp_core_at, split_option) = match self {
            Variant::EmbbCentral | Variant::CloudConverged => (CoreSite, CoreSite, 7),
            Variant::AggUpf => (AggregationSite, CoreSite, 2),
            Variant::MeshUrllc => (AccessNode, AggregationSite, 2),
            Variant::IabCentral => (CoreSite, CoreSite, 7),
            Variant::IabCoreInCu => (AccessNode, DonorNode, 2),
            Variant::IabCoreInDu => (AccessNode, AccessNode, 2),
            Variant::IabP2p => (AccessNode, AccessNode, 2),
        };
        Placement {
            variant: self,
            upf_at,
            cp_core_at,
            split_option,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.label())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown placement variant `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Placement {
    pub variant: Variant,
    pub upf_at: NodeKind,
    pub cp_core_at: NodeKind,
    /// RAN functional split option: 2, 3 or 7.
    pub split_option: u8,
}

impl Placement {
    /// Checks the variant-specific constraints on UPF location and split.
    /// Node presence is checked separately at topology build.
    pub fn check(&self) -> Result<(), String> {
        let v = self.variant;
        if !matches!(self.split_option, 2 | 3 | 7) {
            return Err(format!(
                "split_option must be 2, 3 or 7 (got {})",
                self.split_option
            ));
        }
        if matches!(self.upf_at, NodeKind::Ue) || matches!(self.cp_core_at, NodeKind::Ue) {
            return Err(format!("{v}: core functions cannot be hosted on a UE"));
        }
        match v {
            Variant::EmbbCentral | Variant::CloudConverged => {
                if self.upf_at != NodeKind::CoreSite || self.split_option != 7 {
                    return Err(format!(
                        "{v} requires upf_at = CoreSite and split_option = 7"
                    ));
                }
            }
            Variant::AggUpf => {
                if self.upf_at != NodeKind::AggregationSite || !matches!(self.split_option, 2 | 3) {
                    return Err(format!(
                        "{v} requires upf_at = AggregationSite and split_option in {{2, 3}}"
                    ));
                }
            }
            Variant::MeshUrllc | Variant::IabCoreInCu | Variant::IabCoreInDu | Variant::IabP2p => {
                if !self.upf_at.is_ran() {
                    return Err(format!(
                        "{v} requires upf_at = AccessNode or DonorNode (data never transits CoreSite)"
                    ));
                }
            }
            Variant::IabCentral => {}
        }
        if v.is_coreless() && !self.cp_core_at.is_ran() {
            return Err(format!(
                "{v} is coreless: cp_core_at must be AccessNode or DonorNode"
            ));
        }
        Ok(())
    }

    /// UPF lives in RAN nodes, so data stays within the RAN.
    pub fn ran_anchored_data(&self) -> bool {
        self.upf_at.is_ran()
    }
}
