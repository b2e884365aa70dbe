//! Residual block variants and the exact convolution sequence each emits.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::ConvSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BlockKind {
    /// Two dense 3×3×3 convolutions.
    Simple,
    /// Two grouped 3×3×3 convolutions.
    SimpleG(usize),
    /// Two depthwise 3×3×3 convolutions, preceded by a 1×1×1 when the
    /// channel count changes.
    SimpleD,
    /// 1×1×1 reduce, dense 3×3×3, 1×1×1 expand.
    Bottleneck,
    /// Bottleneck with a grouped 3×3×3 (ResNeXt-style).
    BottleneckG(usize),
    /// Bottleneck with a depthwise 3×3×3; the interaction-reduced (ir-CSN) block.
    BottleneckD,
    /// Bottleneck-D with both 1×1×1 layers (and the projection) grouped.
    BottleneckDG(usize),
    /// Interaction-preserved block: 1×1×1 reduce, 1×1×1 mid→mid,
    /// depthwise 3×3×3, 1×1×1 expand.
    IpCsn,
}

impl BlockKind {
    pub const ALL_FAMILIES: [BlockKind; 8] = [
        BlockKind::Simple,
        BlockKind::SimpleG(2),
        BlockKind::SimpleD,
        BlockKind::Bottleneck,
        BlockKind::BottleneckG(2),
        BlockKind::BottleneckD,
        BlockKind::BottleneckDG(2),
        BlockKind::IpCsn,
    ];

    pub fn is_simple_family(&self) -> bool {
        matches!(self, BlockKind::Simple | BlockKind::SimpleG(_) | BlockKind::SimpleD)
    }

    /// Layers the block contributes to a network's nominal depth.
    pub fn nominal_depth(&self) -> usize {
        if self.is_simple_family() {
            2
        } else {
            3
        }
    }

    pub fn groups(&self) -> Option<usize> {
        match *self {
            BlockKind::SimpleG(g) | BlockKind::BottleneckG(g) | BlockKind::BottleneckDG(g) => Some(g),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.groups() {
            Some(0) => Err(Error::param(format!("{self}: group count must be positive"))),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockKind::Simple => write!(f, "simple"),
            BlockKind::SimpleG(g) => write!(f, "simple-g{g}"),
            BlockKind::SimpleD => write!(f, "simple-d"),
            BlockKind::Bottleneck => write!(f, "bottleneck"),
            BlockKind::BottleneckG(g) => write!(f, "bottleneck-g{g}"),
            BlockKind::BottleneckD => write!(f, "bottleneck-d"),
            BlockKind::BottleneckDG(g) => write!(f, "bottleneck-dg{g}"),
            BlockKind::IpCsn => write!(f, "ip-csn"),
        }
    }
}

impl FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase();
        let grouped = |prefix: &str| -> Option<usize> { s.strip_prefix(prefix)?.parse().ok() };
        let kind = match s.as_str() {
            "simple" => BlockKind::Simple,
            "simple-d" => BlockKind::SimpleD,
            "bottleneck" => BlockKind::Bottleneck,
            "bottleneck-d" | "ir-csn" => BlockKind::BottleneckD,
            "ip-csn" => BlockKind::IpCsn,
            _ => {
                if let Some(g) = grouped("bottleneck-dg") {
                    BlockKind::BottleneckDG(g)
                } else if let Some(g) = grouped("bottleneck-g") {
                    BlockKind::BottleneckG(g)
                } else if let Some(g) = grouped("simple-g") {
                    BlockKind::SimpleG(g)
                } else {
                    return Err(Error::param(format!("unknown block kind `{s}`")));
                }
            }
        };
        kind.validate()?;
        Ok(kind)
    }
}

impl TryFrom<String> for BlockKind {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<BlockKind> for String {
    fn from(k: BlockKind) -> String {
        k.to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub in_channels: usize,
    /// Inner width of bottleneck-family blocks; ignored by simple blocks.
    pub mid_channels: usize,
    pub out_channels: usize,
    pub stride: [usize; 3],
}

impl BlockSpec {
    pub fn needs_projection(&self) -> bool {
        self.in_channels != self.out_channels || self.stride != [1; 3]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvRole {
    Stem,
    Reduce,
    Mix,
    Spatial,
    Expand,
    Project,
    SpatialB,
    Shortcut,
}

impl ConvRole {
    pub fn as_str(&self) -> &'static str {
        match self {
            ConvRole::Stem => "stem",
            ConvRole::Reduce => "reduce",
            ConvRole::Mix => "mix",
            ConvRole::Spatial => "spatial",
            ConvRole::Expand => "expand",
            ConvRole::Project => "project",
            ConvRole::SpatialB => "spatial_b",
            ConvRole::Shortcut => "shortcut",
        }
    }
}

/// One convolution of a block; every convolution is followed by batch norm,
/// and by ReLU when `relu` is set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvPlan {
    pub role: ConvRole,
    pub spec: ConvSpec,
    pub relu: bool,
}

/// The layer subgraph of one residual block: `relu(branch(x) + shortcut(x))`
/// with the identity shortcut when `shortcut` is `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockPlan {
    pub spec: BlockSpec,
    pub branch: Vec<ConvPlan>,
    pub shortcut: Option<ConvPlan>,
}

impl BlockPlan {
    pub fn convs(&self) -> impl Iterator<Item = &ConvPlan> {
        self.branch.iter().chain(self.shortcut.iter())
    }

    /// First depthwise convolution of the branch, if any.
    pub fn depthwise(&self) -> Option<&ConvPlan> {
        self.branch.iter().find(|c| c.spec.is_depthwise() && !c.spec.is_pointwise())
    }
}

/// Lay out the convolutions of `spec`. The stride sits on the (last)
/// 3×3×3 layer of the branch and on the projection shortcut.
pub fn make_block(spec: &BlockSpec) -> Result<BlockPlan> {
    spec.kind.validate()?;
    let BlockSpec {
        kind,
        in_channels: cin,
        mid_channels: mid,
        out_channels: cout,
        stride,
    } = *spec;
    if cin == 0 || cout == 0 || (!kind.is_simple_family() && mid == 0) || stride.contains(&0) {
        return Err(Error::param(format!("invalid block {spec:?}")));
    }
    let one = [1; 3];
    let conv = |role, spec: ConvSpec| ConvPlan { role, spec, relu: true };
    let mut branch = Vec::new();
    let mut shortcut_groups = 1;
    match kind {
        BlockKind::Simple | BlockKind::SimpleG(_) => {
            let g = kind.groups().unwrap_or(1);
            branch.push(conv(ConvRole::Spatial, ConvSpec::cube(cin, cout, g, 3, one)));
            branch.push(conv(ConvRole::SpatialB, ConvSpec::cube(cout, cout, g, 3, stride)));
        }
        BlockKind::SimpleD => {
            if cin != cout {
                branch.push(conv(ConvRole::Project, ConvSpec::pointwise(cin, cout, 1, one)));
            }
            branch.push(conv(ConvRole::Spatial, ConvSpec::cube(cout, cout, cout, 3, one)));
            branch.push(conv(ConvRole::SpatialB, ConvSpec::cube(cout, cout, cout, 3, stride)));
        }
        BlockKind::Bottleneck | BlockKind::BottleneckG(_) | BlockKind::BottleneckD => {
            let g = match kind {
                BlockKind::BottleneckD => mid,
                _ => kind.groups().unwrap_or(1),
            };
            branch.push(conv(ConvRole::Reduce, ConvSpec::pointwise(cin, mid, 1, one)));
            branch.push(conv(ConvRole::Spatial, ConvSpec::cube(mid, mid, g, 3, stride)));
            branch.push(conv(ConvRole::Expand, ConvSpec::pointwise(mid, cout, 1, one)));
        }
        BlockKind::BottleneckDG(g) => {
            branch.push(conv(ConvRole::Reduce, ConvSpec::pointwise(cin, mid, g, one)));
            branch.push(conv(ConvRole::Spatial, ConvSpec::cube(mid, mid, mid, 3, stride)));
            branch.push(conv(ConvRole::Expand, ConvSpec::pointwise(mid, cout, g, one)));
            shortcut_groups = g;
        }
        BlockKind::IpCsn => {
            branch.push(conv(ConvRole::Reduce, ConvSpec::pointwise(cin, mid, 1, one)));
            branch.push(conv(ConvRole::Mix, ConvSpec::pointwise(mid, mid, 1, one)));
            branch.push(conv(ConvRole::Spatial, ConvSpec::cube(mid, mid, mid, 3, stride)));
            branch.push(conv(ConvRole::Expand, ConvSpec::pointwise(mid, cout, 1, one)));
        }
    }
    if let Some(last) = branch.last_mut() {
        last.relu = false;
    }
    let shortcut = spec.needs_projection().then(|| ConvPlan {
        role: ConvRole::Shortcut,
        spec: ConvSpec::pointwise(cin, cout, shortcut_groups, stride),
        relu: false,
    });
    for c in branch.iter().chain(shortcut.iter()) {
        c.spec
            .validate()
            .map_err(|e| Error::param(format!("{kind} {}: {e}", c.role.as_str())))?;
    }
    Ok(BlockPlan {
        spec: *spec,
        branch,
        shortcut,
    })
}
