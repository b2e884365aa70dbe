//! Whole-network layouts: the stem, four residual stages, pooling and the
//! classifier.

use serde::{Deserialize, Serialize};

use super::block::{make_block, BlockKind, BlockPlan, BlockSpec};
use crate::error::{Error, Result};
use crate::ops::{ConvSpec, PoolSpec};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    pub block: BlockKind,
    /// Blocks per stage (`b1..b4`); up to four stages.
    pub stage_blocks: Vec<usize>,
    pub stem_channels: usize,
    /// Stage `s` has inner width `base_width · 2^s`.
    pub base_width: usize,
    /// Bottleneck output width = inner width · expansion. Simple blocks
    /// ignore it.
    pub expansion: usize,
    pub in_channels: usize,
    pub num_classes: usize,
}

/// Block layouts for a total block count, as used in the naming scheme.
fn layout_for_blocks(total: usize) -> Option<Vec<usize>> {
    Some(match total {
        8 => vec![2, 2, 2, 2],
        16 => vec![3, 4, 6, 3],
        33 => vec![3, 4, 23, 3],
        50 => vec![3, 8, 36, 3],
        _ => return None,
    })
}

impl ArchSpec {
    fn standard(name: &str, block: BlockKind, stage_blocks: Vec<usize>, expansion: usize, classes: usize) -> Self {
        ArchSpec {
            name: name.to_string(),
            block,
            stage_blocks,
            stem_channels: 64,
            base_width: 64,
            expansion,
            in_channels: 3,
            num_classes: classes,
        }
    }

    /// Look up a named configuration.
    ///
    /// * `resnet3d-{18,34}`: simple blocks `[2,2,2,2]` / `[3,4,6,3]`.
    /// * `resnet3d-26`, `ir-csn-26`, `ip-csn-26`: bottleneck family `[2,2,2,2]`
    ///   with no channel expansion (stage widths 64..512).
    /// * `resnet3d-{50,101,152}`, `ir-csn-*`, `ip-csn-*`: bottleneck family,
    ///   expansion 4, `[3,4,6,3]`, `[3,4,23,3]`, `[3,8,36,3]`.
    /// * `<block>-<N>` (e.g. `simple-8`, `bottleneck-16`, `bottleneck-dg4-16`):
    ///   `N` total blocks of the given kind at the standard stage widths.
    /// * `tiny-<block>`, `tiny-resnet3d`, `tiny-ir-csn`, `tiny-ip-csn`:
    ///   two stages `[2,2]`, width 8, expansion 4, for desk-scale training.
    ///   On a 4×32×32 clip the last stage still sees 2×4×4 voxels.
    /// * `micro-<block>`: two stages of one block, width 8, for gradient checks.
    pub fn named(name: &str, num_classes: usize) -> Result<Self> {
        let key = name.to_ascii_lowercase();
        let unknown = || Error::UnknownArch(name.to_string());
        let spec = if let Some(rest) = key.strip_prefix("tiny-") {
            let mut a = Self::standard(&key, tiny_kind(rest).ok_or_else(unknown)?, vec![2, 2], 4, num_classes);
            a.stem_channels = 8;
            a.base_width = 8;
            a
        } else if let Some(rest) = key.strip_prefix("micro-") {
            let mut a = Self::standard(&key, tiny_kind(rest).ok_or_else(unknown)?, vec![1, 1], 1, num_classes);
            a.stem_channels = 8;
            a.base_width = 8;
            a
        } else if let Some((family, depth)) = split_depth(&key) {
            let block = match family {
                "resnet3d" if depth == 18 || depth == 34 => BlockKind::Simple,
                "resnet3d" => BlockKind::Bottleneck,
                "ir-csn" => BlockKind::BottleneckD,
                "ip-csn" => BlockKind::IpCsn,
                _ => {
                    let block: BlockKind = family.parse().map_err(|_| unknown())?;
                    let layout = layout_for_blocks(depth).ok_or_else(unknown)?;
                    let exp = if block.is_simple_family() { 1 } else { 4 };
                    return Self::standard(&key, block, layout, exp, num_classes).validated();
                }
            };
            let (layout, exp) = match (block.is_simple_family(), depth) {
                (true, 18) => (vec![2, 2, 2, 2], 1),
                (true, 34) => (vec![3, 4, 6, 3], 1),
                (false, 26) => (vec![2, 2, 2, 2], 1),
                (false, 50) => (vec![3, 4, 6, 3], 4),
                (false, 101) => (vec![3, 4, 23, 3], 4),
                (false, 152) => (vec![3, 8, 36, 3], 4),
                _ => return Err(unknown()),
            };
            Self::standard(&key, block, layout, exp, num_classes)
        } else {
            return Err(unknown());
        };
        spec.validated()
    }

    fn validated(self) -> Result<Self> {
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.block.validate()?;
        if self.stage_blocks.is_empty() || self.stage_blocks.len() > 4 || self.stage_blocks.contains(&0) {
            return Err(Error::param(format!(
                "stage blocks {:?} must be 1..=4 positive counts",
                self.stage_blocks
            )));
        }
        if self.stem_channels == 0 || self.base_width == 0 || self.expansion == 0 || self.num_classes == 0 || self.in_channels == 0 {
            return Err(Error::param(format!("arch `{}` has a zero width", self.name)));
        }
        self.blocks().map(|_| ())
    }

    /// Same layout with a different block kind (for sweeps).
    pub fn with_block(&self, block: BlockKind) -> Self {
        ArchSpec {
            name: format!("{}-{}", block, self.stage_blocks.iter().sum::<usize>()),
            block,
            ..self.clone()
        }
    }

    pub fn total_blocks(&self) -> usize {
        self.stage_blocks.iter().sum()
    }

    /// Nominal depth: conv1, the block layers, and fc.
    pub fn depth(&self) -> usize {
        self.block.nominal_depth() * self.total_blocks() + 2
    }

    /// `(inner, output)` width of each stage.
    pub fn stage_widths(&self) -> Vec<(usize, usize)> {
        (0..self.stage_blocks.len())
            .map(|s| {
                let mid = self.base_width << s;
                let out = if self.block.is_simple_family() { mid } else { mid * self.expansion };
                (mid, out)
            })
            .collect()
    }

    pub fn feature_width(&self) -> usize {
        self.stage_widths().last().map(|w| w.1).unwrap_or(self.stem_channels)
    }

    /// conv1: 3×7×7, stride 1×2×2.
    pub fn stem(&self) -> ConvSpec {
        ConvSpec::new(self.in_channels, self.stem_channels, 1, [3, 7, 7], [1, 2, 2], [1, 3, 3])
    }

    /// pool1: max 1×3×3, stride 1×2×2.
    pub fn pool(&self) -> PoolSpec {
        PoolSpec {
            kernel: [1, 3, 3],
            stride: [1, 2, 2],
            padding: [0, 1, 1],
        }
    }

    /// Named block plans in network order (`conv2_1`, `conv2_2`, ...).
    /// Stages after the first open with a 2×2×2 stride.
    pub fn blocks(&self) -> Result<Vec<(String, BlockPlan)>> {
        let mut out = Vec::with_capacity(self.total_blocks());
        let mut cin = self.stem_channels;
        for (s, ((mid, cout), &n)) in self.stage_widths().into_iter().zip(&self.stage_blocks).enumerate() {
            for b in 0..n {
                let stride = if s > 0 && b == 0 { [2; 3] } else { [1; 3] };
                let spec = BlockSpec {
                    kind: self.block,
                    in_channels: cin,
                    mid_channels: mid,
                    out_channels: cout,
                    stride,
                };
                let name = format!("conv{}_{}", s + 2, b + 1);
                let plan = make_block(&spec).map_err(|e| e.in_layer(&name))?;
                out.push((name, plan));
                cin = cout;
            }
        }
        Ok(out)
    }
}

fn tiny_kind(rest: &str) -> Option<BlockKind> {
    match rest {
        "resnet3d" => Some(BlockKind::Bottleneck),
        "ir-csn" => Some(BlockKind::BottleneckD),
        "ip-csn" => Some(BlockKind::IpCsn),
        other => other.parse().ok(),
    }
}

/// Split `family-123` at the last dash.
fn split_depth(key: &str) -> Option<(&str, usize)> {
    let (family, n) = key.rsplit_once('-')?;
    Some((family, n.parse().ok()?))
}

/// Names of every built-in configuration, for help text and tests.
pub fn known_arch_names() -> Vec<String> {
    let mut names = vec!["resnet3d-18".to_string(), "resnet3d-34".to_string()];
    for fam in ["resnet3d", "ir-csn", "ip-csn"] {
        for d in [26, 50, 101, 152] {
            names.push(format!("{fam}-{d}"));
        }
    }
    names.extend(["simple-8", "bottleneck-16"].map(String::from));
    names.extend(["tiny-resnet3d", "tiny-ir-csn", "tiny-ip-csn"].map(String::from));
    names
}

/// Resolve `comp_<k>` (the depthwise 3×3×3 layer of block `k`, counted from
/// zero) to a concrete layer name. Other names pass through.
pub fn resolve_layer_alias(name: &str, arch: &ArchSpec) -> Result<String> {
    let Some(k) = name.strip_prefix("comp_").and_then(|k| k.parse::<usize>().ok()) else {
        return Ok(name.to_string());
    };
    let blocks = arch.blocks()?;
    let (block_name, plan) = blocks
        .get(k)
        .ok_or_else(|| Error::param(format!("`{name}`: network has {} blocks", blocks.len())))?;
    let dw = plan
        .depthwise()
        .ok_or_else(|| Error::param(format!("`{name}`: block {block_name} has no depthwise layer")))?;
    Ok(format!("{block_name}.{}", dw.role.as_str()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_count_names() {
        let s8 = ArchSpec::named("simple-8", 400).unwrap();
        assert_eq!(s8.block, BlockKind::Simple);
        assert_eq!(s8.stage_blocks, vec![2, 2, 2, 2]);
        assert_eq!(s8.depth(), 18);
        assert_eq!(ArchSpec::named("resnet3d-18", 400).unwrap().stage_blocks, s8.stage_blocks);

        let b16 = ArchSpec::named("bottleneck-16", 400).unwrap();
        assert_eq!(b16.stage_blocks, vec![3, 4, 6, 3]);
        assert_eq!(b16.total_blocks(), 16);
        assert_eq!(b16.depth(), 50);
    }

    #[test]
    fn named_depths_match_names() {
        for name in known_arch_names() {
            let a = ArchSpec::named(&name, 400).unwrap();
            if let Some((_, d)) = split_depth(&name) {
                if !name.starts_with("simple") && !name.starts_with("bottleneck") {
                    assert_eq!(a.depth(), d, "{name}");
                }
            }
        }
        assert_eq!(ArchSpec::named("resnet3d-26", 400).unwrap().depth(), 26);
    }

    #[test]
    fn unknown_names() {
        for bad in ["resnet3d-27", "foo", "ir-csn-18", "bottleneck-g3-16", "bottleneck-9"] {
            assert!(ArchSpec::named(bad, 400).is_err(), "{bad}");
        }
    }

    #[test]
    fn downsampling_layout() {
        let a = ArchSpec::named("resnet3d-50", 400).unwrap();
        let blocks = a.blocks().unwrap();
        let strided: Vec<_> = blocks
            .iter()
            .filter(|(_, p)| p.spec.stride != [1; 3])
            .map(|(n, _)| n.as_str())
            .collect();
        assert_eq!(strided, ["conv3_1", "conv4_1", "conv5_1"]);
        assert_eq!(a.feature_width(), 2048);
        assert_eq!(ArchSpec::named("resnet3d-26", 400).unwrap().feature_width(), 512);
    }

    #[test]
    fn comp_aliases() {
        let a = ArchSpec::named("ir-csn-152", 400).unwrap();
        assert_eq!(resolve_layer_alias("comp_0", &a).unwrap(), "conv2_1.spatial");
        assert_eq!(resolve_layer_alias("comp_10", &a).unwrap(), "conv3_8.spatial");
        assert_eq!(resolve_layer_alias("comp_12", &a).unwrap(), "conv4_2.spatial");
        assert_eq!(resolve_layer_alias("conv1", &a).unwrap(), "conv1");
        let r = ArchSpec::named("resnet3d-50", 400).unwrap();
        assert!(resolve_layer_alias("comp_0", &r).is_err());
    }
}
