//! Parameter, FLOP and channel-interaction accounting.
//!
//! For a convolution with `C_in` inputs, `C_out` outputs, `G` groups and a
//! `k_t×k_h×k_w` kernel:
//!
//! * params = `C_out · (C_in/G) · k_t·k_h·k_w`
//! * FLOPs = params · voxels, one multiply-accumulate counted as one FLOP
//! * interactions = `C_out · C(C_in/G, 2)`, the input-channel pairs that
//!   meet inside some filter
//!
//! Reports walk an [`ArchSpec`] statically; no weights are allocated.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::ConvSpec;
use crate::tensor::Shape5;
use crate::zoo::{ArchSpec, BlockKind};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VoxelConvention {
    /// Count positions of the layer's output.
    #[default]
    Output,
    /// Count positions of the layer's input.
    Input,
}

impl FromStr for VoxelConvention {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "output" => Ok(VoxelConvention::Output),
            "input" => Ok(VoxelConvention::Input),
            _ => Err(Error::param(format!("voxel convention `{s}` is not `output` or `input`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalyzerOptions {
    pub voxels: VoxelConvention,
    /// Add BN scale and shift to the headline parameter total.
    pub include_bn: bool,
}

/// Raw counts for one layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub params: u64,
    pub flops: u64,
    pub interactions: u64,
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, o: Counts) {
        self.params += o.params;
        self.flops += o.flops;
        self.interactions += o.interactions;
    }
}

fn pairs(n: u64) -> u64 {
    n * n.saturating_sub(1) / 2
}

/// Counts for one convolution evaluated at `voxels` positions.
pub fn layer_stats(spec: &ConvSpec, voxels: u64) -> Counts {
    let cig = spec.in_per_group() as u64;
    let params = spec.c_out as u64 * cig * spec.kernel_volume() as u64;
    Counts {
        params,
        flops: params * voxels,
        interactions: spec.c_out as u64 * pairs(cig),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Fc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub name: String,
    pub kind: LayerKind,
    pub c_in: usize,
    pub c_out: usize,
    pub groups: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub out_shape: [usize; 5],
    pub params: u64,
    pub flops: u64,
    pub interactions: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conventions {
    pub flop: String,
    pub voxels: VoxelConvention,
    pub params_include_bn: bool,
    pub params_include_fc: bool,
    pub interactions_include_fc: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub params: u64,
    pub flops: u64,
    pub interactions: u64,
    /// BN scale and shift, reported whether or not they are in `params`.
    pub bn_params: u64,
    pub params_millions: f64,
    pub gflops: f64,
    pub ginteractions: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub arch: String,
    pub input: [usize; 5],
    pub conventions: Conventions,
    pub layers: Vec<LayerStats>,
    pub totals: Totals,
}

fn conv_entry(name: String, spec: &ConvSpec, input: &Shape5, opts: &AnalyzerOptions) -> Result<(LayerStats, Shape5)> {
    let out = spec.output_shape(input).map_err(|e| e.in_layer(&name))?;
    let per_clip = match opts.voxels {
        VoxelConvention::Output => out.plane(),
        VoxelConvention::Input => input.plane(),
    } as u64;
    let c = layer_stats(spec, per_clip * out.n() as u64);
    Ok((
        LayerStats {
            name,
            kind: LayerKind::Conv,
            c_in: spec.c_in,
            c_out: spec.c_out,
            groups: spec.groups,
            kernel: spec.kernel,
            stride: spec.stride,
            out_shape: out.dims(),
            params: c.params,
            flops: c.flops,
            interactions: c.interactions,
        },
        out,
    ))
}

/// Every convolution (stem, block branches, projection shortcuts) and the
/// classifier. The fc layer contributes params (with bias) and FLOPs but no
/// interactions.
pub fn model_report(arch: &ArchSpec, input: &Shape5, opts: &AnalyzerOptions) -> Result<ModelReport> {
    arch.validate()?;
    if input.c() != arch.in_channels {
        return Err(Error::shape(format!("{} expects {} input channels, got {input}", arch.name, arch.in_channels)));
    }
    let mut layers = Vec::new();
    let mut bn_params = 0u64;
    let (stem, mut s) = conv_entry("conv1".into(), &arch.stem(), input, opts)?;
    bn_params += 2 * stem.c_out as u64;
    layers.push(stem);
    s = arch.pool().output_shape(&s).map_err(|e| e.in_layer("pool1"))?;
    for (name, plan) in arch.blocks()? {
        let block_in = s;
        for c in &plan.branch {
            let (l, out) = conv_entry(format!("{name}.{}", c.role.as_str()), &c.spec, &s, opts)?;
            bn_params += 2 * l.c_out as u64;
            layers.push(l);
            s = out;
        }
        if let Some(c) = &plan.shortcut {
            let (l, _) = conv_entry(format!("{name}.{}", c.role.as_str()), &c.spec, &block_in, opts)?;
            bn_params += 2 * l.c_out as u64;
            layers.push(l);
        }
    }
    let (f, k) = (s.c() as u64, arch.num_classes as u64);
    layers.push(LayerStats {
        name: "fc".into(),
        kind: LayerKind::Fc,
        c_in: s.c(),
        c_out: arch.num_classes,
        groups: 1,
        kernel: [1; 3],
        stride: [1; 3],
        out_shape: [s.n(), arch.num_classes, 1, 1, 1],
        params: f * k + k,
        flops: f * k * s.n() as u64,
        interactions: 0,
    });

    let mut sum = Counts::default();
    for l in &layers {
        sum += Counts {
            params: l.params,
            flops: l.flops,
            interactions: if l.kind == LayerKind::Conv { l.interactions } else { 0 },
        };
    }
    if opts.include_bn {
        sum.params += bn_params;
    }
    Ok(ModelReport {
        arch: arch.name.clone(),
        input: input.dims(),
        conventions: Conventions {
            flop: "multiply-accumulate".into(),
            voxels: opts.voxels,
            params_include_bn: opts.include_bn,
            params_include_fc: true,
            interactions_include_fc: false,
        },
        layers,
        totals: Totals {
            params: sum.params,
            flops: sum.flops,
            interactions: sum.interactions,
            bn_params,
            params_millions: sum.params as f64 / 1e6,
            gflops: sum.flops as f64 / 1e9,
            ginteractions: sum.interactions as f64 / 1e9,
        },
    })
}

impl ModelReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// One row per layer.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "name", "kind", "c_in", "c_out", "groups", "kernel", "stride", "out_shape", "params", "flops", "interactions",
        ])
        .map_err(csv_err)?;
        for l in &self.layers {
            let kind = match l.kind {
                LayerKind::Conv => "conv",
                LayerKind::Fc => "fc",
            };
            w.write_record([
                l.name.clone(),
                kind.to_string(),
                l.c_in.to_string(),
                l.c_out.to_string(),
                l.groups.to_string(),
                join_x(&l.kernel),
                join_x(&l.stride),
                join_x(&l.out_shape),
                l.params.to_string(),
                l.flops.to_string(),
                l.interactions.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn join_x(v: &[usize]) -> String {
    v.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

// ---------------------------------------------------------------------------
// Reference table

#[derive(Clone, Debug, Deserialize)]
pub struct ReferenceRow {
    pub arch: String,
    pub params: f64,
    pub flops: f64,
    pub interactions: f64,
}

#[derive(Clone, Debug, Deserialize)]
pub struct Tolerances {
    pub interactions: f64,
    pub params: f64,
    pub flops: f64,
}

#[derive(Clone, Debug, Deserialize)]
pub struct ReferenceTable {
    pub input: [usize; 5],
    pub classes: usize,
    pub tolerance: Tolerances,
    #[serde(rename = "row")]
    pub rows: Vec<ReferenceRow>,
}

const REFERENCE: &str = include_str!("../data/reference_costs.toml");

/// Published costs of the nine depth-26/50/101 networks.
pub fn reference_table() -> ReferenceTable {
    toml::from_str(REFERENCE).expect("embedded reference table parses")
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckRow {
    pub what: String,
    pub expected: f64,
    pub actual: f64,
    pub rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckRow {
    fn new(what: String, expected: f64, actual: f64, tolerance: f64) -> Self {
        let rel_err = if expected == 0.0 { actual.abs() } else { (actual - expected).abs() / expected.abs() };
        CheckRow {
            what,
            expected,
            actual,
            rel_err,
            tolerance,
            passed: rel_err <= tolerance,
        }
    }
}

/// Compare analyzer totals with the reference table: each metric of each
/// row, the ir-CSN-50 FLOP reduction ratio (±5%), and exact equality of
/// ip-CSN and ResNet3D interactions at depths 50 and 101.
pub fn check_reference(opts: &AnalyzerOptions) -> Result<Vec<CheckRow>> {
    let table = reference_table();
    let input = Shape5::from_dims(table.input)?;
    let report = |name: &str| -> Result<Totals> {
        Ok(model_report(&ArchSpec::named(name, table.classes)?, &input, opts)?.totals)
    };
    let mut rows = Vec::new();
    for r in &table.rows {
        let t = report(&r.arch)?;
        let tol = &table.tolerance;
        rows.push(CheckRow::new(format!("{} interactions e9", r.arch), r.interactions, t.ginteractions, tol.interactions));
        rows.push(CheckRow::new(format!("{} params e6", r.arch), r.params, t.params_millions, tol.params));
        rows.push(CheckRow::new(format!("{} flops e9", r.arch), r.flops, t.gflops, tol.flops));
    }
    let find = |n: &str| table.rows.iter().find(|r| r.arch == n).expect("reference row present");
    let expected = find("resnet3d-50").flops / find("ir-csn-50").flops;
    let actual = report("resnet3d-50")?.gflops / report("ir-csn-50")?.gflops;
    rows.push(CheckRow::new("ir-csn-50 flop reduction".into(), expected, actual, 0.05));
    for d in [50, 101] {
        let base = report(&format!("resnet3d-{d}"))?.interactions as f64;
        let ip = report(&format!("ip-csn-{d}"))?.interactions as f64;
        rows.push(CheckRow::new(format!("ip-csn-{d} / resnet3d-{d} interactions"), 1.0, ip / base, 0.0));
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Sweeps

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    /// Group count of the 3×3×3 layers, ending with depthwise.
    Groups3,
    /// Group count of the 1×1×1 layers with depthwise 3×3×3 layers.
    Groups1,
    /// One row per block family.
    BlockKind,
}

impl SweepAxis {
    pub fn as_str(&self) -> &'static str {
        match self {
            SweepAxis::Groups3 => "groups-3x3x3",
            SweepAxis::Groups1 => "groups-1x1x1",
            SweepAxis::BlockKind => "block-kind",
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "groups-3x3x3" => Ok(SweepAxis::Groups3),
            "groups-1x1x1" => Ok(SweepAxis::Groups1),
            "block-kind" => Ok(SweepAxis::BlockKind),
            _ => Err(Error::param(format!(
                "sweep axis `{s}` is not groups-3x3x3, groups-1x1x1 or block-kind"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub block: BlockKind,
    pub variant: String,
    /// Group count on the varied layers, or `dw` for depthwise.
    pub groups: String,
    pub params: u64,
    pub flops: u64,
    pub interactions: u64,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// Variants that could not be built, with the reason.
    pub skipped: Vec<String>,
}

pub const SWEEP_HEADER: [&str; 7] = ["axis", "variant", "groups", "params", "flops", "interactions", "accuracy"];

impl SweepTable {
    /// CSV with [`SWEEP_HEADER`] columns; the accuracy column is left empty
    /// for untrained variants.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(SWEEP_HEADER).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.axis.to_string(),
                r.variant.clone(),
                r.groups.clone(),
                r.params.to_string(),
                r.flops.to_string(),
                r.interactions.to_string(),
                r.accuracy.map(|a| format!("{a:.4}")).unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Variants of `base` along `axis`: block kind plus the label of the varied
/// group count.
pub fn sweep_variants(base: &ArchSpec, axis: SweepAxis) -> Vec<(BlockKind, String)> {
    let simple = base.block.is_simple_family();
    let widest = base.stage_widths().iter().map(|w| w.1).max().unwrap_or(1);
    let powers: Vec<usize> = std::iter::successors(Some(1usize), |g| Some(g * 2)).take_while(|&g| g <= widest).collect();
    match axis {
        SweepAxis::Groups3 => {
            let mut v: Vec<_> = powers
                .iter()
                .map(|&g| {
                    let k = match (simple, g) {
                        (true, 1) => BlockKind::Simple,
                        (true, _) => BlockKind::SimpleG(g),
                        (false, 1) => BlockKind::Bottleneck,
                        (false, _) => BlockKind::BottleneckG(g),
                    };
                    (k, g.to_string())
                })
                .collect();
            v.push((if simple { BlockKind::SimpleD } else { BlockKind::BottleneckD }, "dw".into()));
            v
        }
        SweepAxis::Groups1 if simple => Vec::new(),
        SweepAxis::Groups1 => powers
            .iter()
            .map(|&g| (if g == 1 { BlockKind::BottleneckD } else { BlockKind::BottleneckDG(g) }, g.to_string()))
            .collect(),
        SweepAxis::BlockKind => {
            let g = 2;
            let kinds: &[BlockKind] = if simple {
                &[BlockKind::Simple, BlockKind::SimpleG(g), BlockKind::SimpleD]
            } else {
                &[
                    BlockKind::Bottleneck,
                    BlockKind::BottleneckG(g),
                    BlockKind::BottleneckD,
                    BlockKind::BottleneckDG(g),
                    BlockKind::IpCsn,
                ]
            };
            kinds.iter().map(|&k| (k, k.groups().map(|g| g.to_string()).unwrap_or_default())).collect()
        }
    }
}

/// Static costs of every variant of `base` along each axis, in order.
/// Variants whose group count does not divide a layer's channels are
/// skipped and listed in [`SweepTable::skipped`].
pub fn sweep_stats(base: &ArchSpec, axes: &[SweepAxis], input: &Shape5, opts: &AnalyzerOptions) -> Result<SweepTable> {
    let mut table = SweepTable::default();
    for &axis in axes {
        let variants = sweep_variants(base, axis);
        if variants.is_empty() {
            table.skipped.push(format!("{axis}: no variants for {} blocks", base.block));
        }
        for (kind, groups) in variants {
            let arch = base.with_block(kind);
            let report = match model_report(&arch, input, opts) {
                Ok(r) => r,
                Err(e) => {
                    table.skipped.push(format!("{axis} {kind}: {e}"));
                    continue;
                }
            };
            table.rows.push(SweepRow {
                axis,
                block: kind,
                variant: arch.name,
                groups,
                params: report.totals.params,
                flops: report.totals.flops,
                interactions: report.totals.interactions,
                accuracy: None,
            });
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_channel_interactions() {
        let c = |g| layer_stats(&ConvSpec::pointwise(4, 4, g, [1; 3]), 1).interactions;
        assert_eq!([c(1), c(2), c(4)], [24, 4, 0]);
    }

    #[test]
    fn cube_params_and_flops() {
        let s = ConvSpec::cube(64, 64, 1, 3, [1; 3]);
        let c = layer_stats(&s, 8 * 56 * 56);
        assert_eq!(c.params, 110_592);
        assert_eq!(c.flops, 110_592 * 25_088);
    }

    #[test]
    fn reference_table_loads() {
        let t = reference_table();
        assert_eq!(t.rows.len(), 9);
        assert_eq!(t.classes, 400);
    }

    #[test]
    fn axis_names_roundtrip() {
        for a in [SweepAxis::Groups3, SweepAxis::Groups1, SweepAxis::BlockKind] {
            assert_eq!(a.as_str().parse::<SweepAxis>().unwrap(), a);
        }
    }
}
