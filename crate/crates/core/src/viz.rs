//! Filter images: the stem's RGB filters and depthwise 3×3×3 filters, as
//! binary PPM/PGM grids.
//!
//! Every filter is min-max normalized on its own; a constant filter (for
//! example all zeros) renders mid-gray. Each temporal slice becomes one
//! cell, slices side by side, and every pixel is blown up `scale` times.

use crate::error::{Error, Result};
use crate::zoo::checkpoint::Record;

pub const DEFAULT_SCALE: usize = 5;
const GAP: usize = 1;

/// A rendered image; `channels` is 1 (PGM) or 3 (PPM).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    fn new(width: usize, height: usize, channels: usize) -> Self {
        Image {
            width,
            height,
            channels,
            pixels: vec![0; width * height * channels],
        }
    }

    /// Binary `P5`/`P6` netpbm bytes.
    pub fn to_netpbm(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn extension(&self) -> &'static str {
        if self.channels == 1 {
            "pgm"
        } else {
            "ppm"
        }
    }

    fn put(&mut self, x: usize, y: usize, px: &[u8]) {
        let at = (y * self.width + x) * self.channels;
        self.pixels[at..at + self.channels].copy_from_slice(px);
    }
}

/// Filter tensor viewed as `count × channels × t × h × w`.
struct FilterBank<'a> {
    data: &'a [f32],
    count: usize,
    channels: usize,
    t: usize,
    h: usize,
    w: usize,
}

fn to_bytes(values: &[f32]) -> Vec<u8> {
    let (lo, hi) = values.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !(hi > lo) {
        return vec![128; values.len()];
    }
    values.iter().map(|&v| ((v - lo) / (hi - lo) * 255.0).round() as u8).collect()
}

fn render_bank(bank: &FilterBank, scale: usize) -> Image {
    let cell_w = bank.w * scale;
    let cell_h = bank.h * scale;
    let tile_w = bank.t * cell_w + (bank.t - 1) * GAP;
    let cols = (bank.count as f64).sqrt().ceil() as usize;
    let rows = bank.count.div_ceil(cols);
    let width = cols * tile_w + (cols + 1) * GAP * 2;
    let height = rows * cell_h + (rows + 1) * GAP * 2;
    let mut img = Image::new(width, height, bank.channels);
    let per = bank.channels * bank.t * bank.h * bank.w;
    let plane = bank.t * bank.h * bank.w;
    for f in 0..bank.count {
        let bytes = to_bytes(&bank.data[f * per..(f + 1) * per]);
        let (ox, oy) = ((f % cols) * (tile_w + 2 * GAP) + 2 * GAP, (f / cols) * (cell_h + 2 * GAP) + 2 * GAP);
        for t in 0..bank.t {
            for y in 0..cell_h {
                for x in 0..cell_w {
                    let src = (t * bank.h + y / scale) * bank.w + x / scale;
                    let px: Vec<u8> = (0..bank.channels).map(|c| bytes[c * plane + src]).collect();
                    img.put(ox + t * (cell_w + GAP) + x, oy + y, &px);
                }
            }
        }
    }
    img
}

/// Resolve `comp_<k>` against checkpoint record names: the depthwise
/// 3×3×3 layer of the `k`-th residual block in network order.
pub fn resolve_alias(records: &[Record], name: &str) -> Result<String> {
    let Some(k) = name.strip_prefix("comp_").and_then(|k| k.parse::<usize>().ok()) else {
        return Ok(name.to_string());
    };
    let mut blocks: Vec<((usize, usize), String)> = Vec::new();
    for r in records {
        let Some(layer) = r.name.strip_suffix(".weight") else { continue };
        if !is_depthwise_cube(r) {
            continue;
        }
        let Some((block, _role)) = layer.split_once('.') else { continue };
        let Some(pos) = block_position(block) else { continue };
        if !blocks.iter().any(|b| b.0 == pos) {
            blocks.push((pos, layer.to_string()));
        }
    }
    blocks.sort();
    blocks
        .get(k)
        .map(|b| b.1.clone())
        .ok_or_else(|| Error::param(format!("`{name}`: checkpoint has {} blocks with depthwise layers", blocks.len())))
}

/// `conv3_2` → `(3, 2)`.
fn block_position(block: &str) -> Option<(usize, usize)> {
    let (s, b) = block.strip_prefix("conv")?.split_once('_')?;
    Some((s.parse().ok()?, b.parse().ok()?))
}

fn is_depthwise_cube(r: &Record) -> bool {
    r.dims.len() == 5 && r.dims[1] == 1 && r.dims[2..] == [3, 3, 3]
}

/// Names of every layer [`render_layer`] accepts.
pub fn eligible_layers(records: &[Record]) -> Vec<String> {
    records
        .iter()
        .filter(|r| r.name == "conv1.weight" || (r.name.ends_with(".weight") && is_depthwise_cube(r)))
        .map(|r| r.name.trim_end_matches(".weight").to_string())
        .collect()
}

/// Render `layer` (or a `comp_<k>` alias): `conv1` as an RGB grid, a
/// depthwise layer as a grayscale grid.
pub fn render_layer(records: &[Record], layer: &str, scale: usize) -> Result<(String, Image)> {
    if scale == 0 {
        return Err(Error::param("scale must be positive"));
    }
    let name = resolve_alias(records, layer)?;
    let key = format!("{name}.weight");
    let eligible = || eligible_layers(records).join(", ");
    let r = records
        .iter()
        .find(|r| r.name == key)
        .ok_or_else(|| Error::param(format!("no layer `{name}`; eligible layers: {}", eligible())))?;
    let d = &r.dims;
    let bank = if name == "conv1" && d.len() == 5 && d[1] == 3 {
        FilterBank {
            data: &r.data,
            count: d[0],
            channels: 3,
            t: d[2],
            h: d[3],
            w: d[4],
        }
    } else if is_depthwise_cube(r) {
        FilterBank {
            data: &r.data,
            count: d[0],
            channels: 1,
            t: 3,
            h: 3,
            w: 3,
        }
    } else {
        return Err(Error::param(format!(
            "`{name}` is neither conv1 nor a depthwise 3x3x3 layer; eligible layers: {}",
            eligible()
        )));
    };
    Ok((name, render_bank(&bank, scale)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(name: &str, dims: Vec<usize>, f: impl Fn(usize) -> f32) -> Record {
        let n = dims.iter().product();
        Record {
            name: name.into(),
            dims,
            data: (0..n).map(f).collect(),
        }
    }

    #[test]
    fn zero_filter_is_mid_gray() {
        let r = vec![rec("conv2_1.spatial.weight", vec![1, 1, 3, 3, 3], |_| 0.0)];
        let (_, img) = render_layer(&r, "comp_0", 5).unwrap();
        assert_eq!((img.width, img.height), (3 * 15 + 2 + 4, 15 + 4));
        assert_eq!(img.pixels[2 * img.width + 2], 128);
        assert_eq!(img.pixels[0], 0);
    }

    #[test]
    fn ramp_spans_full_range() {
        let r = vec![rec("conv2_1.spatial.weight", vec![1, 1, 3, 3, 3], |i| i as f32)];
        let (_, img) = render_layer(&r, "conv2_1.spatial", 1).unwrap();
        let body: Vec<u8> = img.pixels.clone();
        assert!(body.contains(&255) && body.contains(&0));
        // first slice, first pixel is the minimum; third slice, last is the max
        assert_eq!(img.pixels[2 * img.width + 2], 0);
        assert_eq!(img.pixels[(2 + 2) * img.width + 2 + 2 * (3 + 1) + 2], 255);
    }

    #[test]
    fn netpbm_header() {
        let img = Image::new(2, 1, 3);
        assert_eq!(&img.to_netpbm()[..11], b"P6\n2 1\n255\n");
        assert_eq!(img.to_netpbm().len(), 11 + 6);
    }

    #[test]
    fn aliases_follow_block_order() {
        let r = vec![
            rec("conv3_1.spatial.weight", vec![2, 1, 3, 3, 3], |_| 1.0),
            rec("conv2_10.spatial.weight", vec![2, 1, 3, 3, 3], |_| 1.0),
            rec("conv2_2.spatial.weight", vec![2, 1, 3, 3, 3], |_| 1.0),
            rec("conv2_2.reduce.weight", vec![2, 4, 1, 1, 1], |_| 1.0),
        ];
        assert_eq!(resolve_alias(&r, "comp_0").unwrap(), "conv2_2.spatial");
        assert_eq!(resolve_alias(&r, "comp_1").unwrap(), "conv2_10.spatial");
        assert_eq!(resolve_alias(&r, "comp_2").unwrap(), "conv3_1.spatial");
        let err = render_layer(&r, "conv2_2.reduce", 5).unwrap_err().to_string();
        assert!(err.contains("eligible"), "{err}");
    }
}
