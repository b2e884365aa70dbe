use csn_core::viz::{eligible_layers, render_layer, resolve_alias};
use csn_core::zoo::checkpoint::{self, Record};
use csn_core::zoo::{ArchSpec, Model};

fn count(bytes: &[u8], v: u8) -> usize {
    bytes.iter().filter(|&&b| b == v).count()
}

#[test]
fn ir_csn_152_conv1_and_comp_10() {
    let model = Model::<f32>::zeroed(&ArchSpec::named("ir-csn-152", 400).unwrap()).unwrap();
    let records = checkpoint::records(&model);
    assert_eq!(resolve_alias(&records, "comp_10").unwrap(), "conv3_8.spatial");
    assert_eq!(eligible_layers(&records).len(), 1 + 50);

    let (_, img) = render_layer(&records, "conv1", 5).unwrap();
    assert_eq!(img.channels, 3);
    // 64 filters on an 8×8 grid; each tile is 3 slices of 35×35 with 1px
    // gaps, tiles separated by 2px
    assert_eq!((img.width, img.height), (8 * (3 * 35 + 2) + 9 * 2, 8 * 35 + 9 * 2));
    assert_eq!(count(&img.pixels, 128), 64 * 3 * 35 * 35 * 3);

    let (name, img) = render_layer(&records, "comp_10", 5).unwrap();
    assert_eq!(name, "conv3_8.spatial");
    assert_eq!(img.channels, 1);
    assert_eq!(count(&img.pixels, 128), 128 * 3 * 15 * 15);
    // 128 filters: 12 columns, 11 rows
    assert_eq!((img.width, img.height), (12 * (3 * 15 + 2) + 13 * 2, 11 * 15 + 12 * 2));
}

#[test]
fn golden_depthwise_grid() {
    let data: Vec<f32> = (0..27).map(|i| i as f32).chain((0..27).map(|i| -(i as f32))).collect();
    let rec = Record {
        name: "conv2_1.spatial.weight".into(),
        dims: vec![2, 1, 3, 3, 3],
        data,
    };
    let (_, img) = render_layer(&[rec], "conv2_1.spatial", 1).unwrap();
    assert_eq!((img.width, img.height), (28, 7));
    let mut expected = vec![0u8; 28 * 7];
    for f in 0..2 {
        for t in 0..3 {
            for y in 0..3 {
                for x in 0..3 {
                    let k = (t * 9 + y * 3 + x) as f32;
                    // filter 1 is the negated ramp: its minimum is the last tap
                    let v = if f == 0 { k / 26.0 } else { (26.0 - k) / 26.0 };
                    let (px, py) = (2 + f * 13 + t * 4 + x, 2 + y);
                    expected[py * 28 + px] = (v * 255.0).round() as u8;
                }
            }
        }
    }
    assert_eq!(img.pixels, expected);
    let pgm = img.to_netpbm();
    assert!(pgm.starts_with(b"P5\n28 7\n255\n"));
    assert_eq!(pgm.len(), 12 + 28 * 7);
}

#[test]
fn only_conv1_and_depthwise_layers_render() {
    let model = Model::<f32>::new(&ArchSpec::named("tiny-resnet3d", 4).unwrap(), 0).unwrap();
    let records = checkpoint::records(&model);
    assert_eq!(eligible_layers(&records), vec!["conv1".to_string()]);
    let err = render_layer(&records, "conv2_1.spatial", 5).unwrap_err().to_string();
    assert!(err.contains("eligible layers: conv1"), "{err}");
    assert!(render_layer(&records, "comp_0", 5).is_err());
    assert!(render_layer(&records, "conv1", 0).is_err());
}
