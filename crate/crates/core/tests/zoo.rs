mod common;

use csn_core::ops::{softmax_xent, Mode};
use csn_core::zoo::{checkpoint, known_arch_names, ArchSpec, BlockKind, Model};
use csn_core::{Rng, Shape5, Tensor5};

fn dims(s: &Shape5) -> [usize; 5] {
    s.dims()
}

#[test]
fn shape_chain_depth50() {
    let arch = ArchSpec::named("resnet3d-50", 400).unwrap();
    let model = Model::<f32>::zeroed(&arch).unwrap();
    let trace = model.trace_shapes(&Shape5::new(1, 3, 8, 224, 224).unwrap()).unwrap();
    let get = |n: &str| dims(&trace.iter().find(|t| t.0 == n).unwrap().1);
    assert_eq!(get("conv1"), [1, 64, 8, 112, 112]);
    assert_eq!(get("pool1"), [1, 64, 8, 56, 56]);
    assert_eq!(get("conv2_3"), [1, 256, 8, 56, 56]);
    assert_eq!(get("conv3_4"), [1, 512, 4, 28, 28]);
    assert_eq!(get("conv4_6"), [1, 1024, 2, 14, 14]);
    assert_eq!(get("conv5_3"), [1, 2048, 1, 7, 7]);
    assert_eq!(get("fc"), [1, 400, 1, 1, 1]);
}

#[test]
fn simple_and_shallow_feature_widths() {
    let input = Shape5::new(2, 3, 8, 224, 224).unwrap();
    for (name, width) in [("resnet3d-18", 512), ("resnet3d-26", 512), ("ip-csn-26", 512), ("ir-csn-101", 2048)] {
        let m = Model::<f32>::zeroed(&ArchSpec::named(name, 400).unwrap()).unwrap();
        let trace = m.trace_shapes(&input).unwrap();
        let last_block = &trace[trace.len() - 3];
        assert_eq!(dims(&last_block.1), [2, width, 1, 7, 7], "{name}");
    }
}

#[test]
fn every_parameter_has_one_name() {
    for name in known_arch_names() {
        let m = Model::<f32>::zeroed(&ArchSpec::named(&name, 10).unwrap()).unwrap();
        let names: Vec<String> = m.tensors().into_iter().map(|t| t.0).collect();
        let unique: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len(), "{name}");
    }
}

#[test]
fn depths_follow_block_counts() {
    for name in known_arch_names() {
        let a = ArchSpec::named(&name, 400).unwrap();
        let per_block = if a.block.is_simple_family() { 2 } else { 3 };
        assert_eq!(a.depth(), per_block * a.stage_blocks.iter().sum::<usize>() + 2, "{name}");
    }
}

fn uniform_input(shape: [usize; 5], seed: u64) -> Tensor5<f32> {
    let mut rng = Rng::new(seed);
    let s = Shape5::from_dims(shape).unwrap();
    let data = (0..s.numel()).map(|_| rng.uniform() as f32).collect();
    Tensor5::from_vec(s, data).unwrap()
}

#[test]
fn untrained_loss_is_near_log_classes() {
    // Desk-scale input through the full-width shallow network.
    let arch = ArchSpec::named("ir-csn-26", 400).unwrap();
    let model = Model::<f32>::new(&arch, 7).unwrap();
    let x = uniform_input([2, 3, 8, 64, 64], 1);
    let logits = model.predict(&x).unwrap();
    assert_eq!(dims(logits.shape()), [2, 400, 1, 1, 1]);
    let loss = softmax_xent(&logits, &[3, 250]).unwrap().loss;
    assert!((loss - 400f64.ln()).abs() <= 0.3, "loss {loss}");
}

#[test]
fn eval_forward_is_bit_identical() {
    let model = Model::<f32>::new(&ArchSpec::named("tiny-ip-csn", 4).unwrap(), 3).unwrap();
    let x = uniform_input([2, 3, 8, 32, 32], 2);
    let a = model.predict(&x).unwrap();
    let b = model.predict(&x).unwrap();
    assert_eq!(a.data(), b.data());
    let (c, _) = model.forward(&x, Mode::Eval).unwrap();
    assert_eq!(a.data(), c.data());
}

#[test]
fn zeroed_depthwise_weights_keep_residual_path() {
    let mut model = Model::<f32>::new(&ArchSpec::named("tiny-ir-csn", 4).unwrap(), 5).unwrap();
    for l in model.conv_layers_mut() {
        if l.spec.is_depthwise() && !l.spec.is_pointwise() {
            l.weight = Tensor5::zeros(*l.weight.shape());
        }
    }
    let x = uniform_input([2, 3, 8, 32, 32], 3);
    let (logits, _) = model.forward(&x, Mode::Train).unwrap();
    assert!(logits.is_finite());
    let eval = model.predict(&x).unwrap();
    assert!(eval.is_finite());
    assert!(eval.data().iter().any(|&v| v != 0.0));
}

#[test]
fn grouped_with_one_group_matches_bottleneck() {
    let a = ArchSpec::named("tiny-bottleneck", 4).unwrap();
    let g = a.with_block(BlockKind::BottleneckG(1));
    let dense = Model::<f32>::new(&a, 9).unwrap();
    let mut grouped = Model::<f32>::zeroed(&g).unwrap();
    let bytes = checkpoint::to_bytes(&dense).unwrap();
    checkpoint::load_records(&mut grouped, &checkpoint::decode(&bytes).unwrap()).unwrap();
    let x = uniform_input([2, 3, 8, 32, 32], 4);
    assert_eq!(dense.predict(&x).unwrap().data(), grouped.predict(&x).unwrap().data());
    let (ld, _) = dense.forward(&x, Mode::Train).unwrap();
    let (lg, _) = grouped.forward(&x, Mode::Train).unwrap();
    assert_eq!(ld.data(), lg.data());
}

#[test]
fn checkpoint_roundtrip_is_byte_exact() {
    let arch = ArchSpec::named("tiny-ip-csn", 4).unwrap();
    let mut model = Model::<f32>::new(&arch, 11).unwrap();
    // Running statistics must survive too.
    let x = uniform_input([2, 3, 8, 32, 32], 5);
    let (_, cache) = model.forward(&x, Mode::Train).unwrap();
    model.update_running_stats(&cache);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csnw");
    checkpoint::save(&model, &path).unwrap();
    let mut back = Model::<f32>::zeroed(&arch).unwrap();
    checkpoint::load_into(&mut back, &path).unwrap();
    let a = std::fs::read(&path).unwrap();
    assert_eq!(checkpoint::to_bytes(&back).unwrap(), a);
    assert_eq!(model.predict(&x).unwrap().data(), back.predict(&x).unwrap().data());
}

#[test]
fn checkpoint_rejects_other_architectures() {
    let a = Model::<f32>::new(&ArchSpec::named("tiny-ip-csn", 4).unwrap(), 1).unwrap();
    let mut b = Model::<f32>::zeroed(&ArchSpec::named("tiny-ir-csn", 4).unwrap()).unwrap();
    let recs = checkpoint::records(&a);
    assert!(checkpoint::load_records(&mut b, &recs).is_err());
}

#[test]
fn shape_errors_name_the_layer() {
    let model = Model::<f32>::new(&ArchSpec::named("tiny-resnet3d", 4).unwrap(), 1).unwrap();
    let bad = uniform_input([1, 2, 8, 32, 32], 1);
    let err = model.predict(&bad).unwrap_err().to_string();
    assert!(err.contains("conv1"), "{err}");
}
