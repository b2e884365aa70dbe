use std::ffi::CString;

use pyo3::prelude::*;
use pyo3::types::PyDict;

/// Run `code` with the module imported as `csn` and `tmp` bound to a
/// scratch directory.
fn run(code: &str) {
    let dir = tempfile::tempdir().unwrap();
    Python::attach(|py| {
        let module = pyo3::wrap_pymodule!(csn::csn)(py);
        py.import("sys").unwrap().getattr("modules").unwrap().set_item("csn", module).unwrap();
        let globals = PyDict::new(py);
        globals.set_item("tmp", dir.path().to_str().unwrap()).unwrap();
        let code = CString::new(format!("import csn, json\n{code}")).unwrap();
        if let Err(e) = py.run(&code, Some(&globals), None) {
            e.print(py);
            panic!("python failed");
        }
    });
}

#[test]
fn analyze_and_layer_stats() {
    run(r#"
r = json.loads(csn.analyze("ir-csn-50"))
assert abs(r["totals"]["interactions"] / 5.42e9 - 1) < 0.02, r["totals"]
assert "tiny-ip-csn" in csn.arch_names()
assert csn.layer_stats(4, 4, 2, kernel=1, voxels=10) == {"params": 8, "flops": 80, "interactions": 4}
assert csn.layer_stats(4, 4, 4)["interactions"] == 0
try:
    csn.analyze("resnet3d-27")
    raise AssertionError("unknown arch accepted")
except ValueError as e:
    assert "resnet3d-27" in str(e)
"#);
}

#[test]
fn depthwise_conv_matches_hand_computation() {
    run(r#"
# 2 channels, depthwise, kernel 1: each channel scales by its own weight
x = [1.0] * 8 + [2.0] * 8
y, dims = csn.conv3d(x, (1, 2, 2, 2, 2), [3.0, -1.0], c_out=2, groups=2, kernel=1)
assert dims == (1, 2, 2, 2, 2) or dims == [1, 2, 2, 2, 2], dims
assert y == [3.0] * 8 + [-2.0] * 8, y
# the centre of a 3x3x3 all-ones filter over an all-ones 3^3 clip sums 27 taps
y, _ = csn.conv3d([1.0] * 27, (1, 1, 3, 3, 3), [1.0] * 27, c_out=1)
assert y[13] == 27.0 and y[0] == 8.0
"#);
}

#[test]
fn train_save_load_eval_render() {
    run(r#"
assert csn.gen_data(tmp + "/train", classes=2, per_class=2, seed=1) == 4
csn.gen_data(tmp + "/held", classes=2, per_class=1, seed=2)
cfg = json.dumps({"total_epochs": 2, "warmup_epochs": 1, "iters_per_epoch": 2, "batch_size": 2, "eval_clips": 1})
model, history = csn.train("tiny-ip-csn", tmp + "/train", tmp + "/held", cfg)
h = json.loads(history)
assert len(h["iters"]) == 4 and h["evals"][-1]["iter"] == 3, h
model.save(tmp + "/m.csnw")
again = csn.Model.load("tiny-ip-csn", 2, tmp + "/m.csnw")
x = [0.1 * (i % 7) for i in range(2 * 3 * 4 * 32 * 32)]
assert model.predict(x, (2, 3, 4, 32, 32)) == again.predict(x, (2, 3, 4, 32, 32))
clip, video = csn.eval(again, tmp + "/held", clips=2)
assert 0 <= clip <= 1 and 0 <= video <= 1
name, img = csn.render_filters(tmp + "/m.csnw", "comp_0", scale=2)
assert name == "conv2_1.spatial" and img.startswith(b"P5\n")
assert again.param_count() == csn.Model("tiny-ip-csn", 2).param_count()
"#);
}

#[test]
fn gradcheck_rows() {
    run(r#"
rows = csn.gradcheck("tiny-model")
assert len(rows) == 1 and rows[0][2] <= rows[0][3], rows
"#);
}
