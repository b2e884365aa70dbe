"""Smoke test of the `csn` extension module.

Build and install it first:

    pip install --no-build-isolation ./crates/py
    python python/smoke_test.py
"""

import json
import tempfile

import numpy as np

import csn


def conv3d_reference(x, w, groups):
    """Direct grouped 3D convolution, stride 1, "same" padding."""
    n, c_in, t, h, wd = x.shape
    c_out, cig, k = w.shape[0], w.shape[1], w.shape[2]
    p = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))
    out = np.zeros((n, c_out, t, h, wd))
    per_group = c_out // groups
    for o in range(c_out):
        g = o // per_group
        xs = xp[:, g * cig:(g + 1) * cig]
        for dt in range(k):
            for dh in range(k):
                for dw in range(k):
                    patch = xs[:, :, dt:dt + t, dh:dh + h, dw:dw + wd]
                    out[:, o] += np.einsum("ncthw,c->nthw", patch, w[o, :, dt, dh, dw])
    return out


def check_conv():
    rng = np.random.default_rng(0)
    for c_in, c_out, groups in [(4, 6, 1), (4, 4, 2), (6, 6, 6)]:
        x = rng.standard_normal((2, c_in, 3, 5, 4)).astype(np.float32)
        w = rng.standard_normal((c_out, c_in // groups, 3, 3, 3)).astype(np.float32)
        y, dims = csn.conv3d(x.ravel().tolist(), x.shape, w.ravel().tolist(), c_out, groups)
        y = np.asarray(y).reshape(dims)
        err = np.abs(y - conv3d_reference(x.astype(np.float64), w.astype(np.float64), groups)).max()
        assert err < 1e-4, (c_in, c_out, groups, err)
    print("conv3d matches the numpy reference")


def check_analyzer():
    dense = json.loads(csn.analyze("ip-csn-50"))["totals"]
    ir = json.loads(csn.analyze("ir-csn-50"))["totals"]
    assert ir["interactions"] < dense["interactions"]
    print(f"ip-csn-50 {dense['params'] / 1e6:.1f}M params, ir-csn-50 {ir['params'] / 1e6:.1f}M params")
    s = csn.layer_stats(64, 64, groups=64)
    assert s == {"params": 64 * 27, "flops": 64 * 27, "interactions": 0}, s


def check_training():
    with tempfile.TemporaryDirectory() as tmp:
        csn.gen_data(f"{tmp}/train", classes=4, per_class=4, seed=1)
        csn.gen_data(f"{tmp}/held", classes=4, per_class=2, seed=2)
        cfg = {"total_epochs": 3, "warmup_epochs": 1, "iters_per_epoch": 4, "batch_size": 4, "eval_clips": 2}
        model, history = csn.train("tiny-ip-csn", f"{tmp}/train", f"{tmp}/held", json.dumps(cfg))
        h = json.loads(history)
        assert len(h["iters"]) == 12
        model.save(f"{tmp}/m.csnw")
        reloaded = csn.Model.load("tiny-ip-csn", 4, f"{tmp}/m.csnw")
        clip, video = csn.eval(reloaded, f"{tmp}/held", clips=2)
        assert 0.0 <= clip <= 1.0 and 0.0 <= video <= 1.0
        name, image = csn.render_filters(f"{tmp}/m.csnw", "comp_0")
        assert image.startswith(b"P5")
        print(f"{model}: loss {h['iters'][0]['loss']:.3f} -> {h['iters'][-1]['loss']:.3f}, "
              f"held-out video@1 {video:.2f}, rendered {name} ({len(image)} bytes)")


def check_gradients():
    for name, entries, worst, tol in csn.gradcheck("blocks"):
        assert worst <= tol, (name, worst)
    print("block gradient checks pass")


if __name__ == "__main__":
    check_conv()
    check_analyzer()
    check_training()
    check_gradients()
    print("ok")
