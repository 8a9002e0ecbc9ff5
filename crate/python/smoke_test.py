#!/usr/bin/env python3
"""Smoke test for the unmix_tns_py extension module.

Build the extension first:

    cargo build -p unmix-tns-python --release

The loader below finds the cdylib in target/ (or a copy of it placed next to
this script) and imports it under the module name the interpreter expects.
"""

import importlib
import math
import pathlib
import shutil
import sys
import sysconfig
import tempfile


def load_module():
    here = pathlib.Path(__file__).resolve().parent
    suffix = sysconfig.get_config_var("EXT_SUFFIX") or ".so"
    candidates = [
        here / f"unmix_tns_py{suffix}",
        here / "unmix_tns_py.so",
        here.parent / "target" / "release" / "libunmix_tns_py.so",
        here.parent / "target" / "debug" / "libunmix_tns_py.so",
    ]
    for path in candidates:
        if not path.exists():
            continue
        if path.name.startswith("lib"):
            staging = pathlib.Path(tempfile.mkdtemp(prefix="unmix_tns_py_"))
            target = staging / f"unmix_tns_py{suffix}"
            shutil.copy2(path, target)
            sys.path.insert(0, str(staging))
        else:
            sys.path.insert(0, str(path.parent))
        return importlib.import_module("unmix_tns_py")
    raise SystemExit(
        "extension not found; run `cargo build -p unmix-tns-python --release` first"
    )


def approx(a, b, tol=1e-12):
    return abs(a - b) <= tol * max(1.0, abs(a), abs(b))


def main():
    tns = load_module()

    # Instance and batch moments.
    mean, var = tns.instance_stats([1.0, 3.0], 1, 1, 2)
    assert mean == [2.0] and var == [1.0], (mean, var)
    mean, var = tns.batch_stats([0.0, 2.0], 2, 1, 1)
    assert mean == [1.0] and var == [1.0], (mean, var)

    # Mixture composition: two unit-variance components at 0 and 2.
    mean, var = tns.mixture_moments([0.0, 2.0], [1.0, 1.0], 2, 1, [0.5, 0.5])
    assert approx(mean[0], 1.0) and approx(var[0], 2.0), (mean, var)

    # Cosine similarity directions.
    assert approx(tns.cosine_sim([1.0, 2.0], [1.0, 2.0]), 1.0)
    assert tns.cosine_sim([1.0, 0.0], [0.0, 1.0]) == 0.0
    assert tns.cosine_sim([0.0, 0.0], [1.0, 1.0]) == 0.0

    # Assignment softmax: equal scores split evenly; rows sum to one.
    probs = tns.assignment_probs([0.3, 0.3, 0.3, 0.3], 1, 4, 0.07)
    assert all(approx(p, 0.25) for p in probs), probs
    probs = tns.assignment_probs([1.0, 0.0, -0.5, 0.25, 0.9, -1.0], 2, 3, 0.07)
    for row in range(2):
        assert approx(sum(probs[row * 3 : (row + 1) * 3]), 1.0, 1e-9)

    # Momentum schedule fixed points.
    assert tns.momentum_lambda(64, 64, 0.1) == 0.1
    assert approx(tns.momentum_lambda(128, 64, 0.1), 0.19)
    assert tns.momentum_lambda(32, 64, 0.1) < 0.1

    # TBN standardizes: constant batch collapses to beta.
    out = tns.tbn_forward([7.0] * 6, 2, 1, 3, [1.5], [0.25])
    assert all(v == 0.25 for v in out), out

    # Identity source stats are (almost) the identity map.
    data = [0.5, -1.5, 2.0, 0.0]
    out = tns.source_bn_forward(data, 2, 2, 1, [0.0, 0.0], [1.0, 1.0], [1.0, 1.0], [0.0, 0.0])
    assert all(abs(a - b) < 1e-6 for a, b in zip(out, data)), out

    # alpha_bn endpoints agree with the source and TBN paths.
    src = dict(mean=[0.3, -0.2], var=[1.1, 0.8], gamma=[1.0, 1.0], beta=[0.0, 0.0])
    args = (data, 2, 2, 1, src["mean"], src["var"], src["gamma"], src["beta"])
    assert tns.alpha_bn_forward(*args, 0.0) == tns.source_bn_forward(*args)
    assert tns.alpha_bn_forward(*args, 1.0) == tns.tbn_forward(
        data, 2, 2, 1, src["gamma"], src["beta"]
    )

    # Dirichlet ordering is a permutation, and tiny delta clumps labels.
    labels = [i % 5 for i in range(200)]
    order = tns.dirichlet_order(labels, 5, 0.01, 20, 0)
    assert sorted(order) == list(range(200))
    first_slot = [labels[i] for i in order[:20]]
    assert len(set(first_slot)) <= 3, first_slot

    # The unmixing layer: one component with alpha 0 reduces to instance
    # normalization.
    layer = tns.UnMixLayer([0.0], [1.0], [1.0], [0.0], k=1, alpha=0.0, seed=0)
    out = layer.forward([1.0, 3.0], 1, 1, 2)
    want = [(1.0 - 2.0) / math.sqrt(1.0 + 1e-6), (3.0 - 2.0) / math.sqrt(1.0 + 1e-6)]
    assert all(abs(a - b) < 1e-9 for a, b in zip(out, want)), out

    # A K=16 layer keeps its mixture near the stored stats at init and
    # adapts toward the stream it sees.
    layer = tns.UnMixLayer([0.0, 0.0], [1.0, 1.0], [1.0, 1.0], [0.0, 0.0], k=16, seed=3)
    mix_mean, mix_var = layer.mixture()
    assert all(abs(m) < 2.0 for m in mix_mean), mix_mean
    assert layer.k == 16 and layer.channels == 2
    before = layer.mixture()[0]
    for step in range(50):
        shifted = [5.0 + 0.1 * ((step + i) % 7) for i in range(2 * 4 * 2)]
        layer.forward(shifted, 4, 2, 2)
    after = layer.mixture()[0]
    assert all(abs(a - 5.0) < abs(b - 5.0) for a, b in zip(after, before)), (before, after)

    print("smoke test passed")


if __name__ == "__main__":
    main()
