"""Smoke test for the lpforge_py extension module.

Build and install first:

    pip install maturin
    maturin build --release -m crates/py/Cargo.toml
    pip install target/wheels/lpforge_py-*.whl
"""

import math
import random

import lpforge_py as lp


def check_quantizers():
    assert lp.quantize_weights([-0.7, -0.2, 0.49, 0.5, 3.0], 2) == [-1, 0, 0, 1, 1]
    assert lp.quantize_weights([0.25], 32) is None
    assert lp.quantize_activations([0.0, 0.5, 2.0], 2) == [0, 2, 3]
    assert lp.fake_quantize_weights([0.3, -0.9], 4) == [2 / 7, -6 / 7]


def check_kernels():
    rng = random.Random(7)
    m, n, k = 5, 6, 37
    a = [[rng.randrange(256) for _ in range(k)] for _ in range(m)]
    b = [[rng.choice((-1, 0, 1)) for _ in range(n)] for _ in range(k)]
    want = [[sum(a[i][p] * b[p][j] for p in range(k)) for j in range(n)] for i in range(m)]
    assert lp.gemm_ternary(a, b) == want
    words = lp.pack_ternary_words(b)
    assert lp.unpack_ternary_words(k, n, words) == b
    sim = lp.simulate(a, b)
    assert sim["output"] == want
    assert sim["macs"] == m * n * k
    assert lp.simulate([[1] * 16] * 8, [[1] * 8] * 16)["cycles"] == 38


def check_networks():
    r44 = lp.Network.bundled("r44")
    assert r44.conv_count == 43
    wide = r44.widen(2.0, 1.0)
    ratio = wide.cost(2, 8)["cost"] / r44.cost(32, 32)["cost"]
    assert ratio < 1.0, ratio
    net = lp.Network.bundled("resnet50")
    train = net.footprint(batch=32, mode="training")
    infer = net.footprint(batch=1, mode="inference")
    assert train["activation_bytes"] > train["weight_bytes"]
    assert infer["weight_bytes"] > infer["activation_bytes"]
    back = lp.Network.parse(wide.to_text(), wide.name)
    assert back.total_params == wide.total_params
    try:
        lp.Network.parse("input 4 4 1\nconv name=a out=2 k=9\n")
    except ValueError:
        pass
    else:
        raise AssertionError("bad geometry accepted")


def check_loss_and_training():
    loss, grad = lp.distill_loss([[0.0, 0.0]], [0], teacher=[[math.log(3.0), 0.0]], beta=1.0)
    assert abs(loss - 2 * math.log(2)) < 1e-12
    assert len(grad) == 1 and len(grad[0]) == 2
    hist = lp.train("low_precision", seed=3, epochs=2)
    assert hist["scheme"] == "low_precision"
    assert len(hist["epochs"]) == 2
    assert all(0.0 <= e["eval_accuracy"] <= 1.0 for e in hist["epochs"])


if __name__ == "__main__":
    check_quantizers()
    check_kernels()
    check_networks()
    check_loss_and_training()
    print("lpforge_py smoke test passed")
