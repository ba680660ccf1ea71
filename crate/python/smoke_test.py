"""Smoke test for the lamp_py extension.

    maturin build --release -m crates/lamp-py/Cargo.toml
    pip install target/wheels/lamp_py-*.whl
    python python/smoke_test.py
"""

import json
import random
import tempfile
from pathlib import Path

import lamp_py


def rand_rows(rows, cols, seed):
    rng = random.Random(seed)
    return [[rng.gauss(0.0, 1.0) for _ in range(cols)] for _ in range(rows)]


def matmul(a, b):
    return [[sum(x * y for x, y in zip(row, col)) for col in zip(*b)] for row in a]


def max_abs_diff(a, b):
    return max(abs(x - y) for ra, rb in zip(a, b) for x, y in zip(ra, rb))


def main():
    assert lamp_py.lamp_param_count(500, 4096, 8) == 36_776
    assert lamp_py.vanilla_pt_param_count(100, 1024) == 102_400
    report = lamp_py.cost_report(100, 1024, 8)
    assert report["trainable_params"] == 9000 and report["ratio"] == 11.38, report

    m, i = rand_rows(7, 3, 1), rand_rows(3, 5, 2)
    assert max_abs_diff(lamp_py.compressed_outer_product(m, i), matmul(m, i)) < 1e-12

    p = rand_rows(12, 6, 3)
    u, s, v = lamp_py.svd(p)
    assert all(a >= b for a, b in zip(s, s[1:]))
    back = lamp_py.reconstruct(u, s, v, mode="balanced")
    assert max_abs_diff(back, p) < 1e-10
    assert lamp_py.numerical_rank(matmul(rand_rows(10, 2, 4), rand_rows(2, 8, 5))) == 2
    assert len(lamp_py.average_pool(p, 3)) == 4

    prompt = lamp_py.SoftPrompt.lamp(p, 2, pool_block=2)
    assert prompt.trainable_params == 12 * 2 + 2 + 2 * 6
    assert prompt.rows_fed == 6
    assert lamp_py.numerical_rank(prompt.reconstructed()) <= 2
    stats = lamp_py.dispersion_stats(prompt.reconstructed())
    assert stats["numerical_rank"] <= 2

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "prompt.lamp"
        prompt.save(str(path))
        again = lamp_py.SoftPrompt.load(str(path))
        assert again.reconstructed() == prompt.reconstructed()

    cfg = json.loads(lamp_py.default_config())
    cfg["backbone"].update(d=16, n_heads=2, ffn_width=32)
    cfg["prompt"].update(l=10, r=2)
    cfg["task"].update(n_train=16, n_eval=8)
    cfg["train"].update(epochs=2, batch_size=8)
    text = json.dumps(cfg)

    backbone = lamp_py.Backbone(text)
    before = backbone.digest()
    metrics, trained, cost = lamp_py.train(text)
    assert [r["epoch"] for r in metrics if r["split"] == "train"] == [0, 1, 2]
    assert cost["trainable_params"] == trained.trainable_params == 10 * 2 + 2 + 2 * 16
    logits = backbone.forward(trained.materialize(), [1, 2, 3])
    assert len(logits) == 2
    assert backbone.digest() == before

    try:
        lamp_py.cost_report(100, 64, 8, p=3)
    except ValueError:
        pass
    else:
        raise AssertionError("p=3 with l=100 should be rejected")

    print("lamp_py smoke test passed:", prompt)


if __name__ == "__main__":
    main()
