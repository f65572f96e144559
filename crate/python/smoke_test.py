"""Smoke test for the `mgk` extension module.

Build and install first:  pip install -e crates/py --no-build-isolation
"""

import json
import math
import random

import mgk


def randn(rng, n, d):
    return [[rng.gauss(0.0, 1.0) for _ in range(d)] for _ in range(n)]


def close(a, b, tol):
    return all(abs(x - y) <= tol for ra, rb in zip(a, b) for x, y in zip(ra, rb))


def main():
    rng = random.Random(0)
    n, d = 12, 4

    # single-component MGK on unit-norm inputs equals softmax attention
    def unit(rows):
        return [[x / math.sqrt(sum(v * v for v in r)) for x in r] for r in rows]

    q, k, v = unit(randn(rng, n, d)), unit(randn(rng, n, d)), randn(rng, n, d)
    soft = mgk.softmax_attention(q, k, v)
    mix = mgk.mgk_attention(q, [k], v, [1.0], [math.sqrt(d)])
    assert close(soft.scores, mix.scores, 1e-12)

    # multi-head layer: row-stochastic scores, causal zeros
    cfg = mgk.AttentionConfig("mgk", 2, d, 8, causal=True)
    assert cfg.components == 2 and len(cfg.sigma2) == 2
    out, heads = mgk.MultiHeadAttention(cfg, seed=1).forward(randn(rng, n, 8))
    assert len(out) == n and len(heads) == 2
    for h in heads:
        for i, row in enumerate(h.scores):
            assert abs(sum(row) - 1.0) < 1e-9
            assert all(x == 0.0 for x in row[i + 1 :])
        assert len(h.responsibilities[0]) == 2

    # linearized attention has no score matrix
    lin = mgk.mlk_attention(randn(rng, n, d), [randn(rng, n, d)] * 2, v, [0.5, 0.5], causal=True)
    assert lin.scores is None and len(lin.output) == n

    # EM prior updates never increase the NLL
    keys = [randn(rng, n, d), randn(rng, n, d)]
    pi, trace = mgk.em_prior_iterations(randn(rng, n, d), keys, [0.5, 0.5], [1.0, 2.0], 20)
    assert all(b <= a + 1e-9 for a, b in zip(trace, trace[1:]))
    assert abs(sum(pi) - 1.0) < 1e-12

    # complexity accounting
    assert mgk.mgk_flops(256, 8, 64, 512) < mgk.softmax_flops(256, 8, 64, 512)
    assert mgk.instrumented_flops(mgk.mgk_counting_config(4, 8, 16), 10) == mgk.mgk_flops(10, 4, 8, 16)
    assert mgk.mgk_params(8, 64, 512) < mgk.softmax_params(8, 64, 512)

    # rank diagnostics
    a = [[float(i * j) for j in range(5)] for i in range(5)]
    assert mgk.matrix_rank(a) == 1

    # bad input is a ValueError
    try:
        mgk.AttentionConfig("quadratic", 1, 4, 4)
    except ValueError:
        pass
    else:
        raise AssertionError("unknown variant accepted")

    # tiny training run
    model = mgk.train(
        mgk.AttentionConfig("mgk", 1, 4, 8),
        model_dim=8, vocab=4, seq_len=8, train_size=16, test_size=8,
        ff_hidden=8, epochs=2, seed=3,
    )
    report = json.loads(model.report)
    assert len(report["epochs"]) == 2
    assert len(model.logits([0, 1, 2, 3, 0, 1, 2, 3])) == report["model"]["classes"]
    ranks = json.loads(model.rank_distribution(count=2))
    assert all(len(h["ranks"]) == 2 for h in ranks)

    equivalence = json.loads(mgk.equivalence_suite(7))
    assert equivalence["passed"]

    print("mgk smoke test: ok")


if __name__ == "__main__":
    main()
