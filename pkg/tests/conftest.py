import numpy as np
import pytest

from kvlab import AttentionTrace, ModelConfig, init_model, tokenize
from kvlab.harness import demo_prompt
from kvlab.traceio import MODE_FULL, MODE_LAST_ROW, TraceMeta


def make_random_trace(rng, L=None, H=None, Q=None, T=None, mode="full"):
    """A valid random causal trace: each live row is a normalized simplex
    sample, everything beyond the causal support exactly zero."""
    L = int(L if L is not None else rng.integers(1, 5))
    H = int(H if H is not None else rng.integers(1, 5))
    T = int(T if T is not None else rng.integers(1, 33))
    if mode == "full":
        Q = T
    else:
        Q = int(Q if Q is not None else 1)
    w = np.zeros((L, H, Q, T))
    for l in range(L):
        for h in range(H):
            for q in range(Q):
                support = T - Q + q + 1
                row = rng.random(support) + 1e-6
                w[l, h, q, :support] = row / row.sum()
    return AttentionTrace(
        weights=w.astype(np.float32),
        mode=MODE_FULL if mode == "full" else MODE_LAST_ROW,
        meta=TraceMeta(tokens=list(range(T))),
    )


@pytest.fixture(scope="session")
def tiny_model():
    return init_model(ModelConfig(layers=2, heads=2, head_dim=16, max_seq=256, seed=7))


@pytest.fixture(scope="session")
def demo():
    text, seg = demo_prompt()
    return tokenize(text), seg
