import numpy as np
import pytest

from mic.tensor_core import SequenceMask


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def random_mask(rng, b, length, min_active=1):
    """Random 0/1 mask with at least min_active live positions per row."""
    m = np.zeros((b, length), dtype=np.int64)
    for i in range(b):
        n_active = int(rng.integers(min_active, length + 1))
        idx = rng.choice(length, size=n_active, replace=False)
        m[i, idx] = 1
    return SequenceMask(m)


def random_states(rng, b, length, dims, scale=1.0):
    return rng.normal(0.0, scale, size=(b, length, dims))


def random_instance(rng, max_b=4, max_len=5, max_d=8, min_active=2):
    """Small random (states, mask, split) triple for oracle comparisons."""
    b = int(rng.integers(1, max_b + 1))
    length = int(rng.integers(min_active, max_len + 1))
    d_full = int(rng.integers(2, max_d + 1))
    d = int(rng.integers(1, d_full))
    h = random_states(rng, b, length, d_full)
    mask = random_mask(rng, b, length, min_active=min_active)
    return h, mask, d


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))
