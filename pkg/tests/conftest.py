import numpy as np
import pytest

from ttacc.compress import TTConfig, tt_svd


def random_tt_case(rng, d=None, max_factor=8, max_rank=8, max_out=256, max_in=512):
    """Random (w, cfg, tt) with bounded tensorized sizes.

    The output side is capped so the naive per-output evaluation stays
    cheap in oracle comparisons.
    """
    if d is None:
        d = int(rng.integers(2, 5))
    while True:
        n = [int(rng.integers(2, max_factor + 1)) for _ in range(d)]
        m = [int(rng.integers(2, max_factor + 1)) for _ in range(d)]
        if np.prod(m) <= max_out and np.prod(n) <= max_in:
            break
    rank = int(rng.integers(1, max_rank + 1))
    cfg = TTConfig(tuple(n), tuple(m), max_rank=rank)
    w = rng.standard_normal((cfg.m_total, cfg.n_total))
    return w, cfg, tt_svd(w, cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
