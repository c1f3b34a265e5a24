import os

# must be set before numba is imported; several workers on one core still interleave
os.environ.setdefault("NUMBA_NUM_THREADS", "4")
os.environ.setdefault("OMP_WAIT_POLICY", "passive")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from dknng.evalio import brute_force_knng, gen_random_dataset  # noqa: E402


@pytest.fixture(scope="session")
def gt_cache(request):
    """Ground-truth cache that survives between test sessions."""
    return request.config.cache.mkdir("dknng-ground-truth")


@pytest.fixture(scope="session")
def truth_of(gt_cache):
    def get(dataset, k):
        return brute_force_knng(dataset, k, cache_dir=gt_cache)

    return get


@pytest.fixture
def small_uniform():
    return gen_random_dataset(600, 8, "uniform", seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
