import numpy as np
import pytest

from dpflab import Batch, init_model, make_blobs, make_mlp_specs


@pytest.fixture(scope="session")
def blobs():
    return make_blobs(4, 20, 400, 0.15, seed=1)


@pytest.fixture()
def small_model():
    return init_model(make_mlp_specs([2, 16, 2]), seed=0)


def random_batch(rng, n, dim, classes):
    return Batch(rng.standard_normal((n, dim)), rng.integers(0, classes, size=n))


def brute_force_last_change(history, epochs, steps_per_epoch):
    """Independent oracle: scan every consecutive mask pair per epoch threshold."""
    events = list(history)
    prunable = events[0][1].prunable
    n = prunable.sum()
    curve = []
    for e in range(epochs):
        changed = np.zeros(prunable.size, dtype=bool)
        for (s0, m0), (s1, m1) in zip(events, events[1:]):
            if s1 // steps_per_epoch > e:
                changed |= (m0.bits != m1.bits) & prunable
        curve.append(changed.sum() / n)
    return np.array(curve)
