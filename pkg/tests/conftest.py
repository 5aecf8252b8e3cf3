import numpy as np
import pytest

from markhaz.data import RawSubject, build_analytical_dataset


def random_subjects(rng, n, p=1, max_gaps=3, censor_prob=0.4, tie_grid=None):
    """Small random recurrent-event data; ``tie_grid`` rounds times to force ties."""
    subjects = []
    for i in range(n):
        k = int(rng.integers(1, max_gaps + 1))
        times = rng.exponential(1.0, size=k) + 1e-3
        if tie_grid:
            times = np.maximum(np.round(times / tie_grid) * tie_grid, tie_grid)
        status = [1] * k
        if rng.random() < censor_prob:
            status[-1] = 0
        marks = [float(rng.random()) if s else None for s in status]
        z = rng.normal(size=p) if p > 1 else [float(rng.integers(0, 2)) + 0.3 * rng.normal()]
        subjects.append(RawSubject(str(i), times.tolist(), status, marks, list(z)))
    return subjects


@pytest.fixture
def small_dataset():
    rng = np.random.default_rng(11)
    return build_analytical_dataset(random_subjects(rng, 40, p=2))
