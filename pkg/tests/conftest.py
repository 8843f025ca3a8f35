import numpy as np
import pytest

from fedlop.data import SyntheticConfig, generate_client_datasets, train_test_split
from fedlop.nn_core import seeded_rng


def client_sets(m=3, per_client=60, seed=0, shift=0.0, noise=0.03):
    cfg = SyntheticConfig(n_students=max(50, m * per_client // 12 + 1), seed=seed,
                          label_shift=shift, noise_scale=noise)
    sets = generate_client_datasets(cfg, m, per_client)
    return [train_test_split(s, 0.7, seeded_rng([seed, 1, i])) for i, s in enumerate(sets)]


@pytest.fixture(scope="session")
def tiny_sets():
    return client_sets()


def history_bytes(hist):
    """Everything in a history that must be bit-reproducible."""
    parts = [g.tobytes() for g in hist.globals]
    for r in hist.rounds:
        parts.append(repr((r.round, r.participants, r.train_loss, r.accuracy,
                           r.mean_loss, r.mean_accuracy, r.dropped)).encode())
    for c in sorted(hist.final_metrics):
        parts.append(np.asarray(hist.final_metrics[c].confusion).tobytes())
    return b"".join(parts)
