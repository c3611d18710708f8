import numpy as np
import pytest

from ehrtransfer.dataset import bin_hourly, make_batch, normalize_apply, normalize_fit, synth_generate
from ehrtransfer.imputer import ImputerConfig
from ehrtransfer.masking import MaskPlan, apply_nonuniform_mask


def random_batch(rng, n=3, t=5, d=3, p_obs=0.6, labels=None):
    """Normalised-looking batch with random missingness and no eval mask."""
    mask = (rng.uniform(size=(n, t, d)) < p_obs).astype(np.float32)
    values = rng.normal(size=(n, t, d)).astype(np.float32)
    if labels is None:
        labels = np.arange(n) % 2
    return make_batch(values, mask, labels)


def small_synth_batch(n=40, t=12, d=4, seed=0, rate=0.1):
    data = synth_generate(n, t=t, d=d, missing_rate=0.4, seed=seed)
    grid = bin_hourly(data.events, n_steps=t, record_ids=sorted(data.labels))
    stats = normalize_fit(grid.values, grid.mask)
    y = np.array([data.labels[r] for r in grid.ids])
    batch = make_batch(normalize_apply(grid.values, grid.mask, stats), grid.mask, y, grid.ids)
    return apply_nonuniform_mask(batch, MaskPlan(rate=rate, seed=seed))


@pytest.fixture
def toy_config():
    return ImputerConfig(d_features=3, hidden=5, embed_dim=4, seed=0, n_steps=4)
