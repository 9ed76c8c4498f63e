import numpy as np
import pytest

from chaindid.panel import PanelDataset


def make_balanced(rng, n=100, T=6, cohorts=(3, 4, 5), effect=0.5, x_cols=0):
    """Balanced panel with additive unit effects and linear-in-exposure effects."""
    alpha = rng.normal(size=(n, 1))
    y = alpha + rng.normal(size=(n, T))
    coh = rng.choice((0,) + tuple(cohorts), size=n).astype(np.int64)
    for g in cohorts:
        for t in range(g, T + 1):
            y[:, t - 1] += np.where(coh == g, effect * (t - g + 1), 0.0)
    x = rng.normal(size=(n, x_cols)) if x_cols else None
    return PanelDataset(
        units=tuple(f"u{i}" for i in range(n)),
        y=y,
        sampled=np.ones((n, T), dtype=bool),
        cohort=coh,
        covariates=x,
    )


def make_rotating(rng, n=300, T=5, g=3, effect=0.7, share=0.4):
    """Single-cohort panel where each unit is observed two consecutive periods."""
    coh = np.where(rng.random(n) < share, g, 0).astype(np.int64)
    start = rng.integers(1, T, size=n)
    full = rng.normal(size=(n, 1)) + rng.normal(size=(n, T)) + 0.3 * np.arange(T)
    for t in range(g, T + 1):
        full[:, t - 1] += np.where(coh == g, effect * (t - g + 1), 0.0)
    y = np.full((n, T), np.nan)
    rows = np.arange(n)
    y[rows, start - 1] = full[rows, start - 1]
    y[rows, start] = full[rows, start]
    return PanelDataset(
        units=tuple(f"u{i}" for i in range(n)),
        y=y,
        sampled=~np.isnan(y),
        cohort=coh,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20260823)
