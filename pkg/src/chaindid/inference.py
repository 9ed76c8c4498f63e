"""Multiplier-bootstrap simultaneous confidence bands and the pre-trend test."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

KAPPA = (math.sqrt(5.0) + 1.0) / 2.0
P_LOW = KAPPA / math.sqrt(5.0)
IQR_NORM = norm.ppf(0.75) - norm.ppf(0.25)
MIN_DRAWS = 200


@dataclass(frozen=True)
class BootstrapBands:
    cells: tuple
    estimates: np.ndarray
    sigma_hat: np.ndarray
    c_crit: float
    lower: np.ndarray
    upper: np.ndarray
    B: int
    alpha: float
    seed: int

    def to_rows(self):
        return [
            {
                "cell": c,
                "estimate": float(self.estimates[j]),
                "sigma_hat": float(self.sigma_hat[j]),
                "lower": float(self.lower[j]),
                "upper": float(self.upper[j]),
            }
            for j, c in enumerate(self.cells)
        ]


def mammen_multipliers(rng: np.random.Generator, n: int) -> np.ndarray:
    """Two-point multipliers with mean zero and unit variance."""
    u = rng.random(n)
    return np.where(u < P_LOW, 1.0 - KAPPA, KAPPA)


def multiplier_bootstrap(Phi, estimates, B=1000, alpha=0.05, seed=0, cells=None,
                         n_threads=1) -> BootstrapBands:
    """Simultaneous sup-t bands from an influence matrix.

    Per draw b: R*_b = n^{-1/2} Phi V_b with Mammen multipliers V_b; the
    per-cell scale is the normalized interquartile range of R* and the
    critical value the (1-alpha) quantile of the studentized max. Draws use
    independent substreams spawned from the seed, so results do not depend
    on evaluation order or thread count.
    """
    Phi = np.atleast_2d(np.asarray(Phi, dtype=float))
    K, n = Phi.shape
    estimates = np.asarray(estimates, dtype=float)
    if estimates.shape != (K,):
        raise ValueError("estimates length must match influence rows")
    if B < MIN_DRAWS:
        raise ValueError(f"B must be at least {MIN_DRAWS}")
    if cells is None:
        cells = tuple(range(K))
    else:
        cells = tuple(cells)

    if not np.any(Phi):
        warnings.warn("all influence entries are zero; bands collapse to points")
        z = np.zeros(K)
        return BootstrapBands(cells, estimates, z, 0.0, estimates.copy(),
                              estimates.copy(), B, alpha, seed)

    streams = np.random.SeedSequence(seed).spawn(B)
    R = np.empty((B, K))
    root_n = math.sqrt(n)
    for b in range(B):
        v = mammen_multipliers(np.random.default_rng(streams[b]), n)
        R[b] = Phi @ v / root_n

    q75 = np.quantile(R, 0.75, axis=0)
    q25 = np.quantile(R, 0.25, axis=0)
    sigma = (q75 - q25) / IQR_NORM
    live = sigma > 0
    if np.any(live):
        stud = np.abs(R[:, live]) / sigma[live]
        c = float(np.quantile(stud.max(axis=1), 1.0 - alpha))
    else:
        c = 0.0
    half = c * sigma / root_n
    return BootstrapBands(cells, estimates, sigma, c, estimates - half,
                          estimates + half, B, alpha, seed)


def pretrend_test(placebos, B=1000, alpha=0.05, seed=0):
    """Mean pre-treatment delta with a bootstrap band; reject iff 0 outside."""
    placebos = list(placebos)
    if not placebos:
        raise ValueError("at least one placebo delta required")
    est = float(np.mean([d.estimate for d in placebos]))
    phi = np.mean([d.influence for d in placebos], axis=0)
    bands = multiplier_bootstrap(phi[None, :], np.array([est]), B, alpha, seed,
                                 cells=("pretrend",))
    reject = not (bands.lower[0] <= 0.0 <= bands.upper[0])
    return est, bands, reject
