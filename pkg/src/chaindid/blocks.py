"""Estimator building blocks: short/long difference group-time ATTs with
Horvitz-Thompson weights, cross-section baseline, and placebo deltas."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from chaindid.propensity import (
    IdentificationError,
    PropensityFit,
    SamplingFit,
    fit_group_propensity,
    propensity_influence,
    sampling_qhat,
)

MEAN_ZERO_TOL = 1e-10


@dataclass(frozen=True)
class ControlSpec:
    kind: str = "never-treated"

    def __post_init__(self):
        aliases = {
            "never": "never-treated",
            "never-treated": "never-treated",
            "notyet": "not-yet-treated",
            "not-yet-treated": "not-yet-treated",
        }
        if self.kind not in aliases:
            raise ValueError(f"unknown control kind {self.kind!r}")
        object.__setattr__(self, "kind", aliases[self.kind])

    def pool(self, data, g: int, t: int) -> np.ndarray:
        """Boolean control pool for cohort g evaluated at period t."""
        if self.kind == "never-treated":
            pool = data.never_treated()
        else:
            pool = data.not_yet_treated(t)
        return pool & ~data.group(g)


@dataclass(frozen=True)
class DeltaAtt:
    g: int
    t: int
    k: int
    estimate: float
    influence: np.ndarray
    n_treated_pair: int
    n_control_pair: int
    fingerprint: str = ""


@dataclass(frozen=True)
class AttEstimate:
    g: int
    t: int
    estimate: float
    influence: np.ndarray
    method: str


def _prop_fit(data, g, control: ControlSpec, t, pfit):
    if pfit is not None:
        return pfit
    t_arg = t if control.kind == "not-yet-treated" else None
    return fit_group_propensity(data, g, control.kind, t_arg)


def block_weights(data, g, t, k=1, control=ControlSpec(), pfit=None, sfit=None):
    """Normalized treated/control weight vectors for the (t-k, t) pair.

    Both vectors average to one over all n units. With a sampling fit the
    numerators are premultiplied by the stabilized inverse pair-sampling
    probability before normalization.
    """
    pfit = _prop_fit(data, g, control, t, pfit)
    S = data.observation_mask(t, k)
    Gg = data.group(g)
    pool = control.pool(data, g, t)

    num_g = (Gg & S).astype(float)
    if num_g.sum() == 0:
        raise IdentificationError(
            f"no cohort-{g} unit observed at both {t - k} and {t}"
        )
    p = pfit.fitted
    num_c = np.where(pool & S, p / (1.0 - p), 0.0)
    if not np.any(num_c):
        raise IdentificationError(
            f"no control unit observed at both {t - k} and {t} for cohort {g}"
        )
    if sfit is not None:
        qg = sampling_qhat(sfit, data, ("G", g), Gg, t, k)
        tag = g if control.kind == "not-yet-treated" else 0
        qc = sampling_qhat(sfit, data, ("C", control.kind, tag), pool, t, k)
        num_g = num_g / qg
        num_c = num_c / qc
    wg = num_g / num_g.mean()
    wc = num_c / num_c.mean()
    return wg, wc


def _pair_diff(data, t, k):
    S = data.observation_mask(t, k)
    dy = np.where(S, data.y[:, t - 1] - data.y[:, t - k - 1], 0.0)
    return S, dy


def delta_att(data, g, t, k=1, control=ControlSpec(), pfit=None, sfit=None) -> DeltaAtt:
    """k-period-difference group-time ATT with its per-unit influence column."""
    pfit = _prop_fit(data, g, control, t, pfit)
    wg, wc = block_weights(data, g, t, k, control, pfit, sfit)
    S, dy = _pair_diff(data, t, k)
    est_g = float(np.mean(wg * dy))
    est_c = float(np.mean(wc * dy))
    psi = wg * (dy - est_g) - wc * (dy - est_c)

    if pfit.n_covariates > 0 and pfit.model is not None:
        pool = control.pool(data, g, t)
        p = pfit.fitted
        dp = pfit.derivative
        cs = (pool & S).astype(float)
        X = np.column_stack([np.ones(data.n), data.covariates])
        denom = float(np.mean(p * cs / (1.0 - p)))
        m = (X * (cs / (1.0 - p) ** 2 * dp * (dy - est_c))[:, None]).mean(axis=0)
        m = m / denom
        xi = propensity_influence(pfit, data)
        psi = psi - xi @ m

    psi = psi - psi.mean()
    assert abs(psi.mean()) < MEAN_ZERO_TOL
    pool = control.pool(data, g, t)
    return DeltaAtt(
        g=g,
        t=t,
        k=k,
        estimate=est_g - est_c,
        influence=psi,
        n_treated_pair=int(np.sum(data.group(g) & S)),
        n_control_pair=int(np.sum(pool & S)),
        fingerprint=f"control={control.kind};attrition={'none' if sfit is None else sfit.variant}",
    )


def long_did(data, g, t, pfit=None, control=ControlSpec()) -> AttEstimate:
    """Long DiD anchored at base period g-1: a single (g-1, t) block."""
    k = t - (g - 1)
    if k < 1:
        raise ValueError(f"t={t} precedes base period {g - 1}")
    try:
        d = delta_att(data, g, t, k, control, pfit)
    except IdentificationError as e:
        raise IdentificationError(
            f"MISSING_LONG_PAIR(g={g},t={t}): {e}"
        ) from None
    return AttEstimate(g=g, t=t, estimate=d.estimate, influence=d.influence, method="long")


def cross_section_att(data, g, t, pfit=None, control=ControlSpec()) -> AttEstimate:
    """Repeated-cross-section DiD: single-period weighted means at t and g-1."""
    pfit = _prop_fit(data, g, control, t, pfit)
    base = g - 1
    if base < 1:
        raise ValueError(f"cohort {g} has no pre-treatment base period")
    Gg = data.group(g)
    pool = control.pool(data, g, t)
    p = pfit.fitted

    psi = np.zeros(data.n)
    est = 0.0
    for tau, sign in ((t, 1.0), (base, -1.0)):
        s = data.single_period_mask(tau)
        ytau = np.where(s, data.y[:, tau - 1], 0.0)
        num_g = (Gg & s).astype(float)
        num_c = np.where(pool & s, p / (1.0 - p), 0.0)
        if num_g.sum() == 0 or not np.any(num_c):
            raise IdentificationError(
                f"no treated or control unit observed at period {tau} for cohort {g}"
            )
        wg = num_g / num_g.mean()
        wc = num_c / num_c.mean()
        mg = float(np.mean(wg * ytau))
        mc = float(np.mean(wc * ytau))
        est += sign * (mg - mc)
        psi += sign * (wg * (ytau - mg) - wc * (ytau - mc))
    psi = psi - psi.mean()
    return AttEstimate(g=g, t=t, estimate=est, influence=psi, method="cross-section")


def placebo_delta(data, g, t, control=ControlSpec(), pfit=None, sfit=None) -> DeltaAtt:
    """Pre-treatment one-period delta for cohort g at pair (t-1, t), t < g."""
    if not 2 <= t < g:
        raise ValueError(f"placebo requires 2 <= t < g, got t={t}, g={g}")
    return delta_att(data, g, t, 1, control, pfit, sfit)
