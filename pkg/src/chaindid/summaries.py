"""Summary parameters aggregating ATT(g,t) with estimated-share corrections."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SHARE_SUM_TOL = 1e-6


@dataclass(frozen=True)
class SummaryEstimate:
    kind: str
    estimate: float
    influence: np.ndarray
    weights: dict  # (g,t) -> weight


class NonIdentifiedSummaryError(ValueError):
    pass


def _att_map(atts):
    out = {}
    for a in atts:
        out[(a.g, a.t)] = a
    return out


def _check_external(shares: dict):
    total = sum(shares.values())
    if abs(total - 1.0) > SHARE_SUM_TOL:
        raise ValueError(f"external cohort shares sum to {total}, expected 1")


def _cohort_counts(data, cohorts):
    return {g: float(np.sum(data.cohort == g)) for g in cohorts}


def _require(att_map, g, t):
    if (g, t) not in att_map:
        raise NonIdentifiedSummaryError(f"ATT({g},{t}) unavailable")
    return att_map[(g, t)]


def _share_weights(data, cohorts, shares):
    """Per-cohort weights among `cohorts` plus the ratio-influence pieces.

    Returns (weights dict, xi dict) where xi[g] is the per-unit influence
    of the estimated share, identically zero for external shares.
    """
    n = data.n
    if isinstance(shares, dict):
        sub = {g: shares.get(g, 0.0) for g in cohorts}
        tot = sum(sub.values())
        if tot <= 0:
            raise ValueError("external shares assign zero mass to required cohorts")
        w = {g: sub[g] / tot for g in cohorts}
        xi = {g: np.zeros(n) for g in cohorts}
        return w, xi
    counts = _cohort_counts(data, cohorts)
    denom_mask = np.isin(data.cohort, list(cohorts))
    m = float(denom_mask.mean())
    if m == 0:
        raise ValueError("no unit in the required cohorts")
    w = {g: counts[g] / (m * n) for g in cohorts}
    xi = {}
    for g in cohorts:
        gi = (data.cohort == g).astype(float)
        xi[g] = (gi - w[g] * denom_mask.astype(float)) / m
    return w, xi


def theta_selective(atts, data, g=None, shares="observed") -> SummaryEstimate:
    """Average effect over post-treatment periods, per cohort or overall."""
    att_map = _att_map(atts)
    T = data.T
    if isinstance(shares, dict):
        _check_external(shares)

    def per_cohort(gc):
        span = T - gc + 1
        est = 0.0
        phi = np.zeros(data.n)
        for t in range(gc, T + 1):
            a = _require(att_map, gc, t)
            est += a.estimate / span
            phi += a.influence / span
        return est, phi, span

    if g is not None:
        est, phi, _ = per_cohort(g)
        return SummaryEstimate(f"selective({g})", est, phi - phi.mean(),
                               {(g, t): 1.0 / (T - g + 1) for t in range(g, T + 1)})

    cohorts = [int(c) for c in data.cohorts()]
    w, xi = _share_weights(data, cohorts, shares)
    est = 0.0
    phi = np.zeros(data.n)
    weights = {}
    for gc in cohorts:
        eg, pg, span = per_cohort(gc)
        est += w[gc] * eg
        phi += w[gc] * pg + xi[gc] * eg
        for t in range(gc, T + 1):
            weights[(gc, t)] = w[gc] / span
    return SummaryEstimate("selective", est, phi - phi.mean(), weights)


def theta_dynamic(atts, data, e=None, shares="observed", e_start=0) -> SummaryEstimate:
    """Average effect at exposure length e; overall averages e over its range."""
    att_map = _att_map(atts)
    T = data.T
    if isinstance(shares, dict):
        _check_external(shares)

    def at_exposure(ev):
        if ev < 0 or ev > T - 2:
            raise ValueError(f"event time {ev} outside 0..{T - 2}")
        cohorts = [int(c) for c in data.cohorts() if int(c) + ev <= T]
        if not cohorts:
            raise NonIdentifiedSummaryError(f"no cohort observed at exposure {ev}")
        w, xi = _share_weights(data, cohorts, shares)
        est = 0.0
        phi = np.zeros(data.n)
        weights = {}
        for gc in cohorts:
            a = _require(att_map, gc, gc + ev)
            est += w[gc] * a.estimate
            phi += w[gc] * a.influence + xi[gc] * a.estimate
            weights[(gc, gc + ev)] = w[gc]
        return est, phi, weights

    if e is not None:
        est, phi, weights = at_exposure(e)
        return SummaryEstimate(f"dynamic({e})", est, phi - phi.mean(), weights)

    max_e = T - min(int(c) for c in data.cohorts())
    evs = range(e_start, min(T - 2, max_e) + 1)
    m = len(evs)
    if m == 0:
        raise NonIdentifiedSummaryError(
            f"no exposure length available from e_start={e_start}")
    est = 0.0
    phi = np.zeros(data.n)
    weights = {}
    for ev in evs:
        eg, pg, wg = at_exposure(ev)
        est += eg / m
        phi += pg / m
        for key, v in wg.items():
            weights[key] = weights.get(key, 0.0) + v / m
    return SummaryEstimate("dynamic", est, phi - phi.mean(), weights)


def theta_calendar(atts, data, t=None, shares="observed") -> SummaryEstimate:
    """Average effect among treated cohorts at period t; overall averages t."""
    att_map = _att_map(atts)
    T = data.T
    if isinstance(shares, dict):
        _check_external(shares)

    def at_period(tp):
        if tp < 2:
            raise ValueError("calendar summary needs t >= 2")
        cohorts = [int(c) for c in data.cohorts() if int(c) <= tp]
        if not cohorts:
            raise NonIdentifiedSummaryError(f"no treated cohort at period {tp}")
        w, xi = _share_weights(data, cohorts, shares)
        est = 0.0
        phi = np.zeros(data.n)
        weights = {}
        for gc in cohorts:
            a = _require(att_map, gc, tp)
            est += w[gc] * a.estimate
            phi += w[gc] * a.influence + xi[gc] * a.estimate
            weights[(gc, tp)] = w[gc]
        return est, phi, weights

    if t is not None:
        est, phi, weights = at_period(t)
        return SummaryEstimate(f"calendar({t})", est, phi - phi.mean(), weights)

    first = min(int(c) for c in data.cohorts())
    periods = range(max(first, 2), T + 1)
    m = len(periods)
    est = 0.0
    phi = np.zeros(data.n)
    weights = {}
    for tp in periods:
        eg, pg, wg = at_period(tp)
        est += eg / m
        phi += pg / m
        for key, v in wg.items():
            weights[key] = weights.get(key, 0.0) + v / m
    return SummaryEstimate("calendar", est, phi - phi.mean(), weights)
