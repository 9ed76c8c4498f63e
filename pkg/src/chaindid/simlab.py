"""Simulation lab: rotating-panel DGPs, Monte Carlo runner, analytic-variance
oracle for the simple two-group setting, and a small TWFE regression oracle."""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from chaindid.blocks import ControlSpec, cross_section_att, long_did
from chaindid.chain import NonIdentifiedError, fit_chained
from chaindid.panel import PanelDataset
from chaindid.propensity import IdentificationError
from chaindid.summaries import NonIdentifiedSummaryError, theta_dynamic


@dataclass(frozen=True)
class DgpConfig:
    """Rotating-panel simulation design.

    Periods are internally 1..T_effects+2; cohorts occupy 3..T_effects+2.
    Each of the T_effects+1 pair samples draws a population of
    `population_per_period` candidates and retains `n_per_period` sampled
    units observed at that consecutive-period pair (stratified always-
    observed units are observed everywhere).
    """

    T_effects: int = 6
    n_per_period: int = 150
    population_per_period: int = 4800
    sigma_alpha2: float = 2.0
    sigma_eps2: float = 0.5
    rho: float = 0.0
    beta: tuple = (1.75, 1.50, 1.25, 1.00, 0.75, 0.50)
    theta0: float = -1.0
    theta1: float = 0.4
    theta2: float = 0.0
    lambda0: float = -1.0
    lambda1: float = 0.0
    stratification: float = 0.0  # always-observed top share of alpha
    pretreatment_pairs: bool = False

    def __post_init__(self):
        if len(self.beta) != self.T_effects:
            raise ValueError("beta length must equal T_effects")
        if not 0.0 <= self.stratification < 1.0:
            raise ValueError("stratification share must be in [0,1)")

    @classmethod
    def dgp1(cls, **kw):
        return cls(theta2=0.0, lambda1=0.0, **kw)

    @classmethod
    def dgp2(cls, **kw):
        return cls(theta2=0.2, lambda1=0.2, **kw)

    @classmethod
    def dgp3(cls, **kw):
        return cls(theta2=0.2, lambda1=0.2, stratification=0.1, **kw)

    @classmethod
    def dgp4(cls, **kw):
        return cls(theta2=0.2, lambda1=0.2, stratification=0.4, **kw)

    @classmethod
    def numbered(cls, number: int, **kw):
        return {1: cls.dgp1, 2: cls.dgp2, 3: cls.dgp3, 4: cls.dgp4}[number](**kw)

    def fingerprint(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


class SimulationError(RuntimeError):
    pass


def simulate_dgp(config: DgpConfig, seed=0) -> PanelDataset:
    """One replication of the rotating-panel design.

    Pair sample tau = 1..T_effects+1 covers internal periods (tau, tau+1).
    Candidates in pair sample tau carry a uniform candidate cohort among
    the cohorts already treated by then; the treatment logit decides
    cohort membership versus never-treated.
    """
    rng = np.random.default_rng(seed) if not isinstance(seed, np.random.Generator) else seed
    Teff = config.T_effects
    T = Teff + 2
    n_pairs = Teff + 1
    N = config.population_per_period
    n_draw = config.n_per_period
    beta = np.asarray(config.beta, dtype=float)
    delta = rng.normal(1.0, 1.0, T)

    ys, masks, cohorts, xs, ids = [], [], [], [], []
    for tau in range(1, n_pairs + 1):
        alpha = rng.normal(1.0, math.sqrt(config.sigma_alpha2), N)
        x = rng.normal(1.0, 1.0, N)
        cohort = np.zeros(N, dtype=np.int64)
        if config.pretreatment_pairs:
            cand = rng.integers(3, T + 1, N)
        elif tau >= 2:
            cand = rng.integers(3, tau + 2, N)  # cohorts treated by period tau+1
        else:
            cand = None
        if cand is not None:
            p_treat = expit(-(config.theta0 + config.theta1 * x)
                            + config.theta2 * alpha * (cand - 1))
            cohort = np.where(rng.random(N) < p_treat, cand, 0)

        # pair-sampling event for the rotating stratum; paper-time index tau-1
        p_s = expit(-config.lambda0 + config.lambda1 * alpha * (tau - 1))
        sampled_flag = rng.random(N) < p_s
        balanced = np.zeros(N, dtype=bool)
        if config.stratification > 0.0:
            thr = np.quantile(alpha, 1.0 - config.stratification)
            balanced = alpha >= thr
            sampled_flag = sampled_flag | balanced

        elig = np.flatnonzero(sampled_flag)
        if elig.size < n_draw:
            raise SimulationError(
                f"pair sample {tau}: only {elig.size} eligible units for {n_draw} draws"
            )
        drawn = rng.choice(elig, size=n_draw, replace=False)

        m = np.zeros((n_draw, T), dtype=bool)
        rot = ~balanced[drawn]
        m[rot, tau - 1] = True
        m[rot, tau] = True
        m[~rot, :] = True

        a_d = alpha[drawn]
        g_d = cohort[drawn]
        eff = np.zeros((n_draw, T))
        tgrid = np.arange(1, T + 1)
        treated = g_d > 0
        if np.any(treated):
            ev = tgrid[None, :] - g_d[treated, None]  # event time
            post = ev >= 0
            ev_idx = np.clip(ev, 0, Teff - 1)
            eff[treated] = np.where(post, beta[ev_idx], 0.0)
        eps = rng.normal(0.0, math.sqrt(config.sigma_eps2), (n_draw, T))
        y = a_d[:, None] + delta[None, :] + eff + eps

        ys.append(np.where(m, y, np.nan))
        masks.append(m)
        cohorts.append(g_d)
        xs.append(x[drawn])
        ids.extend(f"p{tau}u{j}" for j in range(n_draw))

    return PanelDataset(
        ids,
        np.vstack(ys),
        np.vstack(masks),
        np.concatenate(cohorts),
        covariates=np.concatenate(xs)[:, None],
        covariate_names=("x1",),
    )


def _balanced_subpanel(data: PanelDataset) -> PanelDataset | None:
    keep = data.obs_counts() == data.T
    if not np.any(keep):
        return None
    sc = None if data.sampling_covariates is None else data.sampling_covariates[keep]
    return PanelDataset(
        [data.units[i] for i in np.flatnonzero(keep)],
        data.y[keep],
        data.sampled[keep],
        data.cohort[keep],
        covariates=data.covariates[keep],
        sampling_covariates=sc,
        period_offset=data.period_offset,
        covariate_names=data.covariate_names,
        sampling_covariate_names=data.sampling_covariate_names or None,
    )


ESTIMATORS = ("chained", "cd-gmm", "cross-section", "long")


def _cs_view(data: PanelDataset) -> PanelDataset:
    """Repeated-cross-section view of a rotating panel.

    Each unit observed at exactly one consecutive pair is counted only at
    the pair's first period, so the cross-section samples at distinct
    periods are disjoint; pairs ending at the horizon keep the final
    period too (it is observable nowhere else). Units observed more than
    twice keep their full trajectories.
    """
    T = data.T
    sampled = data.sampled.copy()
    two_obs = data.obs_counts() == 2
    first = np.argmax(sampled, axis=1)
    second = np.minimum(first + 1, T - 1)
    consec = two_obs & sampled[np.arange(data.n), second] & (second < T - 1)
    sampled[np.flatnonzero(consec), second[consec]] = False
    return PanelDataset(
        data.units,
        data.y,
        sampled,
        data.cohort,
        covariates=data.covariates,
        sampling_covariates=data.sampling_covariates,
        period_offset=data.period_offset,
        covariate_names=data.covariate_names,
        sampling_covariate_names=data.sampling_covariate_names or None,
    )


def _dynamic_profile(atts, data, n_events):
    out = np.full(n_events, np.nan)
    for e in range(n_events):
        try:
            out[e] = theta_dynamic(atts, data, e=e).estimate
        except (NonIdentifiedSummaryError, ValueError):
            pass
    return out


def estimate_replication(data: PanelDataset, estimators=ESTIMATORS, n_events=None):
    """Dynamic-effect profiles theta_D(e) for each requested estimator."""
    control = ControlSpec("never-treated")
    n_events = n_events or data.T - 2
    out = {}
    for name in estimators:
        try:
            if name == "chained":
                res = fit_chained(data, control, weighting="identity", links="minimal")
                atts = [res.att(g, t) for j, (g, t) in enumerate(res.targets)
                        if res.identified[j]]
                out[name] = _dynamic_profile(atts, data, n_events)
            elif name == "cd-gmm":
                res = fit_chained(data, control, weighting="optimal", links="all")
                atts = [res.att(g, t) for j, (g, t) in enumerate(res.targets)
                        if res.identified[j]]
                out[name] = _dynamic_profile(atts, data, n_events)
            elif name == "cross-section":
                view = _cs_view(data)
                atts = []
                for g in view.cohorts():
                    g = int(g)
                    for t in range(g, view.T + 1):
                        try:
                            atts.append(cross_section_att(view, g, t))
                        except IdentificationError:
                            pass
                out[name] = _dynamic_profile(atts, view, n_events)
            elif name == "long":
                sub = _balanced_subpanel(data)
                if sub is None or len(sub.cohorts()) == 0:
                    out[name] = np.full(n_events, np.nan)
                    continue
                atts = []
                for g in sub.cohorts():
                    g = int(g)
                    for t in range(g, sub.T + 1):
                        try:
                            atts.append(long_did(sub, g, t))
                        except IdentificationError:
                            pass
                out[name] = _dynamic_profile(atts, sub, n_events)
            else:
                raise ValueError(f"unknown estimator {name!r}")
        except (IdentificationError, NonIdentifiedError):
            out[name] = np.full(n_events, np.nan)
    return out


@dataclass
class McReport:
    estimators: tuple
    n_events: int
    reps: int
    means: dict  # name -> array
    sds: dict
    counts: dict
    fingerprint: str
    seed: int

    def to_rows(self):
        rows = []
        for e in range(self.n_events):
            row = {"event_time": e}
            for name in self.estimators:
                row[f"{name}_mean"] = float(self.means[name][e])
                row[f"{name}_sd"] = float(self.sds[name][e])
                row[f"{name}_count"] = int(self.counts[name][e])
            rows.append(row)
        return rows


def monte_carlo(config: DgpConfig, reps: int, estimators=ESTIMATORS, seed=0,
                n_threads=1) -> McReport:
    """Replicate simulate + estimate; deterministic given (seed, reps)."""
    if reps < 2:
        raise ValueError("reps must be at least 2")
    estimators = tuple(estimators)
    n_events = config.T_effects
    streams = np.random.SeedSequence(seed).spawn(reps)

    def one(b):
        data = simulate_dgp(config, np.random.default_rng(streams[b]))
        return estimate_replication(data, estimators, n_events)

    results = [None] * reps
    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as ex:
            for b, res in zip(range(reps), ex.map(one, range(reps))):
                results[b] = res
    else:
        for b in range(reps):
            results[b] = one(b)

    means, sds, counts = {}, {}, {}
    for name in estimators:
        stack = np.vstack([results[b][name] for b in range(reps)])
        ok = np.isfinite(stack)
        cnt = ok.sum(axis=0)
        with np.errstate(invalid="ignore"):
            mu = np.where(cnt > 0, np.nanmean(stack, axis=0), np.nan)
            sd = np.where(cnt > 1, np.nanstd(stack, axis=0, ddof=1), np.nan)
        means[name], sds[name], counts[name] = mu, sd, cnt
    return McReport(estimators, n_events, reps, means, sds, counts,
                    config.fingerprint(), seed)


# ---------------------------------------------------------------------------
# simple two-group setting: analytic variances and matching simulator


def analytic_variances(rho, sigma_eta2, sigma_alpha2, sigma_eps12, p, q, t):
    """Asymptotic (x n) variances of the three estimators in the simple
    two-group rotating design with AR(1) errors."""
    if not (0.0 < p < 1.0 and 0.0 < q < 1.0):
        raise ValueError("p and q must lie strictly inside (0,1)")
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0,1]")
    if t < 2:
        raise ValueError("t must be at least 2")
    base = q * p * (1.0 - p)
    var_cd = 2.0 * (t - 1) * sigma_eta2 / ((1.0 + rho) * base)
    if rho == 1.0:
        var_cs = (1.5 * sigma_eps12 + sigma_alpha2 + (t - 1) * sigma_eta2) / base
    elif rho == 0.0:
        var_cs = (sigma_alpha2 + 1.5 * sigma_eta2) / base
    else:
        var_cs = (sigma_alpha2 + 1.5 * sigma_eta2 / (1.0 - rho * rho)) / base
    taus = np.arange(0, t - 1)
    var_ld = ((rho ** (t - 1) - 1.0) ** 2 * sigma_eps12
              + sigma_eta2 * float(np.sum(rho ** (2 * taus)))) / base
    return {"var_cd": var_cd, "var_cs": var_cs, "var_ld": var_ld}


def simulate_simple(n, t_max, rho, sigma_eta2, sigma_alpha2, sigma_eps12,
                    p=0.5, beta=1.0, seed=0):
    """Simple design: periods 1..t_max+1 (the first is pre-treatment for
    everyone, treatment starts at the second), one consecutive pair per
    rotating unit with uniform pair probability q = 1/t_max, plus an
    independent balanced subpanel of n*q units for the long DiD."""
    rng = np.random.default_rng(seed) if not isinstance(seed, np.random.Generator) else seed
    P = t_max + 1  # columns 0..t_max; treatment switches on at column 2
    q = 1.0 / t_max

    def outcomes(m):
        alpha = rng.normal(0.0, math.sqrt(sigma_alpha2), m)
        treated = rng.random(m) < p
        eps = np.empty((m, P))
        # column 0 enters no estimator; column 1 carries sigma_eps12
        eps[:, 0] = rng.normal(0.0, math.sqrt(sigma_eps12), m)
        eps[:, 1] = rng.normal(0.0, math.sqrt(sigma_eps12), m)
        for j in range(2, P):
            eps[:, j] = rho * eps[:, j - 1] + rng.normal(0.0, math.sqrt(sigma_eta2), m)
        delta = rng.normal(0.0, 1.0, P)
        y = alpha[:, None] + delta[None, :] + eps
        y[treated, 2:] += beta
        return treated, y

    treated, y = outcomes(n)
    pair = rng.integers(1, t_max + 1, n)  # pair j covers periods (j, j+1)
    n_b = max(int(round(n * q)), 2)
    treated_b, y_b = outcomes(n_b)
    return {
        "treated": treated,
        "y": y,
        "pair": pair,
        "treated_b": treated_b,
        "y_b": y_b,
        "q": q,
    }


def _group_diff(vals, treated, sel):
    a = vals[sel & treated]
    b = vals[sel & ~treated]
    if a.size == 0 or b.size == 0:
        raise IdentificationError("empty cell in simple-setting estimator")
    return float(a.mean() - b.mean())


def simple_cd(sample, t):
    """Chained DiD at column t: links over pairs (j-1, j) for j = 2..t."""
    est = 0.0
    for j in range(2, t + 1):
        sel = sample["pair"] == j
        dy = sample["y"][:, j] - sample["y"][:, j - 1]
        est += _group_diff(dy, sample["treated"], sel)
    return est


def simple_cs(sample, t):
    """Cross-section DiD: column-t level difference minus column-1 baseline."""
    pair = sample["pair"]
    t_max = int(pair.max())
    at_t = (pair == t) | (pair == t + 1) if t < t_max else (pair == t)
    at_base = (pair == 1) | (pair == 2)
    hi = _group_diff(sample["y"][:, t], sample["treated"], at_t)
    lo = _group_diff(sample["y"][:, 1], sample["treated"], at_base)
    return hi - lo


def simple_ld(sample, t):
    dy = sample["y_b"][:, t] - sample["y_b"][:, 1]
    return float(dy[sample["treated_b"]].mean() - dy[~sample["treated_b"]].mean())


def simple_monte_carlo(n, t_max, rho, sigma_eta2, sigma_alpha2, sigma_eps12,
                       reps=2000, p=0.5, beta=1.0, seed=0):
    """Monte Carlo variances (x n) of the simple-setting estimators at t_max."""
    streams = np.random.SeedSequence(seed).spawn(reps)
    cd = np.empty(reps)
    cs = np.empty(reps)
    ld = np.empty(reps)
    for b in range(reps):
        s = simulate_simple(n, t_max, rho, sigma_eta2, sigma_alpha2, sigma_eps12,
                            p, beta, np.random.default_rng(streams[b]))
        cd[b] = simple_cd(s, t_max)
        cs[b] = simple_cs(s, t_max)
        ld[b] = simple_ld(s, t_max)
    return {
        "var_cd": float(np.var(cd, ddof=1) * n),
        "var_cs": float(np.var(cs, ddof=1) * n),
        "var_ld": float(np.var(ld, ddof=1) * n),
        "mean_cd": float(cd.mean()),
        "mean_cs": float(cs.mean()),
        "mean_ld": float(ld.mean()),
    }


# ---------------------------------------------------------------------------
# TWFE event-study oracle


def twfe_oracle(data: PanelDataset) -> dict:
    """Event-study least squares with unit and period effects.

    Unit effects are absorbed by within-unit demeaning (exact via
    Frisch-Waugh); period and event-time dummies are solved densely.
    Returns {event_time: coefficient}. Intended for small single-cohort
    panels as a test oracle only.
    """
    if data.n_covariates:
        raise ValueError("oracle supports no covariates")
    cohorts = data.cohorts()
    if len(cohorts) != 1:
        raise ValueError("oracle requires a single treated cohort")
    g = int(cohorts[0])
    T = data.T

    rows_i, rows_t = np.nonzero(data.sampled)
    y = data.y[rows_i, rows_t]
    tt = rows_t + 1
    ev = tt - g
    is_treated = data.cohort[rows_i] == g
    events = sorted(set(int(e) for e in ev[is_treated]) - {-1})

    cols = []
    names = []
    for t in range(2, T + 1):
        cols.append((tt == t).astype(float))
        names.append(("period", t))
    # leads and lags both enter so e = -1 is the lone reference period
    for e in events:
        cols.append((is_treated & (ev == e)).astype(float))
        names.append(("event", e))
    X = np.column_stack(cols)

    # demean within unit
    nobs = np.bincount(rows_i, minlength=data.n).astype(float)
    def demean(v):
        sums = np.bincount(rows_i, weights=v, minlength=data.n)
        return v - (sums / np.maximum(nobs, 1.0))[rows_i]

    yd = demean(y)
    Xd = np.column_stack([demean(X[:, j]) for j in range(X.shape[1])])
    coef, _, rank, _ = np.linalg.lstsq(Xd, yd, rcond=None)
    if rank < Xd.shape[1]:
        raise ValueError("collinear event-study design")
    return {e: float(coef[names.index(("event", e))]) for e in events if e >= 0}


# ---------------------------------------------------------------------------
# MAR-X attrition design (sampling depends on an observable covariate)


def simulate_marx(n=4000, seed=0, sampling_slope=0.5, effect_slope=0.8,
                  beta=(1.0, 0.8)):
    """Three-period design with X-dependent pair sampling and X-heterogeneous
    effects; returns (dataset over the full population, true dynamic effects).

    Pair (1,2) and pair (2,3) sampling events are independent logits in X,
    so the missing-at-random-on-X correction is exactly specified. The
    truth is the population average effect among treated units.
    """
    rng = np.random.default_rng(seed) if not isinstance(seed, np.random.Generator) else seed
    T = 3
    x = rng.normal(1.0, 1.0, n)
    alpha = rng.normal(1.0, 1.0, n)
    treated = rng.random(n) < expit(-1.0 + 0.4 * x)
    cohort = np.where(treated, 2, 0).astype(np.int64)
    delta = rng.normal(1.0, 1.0, T)
    eps = rng.normal(0.0, math.sqrt(0.5), (n, T))
    het = 1.0 + effect_slope * (x - 1.0)
    y = alpha[:, None] + delta[None, :] + eps
    for e, b in enumerate(beta):
        t = 2 + e
        y[:, t - 1] += np.where(treated, b * het, 0.0)

    s1 = rng.random(n) < expit(0.2 + sampling_slope * x)
    s2 = rng.random(n) < expit(0.2 + sampling_slope * x)
    sampled = np.zeros((n, T), dtype=bool)
    sampled[:, 0] = s1
    sampled[:, 1] = s1 | s2
    sampled[:, 2] = s2

    data = PanelDataset(
        [f"u{i}" for i in range(n)],
        np.where(sampled, y, np.nan),
        sampled,
        cohort,
        covariates=x[:, None],
        covariate_names=("x1",),
    )
    truth = np.array([b * float(het[treated].mean()) for b in beta])
    return data, truth
