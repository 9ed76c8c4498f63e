"""Treatment propensity and sampling-probability models with score influence."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, ndtr

MAX_ITER = 100
GRAD_TOL = 1e-9
MAX_HALVINGS = 30
SEPARATION_INDEX = 30.0
RIDGE_FACTOR = 1e-4
P_CLIP = 1e-6
Q_CLIP = 1e-3

_SQRT_2PI = math.sqrt(2.0 * math.pi)


class DegenerateModelError(ValueError):
    """Label constant on the estimation subset; no slope is identified."""


class IdentificationError(ValueError):
    """An estimator cell has no usable treated or control units."""


def _norm_pdf(x):
    return np.exp(-0.5 * x * x) / _SQRT_2PI


def _link_funcs(link: str):
    if link == "logit":
        def mu(eta):
            return expit(eta)

        def dmu(eta):
            p = expit(eta)
            return p * (1.0 - p)

    elif link == "probit":
        def mu(eta):
            return ndtr(eta)

        def dmu(eta):
            return _norm_pdf(eta)

    else:
        raise ValueError(f"unknown link {link!r}")
    return mu, dmu


@dataclass(frozen=True)
class LinkModel:
    link: str
    coefficients: np.ndarray
    converged: bool
    iterations: int
    ridge_used: bool
    n_obs: int = 0

    def predict(self, features: np.ndarray):
        """Return (p, dp): fitted probability and link derivative at the index."""
        mu, dmu = _link_funcs(self.link)
        eta = np.asarray(features, dtype=float) @ self.coefficients
        return mu(eta), dmu(eta)

    def to_dict(self) -> dict:
        return {
            "link": self.link,
            "coefficients": [float(c) for c in self.coefficients],
            "converged": self.converged,
            "iterations": self.iterations,
            "ridge_used": self.ridge_used,
            "n_obs": self.n_obs,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LinkModel":
        return cls(
            link=d["link"],
            coefficients=np.asarray(d["coefficients"], dtype=float),
            converged=bool(d["converged"]),
            iterations=int(d["iterations"]),
            ridge_used=bool(d["ridge_used"]),
            n_obs=int(d.get("n_obs", 0)),
        )


def _loglik(eta, y, link):
    if link == "logit":
        # numerically stable: -log(1+exp(-eta)) for y=1, -log(1+exp(eta)) for y=0
        return float(np.sum(y * eta - np.logaddexp(0.0, eta)))
    p = np.clip(ndtr(eta), 1e-12, 1 - 1e-12)
    return float(np.sum(y * np.log(p) + (1 - y) * np.log1p(-p)))


def fit_link(features, labels, subset=None, link="logit", ridge=0.0) -> LinkModel:
    """Newton-Raphson binomial MLE with step-halving and a ridge fallback.

    features must already carry the intercept column. subset selects the
    estimation rows; labels must take both values on it.
    """
    X = np.asarray(features, dtype=float)
    if X.ndim != 2:
        raise ValueError("features must be a 2-d design matrix")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite feature value")
    y = np.asarray(labels, dtype=float)
    if subset is None:
        subset = np.ones(X.shape[0], dtype=bool)
    subset = np.asarray(subset, dtype=bool)
    Xs = X[subset]
    ys = y[subset]
    nsub, k1 = Xs.shape
    if nsub < k1 + 1:
        raise DegenerateModelError(
            f"subset has {nsub} rows, fewer than {k1 + 1} needed for {k1} coefficients"
        )
    if ys.min() == ys.max():
        raise DegenerateModelError("labels are constant on the estimation subset")

    mu, dmu = _link_funcs(link)
    beta = np.zeros(k1)
    ll = _loglik(Xs @ beta, ys, link) - 0.5 * ridge * beta @ beta
    converged = False
    separated = False
    it = 0
    for it in range(1, MAX_ITER + 1):
        eta = Xs @ beta
        if np.max(np.abs(eta)) > SEPARATION_INDEX and ridge == 0.0:
            separated = True
            break
        p = mu(eta)
        d = dmu(eta)
        if link == "logit":
            grad = Xs.T @ (ys - p) - ridge * beta
            w = p * (1.0 - p)
        else:
            pc = np.clip(p, 1e-12, 1 - 1e-12)
            resid = d * (ys - pc) / (pc * (1 - pc))
            grad = Xs.T @ resid - ridge * beta
            w = d * d / (pc * (1 - pc))
        if np.max(np.abs(grad)) <= GRAD_TOL:
            converged = True
            break
        H = (Xs * w[:, None]).T @ Xs + ridge * np.eye(k1)
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            separated = True
            break
        new = beta + step
        new_ll = _loglik(Xs @ new, ys, link) - 0.5 * ridge * new @ new
        h = 0
        while not np.isfinite(new_ll) or new_ll < ll - 1e-12:
            h += 1
            if h > MAX_HALVINGS:
                break
            step *= 0.5
            new = beta + step
            new_ll = _loglik(Xs @ new, ys, link) - 0.5 * ridge * new @ new
        if h > MAX_HALVINGS:
            break
        beta, ll = new, new_ll

    if separated and ridge == 0.0:
        m = fit_link(X, y, subset, link, ridge=RIDGE_FACTOR * nsub)
        return LinkModel(link, m.coefficients, m.converged, m.iterations, True, nsub)
    return LinkModel(link, beta, converged, it, ridge > 0.0, nsub)


@dataclass(frozen=True)
class PropensityFit:
    model: LinkModel | None
    g: int
    control: str
    t: int | None
    fitted: np.ndarray  # p-hat for every unit, clipped into (P_CLIP, 1-P_CLIP)
    derivative: np.ndarray
    estimation_subset: np.ndarray  # bool, {G_g=1} union control pool
    clip_events: int
    n_covariates: int

    def to_dict(self) -> dict:
        return {
            "g": self.g,
            "control": self.control,
            "t": self.t,
            "clip_events": self.clip_events,
            "n_covariates": self.n_covariates,
            "model": None if self.model is None else self.model.to_dict(),
        }


def _control_pool(data, control: str, t: int | None) -> np.ndarray:
    if control == "never-treated":
        pool = data.never_treated()
    elif control == "not-yet-treated":
        if t is None:
            raise ValueError("not-yet-treated control requires a period t")
        pool = data.not_yet_treated(t)
    else:
        raise ValueError(f"unknown control kind {control!r}")
    return pool


def fit_group_propensity(data, g, control="never-treated", t=None, link="logit") -> PropensityFit:
    """Fit p_g on cohort-g plus control-pool units, evaluated for all units.

    With zero covariates the score is the exact sample proportion of
    cohort-g units within the pooled subset, so no iterative fit runs.
    """
    Gg = data.group(g)
    n_g = int(Gg.sum())
    if n_g == 0:
        raise IdentificationError(f"cohort {g} is empty")
    pool = _control_pool(data, control, t)
    pool = pool & ~Gg
    n_c = int(pool.sum())
    if n_c == 0:
        raise IdentificationError(
            f"empty control pool for cohort g={g}"
            + (f" at t={t}" if t is not None else "")
        )
    subset = Gg | pool
    n = data.n
    k = data.n_covariates
    if k == 0:
        phat = n_g / (n_g + n_c)
        fitted = np.full(n, phat)
        if link == "logit":
            deriv = np.full(n, phat * (1.0 - phat))
        else:
            deriv = np.full(n, float(_norm_pdf(np.array([_probit_inv(phat)]))[0]))
        return PropensityFit(None, g, control, t, fitted, deriv, subset, 0, 0)

    X = np.column_stack([np.ones(n), data.covariates])
    model = fit_link(X, Gg.astype(float), subset, link)
    p, dp = model.predict(X)
    clip = int(np.sum((p <= P_CLIP) | (p >= 1 - P_CLIP)))
    p = np.clip(p, P_CLIP, 1 - P_CLIP)
    return PropensityFit(model, g, control, t, p, dp, subset, clip, k)


def _probit_inv(p: float) -> float:
    from scipy.special import ndtri

    return float(ndtri(p))


def propensity_influence(fit: PropensityFit, data) -> np.ndarray:
    """Score influence xi^pi of the propensity MLE, one row per unit.

    Rows vanish off the estimation subset; the information term is an
    empirical mean over all n units (subset indicator inside).
    """
    n = data.n
    sub = fit.estimation_subset.astype(float)
    p = fit.fitted
    dp = fit.derivative
    if fit.n_covariates == 0:
        X = np.ones((n, 1))
    else:
        X = np.column_stack([np.ones(n), data.covariates])
    Gg = data.group(fit.g).astype(float)
    w_info = sub * dp * dp / (p * (1.0 - p))
    A = (X * w_info[:, None]).T @ X / n
    try:
        Ainv = np.linalg.inv(A)
    except np.linalg.LinAlgError:
        import warnings

        warnings.warn("singular information matrix; using pseudo-inverse")
        Ainv = np.linalg.pinv(A)
    score = sub * (Gg - p) * dp / (p * (1.0 - p))
    return (X * score[:, None]) @ Ainv.T


# ---------------------------------------------------------------------------
# attrition / sampling models


def _parse_feature_spec(spec):
    """Feature-spec: list of column names with optional transform prefixes
     'log1p:' and the special token 'lag:y' for the lagged outcome."""
    out = []
    for item in spec:
        s = str(item)
        transform = None
        if s.startswith("log1p:"):
            transform = "log1p"
            s = s[len("log1p:"):]
        out.append((s, transform))
    return out


def _build_features(data, t, k, spec, include_lag_y: bool):
    """Design matrix for the sampling model of pair (t-k, t)."""
    n = data.n
    cols = [np.ones(n)]
    names = ["intercept"]
    xnames = list(data.covariate_names)
    znames = list(data.sampling_covariate_names)
    for name, transform in spec:
        if name == "lag:y":
            continue  # handled separately for SMAR stage 2
        if name in xnames:
            v = data.covariates[:, xnames.index(name)].copy()
        elif name in znames:
            if data.sampling_covariates is None:
                raise ValueError(f"feature {name!r} needs sampling covariates")
            v = data.sampling_covariates[:, t - 1, znames.index(name)].copy()
            v = np.where(np.isfinite(v), v, 0.0)
        else:
            raise ValueError(f"unknown feature column {name!r}")
        if transform == "log1p":
            v = np.log1p(v)
        cols.append(v)
        names.append(name)
    if include_lag_y:
        ylag = data.y[:, t - k - 1]
        cols.append(np.where(np.isfinite(ylag), ylag, 0.0))
        names.append("lag:y")
    return np.column_stack(cols), names


@dataclass
class SamplingFit:
    variant: str  # "mar-x" or "smar"
    feature_spec: tuple
    models: dict = field(default_factory=dict)  # (role, t, k) -> LinkModel or tuple
    fallbacks: dict = field(default_factory=dict)
    clip_events: int = 0

    def to_dict(self) -> dict:
        def enc(v):
            if isinstance(v, tuple):
                return [m.to_dict() for m in v]
            return v.to_dict()

        return {
            "variant": self.variant,
            "feature_spec": ["|".join(filter(None, (tr, nm))) if tr else nm for nm, tr in self.feature_spec],
            "clip_events": self.clip_events,
            "models": {f"{r},{t},{k}": enc(m) for (r, t, k), m in self.models.items()},
            "fallbacks": {f"{r},{t},{k}": msg for (r, t, k), msg in self.fallbacks.items()},
        }


def fit_sampling_model(data, variant="mar-x", features=()) -> SamplingFit:
    """Prepare an attrition-probability model; fits are lazy per (role, pair)."""
    if variant not in ("mar-x", "smar"):
        raise ValueError(f"unknown attrition variant {variant!r}")
    spec = tuple(_parse_feature_spec(features))
    return SamplingFit(variant, spec)


def sampling_qhat(sfit: SamplingFit, data, role, members, t, k) -> np.ndarray:
    """q-hat for the pair-sampling event S_{t-k} * S_t = 1, per unit.

    role tags the cache key (e.g. ("G", g) or ("C", g)); members is the
    boolean estimation pool for that role. Degenerate cells (all or none
    sampled) fall back to q-hat = 1 with a warning recorded, which reduces
    the modified weights to the unadjusted ones.
    """
    import warnings

    key = (role, t, k)
    if key not in sfit.models and key not in sfit.fallbacks:
        _fit_sampling_cell(sfit, data, key, members, t, k)
    if key in sfit.fallbacks:
        return np.ones(data.n)
    n = data.n
    if sfit.variant == "mar-x":
        model = sfit.models[key]
        X, _ = _build_features(data, t, k, sfit.feature_spec, include_lag_y=False)
        q, _ = model.predict(X)
    else:
        m1, m2 = sfit.models[key]
        X1, _ = _build_features(data, t, k, sfit.feature_spec, include_lag_y=False)
        q1, _ = m1.predict(X1)  # P(S_{t-k}=1 | X)
        X2, _ = _build_features(data, t, k, sfit.feature_spec, include_lag_y=True)
        q2, _ = m2.predict(X2)  # P(S_t=1 | X, Y_{t-k}, S_{t-k}=1)
        q = q1 * q2
    below = int(np.sum(q < Q_CLIP))
    if below:
        warnings.warn(f"{below} q-hat values clipped at {Q_CLIP} for cell {key}")
        sfit.clip_events += below
    return np.clip(q, Q_CLIP, 1.0)


def _fit_sampling_cell(sfit: SamplingFit, data, key, members, t, k) -> None:
    members = np.asarray(members, dtype=bool)
    try:
        if sfit.variant == "mar-x":
            X, _ = _build_features(data, t, k, sfit.feature_spec, include_lag_y=False)
            label = data.observation_mask(t, k).astype(float)
            sfit.models[key] = fit_link(X, label, members, "logit")
        else:
            X1, _ = _build_features(data, t, k, sfit.feature_spec, include_lag_y=False)
            lab1 = data.single_period_mask(t - k).astype(float)
            m1 = fit_link(X1, lab1, members, "logit")
            X2, _ = _build_features(data, t, k, sfit.feature_spec, include_lag_y=True)
            lab2 = data.single_period_mask(t).astype(float)
            sub2 = members & data.single_period_mask(t - k)
            m2 = fit_link(X2, lab2, sub2, "logit")
            sfit.models[key] = (m1, m2)
    except DegenerateModelError as e:
        import warnings

        warnings.warn(f"sampling model degenerate for cell {key}: {e}; using unadjusted weights")
        sfit.fallbacks[key] = str(e)
