"""Aggregation of delta blocks into ATT(g,t): plain chaining and GMM solves."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from chaindid.blocks import AttEstimate, ControlSpec, DeltaAtt, delta_att
from chaindid.propensity import IdentificationError, fit_group_propensity

EIG_FLAG_REL = 1e-10
RIDGE_REL = 1e-8
RESID_REL = 1e-8


class NonIdentifiedError(ValueError):
    pass


def chained_att(deltas) -> AttEstimate:
    """Sum consecutive k=1 links tau = g..t for one cohort."""
    deltas = list(deltas)
    if not deltas:
        raise NonIdentifiedError("no links supplied")
    g = deltas[0].g
    if any(d.g != g for d in deltas):
        raise ValueError("links mix cohorts")
    if any(d.k != 1 for d in deltas):
        raise ValueError("chained aggregation needs k=1 links")
    taus = sorted(d.t for d in deltas)
    t = taus[-1]
    missing = [tau for tau in range(g, t + 1) if tau not in taus]
    if missing:
        raise NonIdentifiedError(f"missing chain link at tau={missing[0]} for cohort {g}")
    est = float(sum(d.estimate for d in deltas))
    phi = np.sum([d.influence for d in deltas], axis=0)
    return AttEstimate(g=g, t=t, estimate=est, influence=phi, method="chained")


def build_w(delta_index, target_index) -> np.ndarray:
    """Design matrix of the linear system delta = W att.

    Row for (g,t,k): +1 in column (g,t); -1 in column (g,t-k) when
    t-k >= g, dropped otherwise (ATT at or before g-1 is zero by
    construction).
    """
    col = {gt: j for j, gt in enumerate(target_index)}
    W = np.zeros((len(delta_index), len(target_index)))
    for r, (g, t, k) in enumerate(delta_index):
        if (g, t) not in col:
            raise ValueError(f"target ({g},{t}) absent from target index")
        W[r, col[(g, t)]] = 1.0
        if t - k >= g:
            if (g, t - k) not in col:
                raise ValueError(f"target ({g},{t - k}) absent from target index")
            W[r, col[(g, t - k)]] = -1.0
    return W


def estimate_omega(Psi: np.ndarray):
    """Omega-hat = (1/n) Psi Psi', symmetrized; near-null eigenvalues flagged."""
    n = Psi.shape[1]
    omega = Psi @ Psi.T / n
    omega = 0.5 * (omega + omega.T)
    ev = np.linalg.eigvalsh(omega)
    flags = [int(i) for i in np.where(ev < EIG_FLAG_REL * max(np.trace(omega), 0.0))[0]]
    return omega, flags


def _solve_psd(omega: np.ndarray):
    """Inverse of a PSD matrix via eigendecomposition with a Tikhonov ridge."""
    ev, U = np.linalg.eigh(0.5 * (omega + omega.T))
    mean_ev = float(np.mean(np.abs(ev))) or 1.0
    ridge = RIDGE_REL * mean_ev
    bad = ev <= ridge
    if np.any(bad):
        warnings.warn("ill-conditioned covariance; Tikhonov ridge applied")
        ev = ev + ridge
    return U @ np.diag(1.0 / ev) @ U.T


@dataclass
class GmmSystem:
    delta_index: list
    target_index: list
    W: np.ndarray
    delta_estimates: np.ndarray
    Psi: np.ndarray
    weighting: str = "optimal"
    Omega: np.ndarray | None = None
    omega_flags: list = field(default_factory=list)
    solution: np.ndarray | None = None
    Sigma: np.ndarray | None = None
    Phi: np.ndarray | None = None
    non_identified: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "delta_index": [list(d) for d in self.delta_index],
            "target_index": [list(t) for t in self.target_index],
            "W": self.W.tolist(),
            "delta_estimates": self.delta_estimates.tolist(),
            "weighting": self.weighting,
            "omega_flags": self.omega_flags,
            "solution": None if self.solution is None else self.solution.tolist(),
            "Sigma": None if self.Sigma is None else self.Sigma.tolist(),
            "non_identified": self.non_identified,
        }


def gmm_solve(system: GmmSystem) -> GmmSystem:
    """Solve delta = W att by (optionally Omega-weighted) GMM.

    Targets whose W column is identically zero are non-identified; the
    solve then goes through a Moore-Penrose pseudo-inverse and those
    entries are flagged.
    """
    W = system.W
    L_d, L = W.shape
    n = system.Psi.shape[1]
    if system.weighting == "optimal":
        if system.Omega is None:
            system.Omega, system.omega_flags = estimate_omega(system.Psi)
        omega_inv = _solve_psd(system.Omega)
    elif system.weighting == "identity":
        omega_inv = np.eye(L_d)
    else:
        raise ValueError(f"unknown weighting {system.weighting!r}")

    # a target is non-identified when the canonical basis vector of its
    # column has a component in the nullspace of W
    _, sv, Vt = np.linalg.svd(W)
    tol = max(W.shape) * np.finfo(float).eps * (sv[0] if sv.size else 0.0)
    null_rows = Vt[np.sum(sv > tol):]
    dead = (
        np.zeros(L, dtype=bool)
        if null_rows.size == 0
        else np.linalg.norm(null_rows, axis=0) > 1e-8
    )
    zero_cols = [j for j in range(L) if dead[j]]
    system.non_identified = [system.target_index[j] for j in zero_cols]
    A = W.T @ omega_inv @ W
    b = W.T @ omega_inv @ system.delta_estimates
    if zero_cols:
        warnings.warn("non-identified targets present; Moore-Penrose solve")
        Ainv = np.linalg.pinv(A)
    else:
        Ainv = _solve_psd(A)
    system.solution = Ainv @ b
    system.Sigma = Ainv
    system.Phi = Ainv @ W.T @ omega_inv @ system.Psi

    resid = W.T @ omega_inv @ (system.delta_estimates - W @ system.solution)
    if zero_cols:
        keep = [j for j in range(L) if j not in zero_cols]
        resid = resid[keep]
    scale = max(np.linalg.norm(system.delta_estimates), 1.0)
    if resid.size and np.max(np.abs(resid)) > RESID_REL * scale:
        warnings.warn("GMM normal equations residual above tolerance")
    return system


@dataclass
class ChainedResult:
    targets: list  # (g,t)
    estimates: np.ndarray
    Phi: np.ndarray  # L x n
    method: str
    identified: np.ndarray  # bool per target
    system: GmmSystem | None = None
    deltas: list = field(default_factory=list)
    Sigma: np.ndarray | None = None

    def att(self, g, t) -> AttEstimate:
        j = self.targets.index((g, t))
        return AttEstimate(g, t, float(self.estimates[j]), self.Phi[j], self.method)


def _default_delta_index(data, links="minimal"):
    out = []
    T = data.T
    for g in data.cohorts():
        g = int(g)
        if links == "minimal":
            out.extend((g, t, 1) for t in range(g, T + 1))
        else:
            for t in range(g, T + 1):
                for k in range(1, t):
                    out.append((g, t, k))
    return out


def fit_chained(data, control=ControlSpec(), weighting="identity", links="minimal",
                sfit=None, link="logit"):
    """Estimate all ATT(g,t) by chained/GMM aggregation of delta blocks.

    links "minimal" uses only one-period chains; "all" adds every k-period
    block whose pair cells are nonempty. Infeasible blocks are skipped;
    targets left with no information are reported non-identified.
    """
    T = data.T
    n = data.n
    targets = [(int(g), t) for g in data.cohorts() for t in range(int(g), T + 1)]
    pfits = {}

    def pfit_for(g, t):
        key = (g, t) if control.kind == "not-yet-treated" else (g, None)
        if key not in pfits:
            t_arg = t if control.kind == "not-yet-treated" else None
            pfits[key] = fit_group_propensity(data, g, control.kind, t_arg, link)
        return pfits[key]

    deltas = []
    for g, t, k in _default_delta_index(data, links):
        try:
            deltas.append(delta_att(data, g, t, k, control, pfit_for(g, t), sfit))
        except IdentificationError:
            continue
    if not deltas:
        raise NonIdentifiedError("no identifiable delta block in the data")

    delta_index = [(d.g, d.t, d.k) for d in deltas]
    W = build_w(delta_index, targets)
    Psi = np.vstack([d.influence for d in deltas])
    system = GmmSystem(
        delta_index=delta_index,
        target_index=targets,
        W=W,
        delta_estimates=np.array([d.estimate for d in deltas]),
        Psi=Psi,
        weighting=weighting,
    )
    gmm_solve(system)
    identified = np.array([gt not in system.non_identified for gt in targets])
    method = "chained" if (weighting == "identity" and links == "minimal") else "gmm"
    return ChainedResult(
        targets=targets,
        estimates=system.solution,
        Phi=system.Phi,
        method=method,
        identified=identified,
        system=system,
        deltas=deltas,
        Sigma=system.Sigma,
    )
