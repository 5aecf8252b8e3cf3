"""Kernel-localized, inverse-count weighted partial pseudo-likelihood.

At a mark ``v`` each event record contributes with weight
``omega_i * K_h(V - v)``; risk sets run over every retained record with
subject weight ``omega_i``.  Ties follow Breslow: a record is at risk at
``t`` when its time is ``>= t`` and each tied event contributes its own term.
"""

from __future__ import annotations

import math
import weakref
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .data import AnalyticalDataset
from .errors import (
    BoundaryMark,
    FitError,
    LinearPredictorOverflow,
    NoLocalData,
    NonConvergence,
    SingularHessian,
)
from .kernels import Kernel, effective_event_count, parse_kernel, scaled_kernel

__all__ = [
    "RiskAggregates",
    "FitOptions",
    "MarkFit",
    "MarkCurve",
    "risk_aggregates",
    "log_pseudo_likelihood",
    "pseudo_score",
    "pseudo_hessian",
    "fit_at_mark",
    "fit_grid",
    "fit_nonms",
    "LocalLikelihood",
]

MAX_LINEAR_PREDICTOR = 700.0
MAX_CONDITION = 1e12


@dataclass(frozen=True)
class RiskAggregates:
    s0: float
    s1: np.ndarray
    s2: np.ndarray


@dataclass(frozen=True)
class FitOptions:
    """Newton-Raphson controls.

    ``tol_score`` bounds the score sup-norm divided by the number of
    effective events.
    """

    tol_score: float = 1e-8
    max_iter: int = 100
    step_halvings: int = 30
    init: tuple | None = None
    interior_guard: bool = True
    min_effective_events: int = 10

    def __post_init__(self):
        if not self.tol_score > 0:
            raise ValueError("tol_score must be > 0")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.step_halvings < 0:
            raise ValueError("step_halvings must be >= 0")


@dataclass
class MarkFit:
    v: float | None
    h: float | None
    kernel: Kernel
    beta_hat: np.ndarray
    sigma_hat: np.ndarray
    converged: bool
    iterations: int
    final_score_norm: float
    effective_events: int
    log_likelihood: float
    n: int
    error: str | None = None

    @property
    def p(self) -> int:
        return self.beta_hat.shape[0]

    @classmethod
    def failed(cls, v, h, kernel, p, n, error, effective_events=0) -> "MarkFit":
        nan = np.full(p, np.nan)
        return cls(
            v=v,
            h=h,
            kernel=parse_kernel(kernel),
            beta_hat=nan,
            sigma_hat=np.full((p, p), np.nan),
            converged=False,
            iterations=0,
            final_score_norm=math.nan,
            effective_events=effective_events,
            log_likelihood=math.nan,
            n=n,
            error=error,
        )


@dataclass
class MarkCurve:
    fits: list[MarkFit]
    fingerprint: str
    errors: dict = field(default_factory=dict)

    @property
    def marks(self) -> list[float]:
        return [f.v for f in self.fits]

    def __len__(self):
        return len(self.fits)

    def __iter__(self):
        return iter(self.fits)


class _RiskIndex:
    """Time-sorted layout of a dataset shared by every fit on it."""

    def __init__(self, ds: AnalyticalDataset):
        order = np.argsort(-ds.time, kind="stable")
        t_desc = ds.time[order]
        self.order = order
        self.weight = ds.weight[order]
        self.Z = ds.record_covariates[order]
        # Position in descending order of the last record with time >= X_e.
        ev_t = ds.time[ds.event_rows]
        self.event_last = np.searchsorted(-t_desc, -ev_t, side="right") - 1
        self.event_Z = ds.record_covariates[ds.event_rows]
        self.event_weight = ds.weight[ds.event_rows]
        self.n_records = ds.n_records


_INDEX_CACHE: "weakref.WeakKeyDictionary[AnalyticalDataset, _RiskIndex]" = weakref.WeakKeyDictionary()


def _risk_index(ds: AnalyticalDataset) -> _RiskIndex:
    idx = _INDEX_CACHE.get(ds)
    if idx is None:
        idx = _RiskIndex(ds)
        _INDEX_CACHE[ds] = idx
    return idx


def _linear_predictor(Z, beta):
    eta = Z @ beta
    if eta.size and not np.all(np.abs(eta) <= MAX_LINEAR_PREDICTOR):
        raise LinearPredictorOverflow(
            f"|beta'Z| reaches {np.nanmax(np.abs(eta)):.4g} > {MAX_LINEAR_PREDICTOR}"
        )
    return eta


def risk_aggregates(dataset: AnalyticalDataset, t: float, beta) -> RiskAggregates:
    """Empirical ``S^(q)(t, beta)`` for q = 0, 1, 2, including the 1/n factor."""
    beta = np.asarray(beta, dtype=float).reshape(dataset.p)
    Z = dataset.record_covariates
    at_risk = dataset.time >= t
    eta = _linear_predictor(Z[at_risk], beta)
    w = dataset.weight[at_risk] * np.exp(eta)
    Zr = Z[at_risk]
    s0 = float(w.sum()) / dataset.n
    s1 = (w @ Zr) / dataset.n
    s2 = (Zr.T * w) @ Zr / dataset.n
    return RiskAggregates(s0=s0, s1=s1, s2=s2)


class LocalLikelihood:
    """Log pseudo-likelihood at one mark with its derivatives.

    Parameters mirror :func:`fit_at_mark`.  For the all-mass kernel ``v`` and
    ``h`` are ignored.
    """

    def __init__(self, dataset: AnalyticalDataset, v, h, kernel=Kernel.EPANECHNIKOV):
        self.dataset = dataset
        self.kernel = parse_kernel(kernel)
        self.v, self.h = v, h
        idx = _risk_index(dataset)
        self._idx = idx
        if self.kernel.localized:
            kw = scaled_kernel(self.kernel, h, dataset.event_marks, v)
            self.effective_events = effective_event_count(dataset, v, h)
        else:
            kw = np.ones(dataset.n_events)
            self.effective_events = dataset.n_events
        c = idx.event_weight * kw
        active = np.flatnonzero(c > 0)
        self.c = c[active]
        self.active_rows = dataset.event_rows[active]
        self._last = idx.event_last[active]
        self._Ze = idx.event_Z[active]
        # Records past the last position any active event reaches are never
        # at risk; dropping them keeps the fit bit-independent of them.
        self._m = int(self._last.max()) + 1 if active.size else 0
        self._Z = idx.Z[: self._m]
        self._w = idx.weight[: self._m]

    @property
    def has_data(self) -> bool:
        return self.c.size > 0

    def _require_data(self):
        if not self.has_data:
            raise NoLocalData(f"no events with positive kernel weight at v={self.v}, h={self.h}")

    def evaluate(self, beta, derivatives: int = 2):
        """Return ``(l, U, H)`` truncated to the requested derivative order."""
        self._require_data()
        beta = np.asarray(beta, dtype=float).reshape(self.dataset.p)
        Z = self._Z
        eta = _linear_predictor(Z, beta)
        shift = eta.max()
        w = self._w * np.exp(eta - shift)
        cs0 = np.cumsum(w)
        s0 = cs0[self._last]
        eta_e = self._Ze @ beta
        c = self.c
        ll = float(c @ (eta_e - (np.log(s0) + shift)))
        if derivatives == 0:
            return ll, None, None
        cs1 = np.cumsum(w[:, None] * Z, axis=0)
        zbar = cs1[self._last] / s0[:, None]
        U = c @ (self._Ze - zbar)
        if derivatives == 1:
            return ll, U, None
        # sum_e c_e S2_e / S0_e = sum_r w_r G_r Z_r Z_r', G_r = sum_{e: r at risk} c_e / S0_e.
        g = np.bincount(self._last, weights=c / s0, minlength=self._m)
        G = np.cumsum(g[::-1])[::-1]
        a = w * G
        second = (Z.T * a) @ Z
        outer = (zbar.T * c) @ zbar
        H = -(second - outer)
        H = 0.5 * (H + H.T)
        return ll, U, H


def _coerce_beta(dataset, beta):
    return np.asarray(beta, dtype=float).reshape(dataset.p)


def log_pseudo_likelihood(dataset, v, h, kernel, beta) -> float:
    return LocalLikelihood(dataset, v, h, kernel).evaluate(_coerce_beta(dataset, beta), 0)[0]


def pseudo_score(dataset, v, h, kernel, beta) -> np.ndarray:
    return LocalLikelihood(dataset, v, h, kernel).evaluate(_coerce_beta(dataset, beta), 1)[1]


def pseudo_hessian(dataset, v, h, kernel, beta) -> np.ndarray:
    return LocalLikelihood(dataset, v, h, kernel).evaluate(_coerce_beta(dataset, beta), 2)[2]


def _check_information(H):
    info = -H
    eig = np.linalg.eigvalsh(info)
    lo, hi = eig[0], eig[-1]
    if not (np.all(np.isfinite(eig)) and lo > 0 and hi / lo <= MAX_CONDITION):
        cond = math.inf if lo <= 0 else hi / lo
        raise SingularHessian(f"information matrix condition number {cond:.3g} exceeds {MAX_CONDITION:g}")


def _newton(lik: LocalLikelihood, opts: FitOptions, v, h) -> MarkFit:
    ds = lik.dataset
    p = ds.p
    beta = np.zeros(p) if opts.init is None else np.asarray(opts.init, dtype=float).reshape(p)
    ll, U, H = lik.evaluate(beta)
    scale = max(lik.effective_events, 1)
    norm = float(np.max(np.abs(U))) / scale
    it = 0
    converged = norm < opts.tol_score
    stalled = False
    while not converged and it < opts.max_iter:
        _check_information(H)
        step = np.linalg.solve(-H, U)
        accepted = False
        for _ in range(opts.step_halvings + 1):
            cand = beta + step
            try:
                ll_new, U_new, H_new = lik.evaluate(cand)
            except LinearPredictorOverflow:
                step = step / 2
                continue
            if math.isfinite(ll_new) and ll_new >= ll - 1e-12 * (1.0 + abs(ll)):
                accepted = True
                break
            step = step / 2
        it += 1
        if not accepted:
            stalled = True
            break
        beta, ll, U, H = cand, ll_new, U_new, H_new
        norm = float(np.max(np.abs(U))) / scale
        converged = norm < opts.tol_score
    fit = MarkFit(
        v=v,
        h=h,
        kernel=lik.kernel,
        beta_hat=beta,
        sigma_hat=-H / ds.n,
        converged=converged,
        iterations=it,
        final_score_norm=norm,
        effective_events=lik.effective_events,
        log_likelihood=ll,
        n=ds.n,
    )
    if not converged:
        why = "step-halving exhausted" if stalled else f"max_iter={opts.max_iter} reached"
        fit.error = f"Newton-Raphson did not converge ({why}; score norm {norm:.3g})"
        raise NonConvergence(fit.error, fit)
    _check_information(H)
    return fit


def fit_at_mark(
    dataset: AnalyticalDataset,
    v: float,
    h: float,
    kernel=Kernel.EPANECHNIKOV,
    opts: FitOptions | None = None,
) -> MarkFit:
    """Maximize the localized pseudo-likelihood at mark ``v`` by damped Newton.

    Raises
    ------
    BoundaryMark
        ``v`` outside ``[h, 1 - h]`` while the interior guard is on.
    NoLocalData
        Fewer than ``opts.min_effective_events`` events inside the window.
    SingularHessian, NonConvergence, LinearPredictorOverflow
    """
    opts = opts or FitOptions()
    kernel = parse_kernel(kernel)
    if kernel.localized:
        if not (h is not None and h > 0):
            raise ValueError(f"bandwidth must be > 0, got {h}")
        if not 0.0 <= v <= 1.0:
            raise BoundaryMark(f"mark {v} outside [0, 1]")
        if opts.interior_guard and (v < h - 1e-12 or v > 1.0 - h + 1e-12):
            raise BoundaryMark(f"mark {v} outside the interior window [h, 1-h] for h={h}")
    lik = LocalLikelihood(dataset, v, h, kernel)
    floor = max(opts.min_effective_events, 1)
    if lik.effective_events < floor or not lik.has_data:
        raise NoLocalData(
            f"{lik.effective_events} effective events at v={v}, h={h}; need at least {floor}"
        )
    return _newton(lik, opts, v, h if kernel.localized else None)


def fit_nonms(dataset: AnalyticalDataset, opts: FitOptions | None = None) -> MarkFit:
    """Mark-free weighted gap-time Cox fit (all-mass kernel)."""
    return fit_at_mark(dataset, None, None, Kernel.ALL_MASS, opts)


def _bandwidths(marks, h):
    if np.ndim(h) == 0:
        return [float(h)] * len(marks)
    hs = [float(x) for x in h]
    if len(hs) != len(marks):
        raise ValueError(f"{len(hs)} bandwidths given for {len(marks)} marks")
    return hs


def fit_grid(
    dataset: AnalyticalDataset,
    marks: Sequence[float],
    h,
    kernel=Kernel.EPANECHNIKOV,
    opts: FitOptions | None = None,
    threads: int = 1,
) -> MarkCurve:
    """Independent fits over an increasing mark grid.

    ``h`` is a common bandwidth or one bandwidth per mark.  Per-mark failures
    are recorded as non-converged entries; the grid is never aborted.
    """
    marks = [float(m) for m in marks]
    if any(b <= a for a, b in zip(marks, marks[1:])):
        raise ValueError("marks must be strictly increasing")
    hs = _bandwidths(marks, h)
    kernel = parse_kernel(kernel)

    def one(args):
        v, hv = args
        try:
            fit = fit_at_mark(dataset, v, hv, kernel, opts)
            if not kernel.localized:
                fit = replace(fit, v=v)
            return fit
        except NonConvergence as exc:
            return replace(exc.fit, v=v, h=hv if kernel.localized else None)
        except FitError as exc:
            return MarkFit.failed(
                v,
                hv if kernel.localized else None,
                kernel,
                dataset.p,
                dataset.n,
                f"{type(exc).__name__}: {exc}",
                effective_events=effective_event_count(dataset, v, hv) if kernel.localized else dataset.n_events,
            )

    jobs = list(zip(marks, hs))
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            fits = list(pool.map(one, jobs))
    else:
        fits = [one(j) for j in jobs]
    return MarkCurve(fits=fits, fingerprint=dataset.fingerprint)
