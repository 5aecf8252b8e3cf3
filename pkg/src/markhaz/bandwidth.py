"""Bandwidth selection.

``select_uniform`` picks one bandwidth for all marks by minimizing an
integrated MSE: the squared bias is ``C(v)^2 h^4`` with ``C(v)`` the slope
of ``beta_h(v)`` on ``h^2``, and the variance comes from a seeded
subject-level half split, ``(beta_h1 - beta_h2)^2 / 4``.  Both terms are
summed over coefficients.  ``select_per_mark`` instead picks, per mark, the
smallest bandwidth whose window holds a target number of events.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ._json import to_jsonable
from .errors import BandwidthError, FitError
from .estimator import FitOptions, fit_at_mark
from .kernels import Kernel, effective_event_count, parse_kernel

__all__ = [
    "CandidateGrid",
    "BandwidthReport",
    "evaluate_candidates",
    "slope_fit",
    "select_uniform",
    "select_per_mark",
    "parse_grid",
    "admissible",
    "split_variance",
]

log = logging.getLogger(__name__)


def parse_grid(text: str) -> np.ndarray:
    """``"0.05:0.80:0.01"`` (start:stop:step, inclusive) or a comma list."""
    if ":" in text:
        parts = [float(x) for x in text.split(":")]
        if len(parts) != 3 or parts[2] <= 0:
            raise ValueError(f"grid must be start:stop:step, got {text!r}")
        start, stop, step = parts
        k = int(math.floor((stop - start) / step + 1e-9))
        return np.round(start + step * np.arange(k + 1), 12)
    return np.array([float(x) for x in text.split(",") if x.strip()])


@dataclass(frozen=True)
class CandidateGrid:
    hs: tuple = tuple(np.round(np.arange(0.05, 0.8 + 1e-9, 0.01), 12))
    marks: tuple = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
    split_seed: int = 0
    n_splits: int = 1

    def __post_init__(self):
        hs = tuple(float(h) for h in self.hs)
        object.__setattr__(self, "hs", hs)
        object.__setattr__(self, "marks", tuple(float(v) for v in self.marks))
        if not hs:
            raise ValueError("candidate grid is empty")
        if any(h <= 0 for h in hs) or any(b <= a for a, b in zip(hs, hs[1:])):
            raise ValueError("candidate bandwidths must be positive and strictly increasing")
        if self.n_splits < 1:
            raise ValueError("n_splits must be >= 1")


@dataclass
class BandwidthReport:
    hs: np.ndarray
    marks: np.ndarray
    beta_h: np.ndarray  # (marks, hs, p); NaN where unusable
    v_hat: np.ndarray  # (marks, hs)
    usable: np.ndarray  # (marks, hs) bool
    reasons: dict = field(default_factory=dict)
    c_hat: np.ndarray | None = None  # (marks, p)
    mse: np.ndarray | None = None
    imse: np.ndarray | None = None
    chosen_h: float | None = None
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return to_jsonable(
            {
                "hs": self.hs,
                "marks": self.marks,
                "chosen_h": self.chosen_h,
                "imse": self.imse,
                "c_hat": self.c_hat,
                "beta_h": self.beta_h,
                "v_hat": self.v_hat,
                "mse": self.mse,
                "usable": self.usable,
                "warnings": self.warnings,
            }
        )


def admissible(v: float, h: float, kernel, opts: FitOptions) -> bool:
    if not parse_kernel(kernel).localized or not opts.interior_guard:
        return True
    return h - 1e-12 <= v <= 1.0 - h + 1e-12


def _try_fit(ds, v, h, kernel, opts):
    try:
        return fit_at_mark(ds, v, h, kernel, opts).beta_hat, None
    except FitError as exc:
        return None, f"{type(exc).__name__}: {exc}"


def split_variance(b1, b2) -> float:
    """Half-sample variance ``sum_q (b1_q - b2_q)^2 / 4``."""
    d = np.asarray(b1, dtype=float) - np.asarray(b2, dtype=float)
    return float(np.sum(d * d) / 4.0)


def _split_halves(n: int, seed: int, round_: int):
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(round_,)))
    perm = rng.permutation(n)
    return np.sort(perm[: n // 2]), np.sort(perm[n // 2 :])


def evaluate_candidates(dataset, grid: CandidateGrid, kernel=Kernel.EPANECHNIKOV, opts=None) -> BandwidthReport:
    """Full-data estimates and half-split variances for every (mark, h) pair.

    The same seeded split is reused across all ``h`` within a split round.
    """
    opts = opts or FitOptions()
    hs = np.asarray(grid.hs, dtype=float)
    marks = np.asarray(grid.marks, dtype=float)
    p = dataset.p
    beta = np.full((marks.size, hs.size, p), np.nan)
    vhat = np.full((marks.size, hs.size), np.nan)
    usable = np.zeros((marks.size, hs.size), dtype=bool)
    reasons = {}
    halves = []
    for s in range(grid.n_splits):
        i1, i2 = _split_halves(dataset.n, grid.split_seed, s)
        halves.append((dataset.subset(i1), dataset.subset(i2)))
    for a, v in enumerate(marks):
        for b, h in enumerate(hs):
            if not admissible(v, h, kernel, opts):
                reasons[(a, b)] = "outside interior window"
                continue
            est, why = _try_fit(dataset, v, h, kernel, opts)
            if est is None:
                reasons[(a, b)] = why
                continue
            parts = []
            for d1, d2 in halves:
                b1, why1 = _try_fit(d1, v, h, kernel, opts)
                b2, why2 = _try_fit(d2, v, h, kernel, opts) if b1 is not None else (None, None)
                if b1 is None or b2 is None:
                    reasons[(a, b)] = "half-sample: " + (why1 or why2)
                    break
                parts.append(split_variance(b1, b2))
            else:
                beta[a, b] = est
                vhat[a, b] = float(np.mean(parts))
                usable[a, b] = True
    rep = BandwidthReport(hs=hs, marks=marks, beta_h=beta, v_hat=vhat, usable=usable, reasons=reasons)
    for a, v in enumerate(marks):
        if not usable[a].any():
            msg = f"mark {v:g}: no usable bandwidth; excluded"
            rep.warnings.append(msg)
            log.warning(msg)
    return rep


def slope_fit(report: BandwidthReport, v: float) -> np.ndarray:
    """OLS slope of ``beta_h(v)`` on ``h^2`` (with intercept), per coefficient."""
    matches = np.flatnonzero(np.isclose(report.marks, v, rtol=0, atol=1e-12))
    if matches.size == 0:
        raise KeyError(f"mark {v} not in report")
    a = matches[0]
    ok = report.usable[a]
    if ok.sum() < 2:
        raise BandwidthError(f"mark {v:g}: fewer than 2 usable bandwidths for the slope fit")
    x = report.hs[ok] ** 2
    y = report.beta_h[a, ok, :]
    xc = x - x.mean()
    return (xc @ (y - y.mean(axis=0))) / (xc @ xc)


def _complete(report: BandwidthReport) -> BandwidthReport:
    m, k = report.usable.shape
    p = report.beta_h.shape[2]
    c_hat = np.full((m, p), np.nan)
    mse = np.full((m, k), np.nan)
    for a, v in enumerate(report.marks):
        if report.usable[a].sum() < 2:
            if report.usable[a].any():
                msg = f"mark {v:g}: fewer than 2 usable bandwidths; excluded"
                report.warnings.append(msg)
                log.warning(msg)
            continue
        c_hat[a] = slope_fit(report, v)
        ok = report.usable[a]
        mse[a, ok] = np.sum(c_hat[a] ** 2) * report.hs[ok] ** 4 + report.v_hat[a, ok]
    report.c_hat = c_hat
    report.mse = mse
    valid = np.isfinite(mse)
    counts = valid.sum(axis=0)
    totals = np.where(valid, mse, 0.0).sum(axis=0)
    imse = np.full(k, np.nan)
    imse[counts > 0] = totals[counts > 0] / counts[counts > 0]
    report.imse = imse
    if not np.isfinite(imse).any():
        raise BandwidthError("no usable (mark, bandwidth) pairs")
    best = np.nanmin(imse)
    report.chosen_h = float(report.hs[np.flatnonzero(imse == best)[0]])
    return report


def select_uniform(dataset, grid: CandidateGrid, kernel=Kernel.EPANECHNIKOV, opts=None) -> BandwidthReport:
    """Common bandwidth minimizing the integrated MSE over the marks of interest."""
    rep = evaluate_candidates(dataset, grid, kernel, opts)
    if len(grid.hs) == 1 and rep.usable.any():
        _complete_singleton(rep)
        return rep
    return _complete(rep)


def _complete_singleton(report: BandwidthReport):
    # A one-point grid has no slope; the lone candidate is chosen.
    report.c_hat = np.zeros((report.marks.size, report.beta_h.shape[2]))
    report.mse = np.where(report.usable, report.v_hat, np.nan)
    report.imse = np.array([np.nanmean(report.mse[:, 0])])
    report.chosen_h = float(report.hs[0])


def select_per_mark(dataset, v: float, hs, target_events: int, max_h: float | None = None) -> float:
    """Smallest candidate ``h`` whose window around ``v`` holds ``target_events`` events.

    Candidates above ``max_h`` are ignored.  When no candidate reaches the
    target the largest remaining one is returned and a warning is logged.
    """
    hs = [float(h) for h in hs if max_h is None or h <= max_h + 1e-12]
    if not hs:
        raise BandwidthError(f"no candidate bandwidth at or below {max_h} for mark {v}")
    for h in hs:
        if effective_event_count(dataset, v, h) >= target_events:
            return h
    h = hs[-1]
    log.warning(
        "mark %g: largest candidate h=%g captures %d events (< target %d)",
        v, h, effective_event_count(dataset, v, h), target_events,
    )
    return h
