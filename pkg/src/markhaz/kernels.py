"""Localization kernels for mark-weighted likelihood contributions."""

from __future__ import annotations

from enum import Enum

import numpy as np

__all__ = ["Kernel", "kernel_eval", "scaled_kernel", "effective_event_count", "parse_kernel"]


class Kernel(str, Enum):
    """Kernel family.

    ``ALL_MASS`` is not a density: it weights every event by 1 and turns the
    mark-specific fit into the non-mark-specific one.
    """

    EPANECHNIKOV = "epanechnikov"
    UNIFORM = "uniform"
    ALL_MASS = "allmass"

    @property
    def localized(self) -> bool:
        return self is not Kernel.ALL_MASS


_ALIASES = {
    "epanechnikov": Kernel.EPANECHNIKOV,
    "epa": Kernel.EPANECHNIKOV,
    "uniform": Kernel.UNIFORM,
    "uniform_window": Kernel.UNIFORM,
    "allmass": Kernel.ALL_MASS,
    "all_mass": Kernel.ALL_MASS,
}


def parse_kernel(kind) -> Kernel:
    if isinstance(kind, Kernel):
        return kind
    try:
        return _ALIASES[str(kind).lower()]
    except KeyError:
        raise ValueError(f"unknown kernel {kind!r}; expected one of epanechnikov, uniform, allmass") from None


def kernel_eval(kernel, x):
    """Evaluate ``K(x)``; scalar in, scalar out, arrays elementwise."""
    kernel = parse_kernel(kernel)
    xa = np.asarray(x, dtype=float)
    if kernel is Kernel.ALL_MASS:
        out = np.ones_like(xa)
    else:
        inside = np.abs(xa) < 1.0
        if kernel is Kernel.EPANECHNIKOV:
            out = np.where(inside, 0.75 * (1.0 - xa * xa), 0.0)
        else:
            out = np.where(inside, 0.5, 0.0)
    return float(out) if out.ndim == 0 else out


def scaled_kernel(kernel, h, u, v):
    """``K_h(u - v) = K((u - v) / h) / h``; identically 1 for the all-mass kernel."""
    kernel = parse_kernel(kernel)
    if kernel is Kernel.ALL_MASS:
        ua = np.asarray(u, dtype=float) - np.asarray(v, dtype=float)
        out = np.ones_like(ua)
        return float(out) if out.ndim == 0 else out
    if not h > 0:
        raise ValueError(f"bandwidth must be > 0, got {h}")
    d = np.asarray(u, dtype=float) - np.asarray(v, dtype=float)
    out = np.asarray(kernel_eval(kernel, d / h)) / h
    # Exact support cut-off, independent of rounding in d / h.
    out = np.where(np.abs(d) < h, out, 0.0)
    return float(out) if out.ndim == 0 else out


def effective_event_count(dataset, v: float, h: float) -> int:
    """Number of event records whose mark lies strictly within ``h`` of ``v``."""
    return int(np.count_nonzero(np.abs(dataset.event_marks - v) < h))
