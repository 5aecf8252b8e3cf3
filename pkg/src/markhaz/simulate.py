"""Mark-specific recurrent-event generator.

The mark-specific hazard is ``exp(beta0 * v) * (t + v) * exp(beta(v) * z)``
with ``beta(v) = beta1 + beta2 * v`` (linear) or ``beta1 + beta2 * v**2``
(quadratic).  Integrating over marks gives the any-mark hazard
``A_z * t + B_z``, hence the cumulative hazard ``A_z t^2 / 2 + B_z t``, which
is inverted in closed form.  Given the gap time, the mark is drawn from its
conditional distribution, proportional to the mark-specific hazard.

Within-subject dependence comes from ``u_j = 1 - Phi(A_i + B_ij)`` with a
subject frailty ``A_i ~ N(0, rho)`` and episode terms ``B_ij ~ N(0, 1 - rho)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import integrate, special

from .data import RawSubject
from .errors import SimulationError

__all__ = [
    "SimConfig",
    "TruthRecord",
    "true_beta",
    "cumulative_hazard_coeffs",
    "invert_gap_time",
    "mark_cdf",
    "invert_mark",
    "generate_subject",
    "generate_dataset",
    "calibrate_censoring",
    "CalibrationReport",
    "censored_fraction",
    "SETTINGS",
]

_GL_X, _GL_W = np.polynomial.legendre.leggauss(48)


@dataclass(frozen=True)
class SimConfig:
    n: int = 1000
    J: int = 5
    beta0: float = 0.3
    beta1: float = -0.5
    beta2: float = 0.5
    beta_form: str = "linear"
    rho: float = 0.25
    tau_c: float | None = None
    censor_target: float = 0.25
    pilot_n: int = 10_000
    seed: int = 0

    def __post_init__(self):
        if self.beta_form not in ("linear", "quadratic"):
            raise ValueError(f"beta_form must be 'linear' or 'quadratic', got {self.beta_form!r}")
        if not 0.0 < self.rho < 1.0:
            raise ValueError("rho must lie in (0, 1)")
        if self.n < 1 or self.J < 1:
            raise ValueError("n and J must be >= 1")
        if self.tau_c is not None and not self.tau_c > 0:
            raise ValueError("tau_c must be > 0")
        if not 0.0 < self.censor_target < 1.0:
            raise ValueError("censor_target must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


# Named settings: parameter values and the bandwidth policy each one uses.
SETTINGS = {
    "lin1": dict(beta_form="linear", beta0=0.3, beta1=-0.5, beta2=0.5, policy="per_mark"),
    "lin2": dict(beta_form="linear", beta0=0.3, beta1=-0.5, beta2=-1.5, policy="uniform"),
    "quad1": dict(beta_form="quadratic", beta0=0.3, beta1=-0.5, beta2=0.5, policy="per_mark"),
    "quad2": dict(beta_form="quadratic", beta0=0.3, beta1=-0.5, beta2=-1.5, policy="uniform"),
}


@dataclass
class TruthRecord:
    """Latent draws behind one generated subject."""

    z: float
    A: float
    B: np.ndarray
    u_gap: np.ndarray
    u_mark: np.ndarray
    T: np.ndarray
    V: np.ndarray
    C: float
    M: int


def true_beta(config: SimConfig, v):
    v = np.asarray(v, dtype=float)
    if config.beta_form == "linear":
        out = config.beta1 + config.beta2 * v
    else:
        out = config.beta1 + config.beta2 * v * v
    return float(out) if out.ndim == 0 else out


def _exponent(config: SimConfig, z, x):
    return config.beta0 * x + true_beta(config, x) * z


def _linear_exponent(config: SimConfig, z):
    """``(a, c)`` with exponent ``a + c x`` when it is linear in the mark, else None."""
    if config.beta_form == "linear" or z == 0:
        return config.beta1 * z, config.beta0 + (config.beta2 * z if config.beta_form == "linear" else 0.0)
    return None


def _int_exp(c, v):
    """``int_0^v e^{c x} dx`` and ``int_0^v x e^{c x} dx``, elementwise in ``v``."""
    v = np.asarray(v, dtype=float)
    if abs(c) < 1e-4:
        # Taylor series in c; truncation below 1e-16 relative for |c v| < 1e-4.
        cv = c * v
        g0 = v * (1 + cv / 2 + cv**2 / 6 + cv**3 / 24 + cv**4 / 120)
        g1 = v * v * (0.5 + cv / 3 + cv**2 / 8 + cv**3 / 30 + cv**4 / 144)
        return g0, g1
    e = np.exp(c * v)
    g0 = np.expm1(c * v) / c
    g1 = ((c * v - 1.0) * e + 1.0) / (c * c)
    return g0, g1


def cumulative_hazard_coeffs(config: SimConfig, z: float) -> tuple[float, float]:
    """``(A_z, B_z)`` of the any-mark cumulative hazard ``A_z t^2/2 + B_z t``."""
    lin = _linear_exponent(config, z)
    if lin is not None:
        a, c = lin
        g0, g1 = _int_exp(c, 1.0)
        return float(math.exp(a) * g0), float(math.exp(a) * g1)
    f0 = lambda x: math.exp(_exponent(config, z, x))
    f1 = lambda x: x * math.exp(_exponent(config, z, x))
    A, errA = integrate.quad(f0, 0.0, 1.0, epsabs=1e-14, epsrel=1e-13, limit=200)
    B, errB = integrate.quad(f1, 0.0, 1.0, epsabs=1e-14, epsrel=1e-13, limit=200)
    if errA > 1e-12 or errB > 1e-12:
        raise SimulationError(f"quadrature did not reach 1e-12 (errors {errA:.2g}, {errB:.2g})")
    return A, B


def _mark_integrals(config: SimConfig, z: float, v):
    """``G0(v) = int_0^v e^{g(x)} dx`` and ``G1(v) = int_0^v x e^{g(x)} dx``."""
    v = np.asarray(v, dtype=float)
    lin = _linear_exponent(config, z)
    if lin is not None:
        a, c = lin
        g0, g1 = _int_exp(c, v)
        ea = math.exp(a)
        return ea * g0, ea * g1
    # Fixed 48-point Gauss-Legendre on [0, v]; the integrand is entire.
    half = 0.5 * v[..., None]
    x = half * (_GL_X + 1.0)
    f = np.exp(_exponent(config, z, x))
    g0 = np.sum(half * _GL_W * f, axis=-1)
    g1 = np.sum(half * _GL_W * x * f, axis=-1)
    return g0, g1


def invert_gap_time(config: SimConfig, z: float, u):
    """Solve ``A_z t^2 / 2 + B_z t = -log u`` for ``t > 0``."""
    u = np.asarray(u, dtype=float)
    if np.any((u <= 0.0) | (u >= 1.0)):
        raise ValueError("u must lie strictly inside (0, 1)")
    A, B = cumulative_hazard_coeffs(config, z)
    y = -np.log(u)
    # Rationalized root avoids cancellation for small y.
    t = 2.0 * y / (B + np.sqrt(B * B + 2.0 * A * y))
    return float(t) if t.ndim == 0 else t


def any_mark_cumulative_hazard(config: SimConfig, z: float, t):
    A, B = cumulative_hazard_coeffs(config, z)
    t = np.asarray(t, dtype=float)
    return A * t * t / 2.0 + B * t


def mark_cdf(config: SimConfig, z: float, t, v):
    """Conditional mark CDF ``F(v | t, z)``."""
    A, B = cumulative_hazard_coeffs(config, z)
    t = np.asarray(t, dtype=float)
    g0, g1 = _mark_integrals(config, z, v)
    return (t * g0 + g1) / (t * A + B)


def invert_mark(config: SimConfig, z: float, t, u, tol: float = 1e-12, max_iter: int = 60):
    """Bisection for ``F(v | t, z) = u`` on [0, 1], vectorized over ``(t, u)``."""
    t = np.asarray(t, dtype=float)
    u = np.asarray(u, dtype=float)
    t, u = np.broadcast_arrays(t, u)
    A, B = cumulative_hazard_coeffs(config, z)
    target = u * (t * A + B)
    lo = np.zeros(t.shape)
    hi = np.ones(t.shape)
    mid = 0.5 * (lo + hi)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        g0, g1 = _mark_integrals(config, z, mid)
        val = t * g0 + g1
        below = val < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.all(np.abs(val - target) <= tol * (t * A + B)):
            break
    return float(mid) if mid.ndim == 0 else mid


def _subject_rng(seed: int, i: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,)))


def _draw_latents(config: SimConfig, rng: np.random.Generator):
    z = 1.0 if rng.random() < 0.5 else 0.0
    A = rng.normal(0.0, math.sqrt(config.rho))
    B = rng.normal(0.0, math.sqrt(1.0 - config.rho), size=config.J)
    u_mark = rng.random(config.J)
    u_cens = rng.random()
    return z, A, B, u_mark, u_cens


def _latent_block(config: SimConfig, seed: int, n: int, with_marks: bool = True):
    """Vectorized draws and inversions for ``n`` subjects."""
    J = config.J
    z = np.empty(n)
    A = np.empty(n)
    B = np.empty((n, J))
    um = np.empty((n, J))
    uc = np.empty(n)
    for i in range(n):
        z[i], A[i], B[i], um[i], uc[i] = _draw_latents(config, _subject_rng(seed, i))
    u_gap = special.ndtr(-(A[:, None] + B))
    T = np.empty((n, J))
    V = np.full((n, J), np.nan)
    for zval in (0.0, 1.0):
        sel = z == zval
        if not sel.any():
            continue
        T[sel] = invert_gap_time(config, zval, u_gap[sel])
        if with_marks:
            V[sel] = invert_mark(config, zval, T[sel], um[sel])
    return z, A, B, u_gap, um, uc, T, V


def _observed_count(T, C):
    S = np.cumsum(T, axis=1)
    return np.sum(S <= C[:, None], axis=1), S


def censored_fraction(T, C) -> float:
    """Censored gaps over all generated gap records, before the drop rule."""
    J = T.shape[1]
    M, _ = _observed_count(T, C)
    cens = M < J
    return float(cens.sum() / (M.sum() + cens.sum()))


@dataclass
class CalibrationReport:
    tau_c: float
    achieved: float
    target: float
    pilot_n: int
    iterations: int


def calibrate_censoring(
    config: SimConfig,
    target: float | None = None,
    pilot_n: int | None = None,
    seed: int | None = None,
    tol: float = 1e-4,
) -> CalibrationReport:
    """Bisection on ``tau_c`` so the pilot censored-gap fraction hits ``target``.

    A user-fixed ``config.tau_c`` skips the search.
    """
    target = config.censor_target if target is None else target
    pilot_n = config.pilot_n if pilot_n is None else pilot_n
    pilot_seed = (config.seed + 1_000_003) if seed is None else seed
    if not 0.0 < target < 1.0:
        raise ValueError("target must lie in (0, 1)")
    z, A, B, ug, um, uc, T, V = _latent_block(config, pilot_seed, pilot_n, with_marks=False)
    frac = lambda tau: censored_fraction(T, tau * uc)
    if config.tau_c is not None:
        return CalibrationReport(config.tau_c, frac(config.tau_c), target, pilot_n, 0)
    lo, hi = 0.0, 1.0
    for _ in range(60):
        if frac(hi) < target:
            break
        lo, hi = hi, hi * 2.0
    else:
        raise SimulationError("could not bracket tau_c")
    it = 0
    for it in range(1, 200):
        mid = 0.5 * (lo + hi)
        f = frac(mid)
        if abs(f - target) < tol:
            break
        if f > target:
            lo = mid
        else:
            hi = mid
    return CalibrationReport(float(mid), f, target, pilot_n, it)


def _build_subject(config, i, z, T, V, C, sid=None) -> RawSubject:
    J = config.J
    S = np.cumsum(T)
    M = int(np.sum(S <= C))
    gaps = [float(t) for t in T[:M]]
    statuses = [1] * M
    marks = [float(v) for v in V[:M]]
    if M < J:
        prev = float(S[M - 1]) if M > 0 else 0.0
        resid = float(C) - prev
        if resid > 0:
            gaps.append(resid)
            statuses.append(0)
            marks.append(None)
    return RawSubject(
        subject_id=str(i + 1) if sid is None else sid,
        gap_times=gaps,
        statuses=statuses,
        marks=marks,
        covariates=(float(z),),
    ), M


def _resolved_tau(config: SimConfig) -> float:
    if config.tau_c is not None:
        return config.tau_c
    return calibrate_censoring(config).tau_c


def generate_subject(config: SimConfig, rng: np.random.Generator, tau_c: float | None = None,
                     subject_id="1"):
    """Draw one subject; returns ``(RawSubject, TruthRecord)``."""
    tau = _resolved_tau(config) if tau_c is None else tau_c
    z, A, B, um, uc = _draw_latents(config, rng)
    u_gap = special.ndtr(-(A + B))
    T = np.asarray(invert_gap_time(config, z, u_gap), dtype=float).reshape(config.J)
    V = np.asarray(invert_mark(config, z, T, um), dtype=float).reshape(config.J)
    C = tau * uc
    subj, M = _build_subject(config, 0, z, T, V, C, sid=subject_id)
    return subj, TruthRecord(z=z, A=A, B=B, u_gap=u_gap, u_mark=um, T=T, V=V, C=C, M=M)


def generate_dataset(config: SimConfig, tau_c: float | None = None):
    """Generate ``config.n`` subjects on per-subject seeded substreams.

    Returns ``(subjects, truths, tau_c)``.  Subject ``i`` depends only on
    ``(config.seed, i)``, so growing ``n`` leaves earlier subjects unchanged.
    """
    tau = _resolved_tau(config) if tau_c is None else tau_c
    z, A, B, ug, um, uc, T, V = _latent_block(config, config.seed, config.n)
    C = tau * uc
    subjects, truths = [], []
    for i in range(config.n):
        subj, M = _build_subject(config, i, z[i], T[i], V[i], C[i])
        subjects.append(subj)
        truths.append(
            TruthRecord(z=z[i], A=A[i], B=B[i], u_gap=ug[i], u_mark=um[i], T=T[i], V=V[i], C=C[i], M=M)
        )
    return subjects, truths, tau


def truth_summary(config: SimConfig, truths, tau_c: float, grid=None) -> dict:
    grid = np.round(np.arange(0.1, 0.91, 0.1), 10) if grid is None else np.asarray(grid)
    M = np.array([t.M for t in truths])
    cens = int(np.sum(M < config.J))
    return {
        "config": config.to_dict(),
        "tau_c": tau_c,
        "n_subjects": len(truths),
        "n_events": int(M.sum()),
        "n_censored_gaps": cens,
        "censored_fraction": cens / float(M.sum() + cens),
        "subjects_without_events": int(np.sum(M == 0)),
        "true_beta": {f"{v:.6g}": true_beta(config, float(v)) for v in grid},
    }
