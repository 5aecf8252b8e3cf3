"""Seeded replication studies: bias, coverage, empirical SD and mean SE.

Every replication draws its data from a seed derived from ``master_seed``
and the replication index alone, so results do not depend on how
replications are scheduled across workers.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import stats

from . import __version__
from .bandwidth import CandidateGrid, admissible, select_per_mark, select_uniform
from .data import build_analytical_dataset
from .errors import MarkHazError
from .estimator import FitOptions, fit_at_mark, fit_nonms
from .inference import DEFAULT_VARIANT, SE_CONVENTION, robust_inference
from .kernels import Kernel
from .simulate import SETTINGS, SimConfig, calibrate_censoring, generate_dataset, true_beta

__all__ = ["StudyConfig", "SummaryTable", "run_replications", "study_for_setting", "METHODS"]

log = logging.getLogger(__name__)

MS_PER_MARK = "MS_per_mark_h"
MS_UNIFORM = "MS_uniform_h"
NON_MS = "NonMS"
METHODS = (MS_PER_MARK, MS_UNIFORM, NON_MS)
DEFAULT_MARKS = (0.1, 0.3, 0.5, 0.7, 0.9)


@dataclass(frozen=True)
class StudyConfig:
    sim: SimConfig
    methods: tuple = (MS_PER_MARK, NON_MS)
    marks: tuple = DEFAULT_MARKS
    replications: int = 200
    master_seed: int = 0
    target_events: int | None = None
    max_h: float | None = None
    hs: tuple = CandidateGrid().hs
    n_splits: int = 1
    kernel: str = Kernel.EPANECHNIKOV.value
    fit_options: FitOptions = field(default_factory=FitOptions)
    residual_variant: str = DEFAULT_VARIANT
    level: float = 0.95
    setting: str = "custom"
    keep_raw: bool = False

    def __post_init__(self):
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ValueError(f"unknown method(s) {bad}; expected a subset of {METHODS}")
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "marks", tuple(float(v) for v in self.marks))
        object.__setattr__(self, "hs", tuple(float(h) for h in self.hs))
        if self.max_h is not None and not any(h <= self.max_h + 1e-12 for h in self.hs):
            raise ValueError(f"no candidate bandwidth at or below max_h={self.max_h}")

    @property
    def events_target(self) -> int:
        # Around 1000 in-window events at n = 1000, scaled with n.
        if self.target_events is not None:
            return int(self.target_events)
        return max(int(round(1000 * self.sim.n / 1000)), self.fit_options.min_effective_events)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sim"] = self.sim.to_dict()
        d["fit_options"] = asdict(self.fit_options)
        d["events_target"] = self.events_target
        return d


def study_for_setting(
    setting: str,
    n: int = 500,
    replications: int = 200,
    master_seed: int = 0,
    params: dict | None = None,
    **overrides,
) -> StudyConfig:
    """Study for a named setting ``lin1``, ``lin2``, ``quad1``, ``quad2``.

    ``setting="custom"`` takes ``params`` with keys ``beta_form``, ``beta0``,
    ``beta1``, ``beta2`` and ``policy`` (``"per_mark"`` or ``"uniform"``).
    """
    if setting == "custom":
        if params is None:
            raise ValueError("setting 'custom' needs params")
        s = dict(params)
    elif setting in SETTINGS:
        s = dict(SETTINGS[setting])
    else:
        raise ValueError(f"unknown setting {setting!r}; expected one of {sorted(SETTINGS) + ['custom']}")
    policy = s.pop("policy")
    if policy not in ("per_mark", "uniform"):
        raise ValueError(f"unknown bandwidth policy {policy!r}")
    sim = SimConfig(n=n, seed=master_seed, **s)
    kw = dict(sim=sim, replications=replications, master_seed=master_seed, setting=setting)
    if policy == "per_mark":
        kw["methods"] = (MS_PER_MARK, NON_MS)
    else:
        # Keep the common bandwidth admissible at the interior marks 0.3 and 0.7.
        kw["methods"] = (MS_UNIFORM, NON_MS)
        kw["max_h"] = 0.3
    kw.update(overrides)
    return StudyConfig(**kw)


def _rep_seed(master_seed: int, r: int, stream: int) -> int:
    return int(np.random.SeedSequence(master_seed, spawn_key=(r, stream)).generate_state(1)[0])


def _fit_and_infer(ds, v, h, kernel, study: StudyConfig):
    fit = fit_at_mark(ds, v, h, kernel, study.fit_options)
    sw = robust_inference(ds, fit, study.residual_variant)
    return float(fit.beta_hat[0]), float(sw.se[0])


def run_one(study: StudyConfig, r: int, tau_c: float) -> dict:
    """One replication: ``{method: [(h, beta, se, error) per mark]}``."""
    sim = replace(study.sim, seed=_rep_seed(study.master_seed, r, 0))
    subjects, _, _ = generate_dataset(sim, tau_c=tau_c)
    ds = build_analytical_dataset(subjects)
    kernel = Kernel(study.kernel)
    out = {}
    for method in study.methods:
        rows = []
        if method == NON_MS:
            try:
                fit = fit_nonms(ds, study.fit_options)
                sw = robust_inference(ds, fit, study.residual_variant)
                est = (None, float(fit.beta_hat[0]), float(sw.se[0]), None)
            except MarkHazError as exc:
                est = (None, math.nan, math.nan, f"{type(exc).__name__}: {exc}")
            rows = [est] * len(study.marks)
        elif method == MS_PER_MARK:
            for v in study.marks:
                max_h = min(v, 1.0 - v) if study.fit_options.interior_guard else None
                if study.max_h is not None:
                    max_h = study.max_h if max_h is None else min(max_h, study.max_h)
                try:
                    h = select_per_mark(ds, v, study.hs, study.events_target, max_h=max_h)
                    b, se = _fit_and_infer(ds, v, h, kernel, study)
                    rows.append((h, b, se, None))
                except MarkHazError as exc:
                    rows.append((math.nan, math.nan, math.nan, f"{type(exc).__name__}: {exc}"))
        else:
            hs = study.hs if study.max_h is None else tuple(h for h in study.hs if h <= study.max_h + 1e-12)
            grid = CandidateGrid(
                hs=hs,
                marks=study.marks,
                split_seed=_rep_seed(study.master_seed, r, 1),
                n_splits=study.n_splits,
            )
            try:
                h = select_uniform(ds, grid, kernel, study.fit_options).chosen_h
            except MarkHazError as exc:
                h, why = math.nan, f"{type(exc).__name__}: {exc}"
            for v in study.marks:
                if not math.isfinite(h):
                    rows.append((h, math.nan, math.nan, why))
                    continue
                try:
                    b, se = _fit_and_infer(ds, v, h, kernel, study)
                    rows.append((h, b, se, None))
                except MarkHazError as exc:
                    rows.append((h, math.nan, math.nan, f"{type(exc).__name__}: {exc}"))
        out[method] = rows
    return out


def _run_chunk(args):
    study, reps, tau_c = args
    return [run_one(study, r, tau_c) for r in reps]


@dataclass
class SummaryTable:
    rows: list
    metadata: dict
    raw: list | None = None

    COLUMNS = (
        "setting", "method", "mark", "true_beta", "avg_bias", "coverage", "emp_sd",
        "avg_se", "mean_h", "n_converged", "n_reps", "convergence_rate",
    )

    def row(self, method: str, mark: float) -> dict:
        for r in self.rows:
            if r["method"] == method and abs(r["mark"] - mark) < 1e-12:
                return r
        raise KeyError((method, mark))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for r in self.rows:
            w.writerow(["" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else r[c]) for c in self.COLUMNS])
        return buf.getvalue()


def _aggregate(study: StudyConfig, results: list) -> list:
    z = float(stats.norm.ppf(0.5 + study.level / 2.0))
    rows = []
    R = len(results)
    for method in study.methods:
        for k, v in enumerate(study.marks):
            truth = true_beta(study.sim, v)
            ests = [res[method][k] for res in results]
            ok = [e for e in ests if e[3] is None and math.isfinite(e[1]) and math.isfinite(e[2])]
            for r, e in enumerate(ests):
                if e[3] is not None:
                    log.debug("rep %d %s v=%g excluded: %s", r, method, v, e[3])
            m = len(ok)
            b = [e[1] for e in ok]
            se = [e[2] for e in ok]
            hs = [e[0] for e in ok if e[0] is not None and math.isfinite(e[0])]
            row = {
                "setting": study.setting,
                "method": method,
                "mark": v,
                "true_beta": truth,
                "avg_bias": None,
                "coverage": None,
                "emp_sd": None,
                "avg_se": None,
                "mean_h": math.fsum(hs) / len(hs) if hs else None,
                "n_converged": m,
                "n_reps": R,
                "convergence_rate": m / R,
            }
            if m:
                mean_b = math.fsum(b) / m
                row["avg_bias"] = mean_b - truth
                row["avg_se"] = math.fsum(se) / m
                row["coverage"] = sum(abs(bi - truth) <= z * si for bi, si in zip(b, se)) / m
                if m >= 2:
                    row["emp_sd"] = math.sqrt(math.fsum((bi - mean_b) ** 2 for bi in b) / (m - 1))
            rows.append(row)
    return rows


def run_replications(study: StudyConfig, threads: int = 1) -> SummaryTable:
    """Run all replications and aggregate per (method, mark)."""
    cal = calibrate_censoring(study.sim, seed=_rep_seed(study.master_seed, 0, 99))
    tau_c = cal.tau_c
    reps = list(range(study.replications))
    if threads > 1 and len(reps) > 1:
        chunks = [reps[i::threads] for i in range(threads)]
        chunks = [c for c in chunks if c]
        with ProcessPoolExecutor(max_workers=len(chunks)) as pool:
            parts = list(pool.map(_run_chunk, [(study, c, tau_c) for c in chunks]))
        by_rep = {}
        for c, part in zip(chunks, parts):
            for r, res in zip(c, part):
                by_rep[r] = res
        results = [by_rep[r] for r in reps]
    else:
        results = _run_chunk((study, reps, tau_c))
    meta = {
        "version": __version__,
        "study": study.to_dict(),
        "tau_c": tau_c,
        "pilot_censored_fraction": cal.achieved,
        "se_convention": SE_CONVENTION,
        "residual_variant": study.residual_variant,
        "coverage_level": study.level,
    }
    raw = None
    if study.keep_raw:
        raw = [{m: [list(e) for e in res[m]] for m in study.methods} for res in results]
    return SummaryTable(rows=_aggregate(study, results), metadata=meta, raw=raw)
