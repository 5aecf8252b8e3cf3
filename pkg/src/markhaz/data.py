"""Recurrent gap-time records and construction of the analytical dataset.

Raw subjects carry every gap observed during follow-up, including a censored
tail.  :func:`build_analytical_dataset` applies the drop-censored-gap rule:
a subject with at least one observed event keeps only its observed gaps,
while a subject with none keeps its single censored gap.  Each retained
record is weighted by ``1 / R_i`` where ``R_i = max(M_i, 1)``.
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
import os
import re
import tempfile
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import DataError

__all__ = [
    "RawSubject",
    "GapRecord",
    "AnalyticalDataset",
    "ValidationReport",
    "build_analytical_dataset",
    "rescale_marks",
    "validate",
    "read_gap_csv",
    "write_gap_csv",
    "atomic_write_text",
]


@dataclass(frozen=True)
class RawSubject:
    """One subject's full gap sequence as observed during follow-up.

    ``marks[j]`` is ``None`` exactly when ``statuses[j] == 0``.  At most one
    gap may be censored and it must be the last one.
    """

    subject_id: object
    gap_times: tuple
    statuses: tuple
    marks: tuple
    covariates: tuple

    def __post_init__(self):
        object.__setattr__(self, "gap_times", tuple(float(t) for t in self.gap_times))
        object.__setattr__(self, "statuses", tuple(int(s) for s in self.statuses))
        object.__setattr__(
            self, "marks", tuple(None if m is None else float(m) for m in self.marks)
        )
        object.__setattr__(self, "covariates", tuple(float(z) for z in self.covariates))
        sid = self.subject_id
        k = len(self.gap_times)
        if k == 0:
            raise DataError(f"subject {sid!r}: no gap times")
        if len(self.statuses) != k or len(self.marks) != k:
            raise DataError(f"subject {sid!r}: gap_times, statuses and marks differ in length")
        for j, (t, s, m) in enumerate(zip(self.gap_times, self.statuses, self.marks), 1):
            if not (math.isfinite(t) and t > 0):
                raise DataError(f"subject {sid!r} gap {j}: gap time must be finite and > 0, got {t}")
            if s not in (0, 1):
                raise DataError(f"subject {sid!r} gap {j}: status must be 0 or 1, got {s}")
            if s == 1 and (m is None or not math.isfinite(m)):
                raise DataError(f"subject {sid!r} gap {j}: observed gap needs a finite mark")
            if s == 0 and m is not None:
                raise DataError(f"subject {sid!r} gap {j}: censored gap cannot carry a mark")
            if s == 0 and j != k:
                raise DataError(f"subject {sid!r}: censored gap {j} is not the final gap")
        if len(self.covariates) == 0:
            raise DataError(f"subject {sid!r}: at least one covariate is required")
        if not all(math.isfinite(z) for z in self.covariates):
            raise DataError(f"subject {sid!r}: covariates must be finite")

    @property
    def n_observed(self) -> int:
        return sum(self.statuses)


@dataclass(frozen=True)
class GapRecord:
    """Read-only view of one analytical record."""

    subject_index: int
    episode_index: int
    time: float
    status: int
    mark: float | None
    weight: float


def _freeze(a, dtype):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class AnalyticalDataset:
    """Flat analytical records plus the subject-level covariate matrix.

    Record arrays have one entry per retained gap.  Marks exist only for
    event records: ``event_rows`` indexes the records with status 1 and
    ``event_marks`` holds their marks on the rescaled [0, 1] scale.  Raw
    marks are recovered as ``mark_offset + mark_scale * mark``.

    Instances are not validated on construction; see :func:`validate`.
    """

    subject_ids: tuple
    covariates: np.ndarray
    subject: np.ndarray
    episode: np.ndarray
    time: np.ndarray
    status: np.ndarray
    weight: np.ndarray
    event_rows: np.ndarray
    event_marks: np.ndarray
    mark_offset: float = 0.0
    mark_scale: float = 1.0
    covariate_names: tuple = field(default=())

    def __post_init__(self):
        Z = np.array(self.covariates, dtype=float)
        if Z.ndim != 2:
            raise DataError("covariates must be a 2-d array")
        Z.setflags(write=False)
        object.__setattr__(self, "covariates", Z)
        for name, dtype in (
            ("subject", np.int64),
            ("episode", np.int64),
            ("time", float),
            ("status", np.int8),
            ("weight", float),
            ("event_rows", np.int64),
            ("event_marks", float),
        ):
            object.__setattr__(self, name, _freeze(getattr(self, name), dtype))
        if not self.covariate_names:
            object.__setattr__(
                self, "covariate_names", tuple(f"z{q + 1}" for q in range(Z.shape[1]))
            )
        object.__setattr__(self, "subject_ids", tuple(self.subject_ids))

    @property
    def n(self) -> int:
        return self.covariates.shape[0]

    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    @property
    def n_records(self) -> int:
        return self.time.shape[0]

    @property
    def n_events(self) -> int:
        return self.event_rows.shape[0]

    @property
    def mark_transform(self) -> tuple[float, float]:
        return (self.mark_offset, self.mark_scale)

    @cached_property
    def record_covariates(self) -> np.ndarray:
        Zr = self.covariates[self.subject]
        Zr.setflags(write=False)
        return Zr

    @cached_property
    def record_counts(self) -> np.ndarray:
        """``R_i`` for every subject."""
        return np.bincount(self.subject, minlength=self.n)

    @cached_property
    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for a in (
            self.covariates,
            self.subject,
            self.episode,
            self.time,
            self.status,
            self.weight,
            self.event_rows,
            self.event_marks,
        ):
            h.update(np.ascontiguousarray(a).tobytes())
        h.update(repr((self.mark_offset, self.mark_scale)).encode())
        return h.hexdigest()[:16]

    def record_mark(self, row: int) -> float | None:
        pos = np.searchsorted(self.event_rows, row)
        if pos < self.n_events and self.event_rows[pos] == row:
            return float(self.event_marks[pos])
        return None

    def records(self) -> Iterator[GapRecord]:
        marks = dict(zip(self.event_rows.tolist(), self.event_marks.tolist()))
        for r in range(self.n_records):
            yield GapRecord(
                subject_index=int(self.subject[r]),
                episode_index=int(self.episode[r]),
                time=float(self.time[r]),
                status=int(self.status[r]),
                mark=marks.get(r),
                weight=float(self.weight[r]),
            )

    def to_subjects(self, raw_marks: bool = False) -> list[RawSubject]:
        """Round-trip the analytical records back to :class:`RawSubject`.

        With ``raw_marks`` the recorded affine transform is undone.
        """
        rows_by_subject: list[list[GapRecord]] = [[] for _ in range(self.n)]
        for rec in self.records():
            rows_by_subject[rec.subject_index].append(rec)
        out = []
        for i, recs in enumerate(rows_by_subject):
            recs.sort(key=lambda r: r.episode_index)
            marks = []
            for r in recs:
                if r.mark is None or not raw_marks:
                    marks.append(r.mark)
                else:
                    marks.append(self.mark_offset + self.mark_scale * r.mark)
            out.append(
                RawSubject(
                    subject_id=self.subject_ids[i],
                    gap_times=[r.time for r in recs],
                    statuses=[r.status for r in recs],
                    marks=marks,
                    covariates=self.covariates[i].tolist(),
                )
            )
        return out

    def subset(self, subject_indices: Sequence[int]) -> "AnalyticalDataset":
        """Dataset restricted to the given subjects, renumbered in the given order."""
        idx = np.asarray(subject_indices, dtype=np.int64)
        remap = np.full(self.n, -1, dtype=np.int64)
        remap[idx] = np.arange(idx.size)
        keep = remap[self.subject] >= 0
        rows = np.flatnonzero(keep)
        new_subject = remap[self.subject[rows]]
        order = np.lexsort((self.episode[rows], new_subject))
        rows = rows[order]
        row_map = np.full(self.n_records, -1, dtype=np.int64)
        row_map[rows] = np.arange(rows.size)
        ev_keep = row_map[self.event_rows] >= 0
        ev_rows = row_map[self.event_rows[ev_keep]]
        ev_marks = self.event_marks[ev_keep]
        ev_order = np.argsort(ev_rows, kind="stable")
        return AnalyticalDataset(
            subject_ids=tuple(self.subject_ids[i] for i in idx.tolist()),
            covariates=self.covariates[idx],
            subject=remap[self.subject[rows]],
            episode=self.episode[rows],
            time=self.time[rows],
            status=self.status[rows],
            weight=self.weight[rows],
            event_rows=ev_rows[ev_order],
            event_marks=ev_marks[ev_order],
            mark_offset=self.mark_offset,
            mark_scale=self.mark_scale,
            covariate_names=self.covariate_names,
        )

    def with_covariates(self, covariates) -> "AnalyticalDataset":
        Z = np.asarray(covariates, dtype=float)
        if Z.shape[0] != self.n:
            raise DataError("replacement covariates must have one row per subject")
        names = self.covariate_names if Z.shape[1] == self.p else ()
        return AnalyticalDataset(
            subject_ids=self.subject_ids,
            covariates=Z,
            subject=self.subject,
            episode=self.episode,
            time=self.time,
            status=self.status,
            weight=self.weight,
            event_rows=self.event_rows,
            event_marks=self.event_marks,
            mark_offset=self.mark_offset,
            mark_scale=self.mark_scale,
            covariate_names=names,
        )


def build_analytical_dataset(
    subjects: Iterable[RawSubject],
    mark_range: tuple[float, float] | None = None,
    covariate_names: Sequence[str] = (),
) -> AnalyticalDataset:
    """Apply the drop-censored-gap rule and inverse-count weighting.

    Parameters
    ----------
    subjects : iterable of RawSubject
        Each subject's gaps in episode order.
    mark_range : (lo, hi), optional
        Declared support of the raw marks.  Marks are mapped affinely onto
        [0, 1].  When omitted the marks must already lie in [0, 1].
    covariate_names : sequence of str, optional
        Labels for the covariate columns.

    Returns
    -------
    AnalyticalDataset
    """
    subjects = list(subjects)
    if not subjects:
        raise DataError("no subjects supplied")
    p = len(subjects[0].covariates)
    ids, Z = [], []
    subj, epi, time, status, weight, ev_rows, ev_marks = [], [], [], [], [], [], []
    for i, s in enumerate(subjects):
        if len(s.covariates) != p:
            raise DataError(
                f"subject {s.subject_id!r} has {len(s.covariates)} covariates, expected {p}"
            )
        ids.append(s.subject_id)
        Z.append(s.covariates)
        m = s.n_observed
        if m >= 1:
            keep = [j for j, st in enumerate(s.statuses) if st == 1]
        else:
            keep = [0]
        r = len(keep)
        for j in keep:
            if s.statuses[j] == 1:
                ev_rows.append(len(time))
                ev_marks.append(s.marks[j])
            subj.append(i)
            epi.append(j + 1)
            time.append(s.gap_times[j])
            status.append(s.statuses[j])
            weight.append(1.0 / r)
    ds = AnalyticalDataset(
        subject_ids=ids,
        covariates=np.array(Z, dtype=float).reshape(len(subjects), p),
        subject=subj,
        episode=epi,
        time=time,
        status=status,
        weight=weight,
        event_rows=ev_rows,
        event_marks=ev_marks,
        covariate_names=tuple(covariate_names),
    )
    if mark_range is not None:
        return rescale_marks(ds, *mark_range)
    if ds.n_events and (ds.event_marks.min() < 0.0 or ds.event_marks.max() > 1.0):
        raise DataError("marks fall outside [0, 1]; declare mark_range to rescale them")
    return ds


def rescale_marks(dataset: AnalyticalDataset, lo: float, hi: float) -> AnalyticalDataset:
    """Map marks on the current scale from ``[lo, hi]`` onto [0, 1].

    The stored transform is composed so that raw marks stay recoverable.
    """
    lo, hi = float(lo), float(hi)
    if not (math.isfinite(lo) and math.isfinite(hi)) or lo >= hi:
        raise DataError(f"mark support must satisfy lo < hi, got [{lo}, {hi}]")
    m = dataset.event_marks
    if m.size and (m.min() < lo or m.max() > hi):
        bad = m[(m < lo) | (m > hi)][0]
        raise DataError(f"mark {bad} lies outside the declared support [{lo}, {hi}]")
    width = hi - lo
    scaled = np.clip((m - lo) / width, 0.0, 1.0)
    scaled[m == hi] = 1.0
    scaled[m == lo] = 0.0
    return AnalyticalDataset(
        subject_ids=dataset.subject_ids,
        covariates=dataset.covariates,
        subject=dataset.subject,
        episode=dataset.episode,
        time=dataset.time,
        status=dataset.status,
        weight=dataset.weight,
        event_rows=dataset.event_rows,
        event_marks=scaled,
        mark_offset=dataset.mark_offset + lo * dataset.mark_scale,
        mark_scale=dataset.mark_scale * width,
        covariate_names=dataset.covariate_names,
    )


@dataclass
class ValidationReport:
    violations: list[str]
    weight_sums: np.ndarray
    n_subjects: int
    n_records: int
    n_events: int
    n_censored: int
    mark_summary: dict

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "violations": list(self.violations),
            "n_subjects": self.n_subjects,
            "n_records": self.n_records,
            "n_events": self.n_events,
            "n_censored": self.n_censored,
            "max_weight_sum_error": float(np.max(np.abs(self.weight_sums - 1.0)))
            if self.weight_sums.size
            else 0.0,
            "mark_summary": self.mark_summary,
        }


def validate(dataset: AnalyticalDataset) -> ValidationReport:
    """Check the analytical-dataset invariants without raising."""
    v: list[str] = []
    n, N = dataset.n, dataset.n_records
    arrays_ok = all(
        a.shape == (N,)
        for a in (dataset.subject, dataset.episode, dataset.time, dataset.status, dataset.weight)
    )
    if not arrays_ok:
        v.append("record arrays differ in length")
        return ValidationReport(v, np.zeros(0), n, N, dataset.n_events, 0, {})
    if N and (dataset.subject.min() < 0 or dataset.subject.max() >= n):
        v.append("record subject index out of range")
        return ValidationReport(v, np.zeros(0), n, N, dataset.n_events, 0, {})
    if dataset.p == 0:
        v.append("covariate dimension p = 0")
    if not np.all(np.isfinite(dataset.covariates)):
        v.append("non-finite covariate")
    bad_t = np.flatnonzero(~(np.isfinite(dataset.time) & (dataset.time > 0)))
    for r in bad_t[:10]:
        v.append(f"record {r}: gap time {dataset.time[r]} is not > 0")
    event_mask = np.zeros(N, dtype=bool)
    event_mask[dataset.event_rows] = True
    if np.any(event_mask != (dataset.status == 1)):
        v.append("mark present does not coincide with status = 1")
    m = dataset.event_marks
    if m.size and (np.any(~np.isfinite(m)) or m.min() < 0 or m.max() > 1):
        v.append("mark outside [0, 1]")
    counts = np.bincount(dataset.subject, minlength=n)
    events = np.bincount(dataset.subject, weights=dataset.status, minlength=n)
    for i in np.flatnonzero(counts == 0)[:10]:
        v.append(f"subject {i}: no records")
    mixed = np.flatnonzero((events > 0) & (events < counts))
    for i in mixed[:10]:
        v.append(f"subject {i}: censored record retained alongside observed events")
    multi_cens = np.flatnonzero((events == 0) & (counts > 1))
    for i in multi_cens[:10]:
        v.append(f"subject {i}: more than one censored record")
    expected = 1.0 / np.maximum(counts, 1)[dataset.subject]
    bad_w = np.flatnonzero(np.abs(dataset.weight - expected) > 1e-12)
    for r in bad_w[:10]:
        i = dataset.subject[r]
        v.append(f"record {r}: weight {dataset.weight[r]} != 1/R_i with R_i = {counts[i]}")
    sums = np.bincount(dataset.subject, weights=dataset.weight, minlength=n)
    for i in np.flatnonzero(np.abs(sums - 1.0) >= 1e-12)[:10]:
        if counts[i]:
            v.append(f"subject {i}: weights sum to {sums[i]!r}, not 1")
    if m.size:
        hist, _ = np.histogram(m, bins=10, range=(0.0, 1.0))
        q = np.quantile(m, [0.0, 0.25, 0.5, 0.75, 1.0])
        summary = {
            "min": float(q[0]),
            "q1": float(q[1]),
            "median": float(q[2]),
            "q3": float(q[3]),
            "max": float(q[4]),
            "mean": float(m.mean()),
            "histogram": hist.tolist(),
        }
    else:
        summary = {}
    return ValidationReport(
        violations=v,
        weight_sums=sums,
        n_subjects=n,
        n_records=N,
        n_events=int(dataset.n_events),
        n_censored=int(N - int(dataset.status.sum())),
        mark_summary=summary,
    )


_ZCOL = re.compile(r"^z(\d+)$")
_REQUIRED = ("subject_id", "episode", "gap_time", "status", "mark")


def read_gap_csv(path) -> tuple[list[RawSubject], list[str]]:
    """Parse the one-row-per-gap CSV format.

    Columns ``subject_id, episode, gap_time, status, mark, z1..zp``; ``mark``
    is empty for censored rows.  Returns the subjects in order of first
    appearance and the covariate column names.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in _REQUIRED if c not in header]
        if missing:
            raise DataError(f"{path}: missing required column(s) {', '.join(missing)}")
        zcols = sorted((c for c in header if _ZCOL.match(c)), key=lambda c: int(c[1:]))
        if not zcols:
            raise DataError(f"{path}: no covariate columns z1..zp")
        zcols_expected = [f"z{q + 1}" for q in range(len(zcols))]
        if zcols != zcols_expected:
            raise DataError(f"{path}: covariate columns must be z1..z{len(zcols)} without gaps")
        rows_by_id: dict[str, list[dict]] = {}
        for lineno, row in enumerate(reader, start=2):
            sid = row["subject_id"]
            if sid is None or sid == "":
                raise DataError(f"{path}:{lineno}: empty subject_id")
            rows_by_id.setdefault(sid, []).append((lineno, row))
    subjects = []
    for sid, rows in rows_by_id.items():
        try:
            parsed = []
            for lineno, row in rows:
                ep = int(row["episode"])
                t = float(row["gap_time"])
                st = int(row["status"])
                mk = row["mark"].strip() if row["mark"] is not None else ""
                mark = float(mk) if mk != "" else None
                z = tuple(float(row[c]) for c in zcols)
                parsed.append((ep, t, st, mark, z, lineno))
        except (TypeError, ValueError) as exc:
            raise DataError(f"{path}: subject {sid!r}: cannot parse row ({exc})") from None
        parsed.sort(key=lambda r: r[0])
        eps = [r[0] for r in parsed]
        if len(set(eps)) != len(eps):
            raise DataError(f"{path}: subject {sid!r} has duplicate episode numbers")
        if len({r[4] for r in parsed}) != 1:
            raise DataError(f"{path}: subject {sid!r} covariates vary across rows")
        subjects.append(
            RawSubject(
                subject_id=sid,
                gap_times=[r[1] for r in parsed],
                statuses=[r[2] for r in parsed],
                marks=[r[3] for r in parsed],
                covariates=parsed[0][4],
            )
        )
    if not subjects:
        raise DataError(f"{path}: no data rows")
    return subjects, zcols


def atomic_write_text(path, text: str) -> None:
    """Write ``text`` to ``path`` through a temporary file and rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def write_gap_csv(subjects: Sequence[RawSubject], path) -> None:
    p = len(subjects[0].covariates) if subjects else 0
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(_REQUIRED) + [f"z{q + 1}" for q in range(p)])
    for s in subjects:
        for j, (t, st, mk) in enumerate(zip(s.gap_times, s.statuses, s.marks), start=1):
            w.writerow(
                [s.subject_id, j, repr(t), st, "" if mk is None else repr(mk)]
                + [repr(z) for z in s.covariates]
            )
    atomic_write_text(path, buf.getvalue())
