"""Metrics, paired significance tests and aggregate experiment reports."""

from __future__ import annotations

import enum
import itertools
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.special import betainc

from .errors import DuplicateSeed, EmptyRecords, LengthMismatch, TooFewPairs


class MetricKind(str, enum.Enum):
    ACC = "ACC"
    F1 = "F1"
    MCC = "MCC"


def confusion(predictions, golds) -> tuple[int, int, int, int]:
    """(TP, TN, FP, FN) with label 1 as the positive class."""
    p = np.asarray(predictions)
    g = np.asarray(golds)
    tp = int(np.sum((p == 1) & (g == 1)))
    tn = int(np.sum((p != 1) & (g != 1)))
    fp = int(np.sum((p == 1) & (g != 1)))
    fn = int(np.sum((p != 1) & (g == 1)))
    return tp, tn, fp, fn


def metric(kind: MetricKind | str, predictions, golds) -> float:
    """Accuracy, positive-class F1, or Matthews correlation.

    Degenerate F1/MCC denominators yield 0.0 rather than NaN.
    """
    kind = MetricKind(kind)
    predictions = np.asarray(predictions)
    golds = np.asarray(golds)
    if len(predictions) != len(golds) or len(golds) == 0:
        raise LengthMismatch(f"need equal non-empty lengths, got {len(predictions)} and {len(golds)}")
    if kind is MetricKind.ACC:
        return float(np.mean(predictions == golds))
    tp, tn, fp, fn = confusion(predictions, golds)
    if kind is MetricKind.F1:
        denom = 2 * tp + fp + fn
        return 2 * tp / denom if denom and tp else 0.0
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    return (tp * tn - fp * fn) / math.sqrt(denom) if denom else 0.0


def is_degenerate(kind: MetricKind | str, predictions, golds) -> bool:
    """True when F1 precision/recall or the MCC denominator is undefined (``metric`` then returns 0)."""
    kind = MetricKind(kind)
    if kind is MetricKind.ACC:
        return False
    tp, tn, fp, fn = confusion(predictions, golds)
    if kind is MetricKind.F1:
        return tp + fp == 0 or tp + fn == 0
    return (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn) == 0


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    """Two-sided paired t-test of ``a - b``; returns (t, p).

    Zero-variance differences are resolved by convention: all zero gives
    (0, 1); a constant nonzero shift gives (+-inf, 0).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise LengthMismatch(f"paired samples differ in length: {a.shape} vs {b.shape}")
    n = a.size
    if n < 2:
        raise TooFewPairs(f"paired t-test needs >= 2 pairs, got {n}")
    d = a - b
    if np.allclose(d, d[0], rtol=1e-12, atol=1e-12):
        if abs(d[0]) <= 1e-12:
            return 0.0, 1.0
        return math.copysign(math.inf, d[0]), 0.0
    df = n - 1
    t = float(d.mean() / (d.std(ddof=1) / math.sqrt(n)))
    # P(|T| > |t|) = I_{df / (df + t^2)}(df / 2, 1 / 2)
    p = float(betainc(df / 2.0, 0.5, df / (df + t * t)))
    return t, p


# -- reports ----------------------------------------------------------------


@dataclass(frozen=True)
class RunRecord:
    objective: str
    init: str
    task: str
    seed: int
    value: float
    metric: str = "ACC"
    degenerate: bool = False


@dataclass(frozen=True)
class Cell:
    mean: float
    std: float
    n: int
    single_seed: bool
    metric: str = "ACC"
    degenerate: int = 0  # seeds whose metric hit the zero fallback


@dataclass(frozen=True)
class Significance:
    family: str  # "objective": objectives compared within one init; "init": inits within one objective
    scope: str  # the init (resp. objective) held fixed
    a: str
    b: str
    task: str  # task name, or "pooled" across tasks
    t: float
    p: float
    n: int


@dataclass
class EvalReport:
    rows: dict[tuple[str, str, str, int], float]
    cells: dict[tuple[str, str, str], Cell]
    significance: list[Significance] = field(default_factory=list)

    @property
    def tasks(self) -> list[str]:
        return sorted({k[2] for k in self.cells})

    def groups(self, by: str) -> dict[str, list[tuple[str, str]]]:
        """Row groups keyed by objective or init; each lists its (objective, init) rows."""
        if by not in ("objective", "init"):
            raise ValueError(f"cannot group by {by!r}; use 'objective' or 'init'")
        out: dict[str, list[tuple[str, str]]] = defaultdict(list)
        for obj, init in sorted({(k[0], k[1]) for k in self.cells}):
            out[obj if by == "objective" else init].append((obj, init))
        return dict(sorted(out.items()))


def _cell(values: Sequence[float], metric_name: str, degenerate: int = 0) -> Cell:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 1:
        return Cell(float(arr[0]), 0.0, 1, True, metric_name, degenerate)
    return Cell(float(arr.mean()), float(arr.std(ddof=1)), int(arr.size), False, metric_name, degenerate)


def build_report(records: Iterable[RunRecord]) -> EvalReport:
    """Aggregate per-seed records into mean/std cells plus paired significance tests."""
    records = list(records)
    if not records:
        raise EmptyRecords("no run records to report")
    rows: dict[tuple[str, str, str, int], float] = {}
    metrics: dict[tuple[str, str, str], str] = {}
    degenerate: dict[tuple[str, str, str], int] = defaultdict(int)
    for r in records:
        key = (r.objective, r.init, r.task, int(r.seed))
        if key in rows:
            raise DuplicateSeed(f"duplicate record for {key}")
        rows[key] = float(r.value)
        metrics[key[:3]] = r.metric
        degenerate[key[:3]] += bool(r.degenerate)

    by_cell: dict[tuple[str, str, str], dict[int, float]] = defaultdict(dict)
    for (obj, init, task, seed), value in sorted(rows.items()):
        by_cell[(obj, init, task)][seed] = value
    cells = {k: _cell([v[s] for s in sorted(v)], metrics[k], degenerate[k]) for k, v in sorted(by_cell.items())}

    sig: list[Significance] = []
    objectives = sorted({k[0] for k in cells})
    inits = sorted({k[1] for k in cells})
    tasks = sorted({k[2] for k in cells})
    for init in inits:
        for a, b in itertools.combinations(objectives, 2):
            sig.extend(_compare(by_cell, "objective", init, (a, init), (b, init), a, b, tasks))
    for obj in objectives:
        for a, b in itertools.combinations(inits, 2):
            sig.extend(_compare(by_cell, "init", obj, (obj, a), (obj, b), a, b, tasks))
    return EvalReport(rows, cells, sig)


def _compare(by_cell, family, scope, row_a, row_b, name_a, name_b, tasks) -> list[Significance]:
    out = []
    pooled_a: list[float] = []
    pooled_b: list[float] = []
    contributing = 0
    for task in tasks:
        va = by_cell.get((*row_a, task), {})
        vb = by_cell.get((*row_b, task), {})
        seeds = sorted(set(va) & set(vb))
        xa = [va[s] for s in seeds]
        xb = [vb[s] for s in seeds]
        pooled_a += xa
        pooled_b += xb
        contributing += bool(seeds)
        if len(seeds) >= 2:
            t, p = paired_t_test(xa, xb)
            out.append(Significance(family, scope, name_a, name_b, task, t, p, len(seeds)))
    if contributing > 1 and len(pooled_a) >= 2:
        t, p = paired_t_test(pooled_a, pooled_b)
        out.append(Significance(family, scope, name_a, name_b, "pooled", t, p, len(pooled_a)))
    return out


def render_tsv(report: EvalReport) -> str:
    lines = ["objective\tinit\ttask\tmetric\tn\tmean\tstd\tsingle_seed\tdegenerate"]
    for (obj, init, task), c in report.cells.items():
        lines.append(f"{obj}\t{init}\t{task}\t{c.metric}\t{c.n}\t{c.mean!r}\t{c.std!r}\t{int(c.single_seed)}\t{c.degenerate}")
    return "\n".join(lines) + "\n"


def render_significance_tsv(report: EvalReport) -> str:
    lines = ["family\tscope\ta\tb\ttask\tn\tt\tp"]
    for s in report.significance:
        lines.append(f"{s.family}\t{s.scope}\t{s.a}\t{s.b}\t{s.task}\t{s.n}\t{s.t!r}\t{s.p!r}")
    return "\n".join(lines) + "\n"


def render_text(report: EvalReport, group_by: str = "objective") -> str:
    """Fixed-width table: rows are (objective, init), columns tasks, cells mean±std."""
    tasks = report.tasks
    header = ["Objective", "Init", *(t for t in tasks), "Avg"]
    body: list[list[str]] = []
    separators: list[int] = []
    for _, rows in report.groups(group_by).items():
        separators.append(len(body))
        for obj, init in rows:
            line = [obj, init]
            means = []
            for task in tasks:
                c = report.cells.get((obj, init, task))
                if c is None:
                    line.append("-")
                    continue
                means.append(c.mean)
                flag = ("*" if c.single_seed else "") + ("!" if c.degenerate else "")
                line.append(f"{c.mean:.1f}±{c.std:.1f}{flag}")
            line.append(f"{np.mean(means):.1f}" if means else "-")
            body.append(line)
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]

    def fmt(r):
        return "  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip()

    rule = "-" * len(fmt(header))
    out = [fmt(header), rule]
    for i, r in enumerate(body):
        if i in separators and i:
            out.append(rule)
        out.append(fmt(r))
    out.append(rule)
    if any(c.single_seed for c in report.cells.values()):
        out.append("* single seed: std not estimable, reported as 0")
    if any(c.degenerate for c in report.cells.values()):
        out.append("! metric undefined for at least one seed (one-class predictions), counted as 0")
    return "\n".join(out) + "\n"
