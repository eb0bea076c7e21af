"""Log-loss, relative information gain, AUC, lifts and FLOPs-change accounting."""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import UndefinedMetricError

DEFAULT_CLIP_EPS = 1e-6


class FlaggedLiftWarning(UserWarning):
    """Baseline RIG was zero, so the lift fell back to percentage points."""


def entropy(gamma: float) -> float:
    """Binary entropy in nats."""
    if not 0.0 < gamma < 1.0:
        raise UndefinedMetricError(f"base CTR {gamma} gives zero entropy; RIG is undefined")
    return -gamma * math.log(gamma) - (1.0 - gamma) * math.log(1.0 - gamma)


def log_loss_terms(labels: np.ndarray, preds: np.ndarray, clip_eps: float = DEFAULT_CLIP_EPS) -> np.ndarray:
    p = np.clip(np.asarray(preds, float), clip_eps, 1.0 - clip_eps)
    c = np.asarray(labels, float)
    return -(c * np.log(p) + (1.0 - c) * np.log1p(-p))


@dataclass
class MetricsAccumulator:
    """Mergeable running totals of clicks and log-loss.

    Raw predictions are kept (when ``keep_scores``) so AUC can be computed.
    """

    clip_eps: float = DEFAULT_CLIP_EPS
    keep_scores: bool = True
    n: int = 0
    sum_loss: float = 0.0
    clicks: int = 0
    _labels: list = field(default_factory=list, repr=False)
    _preds: list = field(default_factory=list, repr=False)

    def add(self, label: int, p: float) -> None:
        if label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {label!r}")
        q = min(max(float(p), self.clip_eps), 1.0 - self.clip_eps)
        self.sum_loss += -math.log(q) if label else -math.log1p(-q)
        self.n += 1
        self.clicks += int(label)
        if self.keep_scores:
            self._labels.append(np.array([label], np.int8))
            self._preds.append(np.array([p], float))

    def add_batch(self, labels, preds) -> None:
        labels = np.asarray(labels)
        preds = np.asarray(preds, float)
        if labels.shape != preds.shape:
            raise ValueError("labels and predictions differ in shape")
        if labels.size and not np.isin(labels, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")
        self.sum_loss += math.fsum(log_loss_terms(labels, preds, self.clip_eps))
        self.n += int(labels.size)
        self.clicks += int(labels.sum())
        if self.keep_scores:
            self._labels.append(labels.astype(np.int8))
            self._preds.append(preds.copy())

    def merge(self, other: "MetricsAccumulator") -> "MetricsAccumulator":
        out = MetricsAccumulator(self.clip_eps, self.keep_scores and other.keep_scores)
        out.n = self.n + other.n
        out.sum_loss = self.sum_loss + other.sum_loss
        out.clicks = self.clicks + other.clicks
        if out.keep_scores:
            out._labels = self._labels + other._labels
            out._preds = self._preds + other._preds
        return out

    @property
    def gamma(self) -> float:
        if self.n == 0:
            raise UndefinedMetricError("empty accumulator")
        return self.clicks / self.n

    @property
    def log_loss(self) -> float:
        if self.n == 0:
            raise UndefinedMetricError("empty accumulator")
        return self.sum_loss / self.n

    def scores(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.keep_scores:
            raise UndefinedMetricError("accumulator does not keep scores")
        if not self._labels:
            return np.zeros(0, np.int8), np.zeros(0)
        return np.concatenate(self._labels), np.concatenate(self._preds)

    def rig(self) -> float:
        return rig(self)

    def auc(self) -> float:
        return auc(self)


def rig(acc: MetricsAccumulator) -> float:
    """1 - mean log-loss / H(gamma), gamma taken from the accumulated labels."""
    if acc.n < 1:
        raise UndefinedMetricError("RIG needs at least one example")
    return 1.0 - acc.log_loss / entropy(acc.gamma)


def rig_from_arrays(labels, preds, clip_eps: float = DEFAULT_CLIP_EPS) -> float:
    acc = MetricsAccumulator(clip_eps, keep_scores=False)
    acc.add_batch(labels, preds)
    return rig(acc)


def auc(acc_or_labels, preds=None) -> float:
    """Probability a random positive outranks a random negative, ties count half."""
    if preds is None:
        labels, preds = acc_or_labels.scores()
    else:
        labels = np.asarray(acc_or_labels)
        preds = np.asarray(preds, float)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    ranks = rankdata(preds, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def rig_lift(variant_rig: float, baseline_rig: float) -> float:
    """Relative RIG change in percent.

    A zero baseline falls back to the percentage-point difference and emits
    :class:`FlaggedLiftWarning`.
    """
    if baseline_rig == 0:
        warnings.warn("baseline RIG is zero; reporting percentage points", FlaggedLiftWarning, stacklevel=2)
        return 100.0 * (variant_rig - baseline_rig)
    return 100.0 * (variant_rig - baseline_rig) / abs(baseline_rig)


def rig_lift_pp(variant_rig: float, baseline_rig: float) -> float:
    return 100.0 * (variant_rig - baseline_rig)


def flops_change(variant: float, baseline: float) -> float:
    if not baseline > 0:
        raise ValueError("baseline FLOPs must be positive")
    return 100.0 * (variant - baseline) / baseline


@dataclass
class MetricsReport:
    mode: str
    log_loss: float
    rig: float
    auc: float
    n: int
    gamma: float
    flops_per_ad: float
    flops_per_request: float
    rig_lift_pct: float | None = None
    rig_lift_pp: float | None = None
    flops_change_pct: float | None = None
    flops_change_request_pct: float | None = None
    rig_lift_min: float | None = None
    rig_lift_max: float | None = None
    lift_flagged: bool = False
    per_seed: list = field(default_factory=list)


CSV_COLUMNS = (
    "mode",
    "rig",
    "rig_lift_pct",
    "flops_per_ad",
    "flops_per_request",
    "flops_change_pct",
    "auc",
    "n",
    "rig_lift_pp",
    "flops_change_request_pct",
    "rig_lift_min",
    "rig_lift_max",
    "log_loss",
    "gamma",
    "lift_flagged",
)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return f"{v:.9g}"
    return str(v)


def report_csv(reports: list[MetricsReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in reports:
        w.writerow([_fmt(getattr(r, c)) for c in CSV_COLUMNS])
    return buf.getvalue()


def read_report_csv(text: str) -> list[dict]:
    return list(csv.DictReader(io.StringIO(text)))


def _signed(v) -> str:
    if v is None or v == "":
        return "n/a"
    return f"{float(v):+.2f}%"


def format_table(rows: list) -> str:
    """Two-column (RIG lift, FLOPs change) text table, one row per variant.

    ``rows`` are MetricsReport objects or dicts read back from report CSV.
    The baseline row is shown only when it is the sole variant.
    """
    get = (lambda r, k: r.get(k)) if rows and isinstance(rows[0], dict) else getattr
    variants = [r for r in rows if get(r, "mode") != "baseline"] or list(rows)
    header = ("Usage of context CTR", "RIG lift", "FLOPs change", "FLOPs change (per request)")
    body = []
    for r in variants:
        lift = get(r, "rig_lift_pct")
        body.append(
            (
                str(get(r, "mode")),
                _signed(0.0 if lift in (None, "") and get(r, "mode") == "baseline" else lift),
                _signed(get(r, "flops_change_pct") if get(r, "mode") != "baseline" else 0.0),
                _signed(get(r, "flops_change_request_pct") if get(r, "mode") != "baseline" else 0.0),
            )
        )
    widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
    lines = [" | ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("-+-".join("-" * w for w in widths))
    for row in body:
        lines.append(" | ".join(c.ljust(w) for c, w in zip(row, widths)))
    return "\n".join(lines) + "\n"
