"""AUC, training-set threshold calibration, accuracy, seed aggregation, and
per-case attribution reports."""
from __future__ import annotations

import statistics

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .embedding import EmbeddedData
from .errors import ConfigurationError, InputError
from .game import ShapleyState
from .model import ModelParams, agent_forward, forward


def auc(scores: Sequence[float], labels: Sequence[int]) -> float | None:
    """Mann-Whitney AUC (ties count one half); ``None`` when only one label is present."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise InputError(f"scores shape {s.shape} != labels shape {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise InputError("labels must be 0 or 1")
    pos = y == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(s)  # average ranks: multiples of 1/2, exact in float64
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class ThresholdVector:
    thresholds: np.ndarray                 # (C,) in logit space
    train_scores: list[np.ndarray]         # sorted training scores per class

    def percentile(self, score: float, k: int) -> float:
        return percentile_transform(score, k, self)


def _youden_threshold(s: np.ndarray, y: np.ndarray) -> float:
    pos, neg = int(y.sum()), int((1 - y).sum())
    if pos == 0:
        return np.inf
    if neg == 0:
        return -np.inf
    u = np.unique(s)
    if u.size == 1:
        return float(u[0])
    mids = (u[:-1] + u[1:]) / 2.0
    # decision "score > mid" selects scores >= u[j+1]
    sp = np.sort(s[y == 1])
    sn = np.sort(s[y == 0])
    tp = sp.size - np.searchsorted(sp, u[1:], side="left")
    fp = sn.size - np.searchsorted(sn, u[1:], side="left")
    j_scaled = tp * neg - fp * pos          # integer J * pos * neg
    return float(mids[int(np.argmax(j_scaled))])  # first max = smallest threshold


def fit_thresholds(train_scores: np.ndarray, train_labels: np.ndarray) -> ThresholdVector:
    """Per-class Youden-J threshold over midpoints of consecutive distinct scores.

    Only training arrays enter here. All-negative classes get ``+inf`` and
    all-positive classes ``-inf``.
    """
    s = np.asarray(train_scores, dtype=np.float64)
    y = np.asarray(train_labels, dtype=np.float64)
    if s.ndim == 1:
        s, y = s[:, None], y[:, None]
    if s.shape != y.shape:
        raise InputError(f"scores shape {s.shape} != labels shape {y.shape}")
    if s.shape[0] == 0:
        raise ConfigurationError("cannot fit thresholds on an empty class column")
    t = np.array([_youden_threshold(s[:, k], y[:, k]) for k in range(s.shape[1])])
    return ThresholdVector(t, [np.sort(s[:, k]) for k in range(s.shape[1])])


def accuracy(test_scores: np.ndarray, test_labels: np.ndarray,
             thresholds: ThresholdVector) -> tuple[np.ndarray, float]:
    """Per-class mean of ``[ (score > t_k) == y ]`` and its macro average."""
    s = np.asarray(test_scores, dtype=np.float64)
    y = np.asarray(test_labels, dtype=np.float64)
    if s.ndim == 1:
        s, y = s[:, None], y[:, None]
    if s.shape != y.shape or s.shape[1] != thresholds.thresholds.size:
        raise InputError(f"scores {s.shape}, labels {y.shape}, "
                         f"thresholds {thresholds.thresholds.shape} disagree")
    per = ((s > thresholds.thresholds).astype(np.float64) == y).mean(axis=0)
    return per, float(per.mean())


def percentile_transform(score: float, k: int, thresholds: ThresholdVector) -> float:
    """``100 * #{train scores <= score} / #train`` for class ``k``."""
    ref = thresholds.train_scores[k]
    if ref.size == 0:
        raise ConfigurationError(f"no training scores retained for class {k}")
    return 100.0 * np.searchsorted(ref, score, side="right") / ref.size


def predict_scores(params: ModelParams, data: EmbeddedData) -> np.ndarray:
    return forward(params, data.partitions, data.global_).logits


@dataclass
class MetricsSummary:
    class_names: list[str]
    auc: list[float | None]
    accuracy: list[float]

    @property
    def macro_auc(self) -> float | None:
        vals = [a for a in self.auc if a is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def macro_accuracy(self) -> float:
        return float(np.mean(self.accuracy))


def evaluate(params: ModelParams, train: EmbeddedData, test: EmbeddedData,
             class_names: Sequence[str]) -> tuple[MetricsSummary, ThresholdVector]:
    """Thresholds from training predictions, AUC and accuracy on the test set."""
    thr = fit_thresholds(predict_scores(params, train), train.labels)
    s = predict_scores(params, test)
    aucs = [auc(s[:, k], test.labels[:, k]) for k in range(s.shape[1])]
    per, _ = accuracy(s, test.labels, thr)
    return MetricsSummary(list(class_names), aucs, per.tolist()), thr


@dataclass
class Stat:
    mean: float | None
    std: float | None
    n: int
    incomplete: bool = False    # some seeds were N/A


def _stat(values: Sequence[float | None]) -> Stat:
    vals = [float(v) for v in values if v is not None]
    if not vals:
        return Stat(None, None, 0, True)
    # exact rational arithmetic: identical seeds give std exactly 0
    return Stat(statistics.mean(vals), statistics.pstdev(vals), len(vals), len(vals) < len(values))


@dataclass
class AggregateSummary:
    class_names: list[str]
    per_seed: list[MetricsSummary]
    auc: list[Stat] = field(default_factory=list)
    accuracy: list[Stat] = field(default_factory=list)
    macro_auc: Stat | None = None
    macro_accuracy: Stat | None = None

    def to_json(self) -> dict:
        return {
            "n_seeds": len(self.per_seed),
            "per_class": {c: {"AUC": asdict(self.auc[k]), "Accuracy": asdict(self.accuracy[k])}
                          for k, c in enumerate(self.class_names)},
            "macro": {"AUC": asdict(self.macro_auc), "Accuracy": asdict(self.macro_accuracy)},
            "seeds": [{"auc": m.auc, "accuracy": m.accuracy, "macro_auc": m.macro_auc,
                       "macro_accuracy": m.macro_accuracy} for m in self.per_seed],
        }


def multi_seed_aggregate(summaries: Sequence[MetricsSummary]) -> AggregateSummary:
    """Mean and population std per metric; N/A values are dropped and counted."""
    if not summaries:
        raise InputError("need at least one summary")
    names = summaries[0].class_names
    if any(m.class_names != names for m in summaries):
        raise InputError("summaries disagree on class names")
    C = len(names)
    return AggregateSummary(
        list(names), list(summaries),
        [_stat([m.auc[k] for m in summaries]) for k in range(C)],
        [_stat([m.accuracy[k] for m in summaries]) for k in range(C)],
        _stat([m.macro_auc for m in summaries]),
        _stat([m.macro_accuracy for m in summaries]))


@dataclass
class ClassAttribution:
    class_name: str
    logit: float
    percentile: float
    threshold: float
    threshold_percentile: float
    decision: bool
    contributions: list[float]          # W[i,k] * h[i,k]
    shares: list[float] | None          # contributions normalized over agents
    phi_ema: list[float] | None


@dataclass
class AttributionReport:
    case_id: str
    agent_names: list[str]
    classes: list[ClassAttribution]

    def to_json(self) -> dict:
        return asdict(self)


def attribution_report(params: ModelParams, case: EmbeddedData, thresholds: ThresholdVector,
                       shapley: ShapleyState | None, class_names: Sequence[str],
                       agent_names: Sequence[str]) -> AttributionReport:
    """Explain the full-coalition prediction of a single case."""
    if len(case) != 1:
        raise InputError(f"attribution_report takes one case, got {len(case)}")
    logits = predict_scores(params, case)[0]
    W = params.W
    h = agent_forward(params, case.partitions)[0][0] if params.n_agents else np.zeros((0, logits.size))
    phi = shapley.phi_ema if shapley is not None else None
    out = []
    for k, name in enumerate(class_names):
        contrib = W[:, k] * h[:, k]
        total = contrib.sum()
        t = float(thresholds.thresholds[k])
        out.append(ClassAttribution(
            name, float(logits[k]), percentile_transform(logits[k], k, thresholds), t,
            percentile_transform(t, k, thresholds), bool(logits[k] > t), contrib.tolist(),
            (contrib / total).tolist() if total != 0 else None,
            None if phi is None else phi[:, k].tolist()))
    return AttributionReport(case.ids[0], list(agent_names), out)


def _ordinal(p: float) -> str:
    n = int(round(p))
    suffix = "th" if 10 <= n % 100 <= 20 else {1: "st", 2: "nd", 3: "rd"}.get(n % 10, "th")
    return f"{n}{suffix}"


def render_report(report: AttributionReport, top: int = 2) -> str:
    lines = [f"Case {report.case_id}"]
    for c in report.classes:
        verdict = "recommended" if c.decision else "not recommended"
        line = (f"{c.class_name} scored at {_ordinal(c.percentile)} percentile; cutoff at "
                f"{_ordinal(c.threshold_percentile)} percentile ({verdict})")
        if c.shares is not None and report.agent_names:
            order = np.argsort(-np.asarray(c.shares), kind="stable")[:top]
            tops = ", ".join(f"{report.agent_names[i]} ({100 * c.shares[i]:.0f}%)" for i in order)
            line += f"; top contributing agents: {tops}"
        lines.append(line)
    return "\n".join(lines)
