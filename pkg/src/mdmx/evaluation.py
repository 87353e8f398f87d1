"""Ground-truth-aware metrics and the JSON-lines metrics stream.

This is the only module that reads :class:`~mdmx.datagen.GroundTruth`.
Training code receives an :class:`Evaluator` as an opaque observer.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .datagen import CLEAN, OOD, CleanDataset, GroundTruth
from .nn import Model, predict_logits
from .selection import OodScores, SplitResult, ood_mask

SCHEMA_VERSION = 1
FIELDS = ("v", "round", "epoch", "l_sup", "l_unsup", "l_self", "test_acc", "ood_auroc", "sel_p", "sel_r")
_INT_FIELDS = ("v", "round", "epoch")
_FLOAT_FIELDS = ("l_sup", "l_unsup", "l_self")
_NULLABLE_FIELDS = ("test_acc", "ood_auroc", "sel_p", "sel_r")


class MetricsFormatError(ValueError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.line = line


def accuracy(model: Model, test: CleanDataset) -> float:
    """Top-1 accuracy; ties in the logits go to the smaller class index."""
    if len(test) == 0:
        raise ValueError("empty test set")
    pred = np.argmax(predict_logits(model, test.features), axis=1)
    return float(np.mean(pred == test.labels))


def _is_ood(truth) -> np.ndarray:
    if isinstance(truth, GroundTruth):
        return truth.kind == OOD
    return np.asarray(truth, dtype=bool)


def ood_auroc(scores: OodScores | np.ndarray, truth) -> float:
    """Mann-Whitney AUROC of OOD samples scoring above in-distribution ones, ties counted half."""
    s = scores.scores if isinstance(scores, OodScores) else np.asarray(scores, dtype=np.float64)
    pos = _is_ood(truth)
    n_pos = int(pos.sum())
    n_neg = pos.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC is undefined unless both OOD and in-distribution samples are present")
    ranks = rankdata(s, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def ood_recall_at(scores: OodScores | np.ndarray, truth, fraction: float) -> float:
    """Share of true OOD samples among the top ``fraction`` of scores."""
    pos = _is_ood(truth)
    if not pos.any():
        raise ValueError("no OOD samples in truth")
    flagged = ood_mask(scores, fraction)
    return float(np.sum(flagged & pos) / pos.sum())


@dataclass(frozen=True)
class SelectionQuality:
    precision: float
    recall: float
    empty: bool = False


def selection_prf(split: SplitResult, truth: GroundTruth) -> SelectionQuality:
    """Precision and recall of the clean set against the truly clean samples that were active."""
    clean = truth.kind == CLEAN
    x = split.clean_indices
    active = np.concatenate([split.clean_indices, split.noisy_indices])
    hits = int(np.sum(clean[x]))
    n_clean_active = int(np.sum(clean[active]))
    recall = hits / n_clean_active if n_clean_active else 0.0
    if x.shape[0] == 0:
        return SelectionQuality(0.0, recall, empty=True)
    return SelectionQuality(hits / x.shape[0], recall)


class Evaluator:
    """Holds the test set and the hidden ground truth; training code only calls its methods."""

    def __init__(self, test: CleanDataset | None, truth: GroundTruth | None):
        self._test = test
        self._truth = truth

    def test_accuracy(self, model: Model) -> float | None:
        return None if self._test is None else accuracy(model, self._test)

    def ood_auroc(self, scores: OodScores) -> float | None:
        if self._truth is None:
            return None
        pos = self._truth.kind == OOD
        if pos.all() or not pos.any():
            return None
        return ood_auroc(scores, self._truth)

    def ood_recall(self, scores: OodScores, fraction: float) -> float | None:
        if self._truth is None or not np.any(self._truth.kind == OOD):
            return None
        return ood_recall_at(scores, self._truth, fraction)

    def selection(self, split: SplitResult) -> SelectionQuality | None:
        return None if self._truth is None else selection_prf(split, self._truth)


# ---------------------------------------------------------------------------
# metrics stream


@dataclass
class MetricsRecord:
    round: int
    epoch: int
    l_sup: float = 0.0
    l_unsup: float = 0.0
    l_self: float = 0.0
    test_acc: float | None = None
    ood_auroc: float | None = None
    sel_p: float | None = None
    sel_r: float | None = None
    v: int = SCHEMA_VERSION

    def __post_init__(self):
        for name in ("test_acc", "ood_auroc", "sel_p", "sel_r"):
            val = getattr(self, name)
            if val is not None and not 0.0 <= val <= 1.0:
                raise ValueError(f"{name}={val} outside [0, 1]")

    def to_json(self) -> str:
        parts = []
        for name in FIELDS:
            val = getattr(self, name)
            if val is None:
                text = "null"
            elif name in _INT_FIELDS:
                text = str(int(val))
            else:
                if not math.isfinite(val):
                    raise ValueError(f"{name} is not finite")
                text = "%.17g" % val
            parts.append(f'"{name}":{text}')
        return "{" + ",".join(parts) + "}"


def write_metrics(record: MetricsRecord, stream) -> None:
    stream.write(record.to_json() + "\n")
    stream.flush()


def _validate(obj, path, lineno) -> MetricsRecord:
    if not isinstance(obj, dict):
        raise MetricsFormatError(path, lineno, "record is not an object")
    if set(obj) != set(FIELDS):
        extra = sorted(set(obj) - set(FIELDS))
        missing = sorted(set(FIELDS) - set(obj))
        raise MetricsFormatError(path, lineno, f"schema mismatch (missing {missing}, unexpected {extra})")
    if obj["v"] != SCHEMA_VERSION:
        raise MetricsFormatError(path, lineno, f"unsupported schema version {obj['v']!r}")
    for name in _INT_FIELDS:
        if not isinstance(obj[name], int) or isinstance(obj[name], bool):
            raise MetricsFormatError(path, lineno, f"{name} must be an integer")
    for name in _FLOAT_FIELDS + _NULLABLE_FIELDS:
        val = obj[name]
        if val is None and name in _NULLABLE_FIELDS:
            continue
        if not isinstance(val, (int, float)) or isinstance(val, bool):
            raise MetricsFormatError(path, lineno, f"{name} must be a number")
        obj[name] = float(val)
    try:
        return MetricsRecord(**obj)
    except ValueError as exc:
        raise MetricsFormatError(path, lineno, str(exc)) from None


def read_metrics(path) -> list[MetricsRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MetricsFormatError(path, lineno, f"invalid JSON: {exc.msg}") from None
            records.append(_validate(obj, path, lineno))
    return records
