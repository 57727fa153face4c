"""Accuracy, calibration error and unimodal/multimodal agreement counts."""

from __future__ import annotations

from fractions import Fraction
from dataclasses import asdict, dataclass

import numpy as np

from mlb_lab.core import softmax
from mlb_lab.data import minibatches
from mlb_lab.errors import InputError

# column order of the agreement matrix (unimodal correctness pattern)
AGREEMENT_COLUMNS = ("both_wrong", "only_a_right", "only_v_right", "both_right")
AGREEMENT_ROWS = ("mm_wrong", "mm_right")


def top1(logits, labels) -> float:
    """Top-1 accuracy; argmax ties resolve to the lowest class index."""
    logits = np.asarray(logits)
    y = np.asarray(labels)
    if y.size == 0:
        raise InputError("accuracy of an empty set")
    return float(np.mean(np.argmax(logits, axis=1) == y))


def bin_edges(bins: int) -> np.ndarray:
    return np.arange(bins + 1) / bins


def ece(probs, labels, bins: int = 10) -> float:
    """Expected calibration error with equal-width, right-closed bins over (0, 1].

    Computed as ``sum_b |sum_{i in b} (correct_i - conf_i)| / N``, which equals
    ``sum_b (n_b / N) |acc_b - conf_b|``. The sums are exact rationals, so the
    result is the correctly rounded value.
    """
    probs = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels)
    n = y.shape[0]
    if n == 0:
        raise InputError("ECE of an empty set")
    if bins < 1:
        raise InputError(f"bins must be >= 1, got {bins}")
    conf = probs.max(axis=1)
    correct = np.argmax(probs, axis=1) == y
    idx = np.clip(np.searchsorted(bin_edges(bins), conf, side="left") - 1, 0, bins - 1)
    total = Fraction(0)
    for b in range(bins):
        mask = idx == b
        if mask.any():
            gap = int(correct[mask].sum()) - sum(map(Fraction, conf[mask].tolist()))
            total += abs(gap)
    return float(total / n)


def agreement_matrix(preds_mm, preds_uni, labels) -> np.ndarray:
    """``2 x 4`` counts: rows mm wrong/right, columns per ``AGREEMENT_COLUMNS``.

    ``preds_uni`` is ``(preds_v, preds_a)``.
    """
    mm = np.asarray(preds_mm)
    pv, pa = (np.asarray(p) for p in preds_uni)
    y = np.asarray(labels)
    if not (mm.shape == pv.shape == pa.shape == y.shape):
        raise InputError(
            f"length mismatch: mm {mm.shape}, v {pv.shape}, a {pa.shape}, labels {y.shape}"
        )
    v_ok = pv == y
    a_ok = pa == y
    col = np.where(v_ok & a_ok, 3, np.where(v_ok, 2, np.where(a_ok, 1, 0)))
    row = (mm == y).astype(np.int64)
    out = np.zeros((2, 4), dtype=np.int64)
    np.add.at(out, (row, col), 1)
    return out


@dataclass
class EvalReport:
    acc_mm: float
    acc_uni: dict | None
    ece: float
    agreement: list | None
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def predict(model, ds, batch: int = 1024, cosine_scale=None):
    """Concatenated multimodal and unimodal logits over a dataset."""
    mm, uv, ua = [], [], []
    for b in minibatches(ds, batch):
        fo = model.forward(b.xv, b.xa, cosine_scale)
        mm.append(fo.logits_mm)
        if fo.logits_uni is not None:
            uv.append(fo.logits_uni[0])
            ua.append(fo.logits_uni[1])
    uni = (np.concatenate(uv), np.concatenate(ua)) if uv else None
    return np.concatenate(mm), uni


def evaluate(model, ds, bins: int = 10, cosine_scale=None) -> EvalReport:
    logits, uni = predict(model, ds, cosine_scale=cosine_scale)
    probs = softmax(logits)
    acc = top1(logits, ds.y)
    report = EvalReport(acc, None, ece(probs, ds.y, bins), None, len(ds))
    if uni is not None:
        report.acc_uni = {"v": top1(uni[0], ds.y), "a": top1(uni[1], ds.y)}
        preds = [np.argmax(u, axis=1) for u in uni]
        report.agreement = agreement_matrix(np.argmax(logits, axis=1), preds, ds.y).tolist()
    return report
