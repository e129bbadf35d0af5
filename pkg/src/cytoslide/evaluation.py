"""Classifier scoring: confusion counts, summary metrics, ROC/AUC, Q-point.

Also hosts a small logistic-regression baseline trained with the same
optimizer protocol used for the CNNs (mini-batch SGD with momentum on
cross-entropy), and a reader for externally produced score tables.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .patchgen import ABNORMAL, LABELS, NORMAL
from .raster import otsu_level, label_components, to_rgb

log = logging.getLogger(__name__)

DARK_NORM = 100.0


class ScoreFormatError(ValueError):
    pass


class ScoreRecord(NamedTuple):
    id: str
    true_label: str
    score: float


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclass(frozen=True)
class MetricsReport:
    acc: float
    prec: float
    rec: float
    f1: float
    mcc: float


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float


def confusion(records: Sequence[ScoreRecord], threshold: float = 0.5) -> ConfusionMatrix:
    if len(records) == 0:
        raise ValueError("confusion needs at least one record")
    tp = tn = fp = fn = 0
    for r in records:
        pred = r.score >= threshold
        pos = r.true_label == ABNORMAL
        if pred and pos:
            tp += 1
        elif pred:
            fp += 1
        elif pos:
            fn += 1
        else:
            tn += 1
    return ConfusionMatrix(tp, tn, fp, fn)


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def metrics(cm: ConfusionMatrix) -> MetricsReport:
    """ACC, precision, recall, F1 and MCC; a zero denominator gives 0."""
    if cm.total <= 0:
        raise ValueError("empty confusion matrix")
    tp, tn, fp, fn = cm.tp, cm.tn, cm.fp, cm.fn
    prec = _ratio(tp, tp + fp)
    rec = _ratio(tp, tp + fn)
    den = math.sqrt(float(tp + fp) * (tp + fn) * (tn + fp) * (tn + fn))
    return MetricsReport(
        acc=(tp + tn) / cm.total,
        prec=prec,
        rec=rec,
        f1=_ratio(2 * prec * rec, prec + rec),
        mcc=_ratio(tp * tn - fp * fn, den),
    )


def _split(records):
    scores = np.array([r.score for r in records], dtype=np.float64)
    pos = np.array([r.true_label == ABNORMAL for r in records])
    return scores, pos


def roc(records: Sequence[ScoreRecord]) -> RocCurve:
    """ROC over every distinct score, equal scores grouped into one step."""
    scores, pos = _split(records)
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs at least one record of each class")
    order = np.argsort(-scores, kind="stable")
    s, p = scores[order], pos[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tps = np.cumsum(p)[last]
    fps = np.cumsum(~p)[last]
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    thresholds = np.r_[np.inf, s[last]]
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2))
    return RocCurve(fpr, tpr, thresholds, auc)


def q_point(curve: RocCurve) -> tuple[float, float, float]:
    """Operating point maximizing ``tpr + (1 - fpr)``; ties go to lower fpr."""
    j = curve.tpr - curve.fpr
    best = j.max()
    cand = np.flatnonzero(np.isclose(j, best, rtol=0, atol=1e-12))
    k = int(cand[np.argmin(curve.fpr[cand])])
    return float(curve.fpr[k]), float(curve.tpr[k]), float(curve.thresholds[k])


# --- features ---------------------------------------------------------------

FEATURE_NAMES = ("nuclei_fraction", "mean_norm", "std_norm", "dark_fraction",
                 "superpixel_density", "nucleus_count")


def extract_features(patch, nuclei=None, superpixels=None) -> np.ndarray:
    """Fixed-order patch descriptor.

    ``nuclei`` / ``superpixels`` are optional cell-graph outputs for the patch.
    Without them the nuclei mask falls back to an Otsu split of pixel colour
    norms and superpixel density is reported as 0.
    """
    rgb = to_rgb(patch).astype(np.float64)
    norm = np.linalg.norm(rgb, axis=2)
    if nuclei is not None:
        mask = np.asarray(nuclei.mask, dtype=bool)
        n_nuclei = len(nuclei.components)
    else:
        hist = np.bincount(np.rint(norm).astype(np.int64).ravel())
        t = otsu_level(hist)
        mask = np.zeros(norm.shape, dtype=bool) if t is None else np.rint(norm) <= t
        n_nuclei = len(label_components(mask)[1])
    density = superpixels.n / norm.size if superpixels is not None else 0.0
    return np.array([mask.mean(), norm.mean(), norm.std(), (norm < DARK_NORM).mean(),
                     density, float(n_nuclei)])


# --- logistic baseline ------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.005
    momentum: float = 0.9
    batch_size: int = 32
    max_epochs: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")


@dataclass
class LogisticModel:
    weights: np.ndarray
    bias: float
    mean: np.ndarray
    std: np.ndarray
    history: list[float] = field(default_factory=list)

    @classmethod
    def zeros(cls, dim: int) -> "LogisticModel":
        return cls(np.zeros(dim), 0.0, np.zeros(dim), np.ones(dim))

    def to_json(self) -> str:
        d = {"weights": self.weights.tolist(), "bias": self.bias,
             "mean": self.mean.tolist(), "std": self.std.tolist()}
        return json.dumps(d, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "LogisticModel":
        d = json.loads(text)
        return cls(np.array(d["weights"], dtype=np.float64), float(d["bias"]),
                   np.array(d["mean"], dtype=np.float64), np.array(d["std"], dtype=np.float64))


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def loss_and_grad(w: np.ndarray, b: float, X: np.ndarray, y: np.ndarray):
    """Mean binary cross-entropy and its gradient ``(dw, db)``."""
    z = X @ w + b
    # log(1 + e^z) - y z, written to stay finite for large |z|
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
    r = sigmoid(z) - y
    return loss, X.T @ r / len(y), float(r.mean())


def predict(model: LogisticModel, features) -> np.ndarray | float:
    x = np.asarray(features, dtype=np.float64)
    if x.shape[-1] != model.weights.shape[0]:
        raise ValueError(f"feature dimension {x.shape[-1]} != model dimension {model.weights.shape[0]}")
    s = sigmoid((x - model.mean) / model.std @ model.weights + model.bias)
    return float(s) if x.ndim == 1 else s


def _accuracy(w, b, X, y) -> float:
    return float(((X @ w + b >= 0) == (y > 0.5)).mean())


def train_logistic(X_train, y_train, X_val=None, y_val=None,
                   cfg: TrainConfig = TrainConfig()) -> LogisticModel:
    """Mini-batch SGD with classical momentum on standardized features.

    Returns the weights from the epoch with the best validation accuracy
    (training accuracy when no validation set is given); earlier epochs win
    ties. ``model.history`` holds the full-train-set loss after each epoch.
    """
    X = np.asarray(X_train, dtype=np.float64)
    y = np.asarray(y_train, dtype=np.float64)
    if len(np.unique(y)) < 2:
        raise ValueError("training set must contain both classes")
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std[std == 0] = 1.0
    Xs = (X - mean) / std
    if X_val is not None and len(X_val):
        Vx = (np.asarray(X_val, dtype=np.float64) - mean) / std
        Vy = np.asarray(y_val, dtype=np.float64)
    else:
        Vx, Vy = Xs, y
    rng = np.random.default_rng(cfg.seed)
    w = np.zeros(X.shape[1])
    b = 0.0
    vw = np.zeros_like(w)
    vb = 0.0
    best = (-1.0, w.copy(), b)
    history = []
    n = len(y)
    for _ in range(cfg.max_epochs):
        order = rng.permutation(n)
        for i in range(0, n, cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            _, gw, gb = loss_and_grad(w, b, Xs[idx], y[idx])
            vw = cfg.momentum * vw - cfg.learning_rate * gw
            vb = cfg.momentum * vb - cfg.learning_rate * gb
            w = w + vw
            b = b + vb
        history.append(loss_and_grad(w, b, Xs, y)[0])
        acc = _accuracy(w, b, Vx, Vy)
        if acc > best[0]:
            best = (acc, w.copy(), b)
    return LogisticModel(best[1], float(best[2]), mean, std, history)


# --- score files and reports ------------------------------------------------

def parse_scores(text: str, source: str = "<scores>") -> list[ScoreRecord]:
    """Read ``id,true_label,score`` rows; a header row is optional."""
    out = []
    rows = list(csv.reader(text.splitlines()))
    if not any(rows):
        log.warning("%s: no score records", source)
        return out
    for lineno, row in enumerate(rows, start=1):
        if not row or not "".join(row).strip():
            continue
        if lineno == 1 and [c.strip().lower() for c in row] == ["id", "true_label", "score"]:
            continue
        if len(row) != 3:
            raise ScoreFormatError(f"{source}:{lineno}: expected 3 fields, got {len(row)}")
        rid, lab, sc = (c.strip() for c in row)
        lab = lab.lower()
        if lab not in LABELS:
            raise ScoreFormatError(f"{source}:{lineno}: unknown label {lab!r}")
        try:
            score = float(sc)
        except ValueError:
            raise ScoreFormatError(f"{source}:{lineno}: score {sc!r} is not a number") from None
        if not 0.0 <= score <= 1.0:
            raise ScoreFormatError(f"{source}:{lineno}: score {score} outside [0, 1]")
        out.append(ScoreRecord(rid, lab, score))
    if not out:
        log.warning("%s: no score records", source)
    return out


def ingest_scores(path) -> list[ScoreRecord]:
    return parse_scores(Path(path).read_text(encoding="utf-8"), str(path))


def dump_scores(records: Sequence[ScoreRecord]) -> str:
    return "id,true_label,score\n" + "".join(f"{r.id},{r.true_label},{r.score:.6f}\n" for r in records)


def format_report(cm: ConfusionMatrix, m: MetricsReport, curve: RocCurve | None) -> str:
    lines = [
        f"tn {cm.tn}", f"fp {cm.fp}", f"fn {cm.fn}", f"tp {cm.tp}",
        f"acc {m.acc:.4f}", f"prec {m.prec:.4f}", f"rec {m.rec:.4f}",
        f"f1 {m.f1:.4f}", f"mcc {m.mcc:.4f}",
    ]
    if curve is not None:
        fq, tq, thq = q_point(curve)
        lines += [f"auc {curve.auc:.4f}", f"q_point {fq:.4f} {tq:.4f} {thq:.6f}",
                  f"roc_points {len(curve.fpr)}"]
        lines += [f"{f:.6f} {t:.6f} {th:.6f}" for f, t, th in
                  zip(curve.fpr, curve.tpr, curve.thresholds)]
    return "\n".join(lines) + "\n"


def roc_table(curve: RocCurve) -> str:
    return "fpr,tpr\n" + "".join(f"{f:.6f},{t:.6f}\n" for f, t in zip(curve.fpr, curve.tpr))


def evaluate(records: Sequence[ScoreRecord], threshold: float = 0.5):
    """Confusion, metrics and (when both classes are present) the ROC curve."""
    cm = confusion(records, threshold)
    m = metrics(cm)
    labels = {r.true_label for r in records}
    curve = roc(records) if labels == {NORMAL, ABNORMAL} else None
    return cm, m, curve


def records_from_confusion(cm: ConfusionMatrix, hi: float = 0.9, lo: float = 0.1) -> list[ScoreRecord]:
    """Synthetic score records reproducing a confusion matrix at threshold 0.5."""
    out = []
    for prefix, label, score, n in (("tp", ABNORMAL, hi, cm.tp), ("fn", ABNORMAL, lo, cm.fn),
                                    ("tn", NORMAL, lo, cm.tn), ("fp", NORMAL, hi, cm.fp)):
        out += [ScoreRecord(f"{prefix}{i}", label, score) for i in range(n)]
    return out


def metrics_dict(m: MetricsReport) -> dict[str, float]:
    return asdict(m)
