"""Realism scoring and information worth.

The perceptual distance is a multi-scale stand-in for a learned perceptual
metric: at each pyramid level (dyadic 2x2 mean downsampling) the two images
are standardized per channel by the *pair's* joint mean and std (floored at
1e-6), and the level score is the RMS of the standardized difference. The
distance is the mean over levels. Joint standardization keeps the all-zeros
vs all-ones calibration pair at a positive distance, which defines d_max.
The metric is a pseudometric (nonnegative, symmetric, d(x, x) = 0); the
standardization breaks the triangle inequality, which is not claimed.

Information worth: each prediction subset i gets a label distribution
p_j^i built from realism-weighted memberships, its entropy E_i (natural
log, 0 ln 0 = 0), and a mass weight gamma_i; the aggregate is
sum_i gamma_i E_i, reported in nats.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass

import numpy as np

from .classifier import Classifier, forward, softmax
from .param_space import ConfigError

STD_FLOOR = 1e-6
MEMBERSHIP_MODES = ("binary", "fractional")


@dataclass(frozen=True)
class RealismConfig:
    levels: int = 3
    d_max: float | None = None  # None: calibrate as distance(zeros, ones)

    def __post_init__(self):
        if self.levels < 1:
            raise ConfigError("pyramid levels must be >= 1")
        if self.d_max is not None and self.d_max <= 0:
            raise ConfigError("d_max must be positive")


def _downsample(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    img = img[: h - h % 2, : w - w % 2]
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


def perceptual_distance(x: np.ndarray, xp: np.ndarray, cfg: RealismConfig) -> float:
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(xp, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigError(f"image shapes differ: {a.shape} vs {b.shape}")
    scores = []
    for level in range(cfg.levels):
        if level > 0:
            if min(a.shape[0], a.shape[1]) < 2:
                break
            a, b = _downsample(a), _downsample(b)
        axes = (0, 1)
        both = np.concatenate([a.reshape(-1, a.shape[-1]), b.reshape(-1, b.shape[-1])])
        mean = both.mean(axis=0)
        std = np.maximum(both.std(axis=0), STD_FLOOR)
        za = (a - mean) / std
        zb = (b - mean) / std
        scores.append(float(np.sqrt(np.mean((za - zb) ** 2))))
    return float(np.mean(scores))


def d_max_value(shape: tuple[int, ...], cfg: RealismConfig) -> float:
    """The calibration distance between an all-zeros and an all-ones image."""
    if cfg.d_max is not None:
        return cfg.d_max
    return perceptual_distance(np.zeros(shape), np.ones(shape), cfg)


def realism(xp: np.ndarray, xstar: np.ndarray, cfg: RealismConfig) -> float:
    """rho = clamp(1 - d(x', x*) / d_max, 0, 1); rho(x*, x*) = 1."""
    d = perceptual_distance(xp, xstar, cfg)
    return float(np.clip(1.0 - d / d_max_value(np.asarray(xstar).shape, cfg), 0.0, 1.0))


def membership(model: Classifier, x: np.ndarray, mode: str) -> np.ndarray:
    """Binary: one-hot at the predicted class (ties to the lowest index).
    Fractional: the softmax vector."""
    if mode not in MEMBERSHIP_MODES:
        raise ConfigError(f"membership mode must be one of {MEMBERSHIP_MODES}")
    logits = forward(model, x)
    if mode == "fractional":
        return softmax(logits)
    out = np.zeros(model.n_classes)
    out[int(np.argmax(logits))] = 1.0
    return out


@dataclass
class InfoWorthReport:
    p: np.ndarray            # (L, L): rows prediction subsets, cols true labels
    gamma: np.ndarray        # (L,)
    entropy: np.ndarray      # (L,)
    aggregate: float         # nats
    membership_mode: str
    realism_weighted: bool

    def to_json_dict(self) -> dict:
        return {
            "aggregate_nats": self.aggregate,
            "entropy": [float(e) for e in self.entropy],
            "gamma": [float(g) for g in self.gamma],
            "membership_mode": self.membership_mode,
            "p": [[float(v) for v in row] for row in self.p],
            "realism_weighted": self.realism_weighted,
        }


def information_worth(memberships: np.ndarray, labels: np.ndarray, rho: np.ndarray,
                      n_classes: int, membership_mode: str = "binary",
                      realism_weighted: bool = True) -> InfoWorthReport:
    mem = np.asarray(memberships, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    rho = np.asarray(rho, dtype=np.float64)
    if mem.ndim != 2 or mem.shape[1] != n_classes or len(mem) == 0:
        raise ConfigError("memberships must be a non-empty (m, L) matrix")
    if len(labels) != len(mem) or len(rho) != len(mem):
        raise ConfigError("memberships, labels and rho must have equal length")
    if np.any(rho < 0) or np.any(rho > 1):
        raise ConfigError("realism weights must lie in [0, 1]")
    if not np.allclose(mem.sum(axis=1), 1.0, atol=1e-9):
        raise ConfigError("each membership vector must sum to 1")
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise ConfigError("label out of range")

    onehot = np.zeros((len(labels), n_classes))
    onehot[np.arange(len(labels)), labels] = 1.0
    weighted = mem * rho[:, None]            # (m, L) realism-weighted memberships
    counts = weighted.T @ onehot             # (L, L): subset i x true class j
    mass = counts.sum(axis=1)                # (L,)
    total = mass.sum()
    if total <= 0:
        raise ConfigError("all realism weights are zero; information worth undefined")

    p = np.zeros((n_classes, n_classes))
    nonzero = mass > 0
    p[nonzero] = counts[nonzero] / mass[nonzero, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(p), 0.0)
    entropy = -plogp.sum(axis=1)
    entropy[~nonzero] = 0.0
    gamma = mass / total
    aggregate = float(np.sum(gamma * entropy))
    return InfoWorthReport(p, gamma, entropy, aggregate, membership_mode, realism_weighted)


def info_worth_for_points(model: Classifier, images: np.ndarray, labels: np.ndarray,
                          rho: np.ndarray, mode: str) -> InfoWorthReport:
    mem = np.stack([membership(model, img, mode) for img in images])
    return information_worth(mem, labels, rho, model.n_classes, membership_mode=mode)


# ---------------------------------------------------------------------------
# Accuracy tables (benign row first, one row per strategy)
# ---------------------------------------------------------------------------

@dataclass
class AccuracyTable:
    class_count: int
    rows: list[tuple[str, list[float], float]]  # (strategy, per-class, overall)
    meta: dict[str, str]

    def overall(self, strategy: str) -> float:
        for name, _, ov in self.rows:
            if name == strategy:
                return ov
        raise KeyError(strategy)


def per_class_accuracy(labels: np.ndarray, correct: np.ndarray, n_classes: int,
                       strict: bool = True) -> tuple[list[float | None], float]:
    """Per-class accuracies plus the class-size weighted overall. A class with
    no samples raises when strict, else reports None for that class."""
    labels = np.asarray(labels, dtype=np.int64)
    correct = np.asarray(correct, dtype=bool)
    per: list[float | None] = []
    for c in range(n_classes):
        mask = labels == c
        if not np.any(mask):
            if strict:
                raise ConfigError(f"no samples for class {c}")
            per.append(None)
            continue
        per.append(float(np.mean(correct[mask])))
    return per, float(np.mean(correct))


def accuracy_degradation_table(model: Classifier, benign_images: np.ndarray,
                               benign_labels: np.ndarray,
                               strategy_outcomes: dict[str, tuple[np.ndarray, np.ndarray]],
                               meta: dict[str, str] | None = None) -> AccuracyTable:
    """Benign evaluation plus one row per strategy of (labels, predictions)
    on the perturbed images, in the order given."""
    from .classifier import evaluate  # local import keeps module load cheap

    rep = evaluate(model, benign_images, benign_labels)
    n_classes = model.n_classes
    benign_per = [rep.per_class.get(c, 0.0) for c in range(n_classes)]
    rows = [("benign", benign_per, rep.overall)]
    for name, (labels, preds) in strategy_outcomes.items():
        per, overall = per_class_accuracy(labels, np.asarray(preds) == np.asarray(labels),
                                          n_classes)
        rows.append((name, per, overall))
    return AccuracyTable(n_classes, rows, dict(meta or {}))


def table_to_csv(table: AccuracyTable) -> str:
    buf = io.StringIO()
    if table.meta:
        buf.write("# " + ",".join(f"{k}={v}" for k, v in sorted(table.meta.items())) + "\n")
    buf.write("strategy," + ",".join(f"class_{c}" for c in range(table.class_count))
              + ",overall\n")
    for name, per, overall in table.rows:
        buf.write(name + "," + ",".join(f"{v:.6f}" for v in per) + f",{overall:.6f}\n")
    return buf.getvalue()


def table_to_markdown(table: AccuracyTable) -> str:
    header = ["strategy"] + [f"class {c}" for c in range(table.class_count)] + ["overall"]
    lines = ["| " + " | ".join(header) + " |",
             "|" + "---|" * len(header)]
    for name, per, overall in table.rows:
        cells = [name] + [f"{v:.3f}" for v in per] + [f"**{overall:.3f}**"]
        lines.append("| " + " | ".join(cells) + " |")
    if table.meta:
        lines.append("")
        lines.append("_" + ", ".join(f"{k}={v}" for k, v in sorted(table.meta.items())) + "_")
    return "\n".join(lines) + "\n"


def report_to_json(report: InfoWorthReport) -> str:
    return json.dumps(report.to_json_dict(), sort_keys=True, indent=2) + "\n"
