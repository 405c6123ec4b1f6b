"""Counterexample-driven dataset augmentation and robustness evaluation.

Augmentation replaces a uniformly random fraction of the training points
(sampled without replacement, seeded) with their perturbed images while
keeping the original ground-truth labels, then retrains the benign model
warm-started from its weights. Robustness is reported as an accuracy matrix
indexed by (training method, evaluation attack method):

  fixed        every model is evaluated on counterexamples generated against
               the benign model (static test sets)
  regenerated  counterexamples are regenerated against each evaluated model
               (adaptive test sets)
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import classifier as clf
from . import metrics, renderer
from .attacks import AttackConfig, CounterexampleRecord, attack_batch
from .param_space import ConfigError, DataPoint, SceneTemplate


@dataclass(frozen=True)
class AugmentPlan:
    fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.fraction <= 1.0:
            raise ConfigError("replacement fraction must lie in (0, 1]")


def select_replacement_indices(n: int, plan: AugmentPlan) -> np.ndarray:
    """Sorted indices of the floor(fraction * n) points to replace."""
    k = int(math.floor(plan.fraction * n))
    rng = np.random.default_rng(plan.seed)
    return np.sort(rng.choice(n, size=k, replace=False))


def build_augmented_dataset(images: np.ndarray, labels: np.ndarray,
                            sample_ids: Sequence[str],
                            records_by_id: Mapping[str, CounterexampleRecord],
                            plan: AugmentPlan) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Replace the selected points' images with their perturbed versions.
    Labels and dataset size are unchanged; a missing record for a selected
    point is an error."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    out = images.copy()
    replaced = []
    for idx in select_replacement_indices(len(images), plan):
        sid = sample_ids[idx]
        if sid not in records_by_id:
            raise ConfigError(f"no counterexample record for selected training point {sid!r}")
        out[idx] = records_by_id[sid].x_perturbed
        replaced.append(sid)
    return out, labels.copy(), replaced


def retrain(benign: clf.Classifier, images: np.ndarray, labels: np.ndarray,
            cfg: clf.TrainConfig) -> tuple[clf.Classifier, list[dict]]:
    """Continue training from the benign weights; the benign model instance
    is left untouched."""
    return clf.train(benign, images, labels, cfg)


@dataclass
class MatrixReport:
    mode: str                     # "fixed" | "regenerated"
    seed: int
    train_names: list[str]        # row order, "benign" first
    test_names: list[str]         # column order after the benign column
    benign_column: dict[str, float]
    cells: dict[tuple[str, str], float]

    def cell(self, train: str, test: str) -> float:
        return self.cells[(train, test)]


def _eval_on_records(model: clf.Classifier,
                     records: Sequence[CounterexampleRecord]) -> float:
    images = np.stack([r.x_perturbed for r in records])
    labels = np.array([r.label for r in records])
    preds = clf.predict(model, images)
    return float(np.mean(preds == labels))


def robustness_matrix(models: Mapping[str, clf.Classifier],
                      attack_cfgs: Mapping[str, AttackConfig],
                      points: Sequence[DataPoint],
                      templates: Sequence[SceneTemplate],
                      rcfg: renderer.RenderConfig,
                      realism_cfg: metrics.RealismConfig,
                      mode: str,
                      fixed_records: Mapping[str, Sequence[CounterexampleRecord]] | None = None,
                      count: int | None = None, seed: int = 0,
                      workers: int = 1) -> MatrixReport:
    """Rows are the models ("benign" plus one per training method), columns
    the attack methods plus a clean column. `fixed_records` may supply
    precomputed benign-model record sets for fixed mode; anything missing is
    generated here."""
    if mode not in ("fixed", "regenerated"):
        raise ConfigError("matrix mode must be 'fixed' or 'regenerated'")
    if "benign" not in models:
        raise ConfigError("models must include a 'benign' entry")
    n_classes = {m.n_classes for m in models.values()}
    if len(n_classes) != 1:
        raise ConfigError("all models must share one class set")

    clean_images = None
    benign_col = {}
    cells: dict[tuple[str, str], float] = {}
    test_names = list(attack_cfgs)

    from .attacks import select_points
    chosen = select_points(points, count, seed)
    clean_images = np.stack([renderer.render(templates[p.template_id], p.theta, rcfg)
                             for p in chosen])
    clean_labels = np.array([p.class_id for p in chosen])

    fixed_records = dict(fixed_records or {})
    if mode == "fixed":
        for method, cfg in attack_cfgs.items():
            if method not in fixed_records:
                fixed_records[method], _ = attack_batch(
                    models["benign"], chosen, templates, cfg, rcfg, realism_cfg,
                    count=None, seed=seed, workers=workers)

    for train_name, model in models.items():
        benign_col[train_name] = float(np.mean(clf.predict(model, clean_images)
                                               == clean_labels))
        for method, cfg in attack_cfgs.items():
            if mode == "fixed":
                cells[(train_name, method)] = _eval_on_records(model, fixed_records[method])
            else:
                _, summary = attack_batch(model, chosen, templates, cfg, rcfg,
                                          realism_cfg, count=None, seed=seed,
                                          workers=workers)
                cells[(train_name, method)] = summary["overall_accuracy"]
    return MatrixReport(mode=mode, seed=seed, train_names=list(models),
                        test_names=test_names, benign_column=benign_col, cells=cells)


def matrix_to_csv(report: MatrixReport) -> str:
    buf = io.StringIO()
    buf.write(f"# mode={report.mode},seed={report.seed}\n")
    buf.write("train,benign," + ",".join(report.test_names) + "\n")
    for row in report.train_names:
        vals = [f"{report.benign_column[row]:.6f}"]
        vals += [f"{report.cells[(row, t)]:.6f}" for t in report.test_names]
        buf.write(row + "," + ",".join(vals) + "\n")
    return buf.getvalue()


def matrix_to_markdown(report: MatrixReport) -> str:
    header = ["train \\ test", "benign", *report.test_names]
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for row in report.train_names:
        cells = [row, f"{report.benign_column[row]:.3f}"]
        cells += [f"{report.cells[(row, t)]:.3f}" for t in report.test_names]
        lines.append("| " + " | ".join(cells) + " |")
    lines.append("")
    lines.append(f"_mode={report.mode}, seed={report.seed}_")
    return "\n".join(lines) + "\n"


def matrix_to_json_dict(report: MatrixReport) -> dict:
    return {
        "mode": report.mode,
        "seed": report.seed,
        "benign_column": {k: report.benign_column[k] for k in report.train_names},
        "cells": {f"{tr}/{te}": report.cells[(tr, te)]
                  for tr in report.train_names for te in report.test_names},
    }


def transfer_eval(records_by_method: Mapping[str, Sequence[CounterexampleRecord]],
                  model_b: clf.Classifier) -> metrics.AccuracyTable:
    """Evaluate a different architecture on counterexamples generated against
    the source model; per-class and overall accuracy per method."""
    rows = []
    for method, records in records_by_method.items():
        labels = np.array([r.label for r in records])
        if np.any(labels >= model_b.n_classes):
            raise ConfigError("record class set does not match the target model")
        images = np.stack([r.x_perturbed for r in records])
        preds = clf.predict(model_b, images)
        per, overall = metrics.per_class_accuracy(labels, preds == labels,
                                                  model_b.n_classes)
        rows.append((method, per, overall))
    return metrics.AccuracyTable(model_b.n_classes, rows, {"kind": "transfer"})
