"""Disk-facing orchestration behind the CLI commands.

Each cmd_* function is a pure function of (workspace contents, config): it
reads prerequisite artifacts (raising MissingInputError with the expected
path when absent), computes, writes its outputs, and returns the summary
dict that the CLI persists. The acceptance suite drives these same
functions.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import augment as aug
from . import classifier as clf
from . import gradcheck, metrics, renderer, samplers
from . import attacks as atk
from .param_space import ConfigError, DatasetConfig, JitterConfig, make_dataset
from .workspace import (
    MissingInputError,
    Workspace,
    dumps_json,
    load_dataset,
    load_records,
    save_dataset,
    save_records,
    sub_seed,
    write_report_text,
    write_summary,
)

ATTACK_METHODS = ("sifgsm", "sgd", "scw")
SAMPLER_TAGS = ("random-large", "random-small", "halton-large", "halton-small")
STRATEGY_ORDER = (*ATTACK_METHODS, *SAMPLER_TAGS)


def render_config(config: dict) -> renderer.RenderConfig:
    r = config["render"]
    return renderer.RenderConfig(height=r["height"], width=r["width"], tau=r["tau"])


def realism_config(config: dict) -> metrics.RealismConfig:
    return metrics.RealismConfig(levels=config["metrics"]["pyramid_levels"])


def dataset_config(config: dict) -> DatasetConfig:
    d = config["dataset"]
    return DatasetConfig(
        class_count=d["class_count"],
        per_class=d["per_class"],
        split_fractions=tuple(d["split_fractions"]),
        jitter=JitterConfig(**d["jitter"]),
        seed=sub_seed(config, "dataset"),
    )


def train_config(config: dict, seed: int) -> clf.TrainConfig:
    t = config["train"]
    return clf.TrainConfig(epochs=t["epochs"], batch_size=t["batch_size"],
                           learning_rate=t["learning_rate"],
                           optimizer=t["optimizer"], seed=seed)


def attack_config(config: dict, method: str, groups=None,
                  preset_name: str | None = None, iterations: int | None = None,
                  loss_kind: str | None = None) -> atk.AttackConfig:
    a = config["attacks"]
    cfg = atk.preset(method, preset_name or a["preset"])
    overrides = {"active_groups": tuple(groups or a["groups"]),
                 "seed": sub_seed(config, "attack")}
    if iterations is not None:
        overrides["iterations"] = iterations
    if loss_kind is not None:
        overrides["loss_kind"] = loss_kind
    return replace(cfg, **overrides)


def sampler_config(config: dict, kind: str, range_preset: str,
                   n: int | None = None) -> samplers.SamplerConfig:
    s = config["samplers"]
    return samplers.SamplerConfig(kind=kind, range_preset=range_preset,
                                  n=s["n"] if n is None else n,
                                  seed=sub_seed(config, "sampler"),
                                  halton_start=s["halton_start"])


def render_points(points, templates, rcfg) -> np.ndarray:
    return np.stack([renderer.render(templates[p.template_id], p.theta, rcfg)
                     for p in points])


def labels_of(points) -> np.ndarray:
    return np.array([p.class_id for p in points], dtype=np.int64)


def _require_model(ws: Workspace, name: str) -> clf.Classifier:
    path = ws.model_path(name)
    if not path.exists():
        raise MissingInputError(path, f"trained model {name!r}")
    return clf.load_model(path)


def _write_summary(config: dict, ws: Workspace, name: str, payload: dict) -> dict:
    """Persist the run summary, recording any CLI flag overrides."""
    overrides = config.get("overrides") or []
    if overrides:
        payload = {**payload, "overrides": list(overrides)}
    write_summary(ws, name, payload)
    return payload


def _sha256(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_data(config: dict, ws: Workspace) -> dict:
    ws.ensure()
    dcfg = dataset_config(config)
    manifest, templates = make_dataset(dcfg)
    save_dataset(ws, manifest, templates, {
        "class_count": dcfg.class_count,
        "per_class": dcfg.per_class,
        "split_fractions": list(dcfg.split_fractions),
        "seed": dcfg.seed,
    })
    rcfg = render_config(config)
    image_dir = ws.dataset_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    for point in manifest.entries:
        img = renderer.render(templates[point.template_id], point.theta, rcfg)
        renderer.save_png(img, image_dir / f"{point.sample_id}.png")
    summary = {
        "command": "gen-data",
        "entries": len(manifest.entries),
        "per_split": {s: len(manifest.split(s)) for s in ("train", "validation", "test")},
        "class_count": dcfg.class_count,
        "seed": dcfg.seed,
        "manifest_sha256": _sha256(manifest.to_jsonl()),
    }
    summary = _write_summary(config, ws, "gen-data", summary)
    return summary


def _arch_for(config: dict, arch: str) -> tuple[tuple[int, ...], int]:
    if arch == "benign":
        return tuple(config["train"]["hidden"]), sub_seed(config, "train")
    if arch == "transfer":
        t = config["transfer_arch"]
        return tuple(t["hidden"]), sub_seed(config, "train") + t["seed_offset"]
    raise ConfigError(f"unknown architecture {arch!r} (use 'benign' or 'transfer')")


def cmd_train(config: dict, ws: Workspace, arch: str = "benign") -> dict:
    manifest, templates = load_dataset(ws)
    rcfg = render_config(config)
    hidden, seed = _arch_for(config, arch)
    tcfg = train_config(config, seed)

    train_points = manifest.split("train")
    val_points = manifest.split("validation")
    images = render_points(train_points, templates, rcfg)
    labels = labels_of(train_points)
    model = clf.init_classifier((rcfg.height, rcfg.width, 3), hidden,
                                manifest.class_count, seed=seed)
    model, history = clf.train(model, images, labels, tcfg)

    ws.ensure()
    clf.save_model(model, ws.model_path(arch))
    (ws.models_dir / f"{arch}-history.json").write_text(dumps_json({"history": history}))

    val_rep = clf.evaluate(model, render_points(val_points, templates, rcfg),
                           labels_of(val_points))
    summary = {
        "command": "train",
        "arch": arch,
        "hidden": list(hidden),
        "seed": seed,
        "train_config": {"epochs": tcfg.epochs, "batch_size": tcfg.batch_size,
                         "learning_rate": tcfg.learning_rate,
                         "optimizer": tcfg.optimizer},
        "final_train_accuracy": history[-1]["accuracy"],
        "validation_accuracy": val_rep.overall,
    }
    summary = _write_summary(config, ws, f"train-{arch}", summary)
    return summary


def cmd_eval(config: dict, ws: Workspace, model_name: str = "benign",
             split: str = "test") -> dict:
    manifest, templates = load_dataset(ws)
    model = _require_model(ws, model_name)
    rcfg = render_config(config)
    points = manifest.split(split)
    rep = clf.evaluate(model, render_points(points, templates, rcfg), labels_of(points))
    table = metrics.AccuracyTable(
        model.n_classes,
        [("benign", [rep.per_class.get(c, 0.0) for c in range(model.n_classes)],
          rep.overall)],
        {"model": model_name, "split": split, "seed": str(config["seed"])})
    name = f"eval-{model_name}-{split}"
    write_report_text(ws, f"{name}.csv", metrics.table_to_csv(table))
    summary = {
        "command": "eval", "model": model_name, "split": split,
        "overall_accuracy": rep.overall,
        "per_class_accuracy": {str(c): v for c, v in rep.per_class.items()},
        "points": len(points),
    }
    summary = _write_summary(config, ws, name, summary)
    return summary


def _batch_points(config, manifest, split):
    points = manifest.split(split)
    count = config["eval_points"] if split == "test" else None
    return points, count


def cmd_attack(config: dict, ws: Workspace, method: str, groups=None,
               split: str = "test", model_name: str = "benign",
               preset_name: str | None = None, iterations: int | None = None,
               sweep: bool = False) -> dict:
    manifest, templates = load_dataset(ws)
    model = _require_model(ws, model_name)
    rcfg = render_config(config)
    rlcfg = realism_config(config)
    acfg = attack_config(config, method, groups=groups, preset_name=preset_name,
                         iterations=iterations)
    points, count = _batch_points(config, manifest, split)
    workers = int(config["workers"])

    if sweep:
        result = atk.group_sweep(model, points, templates, acfg, rcfg, rlcfg,
                                 count=count, seed=acfg.seed, workers=workers)
        summary = {"command": "attack-sweep", "method": method, "model": model_name,
                   "split": split, "subsets": result}
        summary = _write_summary(config, ws, f"attack-sweep-{model_name}-{method}-{split}", summary)
        return summary

    records, batch_summary = atk.attack_batch(model, points, templates, acfg, rcfg,
                                              rlcfg, count=count, seed=acfg.seed,
                                              workers=workers)
    default_groups = tuple(config["attacks"]["groups"])
    tag = method if acfg.active_groups == default_groups \
        else f"{method}.{'.'.join(acfg.active_groups)}"
    stem = ws.record_stem(model_name, tag, split, config["seed"])
    save_records(ws, stem, records)
    eps_run = atk.effective_epsilon(acfg)
    summary = {
        "command": "attack",
        "method": method,
        "model": model_name,
        "split": split,
        "active_groups": list(acfg.active_groups),
        "iterations": acfg.iterations,
        "effective_epsilon": eps_run,
        "records": stem,
        **batch_summary,
    }
    summary = _write_summary(config, ws, f"attack-{stem}", summary)
    return summary


def cmd_sample(config: dict, ws: Workspace, kind: str, range_preset: str,
               split: str = "test", model_name: str = "benign",
               n: int | None = None) -> dict:
    manifest, templates = load_dataset(ws)
    model = _require_model(ws, model_name)
    rcfg = render_config(config)
    rlcfg = realism_config(config)
    scfg = sampler_config(config, kind, range_preset, n=n)
    points, count = _batch_points(config, manifest, split)
    records, batch_summary = samplers.sampler_batch(
        model, points, templates, scfg, rcfg, rlcfg, count=count,
        seed=sub_seed(config, "attack"), workers=int(config["workers"]))
    stem = ws.record_stem(model_name, scfg.tag, split, config["seed"])
    save_records(ws, stem, records)
    summary = {
        "command": "sample", "kind": kind, "range": range_preset,
        "model": model_name, "split": split, "n": scfg.n,
        "records": stem,
        **batch_summary,
    }
    summary = _write_summary(config, ws, f"sample-{stem}", summary)
    return summary


def _existing_record_sets(config: dict, ws: Workspace, model_name: str,
                          split: str) -> dict[str, str]:
    out = {}
    for tag in STRATEGY_ORDER:
        stem = ws.record_stem(model_name, tag, split, config["seed"])
        if ws.record_path(stem).exists():
            out[tag] = stem
    return out


def cmd_info_worth(config: dict, ws: Workspace, model_name: str = "benign",
                   split: str = "test", membership: str = "both") -> dict:
    if membership not in ("binary", "fractional", "both"):
        raise ConfigError("membership must be binary, fractional, or both")
    modes = ("binary", "fractional") if membership == "both" else (membership,)
    manifest, templates = load_dataset(ws)
    model = _require_model(ws, model_name)
    rcfg = render_config(config)
    points, count = _batch_points(config, manifest, split)
    chosen = atk.select_points(points, count, sub_seed(config, "attack"))

    sets: dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
    benign_images = render_points(chosen, templates, rcfg)
    sets["none"] = (benign_images, labels_of(chosen), np.ones(len(chosen)))
    for tag, stem in _existing_record_sets(config, ws, model_name, split).items():
        records = load_records(ws, stem, templates, rcfg)
        sets[tag] = (np.stack([r.x_perturbed for r in records]),
                     np.array([r.label for r in records]),
                     np.array([r.realism for r in records]))

    table_rows: dict[str, dict[str, float]] = {m: {} for m in modes}
    reports = {}
    for mode in modes:
        for tag, (images, labels, rho) in sets.items():
            rep = metrics.info_worth_for_points(model, images, labels, rho, mode)
            table_rows[mode][tag] = rep.aggregate
            reports[f"{mode}/{tag}"] = rep.to_json_dict()

    cols = list(sets)
    csv_lines = ["membership," + ",".join(cols)]
    for mode in modes:
        csv_lines.append(mode + "," + ",".join(f"{table_rows[mode][c]:.6f}" for c in cols))
    write_report_text(ws, f"info-worth-{model_name}-{split}.csv",
                      "\n".join(csv_lines) + "\n")
    summary = {
        "command": "info-worth", "model": model_name, "split": split,
        "aggregate_nats": table_rows,
        "reports": reports,
    }
    summary = _write_summary(config, ws, f"info-worth-{model_name}-{split}", summary)
    return summary


def _augment_plan_path(ws: Workspace, method: str, seed: int) -> Path:
    return ws.records_dir / f"augment-plan-{method}-s{seed}.json"


def cmd_augment(config: dict, ws: Workspace, method: str) -> dict:
    manifest, templates = load_dataset(ws)
    stem = ws.record_stem("benign", method, "train", config["seed"])
    if not ws.record_path(stem).exists():
        raise MissingInputError(ws.record_path(stem),
                                f"training-split counterexample records for {method!r}")
    rcfg = render_config(config)
    records = load_records(ws, stem, templates, rcfg)
    records_by_id = {r.sample_id: r for r in records}

    train_points = manifest.split("train")
    plan = aug.AugmentPlan(fraction=config["augment"]["fraction"],
                           seed=sub_seed(config, "augment"))
    idx = aug.select_replacement_indices(len(train_points), plan)
    replaced = [train_points[i].sample_id for i in idx]
    missing = [sid for sid in replaced if sid not in records_by_id]
    if missing:
        raise MissingInputError(ws.record_path(stem),
                                f"records for selected training points (first: {missing[0]!r})")
    payload = {
        "method": method,
        "fraction": plan.fraction,
        "seed": plan.seed,
        "records": stem,
        "replaced_sample_ids": replaced,
    }
    _augment_plan_path(ws, method, config["seed"]).write_text(dumps_json(payload))
    summary = {"command": "augment", "method": method,
               "replaced": len(replaced), "train_size": len(train_points),
               "fraction": plan.fraction, "plan_seed": plan.seed}
    summary = _write_summary(config, ws, f"augment-{method}", summary)
    return summary


def cmd_retrain(config: dict, ws: Workspace, method: str) -> dict:
    manifest, templates = load_dataset(ws)
    benign = _require_model(ws, "benign")
    plan_path = _augment_plan_path(ws, method, config["seed"])
    if not plan_path.exists():
        raise MissingInputError(plan_path, f"augmentation plan for {method!r}")
    plan = json.loads(plan_path.read_text())
    rcfg = render_config(config)
    records = load_records(ws, plan["records"], templates, rcfg)
    records_by_id = {r.sample_id: r for r in records}

    train_points = manifest.split("train")
    images = render_points(train_points, templates, rcfg)
    labels = labels_of(train_points)
    replaced = set(plan["replaced_sample_ids"])
    for i, point in enumerate(train_points):
        if point.sample_id in replaced:
            images[i] = records_by_id[point.sample_id].x_perturbed

    # Retraining reuses the benign TrainConfig (same epochs and rate),
    # recorded here so report headers can state it.
    tcfg = train_config(config, sub_seed(config, "train"))
    robust, history = aug.retrain(benign, images, labels, tcfg)
    name = f"robust-{method}"
    clf.save_model(robust, ws.model_path(name))
    (ws.models_dir / f"{name}-history.json").write_text(dumps_json({"history": history}))

    val_points = manifest.split("validation")
    val_rep = clf.evaluate(robust, render_points(val_points, templates, rcfg),
                           labels_of(val_points))
    summary = {
        "command": "retrain", "method": method, "model": name,
        "replaced": len(replaced),
        "train_config": {"epochs": tcfg.epochs, "batch_size": tcfg.batch_size,
                         "learning_rate": tcfg.learning_rate,
                         "optimizer": tcfg.optimizer, "seed": tcfg.seed},
        "validation_accuracy": val_rep.overall,
    }
    summary = _write_summary(config, ws, f"retrain-{method}", summary)
    return summary


def _matrix_models(ws: Workspace) -> dict[str, clf.Classifier]:
    models = {"benign": _require_model(ws, "benign")}
    for method in ATTACK_METHODS:
        models[method] = _require_model(ws, f"robust-{method}")
    return models


def cmd_matrix(config: dict, ws: Workspace, mode: str) -> dict:
    manifest, templates = load_dataset(ws)
    models = _matrix_models(ws)
    rcfg = render_config(config)
    rlcfg = realism_config(config)
    attack_cfgs = {m: attack_config(config, m) for m in ATTACK_METHODS}
    points, count = _batch_points(config, manifest, "test")

    fixed_records = None
    if mode == "fixed":
        fixed_records = {}
        for method in ATTACK_METHODS:
            stem = ws.record_stem("benign", method, "test", config["seed"])
            if not ws.record_path(stem).exists():
                raise MissingInputError(ws.record_path(stem),
                                        f"benign-model test records for {method!r}")
            fixed_records[method] = load_records(ws, stem, templates, rcfg)

    report = aug.robustness_matrix(models, attack_cfgs, points, templates, rcfg,
                                   rlcfg, mode, fixed_records=fixed_records,
                                   count=count, seed=sub_seed(config, "attack"),
                                   workers=int(config["workers"]))
    write_report_text(ws, f"robustness-matrix-{mode}.csv", aug.matrix_to_csv(report))
    write_report_text(ws, f"robustness-matrix-{mode}.md", aug.matrix_to_markdown(report))
    summary = {"command": "robustness-matrix", **aug.matrix_to_json_dict(report)}
    summary = _write_summary(config, ws, f"robustness-matrix-{mode}", summary)
    return summary


def cmd_transfer(config: dict, ws: Workspace) -> dict:
    manifest, templates = load_dataset(ws)
    model_b = _require_model(ws, "transfer")
    benign_model = _require_model(ws, "benign")
    rcfg = render_config(config)
    records_by_method = {}
    for method in ATTACK_METHODS:
        stem = ws.record_stem("benign", method, "test", config["seed"])
        if not ws.record_path(stem).exists():
            raise MissingInputError(ws.record_path(stem),
                                    f"benign-model test records for {method!r}")
        records_by_method[method] = load_records(ws, stem, templates, rcfg)

    table = aug.transfer_eval(records_by_method, model_b)
    table.meta.update({"source_model": "benign", "target_model": "transfer",
                       "seed": str(config["seed"])})
    write_report_text(ws, "transfer.csv", metrics.table_to_csv(table))
    write_report_text(ws, "transfer.md", metrics.table_to_markdown(table))

    # Benign baselines on the same originals, plus the source model's own
    # degradation, so transfer strength can be compared per method.
    probe = records_by_method[ATTACK_METHODS[0]]
    originals = np.stack([r.x_original for r in probe])
    labels = np.array([r.label for r in probe])
    source_accuracy = {
        method: float(np.mean(np.array([r.pred_perturbed for r in records])
                              == np.array([r.label for r in records])))
        for method, records in records_by_method.items()
    }
    summary = {
        "command": "transfer",
        "overall": {name: overall for name, _, overall in table.rows},
        "target_benign_accuracy": float(np.mean(clf.predict(model_b, originals) == labels)),
        "source_benign_accuracy": float(np.mean(clf.predict(benign_model, originals) == labels)),
        "source_accuracy": source_accuracy,
    }
    summary = _write_summary(config, ws, "transfer", summary)
    return summary


def cmd_gradcheck(config: dict, ws: Workspace) -> dict:
    result = gradcheck.run_all(seed=sub_seed(config, "gradcheck"))
    summary = {"command": "gradcheck", **result}
    ws.ensure()
    summary = _write_summary(config, ws, "gradcheck", summary)
    return summary


def _assemble_degradation_table(config: dict, ws: Workspace) -> bool:
    """Compose the accuracy-degradation table (benign row plus one row per
    strategy) from previously written run summaries. Pure composition: reads
    JSON summaries, writes one CSV. Returns whether anything was written."""
    eval_path = ws.reports_dir / "eval-benign-test-summary.json"
    if not eval_path.exists():
        return False
    ev = json.loads(eval_path.read_text())
    n_classes = config["dataset"]["class_count"]
    rows = [("benign", [ev["per_class_accuracy"].get(str(c), 0.0)
                        for c in range(n_classes)], ev["overall_accuracy"])]
    for tag in STRATEGY_ORDER:
        stem = ws.record_stem("benign", tag, "test", config["seed"])
        prefix = "attack" if tag in ATTACK_METHODS else "sample"
        path = ws.reports_dir / f"{prefix}-{stem}-summary.json"
        if not path.exists():
            continue
        summary = json.loads(path.read_text())
        per = [v if v is not None else 0.0 for v in summary["per_class_accuracy"]]
        rows.append((tag, per, summary["overall_accuracy"]))
    if len(rows) == 1:
        return False
    table = metrics.AccuracyTable(n_classes, rows, {"seed": str(config["seed"]),
                                                    "split": "test"})
    write_report_text(ws, "accuracy-degradation.csv", metrics.table_to_csv(table))
    return True


def cmd_report(config: dict, ws: Workspace) -> dict:
    """Compose previously written tables into one Markdown report; no
    recomputation (the degradation table is assembled from existing
    summaries)."""
    _assemble_degradation_table(config, ws)
    csvs = sorted(ws.reports_dir.glob("*.csv"))
    if not csvs:
        raise MissingInputError(ws.reports_dir / "*.csv", "computed CSV tables")
    lines = [f"# Experiment report: {config['name']}", ""]
    for path in csvs:
        lines.append(f"## {path.stem}")
        lines.append("")
        lines.append("```csv")
        lines.append(path.read_text().rstrip("\n"))
        lines.append("```")
        lines.append("")
    text = "\n".join(lines)
    write_report_text(ws, "report.md", text)
    summary = {"command": "report", "tables": [p.name for p in csvs]}
    summary = _write_summary(config, ws, "report", summary)
    return summary
