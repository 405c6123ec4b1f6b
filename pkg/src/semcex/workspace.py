"""Workspace layout, experiment configuration, and artifact persistence.

A workspace holds everything one experiment produces:

    workspace/
      dataset/    manifest.jsonl, templates.json, dataset.json, images/*.png
      models/     *.model (+ *-history.json)
      records/    <model>-<tag>-<split>-s<seed>.jsonl
      reports/    *.csv, *.md, *-summary.json (+ *.meta.json sidecars)
      galleries/  <record-stem>/<sample>-pert.png, <sample>-pair.png

Run summaries and CSVs are pure functions of (inputs, config, seed):
rerunning a command reproduces them byte for byte. Timestamps live only in
the .meta.json sidecars.
"""

from __future__ import annotations

import copy
import datetime
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import renderer
from .attacks import CounterexampleRecord, record_from_json, record_to_json
from .param_space import (
    ConfigError,
    DatasetManifest,
    SceneTemplate,
    templates_from_json,
    templates_to_json,
)

ENV_WORKSPACE = "SEMCEX_WORKSPACE"
SCHEMA_VERSION = 1

DEFAULT_CONFIG: dict = {
    "schema_version": SCHEMA_VERSION,
    "name": "default",
    "seed": 7,
    "workers": 1,
    "eval_points": 200,
    "dataset": {
        "class_count": 4,
        "per_class": 600,
        "split_fractions": [0.7, 0.1, 0.2],
        "jitter": {"rotation": 0.55, "translation": 0.06, "scale": 0.12,
                   "color": 0.06, "lighting": 0.10},
    },
    "render": {"height": 32, "width": 32, "tau": None},
    "train": {"epochs": 20, "batch_size": 64, "learning_rate": 0.001,
              "optimizer": "adam", "hidden": [128, 64]},
    "transfer_arch": {"hidden": [96], "seed_offset": 101},
    "attacks": {"preset": "default", "groups": ["pose", "vertex"]},
    "samplers": {"n": 5, "halton_start": 1},
    "metrics": {"pyramid_levels": 3},
    "augment": {"fraction": 0.5},
}

# Sub-seed offsets derived from the global seed, one stream per concern.
SEED_OFFSETS = {
    "dataset": 0,
    "train": 1,
    "attack": 2,
    "sampler": 3,
    "augment": 4,
    "gradcheck": 5,
}


class MissingInputError(FileNotFoundError):
    """A command prerequisite is not on disk; carries the expected path."""

    def __init__(self, path: Path, what: str):
        super().__init__(f"missing input: {what} expected at {path}")
        self.path = path
        self.what = what


def sub_seed(config: dict, concern: str) -> int:
    return int(config["seed"]) + SEED_OFFSETS[concern]


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path: str | Path | None) -> dict:
    """Defaults, deep-merged with the optional experiment file."""
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    p = Path(path)
    if not p.exists():
        raise MissingInputError(p, "config file")
    with open(p) as fh:
        user = json.load(fh)
    version = user.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported config schema_version {version}")
    return _deep_merge(DEFAULT_CONFIG, user)


def resolve_workspace(flag_value: str | None, config: dict | None = None) -> Path:
    """Precedence: --out flag, config["workspace"], $SEMCEX_WORKSPACE, ./workspace."""
    if flag_value:
        return Path(flag_value)
    if config and config.get("workspace"):
        return Path(config["workspace"])
    env = os.environ.get(ENV_WORKSPACE)
    if env:
        return Path(env)
    return Path("workspace")


@dataclass
class Workspace:
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    @property
    def dataset_dir(self) -> Path:
        return self.root / "dataset"

    @property
    def models_dir(self) -> Path:
        return self.root / "models"

    @property
    def records_dir(self) -> Path:
        return self.root / "records"

    @property
    def reports_dir(self) -> Path:
        return self.root / "reports"

    @property
    def galleries_dir(self) -> Path:
        return self.root / "galleries"

    def ensure(self) -> "Workspace":
        for d in (self.dataset_dir, self.models_dir, self.records_dir,
                  self.reports_dir, self.galleries_dir):
            d.mkdir(parents=True, exist_ok=True)
        return self

    def model_path(self, name: str) -> Path:
        return self.models_dir / f"{name}.model"

    def record_stem(self, model_name: str, tag: str, split: str, seed: int) -> str:
        return f"{model_name}-{tag}-{split}-s{seed}"

    def record_path(self, stem: str) -> Path:
        return self.records_dir / f"{stem}.jsonl"


def dumps_json(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def write_summary(ws: Workspace, name: str, payload: dict) -> Path:
    """Deterministic JSON summary plus a timestamp sidecar."""
    path = ws.reports_dir / f"{name}-summary.json"
    path.write_text(dumps_json(payload))
    meta = ws.reports_dir / f"{name}-summary.meta.json"
    meta.write_text(json.dumps(
        {"written_at": datetime.datetime.now(datetime.timezone.utc).isoformat()}) + "\n")
    return path


def write_report_text(ws: Workspace, filename: str, text: str) -> Path:
    path = ws.reports_dir / filename
    path.write_text(text)
    return path


# ---------------------------------------------------------------------------
# Dataset persistence
# ---------------------------------------------------------------------------

def save_dataset(ws: Workspace, manifest: DatasetManifest,
                 templates: tuple[SceneTemplate, ...], dataset_config: dict) -> None:
    ws.ensure()
    (ws.dataset_dir / "manifest.jsonl").write_text(manifest.to_jsonl())
    (ws.dataset_dir / "templates.json").write_text(templates_to_json(templates))
    (ws.dataset_dir / "dataset.json").write_text(dumps_json(dataset_config))


def load_dataset(ws: Workspace) -> tuple[DatasetManifest, tuple[SceneTemplate, ...]]:
    manifest_path = ws.dataset_dir / "manifest.jsonl"
    templates_path = ws.dataset_dir / "templates.json"
    meta_path = ws.dataset_dir / "dataset.json"
    for p, what in ((manifest_path, "dataset manifest"),
                    (templates_path, "scene templates"),
                    (meta_path, "dataset metadata")):
        if not p.exists():
            raise MissingInputError(p, what)
    templates = templates_from_json(templates_path.read_text())
    meta = json.loads(meta_path.read_text())
    manifest = DatasetManifest.from_jsonl(
        manifest_path.read_text(), templates,
        class_count=meta["class_count"],
        split_fractions=tuple(meta["split_fractions"]))
    return manifest, templates


# ---------------------------------------------------------------------------
# Record persistence (JSON-lines + gallery PNGs)
# ---------------------------------------------------------------------------

def save_records(ws: Workspace, stem: str, records: list[CounterexampleRecord],
                 write_gallery: bool = True) -> Path:
    gallery = ws.galleries_dir / stem
    if write_gallery:
        gallery.mkdir(parents=True, exist_ok=True)
    lines = []
    for rec in records:
        orig_rel = f"dataset/images/{rec.sample_id}.png"
        pert_rel = f"galleries/{stem}/{rec.sample_id}-pert.png"
        if write_gallery:
            renderer.save_png(rec.x_perturbed, ws.root / pert_rel)
            pair = np.concatenate([rec.x_original, rec.x_perturbed], axis=1)
            renderer.save_png(pair, gallery / f"{rec.sample_id}-pair.png")
        lines.append(record_to_json(rec, orig_rel, pert_rel))
    path = ws.record_path(stem)
    path.write_text("\n".join(lines) + "\n")
    return path


def load_records(ws: Workspace, stem: str, templates: tuple[SceneTemplate, ...],
                 rcfg: renderer.RenderConfig) -> list[CounterexampleRecord]:
    path = ws.record_path(stem)
    if not path.exists():
        raise MissingInputError(path, f"counterexample records {stem!r}")
    return [record_from_json(line, templates, rcfg)
            for line in path.read_text().splitlines() if line.strip()]
