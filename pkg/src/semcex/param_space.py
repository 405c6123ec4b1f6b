"""Semantic parameter space: feature groups, bounds, arithmetic, and the
procedural shape dataset.

A scene is described by four parameter groups:

  vertex   per-vertex 2D offsets added to the template polygon (scene units)
  pose     [rotation (radians), translation-x, translation-y, uniform scale]
  color    RGB offset added to the template base color
  lighting scalar brightness multiplier

Value vectors may hold absolute scene parameters (feasible points) or
displacements between points (perturbations); feasibility is enforced by the
operations whose contracts require it (`add`, `project`, dataset generation),
not at construction time, so that zero perturbations are representable even
for groups whose bounds exclude zero (e.g. scale).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np

GROUP_ORDER = ("vertex", "pose", "color", "lighting")

POSE_ROTATION = 0
POSE_TX = 1
POSE_TY = 2
POSE_SCALE = 3

NORM_ORDERS = (1, 2, math.inf)


class StructureError(ValueError):
    """Two parameter vectors do not share the same group structure."""


class ConfigError(ValueError):
    """A configuration value is out of its legal range."""


@dataclass(frozen=True)
class ParamGroup:
    """One named block of the semantic feature space with per-coordinate bounds."""

    name: str
    dim: int
    lower: np.ndarray
    upper: np.ndarray
    units: str = ""

    def __post_init__(self):
        lower = np.asarray(self.lower, dtype=np.float64)
        upper = np.asarray(self.upper, dtype=np.float64)
        if self.dim <= 0:
            raise ConfigError(f"group {self.name!r}: dim must be positive")
        if lower.shape != (self.dim,) or upper.shape != (self.dim,):
            raise ConfigError(f"group {self.name!r}: bounds must have length dim={self.dim}")
        if not np.all(lower < upper):
            raise ConfigError(f"group {self.name!r}: lower bounds must be strictly below upper")
        lower.setflags(write=False)
        upper.setflags(write=False)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    def same_structure(self, other: "ParamGroup") -> bool:
        return (
            self.name == other.name
            and self.dim == other.dim
            and np.array_equal(self.lower, other.lower)
            and np.array_equal(self.upper, other.upper)
        )


def default_groups(n_vertices: int) -> tuple[ParamGroup, ...]:
    """Default feature space for a polygon template with `n_vertices` vertices."""
    vdim = 2 * n_vertices
    return (
        ParamGroup("vertex", vdim, np.full(vdim, -0.2), np.full(vdim, 0.2),
                   units="scene-units"),
        ParamGroup("pose", 4,
                   np.array([-math.pi, -0.3, -0.3, 0.7]),
                   np.array([math.pi, 0.3, 0.3, 1.3]),
                   units="radians / scene-units / scale"),
        ParamGroup("color", 3, np.full(3, -0.5), np.full(3, 0.5), units="rgb-offset"),
        ParamGroup("lighting", 1, np.array([0.2]), np.array([1.5]), units="multiplier"),
    )


@dataclass
class SemanticParams:
    """A point (or displacement) in the semantic feature space."""

    groups: tuple[ParamGroup, ...]
    values: tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.groups) != len(self.values):
            raise StructureError("group/value count mismatch")
        vals = []
        for g, v in zip(self.groups, self.values):
            arr = np.asarray(v, dtype=np.float64)
            if arr.shape != (g.dim,):
                raise StructureError(f"group {g.name!r}: expected shape ({g.dim},), got {arr.shape}")
            vals.append(arr)
        self.values = tuple(vals)

    def get(self, name: str) -> np.ndarray:
        for g, v in zip(self.groups, self.values):
            if g.name == name:
                return v
        raise KeyError(name)

    def group(self, name: str) -> ParamGroup:
        for g in self.groups:
            if g.name == name:
                return g
        raise KeyError(name)

    def with_group(self, name: str, value: np.ndarray) -> "SemanticParams":
        vals = tuple(np.asarray(value, dtype=np.float64) if g.name == name else v
                     for g, v in zip(self.groups, self.values))
        return SemanticParams(self.groups, vals)

    def copy(self) -> "SemanticParams":
        return SemanticParams(self.groups, tuple(v.copy() for v in self.values))

    def zeros_like(self) -> "SemanticParams":
        return SemanticParams(self.groups, tuple(np.zeros(g.dim) for g in self.groups))

    def is_feasible(self, atol: float = 0.0) -> bool:
        return all(
            np.all(v >= g.lower - atol) and np.all(v <= g.upper + atol)
            for g, v in zip(self.groups, self.values)
        )

    def items(self) -> Iterator[tuple[ParamGroup, np.ndarray]]:
        return iter(zip(self.groups, self.values))

    def same_structure(self, other: "SemanticParams") -> bool:
        return len(self.groups) == len(other.groups) and all(
            a.same_structure(b) for a, b in zip(self.groups, other.groups)
        )

    def as_dict(self) -> dict[str, list[float]]:
        return {g.name: [float(x) for x in v] for g, v in self.items()}

    @staticmethod
    def from_dict(groups: tuple[ParamGroup, ...], data: Mapping[str, Sequence[float]]) -> "SemanticParams":
        return SemanticParams(groups, tuple(np.asarray(data[g.name], dtype=np.float64) for g in groups))


def neutral_params(groups: tuple[ParamGroup, ...]) -> SemanticParams:
    """Identity scene parameters: no offsets, unit scale, unit lighting."""
    vals = []
    for g in groups:
        if g.name == "pose":
            vals.append(np.array([0.0, 0.0, 0.0, 1.0]))
        elif g.name == "lighting":
            vals.append(np.array([1.0]))
        else:
            vals.append(np.zeros(g.dim))
    return SemanticParams(groups, tuple(vals))


def _check_structure(a: SemanticParams, b: SemanticParams) -> None:
    if not a.same_structure(b):
        raise StructureError("semantic parameters do not share a group structure")


def add(theta: SemanticParams, pi: SemanticParams) -> SemanticParams:
    """Elementwise sum followed by a feasibility clamp into each group's bounds."""
    _check_structure(theta, pi)
    vals = tuple(
        np.clip(tv + pv, g.lower, g.upper)
        for g, tv, pv in zip(theta.groups, theta.values, pi.values)
    )
    return SemanticParams(theta.groups, vals)


def group_norm(pi: SemanticParams, order: float) -> dict[str, float]:
    """Per-group l_p norm of a perturbation, p in {1, 2, inf}."""
    if order not in NORM_ORDERS:
        raise ConfigError(f"norm order must be one of {NORM_ORDERS}, got {order}")
    out = {}
    for g, v in pi.items():
        if order == 1:
            out[g.name] = float(np.sum(np.abs(v)))
        elif order == 2:
            out[g.name] = float(np.sqrt(np.sum(v * v)))
        else:
            out[g.name] = float(np.max(np.abs(v)))
    return out


def total_norm(pi: SemanticParams, order: float) -> float:
    """Sum of per-group norms. Reporting convenience only; the groups carry
    heterogeneous units, so this is never used inside an optimization."""
    return float(sum(group_norm(pi, order).values()))


def project(theta: SemanticParams, theta0: SemanticParams,
            eps: Mapping[str, float]) -> SemanticParams:
    """Clamp `theta` into the per-group l_inf ball of radius eps[g] around
    `theta0`, then into the feasible bounds. Groups missing from `eps` are
    left unconstrained by the ball (bounds still apply)."""
    _check_structure(theta, theta0)
    for name, e in eps.items():
        if e < 0:
            raise ConfigError(f"projection bound for group {name!r} must be >= 0")
    vals = []
    for g, tv, t0 in zip(theta.groups, theta.values, theta0.values):
        v = tv
        if g.name in eps:
            e = eps[g.name]
            v = np.clip(v, t0 - e, t0 + e)
        vals.append(np.clip(v, g.lower, g.upper))
    return SemanticParams(theta.groups, tuple(vals))


def sample_uniform(groups: tuple[ParamGroup, ...],
                   ranges: Mapping[str, tuple],
                   rng: np.random.Generator) -> SemanticParams:
    """Independent uniform draw per coordinate within the given per-group
    ranges. Ranges are (low, high) scalars or per-coordinate arrays and must
    lie within the feasible bounds."""
    vals = []
    for g in groups:
        if g.name not in ranges:
            raise ConfigError(f"sample_uniform: missing range for group {g.name!r}")
        lo, hi = ranges[g.name]
        lo = np.broadcast_to(np.asarray(lo, dtype=np.float64), (g.dim,))
        hi = np.broadcast_to(np.asarray(hi, dtype=np.float64), (g.dim,))
        if np.any(lo < g.lower) or np.any(hi > g.upper) or np.any(lo > hi):
            raise ConfigError(f"sample_uniform: range for {g.name!r} outside feasible bounds")
        vals.append(rng.uniform(lo, hi))
    return SemanticParams(groups, tuple(vals))


# ---------------------------------------------------------------------------
# Scene templates and the procedural dataset
# ---------------------------------------------------------------------------

def _signed_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _segments_cross(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1 = orient(q1, q2, p1)
    d2 = orient(q1, q2, p2)
    d3 = orient(p1, p2, q1)
    d4 = orient(p1, p2, q2)
    return ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0))


def _is_simple(poly: np.ndarray) -> bool:
    n = len(poly)
    for i in range(n):
        a1, a2 = poly[i], poly[(i + 1) % n]
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or (i + 1) % n == j:
                continue
            if _segments_cross(a1, a2, poly[j], poly[(j + 1) % n]):
                return False
    return True


@dataclass(frozen=True)
class SceneTemplate:
    """One class's base shape: a simple counter-clockwise polygon plus colors.

    Counter-clockwise means positive shoelace area in (x, y) coordinates;
    the renderer's y axis points down the image, so these polygons appear
    clockwise on screen. The distance-sign logic is orientation independent,
    the convention only standardizes validation.
    """

    class_id: int
    name: str
    polygon: np.ndarray           # (V, 2) scene coordinates in [0, 1]^2
    base_color: np.ndarray        # (3,) RGB in [0, 1]
    background_color: np.ndarray  # (3,) RGB in [0, 1]

    def __post_init__(self):
        poly = np.asarray(self.polygon, dtype=np.float64)
        if poly.ndim != 2 or poly.shape[1] != 2 or len(poly) < 3:
            raise ConfigError("template polygon needs >= 3 two-dimensional vertices")
        if _signed_area(poly) <= 1e-12:
            raise ConfigError(f"template {self.name!r}: polygon must be counter-clockwise")
        if not _is_simple(poly):
            raise ConfigError(f"template {self.name!r}: polygon self-intersects")
        base = np.asarray(self.base_color, dtype=np.float64)
        bg = np.asarray(self.background_color, dtype=np.float64)
        for arr, what in ((base, "base_color"), (bg, "background_color")):
            if arr.shape != (3,) or np.any(arr < 0) or np.any(arr > 1):
                raise ConfigError(f"template {self.name!r}: {what} must be RGB in [0,1]")
        poly.setflags(write=False)
        base.setflags(write=False)
        bg.setflags(write=False)
        object.__setattr__(self, "polygon", poly)
        object.__setattr__(self, "base_color", base)
        object.__setattr__(self, "background_color", bg)

    @property
    def n_vertices(self) -> int:
        return len(self.polygon)

    def groups(self) -> tuple[ParamGroup, ...]:
        return default_groups(self.n_vertices)


def _ccw(verts: list[tuple[float, float]]) -> np.ndarray:
    poly = np.asarray(verts, dtype=np.float64)
    if _signed_area(poly) < 0:
        poly = poly[::-1].copy()
    return poly


def _regular(n: int, radius: float, cx: float = 0.5, cy: float = 0.5,
             phase: float = -math.pi / 2) -> list[tuple[float, float]]:
    return [(cx + radius * math.cos(phase + 2 * math.pi * k / n),
             cy + radius * math.sin(phase + 2 * math.pi * k / n)) for k in range(n)]


def _star(points: int, r_outer: float, r_inner: float) -> list[tuple[float, float]]:
    verts = []
    for k in range(points * 2):
        r = r_outer if k % 2 == 0 else r_inner
        a = -math.pi / 2 + math.pi * k / points
        verts.append((0.5 + r * math.cos(a), 0.5 + r * math.sin(a)))
    return verts


# Fixed shape families (documented vertex lists): reproducible without
# assets. The first four are mutually distinct enough under heavy rotation
# jitter for a small MLP to separate cleanly.
SHAPE_FAMILIES: tuple[tuple[str, tuple[tuple[float, float], ...]], ...] = (
    ("triangle", tuple(_regular(3, 0.26))),
    ("square", ((0.30, 0.30), (0.70, 0.30), (0.70, 0.70), (0.30, 0.70))),
    ("star", tuple(_star(5, 0.28, 0.117))),
    ("bar", ((0.30, 0.44), (0.70, 0.44), (0.70, 0.56), (0.30, 0.56))),
    ("pentagon", tuple(_regular(5, 0.24))),
    ("lshape", ((0.34, 0.30), (0.46, 0.30), (0.46, 0.58), (0.66, 0.58),
                (0.66, 0.70), (0.34, 0.70))),
    ("hexagon", tuple(_regular(6, 0.23))),
    ("diamond", ((0.50, 0.23), (0.64, 0.50), (0.50, 0.77), (0.36, 0.50))),
)

# Identical fill for every class: the classifier must key on shape, which
# keeps pose/vertex perturbations the dominant attack surface.
DEFAULT_BASE_COLOR = (0.82, 0.82, 0.82)
DEFAULT_BACKGROUND = (0.10, 0.10, 0.12)


def make_templates(class_count: int) -> tuple[SceneTemplate, ...]:
    if class_count < 2:
        raise ConfigError("need at least 2 classes")
    if class_count > len(SHAPE_FAMILIES):
        raise ConfigError(
            f"class_count {class_count} exceeds {len(SHAPE_FAMILIES)} available shape families")
    return tuple(
        SceneTemplate(class_id=i, name=name, polygon=_ccw(list(verts)),
                      base_color=np.array(DEFAULT_BASE_COLOR),
                      background_color=np.array(DEFAULT_BACKGROUND))
        for i, (name, verts) in enumerate(SHAPE_FAMILIES[:class_count])
    )


@dataclass(frozen=True)
class JitterConfig:
    """Half-widths of the uniform jitter applied when generating dataset
    points. Scale and lighting jitter around 1.0; vertex offsets stay zero."""

    rotation: float = 0.55
    translation: float = 0.06
    scale: float = 0.12
    color: float = 0.06
    lighting: float = 0.10


@dataclass(frozen=True)
class DatasetConfig:
    class_count: int = 4
    per_class: int = 600
    split_fractions: tuple[float, float, float] = (0.7, 0.1, 0.2)
    jitter: JitterConfig = field(default_factory=JitterConfig)
    seed: int = 0

    def __post_init__(self):
        if self.class_count < 2:
            raise ConfigError("class_count must be >= 2")
        if self.per_class < 1:
            raise ConfigError("per_class must be >= 1")
        fr = self.split_fractions
        if len(fr) != 3 or any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise ConfigError("split fractions must be three non-negative values summing to 1")
        if fr[0] <= 0:
            raise ConfigError("train fraction must be positive")


SPLITS = ("train", "validation", "test")


@dataclass(frozen=True)
class DataPoint:
    sample_id: str
    class_id: int
    template_id: int
    theta: SemanticParams
    split: str


@dataclass
class DatasetManifest:
    entries: list[DataPoint]
    class_count: int
    split_fractions: tuple[float, float, float]

    def __post_init__(self):
        ids = [e.sample_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ConfigError("manifest sample ids must be unique")
        if any(e.class_id >= self.class_count for e in self.entries):
            raise ConfigError("manifest entry with class_id >= class_count")

    def split(self, name: str) -> list[DataPoint]:
        if name not in SPLITS:
            raise ConfigError(f"unknown split {name!r}")
        return [e for e in self.entries if e.split == name]

    def to_jsonl(self) -> str:
        lines = []
        for e in self.entries:
            lines.append(json.dumps({
                "id": e.sample_id,
                "class": e.class_id,
                "template": e.template_id,
                "theta": e.theta.as_dict(),
                "split": e.split,
            }, sort_keys=True))
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_jsonl(text: str, templates: Sequence[SceneTemplate],
                   class_count: int,
                   split_fractions: tuple[float, float, float]) -> "DatasetManifest":
        entries = []
        for line in text.splitlines():
            if not line.strip():
                continue
            row = json.loads(line)
            groups = templates[row["template"]].groups()
            entries.append(DataPoint(
                sample_id=row["id"],
                class_id=row["class"],
                template_id=row["template"],
                theta=SemanticParams.from_dict(groups, row["theta"]),
                split=row["split"],
            ))
        return DatasetManifest(entries, class_count, split_fractions)


def templates_to_json(templates: Sequence[SceneTemplate]) -> str:
    return json.dumps({
        "class_count": len(templates),
        "templates": [
            {
                "id": t.class_id,
                "name": t.name,
                "class": t.class_id,
                "polygon": [[float(x), float(y)] for x, y in t.polygon],
                "base_color": [float(c) for c in t.base_color],
                "background_color": [float(c) for c in t.background_color],
            }
            for t in templates
        ],
    }, sort_keys=True, indent=2) + "\n"


def templates_from_json(text: str) -> tuple[SceneTemplate, ...]:
    doc = json.loads(text)
    return tuple(
        SceneTemplate(
            class_id=row["class"],
            name=row["name"],
            polygon=np.asarray(row["polygon"], dtype=np.float64),
            base_color=np.asarray(row["base_color"], dtype=np.float64),
            background_color=np.asarray(row["background_color"], dtype=np.float64),
        )
        for row in sorted(doc["templates"], key=lambda r: r["id"])
    )


def make_dataset(cfg: DatasetConfig) -> tuple[DatasetManifest, tuple[SceneTemplate, ...]]:
    """Generate templates plus a manifest of jittered scene parameters.
    Deterministic for a fixed seed: entries are drawn class-major in index
    order from a single generator stream."""
    templates = make_templates(cfg.class_count)
    rng = np.random.default_rng(cfg.seed)
    j = cfg.jitter
    n = cfg.per_class
    n_train = int(math.floor(cfg.split_fractions[0] * n))
    n_val = int(math.floor(cfg.split_fractions[1] * n))

    entries: list[DataPoint] = []
    for template in templates:
        groups = template.groups()
        ranges = {
            "vertex": (0.0, 0.0),
            "pose": (np.array([-j.rotation, -j.translation, -j.translation, 1.0 - j.scale]),
                     np.array([j.rotation, j.translation, j.translation, 1.0 + j.scale])),
            "color": (-j.color, j.color),
            "lighting": (1.0 - j.lighting, 1.0 + j.lighting),
        }
        for i in range(n):
            theta = sample_uniform(groups, ranges, rng)
            if i < n_train:
                split = "train"
            elif i < n_train + n_val:
                split = "validation"
            else:
                split = "test"
            entries.append(DataPoint(
                sample_id=f"c{template.class_id}-{i:04d}",
                class_id=template.class_id,
                template_id=template.class_id,
                theta=theta,
                split=split,
            ))
    return DatasetManifest(entries, cfg.class_count, cfg.split_fractions), templates
