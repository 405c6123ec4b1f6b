"""Differentiable soft rasterizer.

Forward pass: a scene template transformed by semantic parameters is drawn by
evaluating the signed distance of every pixel center to the transformed
polygon and passing it through a logistic with softness tau:

    coverage(p) = 1 / (1 + exp(sd(p) / tau))
    pixel(p)    = coverage * clamp(base_color + color_offset, 0, 1) * lighting
                  + (1 - coverage) * background

Reverse pass (`render_vjp`): exact analytic gradients of every pixel with
respect to every parameter coordinate. Nearest-edge selection and clamps use
one-sided subgradients: the branch taken in the forward pass defines the
derivative, and coordinates strictly inside a clamp's flat region propagate
zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from PIL import Image as PILImage

from .param_space import (
    ConfigError,
    ParamGroup,
    SceneTemplate,
    SemanticParams,
    StructureError,
)

MIN_POLYGON_AREA = 1e-12


class DegenerateGeometryError(ValueError):
    """The transformed polygon has (near-)zero area."""


@dataclass(frozen=True)
class RenderConfig:
    """Raster geometry. Pixel centers sit at ((col + 0.5) / width,
    (row + 0.5) / height) in the unit scene frame. tau is the logistic edge
    falloff in scene units; the default is ~1.5 pixels."""

    height: int = 32
    width: int = 32
    tau: float = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.height < 8 or self.width < 8:
            raise ConfigError("render size must be at least 8x8")
        tau = self.tau if self.tau is not None else 1.5 / self.width
        if tau <= 0:
            raise ConfigError("tau must be positive")
        object.__setattr__(self, "tau", float(tau))


def pixel_centers(cfg: RenderConfig) -> np.ndarray:
    """(H*W, 2) array of pixel-center scene coordinates in row-major order."""
    cols = (np.arange(cfg.width) + 0.5) / cfg.width
    rows = (np.arange(cfg.height) + 0.5) / cfg.height
    xx, yy = np.meshgrid(cols, rows)
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


def _pose_parts(theta: SemanticParams):
    pose = theta.get("pose")
    return pose[0], pose[1], pose[2], pose[3]


def _rotation(rot: float) -> np.ndarray:
    c, s = math.cos(rot), math.sin(rot)
    return np.array([[c, -s], [s, c]])


def _rotation_deriv(rot: float) -> np.ndarray:
    c, s = math.cos(rot), math.sin(rot)
    return np.array([[-s, -c], [c, -s]])


def transform_polygon(template: SceneTemplate, theta: SemanticParams) -> np.ndarray:
    """v' = scale * Rot(rotation) @ (v + delta - centroid) + centroid + t.

    The centroid is the vertex mean of the *base* polygon, so it is constant
    with respect to the parameters and rotation/scaling pivot around the
    untouched shape center.
    """
    delta = theta.get("vertex")
    if delta.shape[0] != 2 * template.n_vertices:
        raise StructureError(
            f"vertex group dim {delta.shape[0]} does not match template "
            f"with {template.n_vertices} vertices")
    rot, tx, ty, scale = _pose_parts(theta)
    base = template.polygon
    centroid = base.mean(axis=0)
    local = base + delta.reshape(-1, 2) - centroid
    return scale * (local @ _rotation(rot).T) + centroid + np.array([tx, ty])


def _polygon_area(verts: np.ndarray) -> float:
    x, y = verts[:, 0], verts[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _check_not_degenerate(verts: np.ndarray) -> None:
    if abs(_polygon_area(verts)) < MIN_POLYGON_AREA:
        raise DegenerateGeometryError("polygon area below 1e-12")


def _sd_terms(verts: np.ndarray, pts: np.ndarray):
    """Signed distance of each point to the polygon plus the forward-pass
    quantities the reverse pass reuses: nearest edge index k, clamped edge
    parameter t, offset vector b = p - closest point, distance, and sign."""
    a = verts
    bnd = np.roll(verts, -1, axis=0)
    e = bnd - a                                     # (V, 2)
    w = pts[:, None, :] - a[None, :, :]             # (N, V, 2)
    ee = np.sum(e * e, axis=1)                      # (V,)
    t = np.clip(np.einsum("nvk,vk->nv", w, e) / ee[None, :], 0.0, 1.0)
    d = w - t[..., None] * e[None, :, :]            # (N, V, 2)
    d2 = np.sum(d * d, axis=2)
    k = np.argmin(d2, axis=1)
    rows = np.arange(len(pts))
    bvec = d[rows, k]                               # (N, 2)
    dist = np.sqrt(d2[rows, k])
    tk = t[rows, k]

    c1 = pts[:, None, 1] >= a[None, :, 1]
    c2 = pts[:, None, 1] < bnd[None, :, 1]
    c3 = e[None, :, 0] * w[:, :, 1] > e[None, :, 1] * w[:, :, 0]
    flips = np.sum((c1 & c2 & c3) | (~c1 & ~c2 & ~c3), axis=1)
    sign = np.where(flips % 2 == 1, -1.0, 1.0)
    return sign * dist, k, tk, bvec, dist, sign


def signed_distance(polygon: np.ndarray, point) -> float:
    """Signed Euclidean distance of one point to a simple polygon boundary:
    negative inside, positive outside, zero on the boundary."""
    verts = np.asarray(polygon, dtype=np.float64)
    _check_not_degenerate(verts)
    pts = np.asarray(point, dtype=np.float64).reshape(1, 2)
    return float(_sd_terms(verts, pts)[0][0])


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _forward(template: SceneTemplate, theta: SemanticParams, cfg: RenderConfig):
    verts = transform_polygon(template, theta)
    _check_not_degenerate(verts)
    pts = pixel_centers(cfg)
    sd, k, tk, bvec, dist, sign = _sd_terms(verts, pts)
    cov = _sigmoid(-sd / cfg.tau)
    color_raw = template.base_color + theta.get("color")
    color = np.clip(color_raw, 0.0, 1.0)
    lighting = theta.get("lighting")[0]
    fill = color * lighting
    pre = cov[:, None] * fill[None, :] + (1.0 - cov)[:, None] * template.background_color[None, :]
    return verts, pts, (k, tk, bvec, dist, sign), cov, color_raw, color, lighting, fill, pre


def render(template: SceneTemplate, theta: SemanticParams, cfg: RenderConfig) -> np.ndarray:
    """Render to an (H, W, 3) float image with values in [0, 1]."""
    *_, pre = _forward(template, theta, cfg)
    return np.clip(pre, 0.0, 1.0).reshape(cfg.height, cfg.width, 3)


def render_vjp(template: SceneTemplate, theta: SemanticParams, cfg: RenderConfig,
               cotangent: np.ndarray) -> SemanticParams:
    """Gradient of <cotangent, render(theta)> with respect to every coordinate
    of every parameter group."""
    verts, pts, (k, tk, bvec, dist, sign), cov, color_raw, color, lighting, fill, pre = \
        _forward(template, theta, cfg)
    n = len(pts)
    nv = len(verts)
    cot = np.asarray(cotangent, dtype=np.float64).reshape(n, 3)

    # Output clamp: pass-through on [0, 1], zero strictly outside.
    g_pre = cot * ((pre >= 0.0) & (pre <= 1.0))

    bg = template.background_color
    g_cov = g_pre @ (fill - bg)                       # (N,)
    g_fill = g_pre.T @ cov                            # (3,)
    g_lighting = float(g_fill @ color)
    color_mask = (color_raw >= 0.0) & (color_raw <= 1.0)
    g_color = g_fill * lighting * color_mask

    # coverage = sigmoid(-sd / tau)  =>  d cov / d sd = -cov (1 - cov) / tau
    g_sd = g_cov * (-cov * (1.0 - cov) / cfg.tau)

    # sd = sign * |b| with b = p - (v_i + t (v_j - v_i)) on the nearest edge;
    # d|b|/dv_i = (t - 1) b / |b|, d|b|/dv_j = -t b / |b| (t already clamped,
    # so the formula covers the endpoint branches too).
    inv = np.where(dist > 0.0, 1.0 / np.maximum(dist, 1e-300), 0.0)
    coef = g_sd * sign * inv
    wi = (coef * (tk - 1.0))[:, None] * bvec          # (N, 2)
    wj = (coef * (-tk))[:, None] * bvec
    j = (k + 1) % nv
    g_verts = np.zeros((nv, 2))
    for col in (0, 1):
        g_verts[:, col] = (np.bincount(k, weights=wi[:, col], minlength=nv)
                           + np.bincount(j, weights=wj[:, col], minlength=nv))

    # Chain through v' = s R u + c + t with u = base + delta - centroid.
    rot, tx, ty, scale = _pose_parts(theta)
    rmat = _rotation(rot)
    rdot = _rotation_deriv(rot)
    base = template.polygon
    centroid = base.mean(axis=0)
    u = base + theta.get("vertex").reshape(-1, 2) - centroid
    g_delta = scale * (g_verts @ rmat)                # rows are R^T g_vk
    g_trans = g_verts.sum(axis=0)
    g_scale = float(np.sum(g_verts * (u @ rmat.T)))
    g_rot = scale * float(np.sum(g_verts * (u @ rdot.T)))

    grads = []
    for g in theta.groups:
        if g.name == "vertex":
            grads.append(g_delta.ravel())
        elif g.name == "pose":
            grads.append(np.array([g_rot, g_trans[0], g_trans[1], g_scale]))
        elif g.name == "color":
            grads.append(np.asarray(g_color, dtype=np.float64))
        elif g.name == "lighting":
            grads.append(np.array([g_lighting]))
        else:
            grads.append(np.zeros(g.dim))
    return SemanticParams(theta.groups, tuple(grads))


def save_png(image: np.ndarray, path) -> None:
    """Export as 8-bit RGB, rounding half to even after scaling by 255."""
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(arr, mode="RGB").save(path)


def load_png(path) -> np.ndarray:
    """Import a PNG written by `save_png` back to floats in [0, 1]."""
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0
