"""Finite-difference verification suites.

Central differences are the independent oracle against which the analytic
renderer VJP, the classifier gradients, and the end-to-end semantic gradient
are checked. Random scenes are drawn away from clamp boundaries so the
comparison never straddles a subgradient kink.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import classifier as clf
from . import renderer
from .attacks import semantic_gradient
from .param_space import SceneTemplate, SemanticParams, make_templates


def fd_directional(f, theta: SemanticParams, direction: SemanticParams,
                   h: float = 1e-4) -> float:
    """Central-difference directional derivative of a scalar function of the
    parameters."""
    plus = SemanticParams(theta.groups, tuple(
        v + h * d for v, d in zip(theta.values, direction.values)))
    minus = SemanticParams(theta.groups, tuple(
        v - h * d for v, d in zip(theta.values, direction.values)))
    return (f(plus) - f(minus)) / (2.0 * h)


def _dot(a: SemanticParams, b: SemanticParams) -> float:
    return float(sum(np.dot(x, y) for x, y in zip(a.values, b.values)))


def _random_theta(template: SceneTemplate, rng: np.random.Generator) -> SemanticParams:
    """Feasible parameters drawn from the middle of each group's range, with
    colors kept strictly inside the [0, 1] clamp and lighting below 1 so no
    output clamp is active at the draw."""
    groups = template.groups()
    vals = []
    for g in groups:
        if g.name == "vertex":
            vals.append(rng.uniform(-0.03, 0.03, g.dim))
        elif g.name == "pose":
            vals.append(np.array([rng.uniform(-0.6, 0.6), rng.uniform(-0.1, 0.1),
                                  rng.uniform(-0.1, 0.1), rng.uniform(0.85, 1.15)]))
        elif g.name == "color":
            vals.append(rng.uniform(-0.1, 0.1, g.dim))
        else:
            vals.append(np.array([rng.uniform(0.6, 0.95)]))
    return SemanticParams(groups, tuple(vals))


def _random_direction(theta: SemanticParams, rng: np.random.Generator) -> SemanticParams:
    vals = [rng.standard_normal(g.dim) for g in theta.groups]
    norm = np.sqrt(sum(float(v @ v) for v in vals))
    return SemanticParams(theta.groups, tuple(v / norm for v in vals))


@dataclass
class SuiteResult:
    trials: int
    passed: int
    tolerance: float
    max_rel_err: float

    @property
    def pass_rate(self) -> float:
        return self.passed / self.trials if self.trials else 0.0

    def to_dict(self) -> dict:
        return {"trials": int(self.trials), "passed": int(self.passed),
                "pass_rate": float(self.pass_rate), "tolerance": float(self.tolerance),
                "max_rel_err": float(self.max_rel_err)}


def _rel_err(a: float, b: float) -> float:
    scale = max(abs(a), abs(b), 1e-8)
    return abs(a - b) / scale


def renderer_vjp_suite(trials: int = 200, seed: int = 0,
                       tolerance: float = 1e-2,
                       rcfg: renderer.RenderConfig | None = None) -> SuiteResult:
    """Random scene, random cotangent: the VJP dotted with a random direction
    must match the central-difference directional derivative."""
    rcfg = rcfg or renderer.RenderConfig(height=16, width=16)
    rng = np.random.default_rng(seed)
    templates = make_templates(4)
    passed = 0
    worst = 0.0
    for _ in range(trials):
        template = templates[rng.integers(len(templates))]
        theta = _random_theta(template, rng)
        cot = rng.standard_normal((rcfg.height, rcfg.width, 3))
        vjp = renderer.render_vjp(template, theta, rcfg, cot)
        direction = _random_direction(theta, rng)

        def scalar(th):
            return float(np.sum(cot * renderer.render(template, th, rcfg)))

        fd = fd_directional(scalar, theta, direction)
        err = _rel_err(_dot(vjp, direction), fd)
        worst = max(worst, err)
        passed += err < tolerance
    return SuiteResult(trials, passed, tolerance, worst)


def renderer_jacobian_check(tolerance: float = 1e-2,
                            seed: int = 3) -> tuple[float, bool]:
    """Assemble the full Jacobian of a 3-vertex toy scene from unit-cotangent
    VJP calls and compare against the finite-difference Jacobian in relative
    Frobenius error."""
    rcfg = renderer.RenderConfig(height=8, width=8)
    template = make_templates(4)[0]  # triangle
    rng = np.random.default_rng(seed)
    theta = _random_theta(template, rng)
    dims = [g.dim for g in theta.groups]
    total = sum(dims)
    n_out = rcfg.height * rcfg.width * 3

    analytic = np.zeros((n_out, total))
    for k in range(n_out):
        cot = np.zeros(n_out)
        cot[k] = 1.0
        grad = renderer.render_vjp(template, theta, rcfg,
                                   cot.reshape(rcfg.height, rcfg.width, 3))
        analytic[k] = np.concatenate(grad.values)

    h = 1e-5
    fd = np.zeros((n_out, total))
    col = 0
    for gi, g in enumerate(theta.groups):
        for d in range(g.dim):
            bump = np.zeros(g.dim)
            bump[d] = h
            plus = theta.with_group(g.name, theta.values[gi] + bump)
            minus = theta.with_group(g.name, theta.values[gi] - bump)
            diff = (renderer.render(template, plus, rcfg)
                    - renderer.render(template, minus, rcfg)) / (2 * h)
            fd[:, col] = diff.ravel()
            col += 1
    err = float(np.linalg.norm(analytic - fd) / max(float(np.linalg.norm(fd)), 1e-12))
    return err, bool(err < tolerance)


def classifier_input_suite(trials: int = 20, seed: int = 0,
                           tolerance: float = 1e-4) -> SuiteResult:
    """Input gradients of small random models against central differences."""
    rng = np.random.default_rng(seed)
    passed = 0
    worst = 0.0
    for _ in range(trials):
        model = clf.init_classifier((3, 3, 2), (7,), 3, seed=int(rng.integers(1 << 30)))
        x = rng.uniform(0.1, 0.9, size=(3, 3, 2))
        label = int(rng.integers(3))
        kind = "cross_entropy" if rng.integers(2) else "raw_score"
        grad = clf.input_gradient(model, x, label, kind)
        direction = rng.standard_normal(x.shape)
        direction /= np.linalg.norm(direction)
        h = 1e-5
        fd = (clf.loss(model, x + h * direction, label, kind)
              - clf.loss(model, x - h * direction, label, kind)) / (2 * h)
        err = _rel_err(float(np.sum(grad * direction)), fd)
        worst = max(worst, err)
        passed += err < tolerance
    return SuiteResult(trials, passed, tolerance, worst)


def classifier_weight_check(tolerance: float = 1e-4, seed: int = 5) -> tuple[float, bool]:
    """All-layer weight gradients of a 6-parameter toy model (1 -> 1 -> 2)
    against central differences, reported as the worst relative error."""
    rng = np.random.default_rng(seed)
    model = clf.init_classifier((1,), (1,), 2, seed=seed)
    x = np.array([rng.uniform(0.2, 0.9)])
    label = 1

    flat = x.reshape(1, 1)
    labels = np.array([label])
    _, gw, gb = clf._batch_gradients(model, flat, labels)
    analytic = np.concatenate([g.ravel() for g in (*gw, *gb)])

    h = 1e-6
    fd = np.zeros_like(analytic)
    params = [*model.weights, *model.biases]
    idx = 0
    for arr in params:
        for j in range(arr.size):
            orig = arr.flat[j]
            arr.flat[j] = orig + h
            up = clf.loss(model, x, label, "cross_entropy")
            arr.flat[j] = orig - h
            down = clf.loss(model, x, label, "cross_entropy")
            arr.flat[j] = orig
            fd[idx] = (up - down) / (2 * h)
            idx += 1
    worst = float(max(_rel_err(a, b) for a, b in zip(analytic, fd)))
    return worst, bool(worst < tolerance)


def end_to_end_suite(model: clf.Classifier, templates, trials: int = 100,
                     seed: int = 0, tolerance: float = 1e-2,
                     rcfg: renderer.RenderConfig | None = None) -> SuiteResult:
    """Semantic gradient (render -> loss -> VJP composition) against central
    differences of loss(render(theta))."""
    rcfg = rcfg or renderer.RenderConfig(height=16, width=16)
    rng = np.random.default_rng(seed)
    passed = 0
    worst = 0.0
    for _ in range(trials):
        template = templates[rng.integers(len(templates))]
        theta = _random_theta(template, rng)
        label = int(rng.integers(model.n_classes))
        kind = "raw_score" if rng.integers(2) else "cross_entropy"
        grad = semantic_gradient(model, template, theta, label, rcfg, kind)
        direction = _random_direction(theta, rng)

        def scalar(th):
            return clf.loss(model, renderer.render(template, th, rcfg), label, kind)

        fd = fd_directional(scalar, theta, direction)
        err = _rel_err(_dot(grad, direction), fd)
        worst = max(worst, err)
        passed += err < tolerance
    return SuiteResult(trials, passed, tolerance, worst)


def run_all(seed: int = 0, renderer_trials: int = 200,
            end_to_end_trials: int = 200) -> dict:
    """The full gradcheck battery with the acceptance thresholds; `ok` is the
    overall verdict."""
    rcfg = renderer.RenderConfig(height=16, width=16)
    templates = make_templates(4)
    model = clf.init_classifier((rcfg.height, rcfg.width, 3), (24,), 4, seed=seed)

    vjp = renderer_vjp_suite(renderer_trials, seed=seed, rcfg=rcfg)
    jac_err, jac_ok = renderer_jacobian_check()
    inp = classifier_input_suite(seed=seed)
    w_err, w_ok = classifier_weight_check()
    e2e = end_to_end_suite(model, templates, end_to_end_trials, seed=seed, rcfg=rcfg)

    ok = bool(vjp.pass_rate >= 0.95 and jac_ok and inp.passed == inp.trials
              and w_ok and e2e.pass_rate >= 0.95)
    return {
        "ok": ok,
        "renderer_vjp": vjp.to_dict(),
        "renderer_jacobian": {"rel_frobenius_err": jac_err, "ok": jac_ok},
        "classifier_input": inp.to_dict(),
        "classifier_weights": {"max_rel_err": w_err, "ok": w_ok},
        "end_to_end": e2e.to_dict(),
    }
