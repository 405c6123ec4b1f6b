import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semcex.param_space import (
    ConfigError,
    DatasetConfig,
    SemanticParams,
    StructureError,
    add,
    default_groups,
    group_norm,
    make_dataset,
    make_templates,
    neutral_params,
    project,
    sample_uniform,
    total_norm,
)


@pytest.fixture
def groups():
    return default_groups(3)


def params(groups, **values):
    base = neutral_params(groups)
    for name, v in values.items():
        base = base.with_group(name, np.asarray(v, dtype=np.float64))
    return base


def zero_perturbation(groups):
    return SemanticParams(groups, tuple(np.zeros(g.dim) for g in groups))


class TestAdd:
    def test_elementwise_sum(self, groups):
        theta = params(groups, pose=[0.0, 0, 0, 1.0])
        pi = zero_perturbation(groups).with_group("pose", [0.2, 0, 0, 0])
        assert np.allclose(add(theta, pi).get("pose"), [0.2, 0, 0, 1.0])

    def test_zero_is_identity(self, groups):
        theta = params(groups, pose=[0.4, 0.1, -0.2, 1.1], color=[0.1, 0, -0.3])
        out = add(theta, zero_perturbation(groups))
        for a, b in zip(out.values, theta.values):
            assert np.array_equal(a, b)

    def test_clamps_to_upper_bound(self, groups):
        # lighting bounds are [0.2, 1.5]
        theta = params(groups, lighting=[1.4])
        pi = zero_perturbation(groups).with_group("lighting", [0.3])
        assert add(theta, pi).get("lighting")[0] == pytest.approx(1.5)

    def test_structure_mismatch(self, groups):
        theta = params(groups)
        other = neutral_params(default_groups(5))
        with pytest.raises(StructureError):
            add(theta, other)


class TestGroupNorm:
    def test_l1(self, groups):
        pi = zero_perturbation(groups).with_group("pose", [0.3, -0.4, 0, 0])
        assert group_norm(pi, 1)["pose"] == pytest.approx(0.7)

    def test_zero_vector(self, groups):
        pi = zero_perturbation(groups)
        for order in (1, 2, math.inf):
            assert all(v == 0.0 for v in group_norm(pi, order).values())

    def test_l2_345(self, groups):
        pi = zero_perturbation(groups).with_group("color", [3.0, 4.0, 0.0])
        assert group_norm(pi, 2)["color"] == pytest.approx(5.0)

    def test_total_is_sum(self, groups):
        pi = zero_perturbation(groups).with_group("pose", [0.1, 0, 0, 0])
        pi = pi.with_group("color", [0.2, 0, 0])
        assert total_norm(pi, 1) == pytest.approx(0.3)

    def test_invalid_order(self, groups):
        with pytest.raises(ConfigError):
            group_norm(zero_perturbation(groups), 3)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.sampled_from([1, 2, math.inf]))
    def test_triangle_inequality(self, seed, order):
        groups = default_groups(3)
        rng = np.random.default_rng(seed)
        a = SemanticParams(groups, tuple(rng.normal(size=g.dim) for g in groups))
        b = SemanticParams(groups, tuple(rng.normal(size=g.dim) for g in groups))
        ab = SemanticParams(groups, tuple(x + y for x, y in zip(a.values, b.values)))
        na, nb, nab = group_norm(a, order), group_norm(b, order), group_norm(ab, order)
        for name in na:
            assert nab[name] <= na[name] + nb[name] + 1e-12


class TestProject:
    def test_clamp_to_ball(self, groups):
        theta0 = params(groups, pose=[1.0, 0, 0, 1.0])
        theta = params(groups, pose=[1.8, 0, 0, 1.0])
        out = project(theta, theta0, {"pose": 0.5})
        assert out.get("pose")[0] == pytest.approx(1.5)

    def test_idempotent_inside(self, groups):
        theta0 = params(groups, pose=[0.1, 0, 0, 1.0])
        theta = params(groups, pose=[0.3, 0.05, 0, 1.0])
        once = project(theta, theta0, {"pose": 0.5, "vertex": 0.1})
        twice = project(once, theta0, {"pose": 0.5, "vertex": 0.1})
        for a, b in zip(once.values, twice.values):
            assert np.array_equal(a, b)

    def test_feasibility_tighter_than_ball(self, groups):
        # translation-x upper bound is 0.3 < theta0 + eps = 1.0
        theta0 = params(groups, pose=[0.0, 0.0, 0, 1.0])
        theta = params(groups, pose=[0.0, 0.9, 0, 1.0])
        out = project(theta, theta0, {"pose": 1.0})
        assert out.get("pose")[1] == pytest.approx(0.3)

    def test_negative_eps_rejected(self, groups):
        theta = params(groups)
        with pytest.raises(ConfigError):
            project(theta, theta, {"pose": -0.1})

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_ball_and_feasibility_postcondition(self, seed):
        groups = default_groups(4)
        rng = np.random.default_rng(seed)
        theta0 = sample_uniform(groups, {
            "vertex": (-0.1, 0.1), "pose": (np.array([-1.0, -0.2, -0.2, 0.8]),
                                            np.array([1.0, 0.2, 0.2, 1.2])),
            "color": (-0.3, 0.3), "lighting": (0.5, 1.2)}, rng)
        theta = SemanticParams(groups, tuple(v + rng.normal(scale=0.5, size=g.dim)
                                             for g, v in theta0.items()))
        eps = {g.name: float(rng.uniform(0.01, 0.4)) for g in groups}
        out = project(theta, theta0, eps)
        assert out.is_feasible(atol=1e-12)
        for g, ov, tv in zip(out.groups, out.values, theta0.values):
            assert np.max(np.abs(ov - tv)) <= eps[g.name] + 1e-12


POSE_RANGE = (np.array([-0.3, -0.2, -0.2, 0.9]), np.array([0.3, 0.2, 0.2, 1.1]))


class TestSampleUniform:
    def test_range_containment(self, groups):
        rng = np.random.default_rng(0)
        ranges = {"vertex": (0.0, 0.0), "pose": POSE_RANGE,
                  "color": (-0.1, 0.1), "lighting": (0.9, 1.1)}
        for _ in range(50):
            theta = sample_uniform(groups, ranges, rng)
            pose = theta.get("pose")
            assert np.all(pose >= POSE_RANGE[0]) and np.all(pose <= POSE_RANGE[1])

    def test_determinism(self, groups):
        ranges = {"vertex": (-0.05, 0.05), "pose": POSE_RANGE,
                  "color": (-0.1, 0.1), "lighting": (0.8, 1.2)}
        a = sample_uniform(groups, ranges, np.random.default_rng(42))
        b = sample_uniform(groups, ranges, np.random.default_rng(42))
        for x, y in zip(a.values, b.values):
            assert np.array_equal(x, y)

    def test_law_of_large_numbers(self, groups):
        # 1e4 rotation draws in [-0.75, 0.75]: empirical mean within 0.02 of 0
        rng = np.random.default_rng(123)
        ranges = {"vertex": (0.0, 0.0),
                  "pose": (np.array([-0.75, 0.0, 0.0, 1.0]), np.array([0.75, 0.0, 0.0, 1.0])),
                  "color": (0.0, 0.0), "lighting": (1.0, 1.0)}
        draws = [sample_uniform(groups, ranges, rng).get("pose")[0] for _ in range(10_000)]
        assert abs(float(np.mean(draws))) < 0.02

    def test_range_outside_bounds_rejected(self, groups):
        rng = np.random.default_rng(0)
        ranges = {"vertex": (0.0, 0.0), "pose": (-4.0, 4.0),
                  "color": (0.0, 0.0), "lighting": (1.0, 1.0)}
        with pytest.raises(ConfigError):
            sample_uniform(groups, ranges, rng)


class TestMakeDataset:
    def test_counts_and_splits(self):
        manifest, templates = make_dataset(DatasetConfig(class_count=4, per_class=600, seed=1))
        assert len(manifest.entries) == 2400
        assert len(manifest.split("train")) == 1680
        assert len(manifest.split("validation")) == 240
        assert len(manifest.split("test")) == 480
        assert len(templates) == 4

    def test_deterministic_manifest(self):
        a, _ = make_dataset(DatasetConfig(class_count=3, per_class=40, seed=9))
        b, _ = make_dataset(DatasetConfig(class_count=3, per_class=40, seed=9))
        assert a.to_jsonl() == b.to_jsonl()

    def test_different_seed_differs(self):
        a, _ = make_dataset(DatasetConfig(class_count=3, per_class=40, seed=9))
        b, _ = make_dataset(DatasetConfig(class_count=3, per_class=40, seed=10))
        assert a.to_jsonl() != b.to_jsonl()

    def test_every_theta_feasible(self):
        manifest, _ = make_dataset(DatasetConfig(class_count=4, per_class=30, seed=2))
        assert all(e.theta.is_feasible() for e in manifest.entries)

    def test_too_many_classes(self):
        with pytest.raises(ConfigError):
            make_dataset(DatasetConfig(class_count=40, per_class=10))

    def test_bad_fractions(self):
        with pytest.raises(ConfigError):
            DatasetConfig(split_fractions=(0.5, 0.2, 0.2))

    def test_roundtrip_jsonl(self):
        from semcex.param_space import DatasetManifest
        manifest, templates = make_dataset(DatasetConfig(class_count=3, per_class=10, seed=4))
        text = manifest.to_jsonl()
        back = DatasetManifest.from_jsonl(text, templates, 3, (0.7, 0.1, 0.2))
        assert back.to_jsonl() == text


class TestTemplates:
    def test_ccw_and_simple(self):
        for t in make_templates(8):
            x, y = t.polygon[:, 0], t.polygon[:, 1]
            area = 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)
            assert area > 1e-6

    def test_self_intersection_rejected(self):
        from semcex.param_space import SceneTemplate
        bowtie = np.array([[0, 0], [1, 1], [1, 0], [0, 1]], float)
        with pytest.raises(ConfigError):
            SceneTemplate(0, "bowtie", bowtie, np.full(3, 0.5), np.full(3, 0.1))
