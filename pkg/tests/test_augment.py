import hashlib

import numpy as np
import pytest

from semcex import classifier as clf
from semcex.attacks import attack_batch, preset
from semcex.augment import (
    AugmentPlan,
    build_augmented_dataset,
    matrix_to_csv,
    retrain,
    robustness_matrix,
    select_replacement_indices,
    transfer_eval,
)
from semcex.metrics import RealismConfig
from semcex.param_space import ConfigError
from semcex.pipeline import labels_of, render_points

RL = RealismConfig()


def _weights_digest(model):
    h = hashlib.sha256()
    for arr in (*model.weights, *model.biases):
        h.update(arr.tobytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def train_records(trained, small_dataset):
    manifest, templates, rcfg = small_dataset
    points = manifest.split("train")
    records, _ = attack_batch(trained, points, templates, preset("sifgsm"), rcfg, RL)
    return points, {r.sample_id: r for r in records}


class TestPlan:
    def test_fraction_zero_disallowed(self):
        with pytest.raises(ConfigError):
            AugmentPlan(fraction=0.0)

    def test_fraction_one_replaces_everything(self, trained, small_dataset, train_records):
        manifest, templates, rcfg = small_dataset
        points, by_id = train_records
        images = render_points(points, templates, rcfg)
        labels = labels_of(points)
        out, out_labels, replaced = build_augmented_dataset(
            images, labels, [p.sample_id for p in points], by_id, AugmentPlan(1.0, seed=0))
        assert len(replaced) == len(points)
        assert out.shape == images.shape

    def test_selection_deterministic(self):
        a = select_replacement_indices(100, AugmentPlan(0.5, seed=3))
        b = select_replacement_indices(100, AugmentPlan(0.5, seed=3))
        assert np.array_equal(a, b)
        assert len(a) == 50

    def test_selection_without_replacement(self):
        idx = select_replacement_indices(40, AugmentPlan(0.5, seed=1))
        assert len(set(idx.tolist())) == len(idx)


class TestBuildAugmented:
    def test_size_and_labels_preserved(self, trained, small_dataset, train_records):
        manifest, templates, rcfg = small_dataset
        points, by_id = train_records
        images = render_points(points, templates, rcfg)
        labels = labels_of(points)
        out, out_labels, replaced = build_augmented_dataset(
            images, labels, [p.sample_id for p in points], by_id, AugmentPlan(0.5, seed=2))
        assert out.shape == images.shape
        assert np.array_equal(out_labels, labels)
        assert len(replaced) == len(points) // 2

    def test_replaced_points_carry_perturbed_images(self, trained, small_dataset, train_records):
        manifest, templates, rcfg = small_dataset
        points, by_id = train_records
        images = render_points(points, templates, rcfg)
        labels = labels_of(points)
        plan = AugmentPlan(0.5, seed=2)
        out, _, replaced = build_augmented_dataset(
            images, labels, [p.sample_id for p in points], by_id, plan)
        ids = [p.sample_id for p in points]
        for sid in replaced[:5]:
            i = ids.index(sid)
            assert np.array_equal(out[i], by_id[sid].x_perturbed)

    def test_missing_record_is_error(self, trained, small_dataset, train_records):
        manifest, templates, rcfg = small_dataset
        points, by_id = train_records
        images = render_points(points, templates, rcfg)
        labels = labels_of(points)
        partial = dict(list(by_id.items())[: len(by_id) // 4])
        with pytest.raises(ConfigError):
            build_augmented_dataset(images, labels, [p.sample_id for p in points],
                                    partial, AugmentPlan(0.9, seed=0))


class TestRetrain:
    def test_zero_lr_reproduces_benign_bitwise(self, trained, small_dataset):
        manifest, templates, rcfg = small_dataset
        points = manifest.split("train")
        images = render_points(points, templates, rcfg)
        labels = labels_of(points)
        robust, _ = retrain(trained, images, labels,
                            clf.TrainConfig(epochs=1, learning_rate=0.0, seed=0))
        assert _weights_digest(robust) == _weights_digest(trained)

    def test_benign_model_unmodified(self, trained, small_dataset, train_records):
        manifest, templates, rcfg = small_dataset
        points, by_id = train_records
        images = render_points(points, templates, rcfg)
        labels = labels_of(points)
        before = _weights_digest(trained)
        aug_images, aug_labels, _ = build_augmented_dataset(
            images, labels, [p.sample_id for p in points], by_id, AugmentPlan(0.5, seed=5))
        retrain(trained, aug_images, aug_labels, clf.TrainConfig(epochs=2, seed=5))
        assert _weights_digest(trained) == before

    def test_deterministic(self, trained, small_dataset):
        manifest, templates, rcfg = small_dataset
        points = manifest.split("train")
        images = render_points(points, templates, rcfg)
        labels = labels_of(points)
        a, _ = retrain(trained, images, labels, clf.TrainConfig(epochs=2, seed=4))
        b, _ = retrain(trained, images, labels, clf.TrainConfig(epochs=2, seed=4))
        assert _weights_digest(a) == _weights_digest(b)


@pytest.fixture(scope="module")
def tiny_matrix(trained, small_dataset):
    manifest, templates, rcfg = small_dataset
    points = manifest.split("test")
    cfgs = {"sifgsm": preset("sifgsm"), "sgd": preset("sgd")}
    models = {"benign": trained, "sifgsm": trained.copy(), "sgd": trained.copy()}
    fx = robustness_matrix(models, cfgs, points, templates, rcfg, RL, "fixed",
                           count=16, seed=1)
    rg = robustness_matrix(models, cfgs, points, templates, rcfg, RL, "regenerated",
                           count=16, seed=1)
    return fx, rg


class TestMatrix:

    def test_benign_row_matches_attack_summary(self, trained, small_dataset, tiny_matrix):
        manifest, templates, rcfg = small_dataset
        fx, _ = tiny_matrix
        points = manifest.split("test")
        _, summary = attack_batch(trained, points, templates, preset("sifgsm"),
                                  rcfg, RL, count=16, seed=1)
        assert fx.cells[("benign", "sifgsm")] == pytest.approx(summary["overall_accuracy"])

    def test_identical_models_give_identical_rows(self, tiny_matrix):
        fx, rg = tiny_matrix
        for te in fx.test_names:
            assert fx.cells[("benign", te)] == fx.cells[("sifgsm", te)] == fx.cells[("sgd", te)]
            assert rg.cells[("benign", te)] == rg.cells[("sifgsm", te)]

    def test_regenerated_equals_fixed_for_the_attacked_model(self, tiny_matrix):
        # every model here is the benign model, so adaptive and static
        # attacks coincide exactly
        fx, rg = tiny_matrix
        for te in fx.test_names:
            assert rg.cells[("benign", te)] == pytest.approx(fx.cells[("benign", te)])

    def test_csv_header_row_stamps_mode_and_seed(self, tiny_matrix):
        fx, _ = tiny_matrix
        csv = matrix_to_csv(fx)
        assert csv.splitlines()[0] == "# mode=fixed,seed=1"
        assert csv.splitlines()[1] == "train,benign,sifgsm,sgd"

    def test_mode_validation(self, trained, small_dataset):
        manifest, templates, rcfg = small_dataset
        with pytest.raises(ConfigError):
            robustness_matrix({"benign": trained}, {}, manifest.split("test"),
                              templates, rcfg, RL, "adaptive")


class TestTransfer:
    def test_self_transfer_matches_attack_summary(self, trained, small_dataset):
        manifest, templates, rcfg = small_dataset
        points = manifest.split("test")
        records, summary = attack_batch(trained, points, templates, preset("sifgsm"),
                                        rcfg, RL, count=20, seed=0)
        table = transfer_eval({"sifgsm": records}, trained)
        assert table.overall("sifgsm") == pytest.approx(summary["overall_accuracy"])

    def test_class_set_mismatch(self, trained, small_dataset):
        manifest, templates, rcfg = small_dataset
        points = [p for p in manifest.split("test") if p.class_id >= 2]
        records, _ = attack_batch(trained, points, templates, preset("sifgsm"),
                                  rcfg, RL, count=4, seed=0)
        small = clf.init_classifier((rcfg.height, rcfg.width, 3), (4,), 2, seed=0)
        with pytest.raises(ConfigError):
            transfer_eval({"sifgsm": records}, small)
