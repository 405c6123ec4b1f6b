import pytest

from semcex import classifier as clf
from semcex.param_space import DatasetConfig, make_dataset, make_templates
from semcex.pipeline import labels_of, render_points
from semcex.renderer import RenderConfig


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Echo the acceptance criterion lines even when output is captured."""
    try:
        from test_acceptance import LINES
    except ImportError:
        return
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def templates():
    return make_templates(4)


@pytest.fixture(scope="session")
def rcfg():
    return RenderConfig(height=16, width=16)


@pytest.fixture(scope="session")
def small_dataset():
    """A small rendered dataset: (manifest, templates, render config)."""
    cfg = DatasetConfig(class_count=4, per_class=60, seed=5)
    manifest, templates = make_dataset(cfg)
    return manifest, templates, RenderConfig(height=16, width=16)


@pytest.fixture(scope="session")
def trained(small_dataset):
    """A quickly trained 4-class model over the small dataset."""
    manifest, templates, rcfg = small_dataset
    points = manifest.split("train")
    images = render_points(points, templates, rcfg)
    labels = labels_of(points)
    model = clf.init_classifier((rcfg.height, rcfg.width, 3), (48,), 4, seed=3)
    model, _ = clf.train(model, images, labels, clf.TrainConfig(epochs=12, seed=3))
    return model
