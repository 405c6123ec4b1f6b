"""semcex: semantic counterexamples for a differentiable 2D rasterizer.

Generate gradient-based semantic counterexamples (si-FGSM, sGD, sCW) against
a small trainable classifier, score their realism and information worth, and
use them for dataset augmentation, robustness matrices, and cross-model
transfer evaluation.
"""

__version__ = "0.1.0"

from .param_space import (  # noqa: F401
    DataPoint,
    DatasetConfig,
    DatasetManifest,
    ParamGroup,
    SceneTemplate,
    SemanticParams,
    add,
    group_norm,
    make_dataset,
    project,
    sample_uniform,
)
from .renderer import RenderConfig, render, render_vjp, signed_distance  # noqa: F401
from .classifier import Classifier, TrainConfig, evaluate, forward, softmax, train  # noqa: F401
from .attacks import AttackConfig, CounterexampleRecord, attack_batch, is_counterexample  # noqa: F401
from .samplers import SamplerConfig, halton, sample_best_of_n, sampler_batch  # noqa: F401
from .metrics import RealismConfig, information_worth, perceptual_distance, realism  # noqa: F401
from .augment import AugmentPlan, build_augmented_dataset, retrain, robustness_matrix, transfer_eval  # noqa: F401
