"""Open-vocabulary domain-generalized segmentation at desk scale.

A self-contained dense-tensor autodiff core, frozen synthetic feature
providers, prompt-driven refinement of encoder features, a coarse mask
prior with query priors, a text-matched embedding head, and a training /
evaluation harness verified end to end by finite differences and
brute-force oracles.
"""

__version__ = "0.1.0"

from .autodiff import Tensor, grad_check  # noqa: F401
from .model import ModelConfig, VireoModel  # noqa: F401
from .providers import FeatureStack, TextBank, synth_features, synth_text_bank  # noqa: F401
from .training import SyntheticTask, TaskConfig, TrainConfig, train_run  # noqa: F401
