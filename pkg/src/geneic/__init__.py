"""Unsupervised prompt-vector learning for image captioning on a frozen backend."""

__version__ = "0.1.0"

from .backend import BackendBundle, DimSpec, build_toy_backend  # noqa: E402
from .prompt import PromptState, init_prompt  # noqa: E402
from .trainer import TrainConfig, train  # noqa: E402

__all__ = ["BackendBundle", "DimSpec", "PromptState", "TrainConfig", "build_toy_backend", "init_prompt", "train"]
