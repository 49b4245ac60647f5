"""Instantaneous change detection with retrospective convolution, in numpy."""

__version__ = "0.1.0"

from .network import ModelConfig, build_model, infer, infer_multiscale, load_checkpoint, save_checkpoint  # noqa: E402
from .ops import atrous_retro_conv, retro_conv  # noqa: E402

__all__ = ["ModelConfig", "build_model", "infer", "infer_multiscale", "load_checkpoint", "save_checkpoint",
           "retro_conv", "atrous_retro_conv", "__version__"]
