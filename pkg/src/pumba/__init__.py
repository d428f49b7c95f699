"""Interface-image docking scorer built on bidirectional selective state-space encoders."""

from .model import (BranchGroupSpec, InterfacePairSample, ModelConfig, init_params, score,
                    score_sample)
from .tensor import GradTape, Tensor, shadow64
from .vim import EncoderConfig

__all__ = ["BranchGroupSpec", "EncoderConfig", "GradTape", "InterfacePairSample", "ModelConfig",
           "Tensor", "init_params", "score", "score_sample", "shadow64"]
__version__ = "0.1.0"
