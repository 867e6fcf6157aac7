"""Vision transformer with local attention over shifted patch variants."""

from .model import ModelConfig, ShiftViT, StageSpec, build, count_params, param_report, preset
from .shift_embed import ShiftSpec, default_shift_set
from .tensor import Tensor, counting, no_grad

__all__ = [
    "ModelConfig", "ShiftViT", "StageSpec", "build", "count_params", "param_report", "preset",
    "ShiftSpec", "default_shift_set", "Tensor", "counting", "no_grad",
]
