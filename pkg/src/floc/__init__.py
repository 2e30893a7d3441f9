"""floc: weakly supervised image manipulation localization at desk scale.

Library modules:

* ``tensor``: float32 tensors with tape-based reverse-mode autodiff
* ``imgproc``: edge operators, blur, JPEG-style degradation, resize, CCL
* ``model``: dual-branch (conv + transformer) classifier with
  boundary-aware conv blocks and per-block feature coupling
* ``cam``: class-activation maps, attention refinement, fusion
* ``cgsr``: coarse-mask prompts and pluggable mask refinement
* ``metrics``: pixel F1, image AUC, robustness sweeps, report emission
* ``data``: dataset layout, synthetic forgery generator, run config
* ``pipeline``: end-to-end train / infer / eval / ablation harnesses

The ``floc`` console script exposes the whole pipeline.
"""

from .tensor import OptimState, PaddingMode, Tensor, adamw_step, backward
from .imgproc import BinaryMask, Component, Image
from .model import DualBranchModel, ModelConfig
from .cam import CamMap
from .cgsr import PromptSet, RefineResult
from .data import ManipSample, RunConfig
from .metrics import EvalReport

__version__ = "0.1.0"

__all__ = [
    "BinaryMask",
    "CamMap",
    "Component",
    "DualBranchModel",
    "EvalReport",
    "Image",
    "ManipSample",
    "ModelConfig",
    "OptimState",
    "PaddingMode",
    "PromptSet",
    "RefineResult",
    "RunConfig",
    "Tensor",
    "adamw_step",
    "backward",
    "__version__",
]
