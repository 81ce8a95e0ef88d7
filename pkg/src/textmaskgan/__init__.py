"""Text- and mask-conditioned multi-stage image synthesis."""

__version__ = "0.1.0"

from .masks import AffineMaskFusion, affine_modulate, build_mask_pyramid, downsample_mask
from .nets import StagedGenerator, StageDiscriminator, StagePlan, desk_plan, full_plan
from .train import TrainConfig, build_state, fit, load_checkpoint, save_checkpoint

__all__ = [
    "__version__",
    "AffineMaskFusion",
    "affine_modulate",
    "build_mask_pyramid",
    "downsample_mask",
    "StagedGenerator",
    "StageDiscriminator",
    "StagePlan",
    "desk_plan",
    "full_plan",
    "TrainConfig",
    "build_state",
    "fit",
    "load_checkpoint",
    "save_checkpoint",
]
