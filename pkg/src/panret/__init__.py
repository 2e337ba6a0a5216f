"""Motion retargeting between skeletons through shared body-part latent codes."""
from .body_parts import BodyPartition, build_mask, load_partition, positional_encoding, preset_partition
from .evaluation import contact_recall, fid, mpjpe
from .kinematics import fk, integrate_root
from .motion_io import (
    ClipSet, MotionClip, NormStats, RawMotion, SkeletonDef, localize_and_clip, parse_bvh, write_bvh,
)
from .networks import ModelConfig
from .training import LossWeights, RetargetModel, TrainConfig, Trainer, retarget

__version__ = "0.1.0"
