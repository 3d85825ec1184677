"""blurfit: 3D shape, 6-DoF motion, and exposure-gap recovery from
motion-blurred video by analysis-by-synthesis with a differentiable
renderer."""

__version__ = "0.1.0"

from .geometry import Prototype, TexturedMesh, Pose, make_prototype
from .motion import MotionModel, ExposureGap
from .renderer import Camera, default_camera, rasterize
from .formation import VideoSequence, make_video, render_frame, render_tsr
from .masks import MaskTrack, load_mask_track, synchronize_direction
from .fit import FitConfig, FitResult, fit_video, optimize_window, select_prototype
from .eval import SyntheticScene, synth_generate, psnr, ssim

__all__ = [
    "Prototype", "TexturedMesh", "Pose", "make_prototype",
    "MotionModel", "ExposureGap",
    "Camera", "default_camera", "rasterize",
    "VideoSequence", "make_video", "render_frame", "render_tsr",
    "MaskTrack", "load_mask_track", "synchronize_direction",
    "FitConfig", "FitResult", "fit_video", "optimize_window",
    "select_prototype",
    "SyntheticScene", "synth_generate", "psnr", "ssim",
]
