"""Video formation: integrate renders over each open-shutter interval and
composite over the median background.

A frame is the average over S sub-frame times of
appearance + (1 - silhouette) * background, with both the appearance and
silhouette integrals sharing the same midpoint sample times. Every output
pixel is therefore a convex combination of object color and background.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .geometry import TexturedMesh
from .motion import MotionModel, eval_rotation, eval_translation, sub_frame_times
from .renderer import Camera, DEFAULT_SOFTNESS, render_poses

DEFAULT_SUBFRAMES = 8


@dataclass
class VideoSequence:
    """N RGB frames plus the derived median background."""

    frames: torch.Tensor  # (N, H, W, 3) in [0,1]
    background: torch.Tensor  # (H, W, 3)

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise ValueError("frames must have shape (N, H, W, 3)")
        if self.background.shape != self.frames.shape[1:]:
            raise ValueError("background dimensions must match the frames")

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])


def estimate_background(frames: torch.Tensor) -> torch.Tensor:
    """Per-pixel, per-channel median over frames (N, H, W, 3).

    For an even frame count the two middle values are averaged.
    """
    if frames.ndim != 4 or frames.shape[0] < 1:
        raise ValueError("need at least one frame of shape (N, H, W, 3)")
    return torch.quantile(frames, 0.5, dim=0, interpolation="linear")


def make_video(frames: torch.Tensor) -> VideoSequence:
    return VideoSequence(frames=frames, background=estimate_background(frames))


def render_window(
    mesh: TexturedMesh,
    motion: MotionModel,
    epsilon,
    n_frames: int,
    camera: Camera,
    background: torch.Tensor,
    subframes: int = DEFAULT_SUBFRAMES,
    softness: float = DEFAULT_SOFTNESS,
    with_color: bool = True,
    frame_indices: list[int] | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Render all frames of a window in one batched rasterization.

    Returns composited frames (N, H, W, 3) and the per-sub-frame
    silhouettes (N, S, H, W) used by the silhouette loss. With
    `with_color=False` the composites are meaningless (silhouettes only).
    """
    idx = frame_indices if frame_indices is not None else range(1, n_frames + 1)
    times = torch.cat(
        [sub_frame_times(n, n_frames, epsilon, subframes) for n in idx]
    )  # (N*S,)
    quats = eval_rotation(motion, times)
    trans = eval_translation(motion, times)
    app, sil = render_poses(mesh, quats, trans, camera, softness, with_color)
    nf = len(list(idx))
    h, w = camera.height, camera.width
    app = app.view(nf, subframes, h, w, 3)
    sil = sil.view(nf, subframes, h, w)
    composite = app + (1.0 - sil).unsqueeze(-1) * background
    return composite.mean(dim=1), sil


def render_frame(
    mesh: TexturedMesh,
    motion: MotionModel,
    epsilon,
    n: int,
    n_frames: int,
    camera: Camera,
    background: torch.Tensor,
    subframes: int = DEFAULT_SUBFRAMES,
    softness: float = DEFAULT_SOFTNESS,
) -> torch.Tensor:
    """Render one motion-blurred frame (the discretized formation model)."""
    frames, _ = render_window(
        mesh, motion, epsilon, n_frames, camera, background,
        subframes=subframes, softness=softness, frame_indices=[n],
    )
    return frames[0]


def render_sharp(
    mesh: TexturedMesh,
    motion: MotionModel,
    tau,
    camera: Camera,
    background: torch.Tensor,
    softness: float = DEFAULT_SOFTNESS,
) -> torch.Tensor:
    """Single-time composite (no motion blur) at times tau (B,)."""
    tau = torch.as_tensor(tau, dtype=mesh.dtype)
    if tau.ndim == 0:
        tau = tau.unsqueeze(0)
    quats = eval_rotation(motion, tau)
    trans = eval_translation(motion, tau)
    app, sil = render_poses(mesh, quats, trans, camera, softness)
    return app + (1.0 - sil).unsqueeze(-1) * background


def render_tsr(
    mesh: TexturedMesh,
    motion: MotionModel,
    epsilon,
    factor: int,
    n_frames: int,
    camera: Camera,
    background: torch.Tensor,
    softness: float = DEFAULT_SOFTNESS,
) -> torch.Tensor:
    """Temporal super-resolution: `factor` sharp frames per input frame.

    High-speed frames are rendered sharp, one time sample each, at the
    midpoints of `factor` equal sub-intervals of each open-shutter interval
    (mirroring high-speed ground truth that is free of motion blur).
    """
    if factor < 1:
        raise ValueError("factor must be >= 1")
    outputs = []
    for n in range(1, n_frames + 1):
        times = sub_frame_times(n, n_frames, epsilon, factor)
        outputs.append(
            render_sharp(mesh, motion, times, camera, background, softness)
        )
    return torch.cat(outputs, dim=0)  # (N*factor, H, W, 3)
