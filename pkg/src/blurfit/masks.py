"""Per-sub-frame object masks for the silhouette loss.

Masks normally arrive from files produced by an upstream tool or by the
synthetic generator (grayscale PNGs named frame_{n}_sub_{s}.png,
1-indexed). When no external masks exist, a background-subtraction
fallback produces one motion-blurred mask per frame (an S=1 track), which
the silhouette loss compares against the time-averaged rendered
silhouette.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import torch

from . import imgio

MASK_PATTERN = "frame_%d_sub_%d.png"
_MASK_RE = re.compile(r"frame_(\d+)_sub_(\d+)\.png$")


@dataclass
class MaskTrack:
    masks: torch.Tensor  # (N, S, H, W) in [0,1]
    source: str  # external | background-subtraction | synthetic-ground-truth

    def __post_init__(self):
        if self.masks.ndim != 4:
            raise ValueError("mask track must have shape (N, S, H, W)")

    @property
    def n_frames(self) -> int:
        return int(self.masks.shape[0])

    @property
    def subframes(self) -> int:
        return int(self.masks.shape[1])


def save_mask_track(dir_path: str | Path, track: MaskTrack) -> None:
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    for n in range(track.n_frames):
        for s in range(track.subframes):
            imgio.save_gray(
                dir_path / (MASK_PATTERN % (n + 1, s + 1)), track.masks[n, s]
            )


def load_mask_track(
    path: str | Path, dtype: torch.dtype = torch.float64
) -> MaskTrack:
    """Load a complete frame_{n}_sub_{s}.png grid from a directory."""
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"mask directory not found: {path}")
    found: dict[tuple[int, int], Path] = {}
    for p in path.iterdir():
        m = _MASK_RE.match(p.name)
        if m:
            found[(int(m.group(1)), int(m.group(2)))] = p
    if not found:
        raise FileNotFoundError(f"no frame_*_sub_*.png files in {path}")
    n_frames = max(k[0] for k in found)
    subframes = max(k[1] for k in found)
    loaded: dict[tuple[int, int], torch.Tensor] = {}
    for n in range(1, n_frames + 1):
        for s in range(1, subframes + 1):
            p = found.get((n, s))
            if p is None:
                raise FileNotFoundError(
                    f"missing mask file: {path / (MASK_PATTERN % (n, s))}"
                )
            loaded[(n, s)] = imgio.load_gray(p, dtype=dtype)
    shapes = {tuple(m.shape) for m in loaded.values()}
    if len(shapes) != 1:
        raise ValueError(f"inconsistent mask dimensions in {path}: {shapes}")
    masks = torch.stack(
        [
            torch.stack([loaded[(n, s)] for s in range(1, subframes + 1)])
            for n in range(1, n_frames + 1)
        ]
    )
    return MaskTrack(masks=masks, source="external")


def background_subtraction_masks(
    frames: torch.Tensor, background: torch.Tensor, threshold: float = 0.05
) -> MaskTrack:
    """One blurred mask per frame from max-channel background differences.

    The per-pixel difference is passed through a smoothstep ramp from
    `threshold` to `2 * threshold`: differences at or below the threshold
    map to 0, twice the threshold saturates to 1.
    """
    diff = (frames - background).abs().amax(dim=-1)  # (N, H, W)
    t = ((diff - threshold) / max(threshold, 1e-12)).clamp(0.0, 1.0)
    masks = t * t * (3.0 - 2.0 * t)
    return MaskTrack(masks=masks.unsqueeze(1), source="background-subtraction")


def synchronize_direction(track: MaskTrack) -> MaskTrack:
    """Make the temporal direction of each frame's sub-masks consistent.

    The first frame is kept as-is. Each subsequent frame keeps or reverses
    its sub-frame sequence, choosing the orientation whose first mask is
    closest (L1) to the previous frame's last mask, greedily left to right.
    """
    if track.n_frames < 2 or track.subframes < 2:
        return MaskTrack(masks=track.masks.clone(), source=track.source)
    frames = [track.masks[0]]
    for n in range(1, track.n_frames):
        prev_last = frames[-1][-1]
        cur = track.masks[n]
        d_keep = (prev_last - cur[0]).abs().sum()
        d_rev = (prev_last - cur[-1]).abs().sum()
        frames.append(cur.flip(0) if d_rev < d_keep else cur)
    return MaskTrack(masks=torch.stack(frames), source=track.source)
