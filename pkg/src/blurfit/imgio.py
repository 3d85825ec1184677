"""PNG image I/O helpers shared across modules.

Images are exchanged as torch tensors of linear floats in [0, 1]:
(H, W, 3) for color, (H, W) for grayscale. PNG bytes are treated as linear
values scaled by the bit depth; export quantizes to 8-bit.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np
import torch
from PIL import Image

FRAME_PATTERN = "frame_%04d.png"
_FRAME_RE = re.compile(r"frame_(\d+)\.png$")


def load_image(path: str | Path, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    img = Image.open(path).convert("RGB")
    arr = np.asarray(img, dtype=np.float64) / 255.0
    return torch.from_numpy(arr).to(dtype)


def save_image(path: str | Path, image: torch.Tensor) -> None:
    arr = image.detach().clamp(0.0, 1.0).cpu().numpy()
    data = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(Path(path))


def load_gray(path: str | Path, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """Load a grayscale PNG; 16-bit files are scaled by 1/65535."""
    img = Image.open(path)
    if img.mode in ("I", "I;16", "I;16B"):
        arr = np.asarray(img, dtype=np.float64) / 65535.0
    else:
        arr = np.asarray(img.convert("L"), dtype=np.float64) / 255.0
    return torch.from_numpy(arr).to(dtype)


def save_gray(path: str | Path, image: torch.Tensor) -> None:
    arr = image.detach().clamp(0.0, 1.0).cpu().numpy()
    data = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="L").save(Path(path))


def save_frames(dir_path: str | Path, frames: torch.Tensor) -> list[Path]:
    """Write frames (N, H, W, 3) as frame_0001.png ... under `dir_path`."""
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(frames.shape[0]):
        p = dir_path / (FRAME_PATTERN % (i + 1))
        save_image(p, frames[i])
        paths.append(p)
    return paths


def load_frames(dir_path: str | Path, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """Read a numbered frame directory into a (N, H, W, 3) tensor."""
    dir_path = Path(dir_path)
    if not dir_path.is_dir():
        raise FileNotFoundError(f"frames directory not found: {dir_path}")
    entries = []
    for p in dir_path.iterdir():
        m = _FRAME_RE.match(p.name)
        if m:
            entries.append((int(m.group(1)), p))
    if not entries:
        raise FileNotFoundError(f"no frame_*.png files in {dir_path}")
    entries.sort()
    frames = [load_image(p, dtype=dtype) for _, p in entries]
    shapes = {tuple(f.shape) for f in frames}
    if len(shapes) != 1:
        raise ValueError(f"inconsistent frame dimensions in {dir_path}: {shapes}")
    return torch.stack(frames, dim=0)
