"""Continuous-time object motion over the video duration tau in [0, 1].

Translation and rotation are piecewise-quadratic curves with two pieces
joined at a learnable knot time t_b (the bounce). The second piece has no
constant term and is anchored at the first piece's value at t_b, so the
curve is C0-continuous by construction while the velocity may jump.
Rotation is a polynomial in raw quaternion space followed by normalization
(normalized-lerp style). The knot and the exposure gap are stored as
unconstrained scalars squashed into (0, 1) by the logistic function.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import torch

KNOT_INIT = 0.5
EPSILON_INIT = 0.1
_TAU_SLACK = 1e-9
_MIN_RAW_QUAT_NORM = 1e-8
# sigmoid underflows to exactly 0/1 in floating point; clamp keeps the knot
# and exposure gap strictly inside (0, 1) for any raw value
_UNIT_EPS = 1e-12


def logit(p: float) -> float:
    return math.log(p / (1.0 - p))


@dataclass
class MotionModel:
    """Two-piece quadratic 3D translation and raw-quaternion rotation."""

    trans_piece1: torch.Tensor  # (3, 3): rows a0, a1, a2
    trans_piece2: torch.Tensor  # (2, 3): rows b1, b2 (no constant term)
    rot_piece1: torch.Tensor  # (3, 4): rows p0, p1, p2
    rot_piece2: torch.Tensor  # (2, 4): rows r1, r2
    knot_raw: torch.Tensor  # scalar, t_b = sigmoid(knot_raw)

    @property
    def knot_time(self) -> torch.Tensor:
        return torch.sigmoid(self.knot_raw).clamp(_UNIT_EPS, 1.0 - _UNIT_EPS)

    @property
    def dtype(self) -> torch.dtype:
        return self.trans_piece1.dtype

    def parameters(self) -> dict[str, torch.Tensor]:
        return {
            "trans_piece1": self.trans_piece1,
            "trans_piece2": self.trans_piece2,
            "rot_piece1": self.rot_piece1,
            "rot_piece2": self.rot_piece2,
            "knot_raw": self.knot_raw,
        }

    def detached(self) -> "MotionModel":
        return MotionModel(
            *(t.detach().clone() for t in (
                self.trans_piece1, self.trans_piece2,
                self.rot_piece1, self.rot_piece2, self.knot_raw,
            ))
        )

    def to(self, dtype: torch.dtype) -> "MotionModel":
        return MotionModel(
            self.trans_piece1.to(dtype), self.trans_piece2.to(dtype),
            self.rot_piece1.to(dtype), self.rot_piece2.to(dtype),
            self.knot_raw.to(dtype),
        )


@dataclass
class ExposureGap:
    """Fraction of a frame cycle with the shutter closed, in (0, 1)."""

    gap_raw: torch.Tensor  # scalar, epsilon = sigmoid(gap_raw)

    @property
    def epsilon(self) -> torch.Tensor:
        return torch.sigmoid(self.gap_raw).clamp(_UNIT_EPS, 1.0 - _UNIT_EPS)

    def detached(self) -> "ExposureGap":
        return ExposureGap(self.gap_raw.detach().clone())

    def to(self, dtype: torch.dtype) -> "ExposureGap":
        return ExposureGap(self.gap_raw.to(dtype))


def make_exposure_gap(
    epsilon: float = EPSILON_INIT, dtype: torch.dtype = torch.float64
) -> ExposureGap:
    return ExposureGap(torch.tensor(logit(epsilon), dtype=dtype))


def _check_tau(tau: torch.Tensor) -> None:
    t = tau.detach()
    if torch.any(t < -_TAU_SLACK) or torch.any(t > 1.0 + _TAU_SLACK):
        raise ValueError("tau outside [0, 1]")


def _piecewise(
    piece1: torch.Tensor, piece2: torch.Tensor, knot: torch.Tensor, tau: torch.Tensor
) -> torch.Tensor:
    """Evaluate the two-piece polynomial at tau (...,) -> (..., D)."""
    t = tau.unsqueeze(-1)
    c0, c1, c2 = piece1[0], piece1[1], piece1[2]
    first = c0 + c1 * t + c2 * t * t
    anchor = c0 + c1 * knot + c2 * knot * knot
    u = t - knot
    second = anchor + piece2[0] * u + piece2[1] * u * u
    return torch.where(t <= knot, first, second)


def eval_translation(motion: MotionModel, tau) -> torch.Tensor:
    """Translation curve T(tau); tau may be a scalar or a tensor."""
    tau = torch.as_tensor(tau, dtype=motion.dtype)
    _check_tau(tau)
    return _piecewise(motion.trans_piece1, motion.trans_piece2, motion.knot_time, tau)


def eval_rotation(motion: MotionModel, tau) -> torch.Tensor:
    """Unit rotation quaternion Q(tau); raw curve evaluated then normalized."""
    tau = torch.as_tensor(tau, dtype=motion.dtype)
    _check_tau(tau)
    raw = _piecewise(motion.rot_piece1, motion.rot_piece2, motion.knot_time, tau)
    norm = raw.norm(dim=-1, keepdim=True)
    if torch.any(norm < _MIN_RAW_QUAT_NORM):
        raise ValueError("degenerate rotation curve: raw quaternion norm ~ 0")
    return raw / norm


def sub_frame_times(n: int, n_frames: int, epsilon, s: int) -> torch.Tensor:
    """Midpoints of S equal pieces of frame n's open-shutter interval.

    The shutter opens at (n-1)/N and closes at (n-epsilon)/N. `epsilon` may
    be a tensor so gradients flow into the integration bounds.
    """
    if not 1 <= n <= n_frames:
        raise ValueError(f"frame index {n} outside 1..{n_frames}")
    if s < 1:
        raise ValueError("need at least one sub-frame")
    eps = (epsilon if torch.is_tensor(epsilon)
           else torch.tensor(float(epsilon), dtype=torch.float64))
    if not 0.0 < float(eps.detach()) < 1.0:
        raise ValueError("epsilon must lie strictly inside (0, 1)")
    start = (n - 1) / n_frames
    length = (1.0 - eps) / n_frames
    mid = (torch.arange(s, dtype=eps.dtype) + 0.5) / s
    return start + mid * length


def shutter_interval(n: int, n_frames: int, epsilon) -> tuple[float, float]:
    eps = float(epsilon if not torch.is_tensor(epsilon) else epsilon.detach())
    return (n - 1) / n_frames, (n - eps) / n_frames


def init_motion(
    camera,
    dtype: torch.dtype = torch.float64,
    noise: float = 0.0,
    generator: torch.Generator | None = None,
) -> MotionModel:
    """Static motion placing the object at the image center.

    The constant translation term puts the canonical mesh center on the
    optical axis at the camera's initial depth, so it projects exactly to
    the principal point. Optional seeded noise on the non-constant
    coefficients breaks symmetry for optimization.
    """
    trans1 = torch.zeros(3, 3, dtype=dtype)
    trans1[0] = torch.tensor([0.0, 0.0, camera.init_depth], dtype=dtype)
    trans2 = torch.zeros(2, 3, dtype=dtype)
    rot1 = torch.zeros(3, 4, dtype=dtype)
    rot1[0, 0] = 1.0
    rot2 = torch.zeros(2, 4, dtype=dtype)
    if noise > 0.0:
        gen = generator
        trans1[1:] += noise * torch.randn(2, 3, dtype=dtype, generator=gen)
        trans2 += noise * torch.randn(2, 3, dtype=dtype, generator=gen)
        rot1[1:] += noise * torch.randn(2, 4, dtype=dtype, generator=gen)
        rot2 += noise * torch.randn(2, 4, dtype=dtype, generator=gen)
    return MotionModel(
        trans_piece1=trans1,
        trans_piece2=trans2,
        rot_piece1=rot1,
        rot_piece2=rot2,
        knot_raw=torch.tensor(logit(KNOT_INIT), dtype=dtype),
    )


# --------------------------------------------------------------------------
# JSON round trip


def motion_to_dict(
    motion: MotionModel, exposure: ExposureGap, n_frames: int
) -> dict:
    return {
        "trans_piece1": motion.trans_piece1.detach().tolist(),
        "trans_piece2": motion.trans_piece2.detach().tolist(),
        "rot_piece1": motion.rot_piece1.detach().tolist(),
        "rot_piece2": motion.rot_piece2.detach().tolist(),
        "knot_raw": float(motion.knot_raw.detach()),
        "t_b": float(motion.knot_time.detach()),
        "gap_raw": float(exposure.gap_raw.detach()),
        "epsilon": float(exposure.epsilon.detach()),
        "n_frames": int(n_frames),
    }


def motion_from_dict(
    doc: dict, dtype: torch.dtype = torch.float64
) -> tuple[MotionModel, ExposureGap, int]:
    motion = MotionModel(
        trans_piece1=torch.tensor(doc["trans_piece1"], dtype=dtype),
        trans_piece2=torch.tensor(doc["trans_piece2"], dtype=dtype),
        rot_piece1=torch.tensor(doc["rot_piece1"], dtype=dtype),
        rot_piece2=torch.tensor(doc["rot_piece2"], dtype=dtype),
        knot_raw=torch.tensor(doc["knot_raw"], dtype=dtype),
    )
    exposure = ExposureGap(torch.tensor(doc["gap_raw"], dtype=dtype))
    return motion, exposure, int(doc["n_frames"])


def save_motion(
    path: str | Path, motion: MotionModel, exposure: ExposureGap, n_frames: int
) -> None:
    doc = motion_to_dict(motion, exposure, n_frames)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_motion(
    path: str | Path, dtype: torch.dtype = torch.float64
) -> tuple[MotionModel, ExposureGap, int]:
    return motion_from_dict(json.loads(Path(path).read_text()), dtype=dtype)
