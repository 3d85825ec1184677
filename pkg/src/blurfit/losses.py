"""Loss terms driving the model fit and their weighted combination.

The total loss is  lambda_V * L_video + L_tv + L_silhouette + lambda_L *
L_laplacian;  the texture total-variation and silhouette terms carry fixed
unit weight. The video term is normalized per pixel and channel so the
weights are resolution independent.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

_EPS = 1e-12


@dataclass
class LossWeights:
    lambda_v: float = 1.0
    lambda_l: float = 1000.0

    def __post_init__(self):
        if self.lambda_v < 0 or self.lambda_l < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class LossComponents:
    video: torch.Tensor | float
    tv: torch.Tensor | float
    silhouette: torch.Tensor | float
    laplacian: torch.Tensor | float


def video_loss_per_frame(
    rendered: torch.Tensor, observed: torch.Tensor
) -> torch.Tensor:
    """Per-frame mean absolute pixel difference, shape (N,)."""
    if rendered.shape != observed.shape:
        raise ValueError(
            f"shape mismatch: rendered {tuple(rendered.shape)} vs "
            f"observed {tuple(observed.shape)}"
        )
    diff = (rendered - observed).abs()
    return diff.reshape(diff.shape[0], -1).mean(dim=1)


def video_loss(rendered: torch.Tensor, observed: torch.Tensor) -> torch.Tensor:
    """Mean over frames of the per-pixel-normalized L1 difference."""
    return video_loss_per_frame(rendered, observed).mean()


def soft_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Soft IoU of mask stacks over the trailing two dims: min / max sums.

    An empty union is defined as IoU 1 (both masks agree on emptiness).
    """
    inter = torch.minimum(a, b).sum(dim=(-2, -1))
    union = torch.maximum(a, b).sum(dim=(-2, -1))
    return torch.where(union > 0, inter / union.clamp_min(_EPS), torch.ones_like(union))


def silhouette_loss(
    masks: torch.Tensor, rendered_silhouettes: torch.Tensor
) -> torch.Tensor:
    """1 - mean soft IoU between mask track and rendered silhouettes.

    masks: (N, S, H, W); rendered_silhouettes: (N, S', H, W). If the track
    has a single mask per frame (S == 1, the background-subtraction
    fallback) the rendered silhouettes are time-averaged per frame before
    comparison.
    """
    if masks.ndim != 4 or rendered_silhouettes.ndim != 4:
        raise ValueError("expected (N, S, H, W) mask and silhouette stacks")
    if masks.shape[0] != rendered_silhouettes.shape[0]:
        raise ValueError("frame counts differ between masks and silhouettes")
    if masks.shape[2:] != rendered_silhouettes.shape[2:]:
        raise ValueError("mask dimensions do not match rendered silhouettes")
    if masks.shape[1] == 1 and rendered_silhouettes.shape[1] != 1:
        rendered_silhouettes = rendered_silhouettes.mean(dim=1, keepdim=True)
    elif masks.shape[1] != rendered_silhouettes.shape[1]:
        raise ValueError("sub-frame counts differ between masks and silhouettes")
    return 1.0 - soft_iou(masks, rendered_silhouettes).mean()


def tv_loss(texture: torch.Tensor) -> torch.Tensor:
    """Anisotropic total variation: mean absolute neighbor difference.

    Horizontal and vertical neighbor differences are pooled into a single
    mean over all neighbor pairs (and channels).
    """
    dh = (texture[:, 1:] - texture[:, :-1]).abs()
    dv = (texture[1:, :] - texture[:-1, :]).abs()
    return (dh.sum() + dv.sum()) / (dh.numel() + dv.numel())


def joint_loss(components: LossComponents, weights: LossWeights) -> torch.Tensor:
    """Weighted sum of the four loss terms; rejects non-finite components."""
    vals = [components.video, components.tv, components.silhouette,
            components.laplacian]
    for name, v in zip(("video", "tv", "silhouette", "laplacian"), vals):
        t = v.detach() if torch.is_tensor(v) else torch.tensor(float(v))
        if not bool(torch.isfinite(t)):
            raise FloatingPointError(f"non-finite {name} loss component")
    return (
        weights.lambda_v * components.video
        + components.tv
        + components.silhouette
        + weights.lambda_l * components.laplacian
    )
