"""Evaluation metrics and the synthetic ground-truth scene generator.

Image metrics (PSNR, SSIM) compare reconstructed high-speed frames against
ground truth; TIoU compares object placements along the trajectory; the 3D
errors compare translation offsets, rotation changes, and posed meshes.
Object size is the diameter of the centroid-centered bounding sphere of the
ground-truth mesh.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .formation import (
    DEFAULT_SUBFRAMES,
    VideoSequence,
    render_tsr,
    render_window,
)
from .geometry import (
    Prototype,
    TexturedMesh,
    Pose,
    apply_pose,
    make_prototype,
    quat_conjugate,
    quat_multiply,
    quat_normalize,
)
from .masks import MaskTrack
from .motion import (
    ExposureGap,
    MotionModel,
    eval_rotation,
    eval_translation,
    logit,
    sub_frame_times,
)
from .renderer import Camera, DEFAULT_SOFTNESS, default_camera, render_poses

PSNR_CAP_DB = 99.0


# --------------------------------------------------------------------------
# image metrics


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1] (MAX = 1).

    Identical images report the 99 dB cap instead of infinity.
    """
    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    if a.shape != b.shape:
        raise ValueError("psnr: image dimensions differ")
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP_DB)


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    r = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-(r**2) / (2 * sigma * sigma))
    k = g.outer(g)
    return k / k.sum()


def ssim(a: torch.Tensor, b: torch.Tensor) -> float:
    """Structural similarity with the standard 11x11 Gaussian window
    (sigma 1.5, K1 0.01, K2 0.03, dynamic range 1), averaged per channel.

    The local-statistics maps use valid-mode convolution, so images must be
    at least 11 pixels on each side.
    """
    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    if a.shape != b.shape:
        raise ValueError("ssim: image dimensions differ")
    if a.ndim == 2:
        a = a.unsqueeze(-1)
        b = b.unsqueeze(-1)
    h, w, c = a.shape
    if min(h, w) < 11:
        raise ValueError("ssim: image smaller than the 11x11 window")
    kern = _gaussian_kernel().expand(c, 1, 11, 11)
    x = a.permute(2, 0, 1).unsqueeze(0)
    y = b.permute(2, 0, 1).unsqueeze(0)
    mu_x = F.conv2d(x, kern, groups=c)
    mu_y = F.conv2d(y, kern, groups=c)
    xx = F.conv2d(x * x, kern, groups=c) - mu_x * mu_x
    yy = F.conv2d(y * y, kern, groups=c) - mu_y * mu_y
    xy = F.conv2d(x * y, kern, groups=c) - mu_x * mu_y
    c1 = 0.01**2
    c2 = 0.03**2
    num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (xx + yy + c2)
    return float((num / den).mean())


# --------------------------------------------------------------------------
# trajectory / 3D metrics


def silhouette_centroid(sil: torch.Tensor) -> torch.Tensor:
    """Center of mass (x, y) of a silhouette image in pixel coordinates."""
    total = sil.sum()
    if float(total) <= 0:
        return torch.tensor(
            [(sil.shape[1] - 1) / 2.0, (sil.shape[0] - 1) / 2.0],
            dtype=sil.dtype,
        )
    ys = torch.arange(sil.shape[0], dtype=sil.dtype)
    xs = torch.arange(sil.shape[1], dtype=sil.dtype)
    cy = (sil.sum(dim=1) * ys).sum() / total
    cx = (sil.sum(dim=0) * xs).sum() / total
    return torch.stack([cx, cy])


def _shift_mask(mask: torch.Tensor, dy: int, dx: int) -> torch.Tensor:
    out = torch.zeros_like(mask)
    h, w = mask.shape
    ys0, ys1 = max(0, dy), min(h, h + dy)
    xs0, xs1 = max(0, dx), min(w, w + dx)
    if ys0 >= ys1 or xs0 >= xs1:
        return out
    out[ys0:ys1, xs0:xs1] = mask[ys0 - dy : ys1 - dy, xs0 - dx : xs1 - dx]
    return out


def tiou(
    gt_mask: torch.Tensor,
    gt_locations: list | torch.Tensor,
    pred_locations: list | torch.Tensor,
) -> float:
    """Trajectory IoU: the ground-truth mask placed at the ground-truth
    locations versus the same mask at the predicted locations, averaged.

    Placements use integer pixel shifts of the offset between predicted and
    ground-truth location.
    """
    gt_locations = torch.as_tensor(gt_locations, dtype=torch.float64)
    pred_locations = torch.as_tensor(pred_locations, dtype=torch.float64)
    if gt_locations.shape != pred_locations.shape:
        raise ValueError("tiou: location lists differ in length")
    if gt_locations.ndim == 1:
        gt_locations = gt_locations.unsqueeze(0)
        pred_locations = pred_locations.unsqueeze(0)
    vals = []
    mask = torch.as_tensor(gt_mask, dtype=torch.float64)
    for gt_loc, pr_loc in zip(gt_locations, pred_locations):
        off = pr_loc - gt_loc
        dx, dy = int(torch.round(off[0])), int(torch.round(off[1]))
        shifted = _shift_mask(mask, dy, dx)
        inter = torch.minimum(mask, shifted).sum()
        union = torch.maximum(mask, shifted).sum()
        vals.append(float(inter / union) if float(union) > 0 else 1.0)
    return float(np.mean(vals))


def object_size(vertices: torch.Tensor) -> float:
    """Bounding-sphere diameter: twice the max distance to the centroid."""
    c = vertices.mean(dim=0)
    return float(2.0 * (vertices - c).norm(dim=1).max())


def mesh_error(
    gt_mesh: TexturedMesh,
    gt_pose: Pose,
    pred_mesh: TexturedMesh,
    pred_pose: Pose,
) -> float:
    """Symmetric nearest-vertex chamfer distance between the two posed
    meshes, as a fraction of the ground-truth object size."""
    a = apply_pose(gt_mesh, gt_pose).detach()
    b = apply_pose(pred_mesh, pred_pose).detach()
    if a.numel() == 0 or b.numel() == 0:
        raise ValueError("mesh_error: empty mesh")
    d = torch.cdist(a, b, compute_mode="donot_use_mm_for_euclid_dist")
    chamfer = 0.5 * (d.min(dim=1).values.mean() + d.min(dim=0).values.mean())
    return float(chamfer) / object_size(a)


def pose_at(motion: MotionModel, tau: float) -> Pose:
    return Pose(
        rotation=eval_rotation(motion, torch.tensor(tau, dtype=motion.dtype)),
        translation=eval_translation(motion, torch.tensor(tau, dtype=motion.dtype)),
    )


def translation_error(
    gt_motion: MotionModel, pred_motion: MotionModel, size: float
) -> float:
    """Norm of the difference between predicted and ground-truth translation
    offsets T(1) - T(0), as a fraction of object size."""
    gt_off = eval_translation(gt_motion, 1.0) - eval_translation(gt_motion, 0.0)
    pr_off = eval_translation(pred_motion, 1.0) - eval_translation(pred_motion, 0.0)
    return float((pr_off - gt_off).norm()) / size


def rotation_error(gt_motion: MotionModel, pred_motion: MotionModel) -> float:
    """Geodesic angle in degrees between the rotation changes Q(0)->Q(1)."""
    def change(m: MotionModel) -> torch.Tensor:
        q0 = eval_rotation(m, 0.0)
        q1 = eval_rotation(m, 1.0)
        return quat_multiply(q1, quat_conjugate(q0))

    rel = quat_multiply(change(pred_motion), quat_conjugate(change(gt_motion)))
    dot = rel[..., 0].abs().clamp(max=1.0)
    return float(torch.rad2deg(2.0 * torch.acos(dot)))


# --------------------------------------------------------------------------
# synthetic scenes


@dataclass
class SyntheticScene:
    mesh: TexturedMesh
    motion: MotionModel
    exposure: ExposureGap
    camera: Camera
    background: torch.Tensor  # true clean plate (H, W, 3)
    frames: torch.Tensor  # (N, H, W, 3) rendered by the formation model
    mask_track: MaskTrack  # (N, S, H, W) ground-truth silhouettes
    highspeed: torch.Tensor  # (N * factor, H, W, 3) sharp frames
    seed: int
    rotation_cap: float
    prototype: Prototype
    size: float
    bounce: bool
    knot_time: float

    @property
    def epsilon(self) -> float:
        return float(self.exposure.epsilon)

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])

    def video(self) -> VideoSequence:
        """Video with the median-estimated background, as fitting sees it."""
        from .formation import make_video

        return make_video(self.frames)


def _smooth_field(
    rng: np.random.Generator, size: tuple[int, int], cells: int,
    lo: float, hi: float,
) -> torch.Tensor:
    base = rng.uniform(lo, hi, size=(cells, cells, 3))
    t = torch.from_numpy(base).permute(2, 0, 1).unsqueeze(0)
    up = F.interpolate(t, size=size, mode="bilinear", align_corners=True)
    return up[0].permute(1, 2, 0).contiguous()


def _random_quat(rng: np.random.Generator) -> torch.Tensor:
    q = torch.from_numpy(rng.normal(size=4))
    q = quat_normalize(q)
    return q if float(q[0]) >= 0 else -q


def _in_view(
    trans: torch.Tensor, camera: Camera, radius: float, margin: float = 0.12
) -> bool:
    z = float(trans[2])
    if not 3.0 < z < 18.0:
        return False
    u = camera.focal * float(trans[0]) / z + camera.cx
    v = camera.focal * float(trans[1]) / z + camera.cy
    pr = camera.focal * radius / z
    if pr < 0.03 * camera.width:
        return False
    return (
        margin * camera.width < u < (1 - margin) * camera.width
        and margin * camera.height < v < (1 - margin) * camera.height
    )


def synth_generate(
    seed: int,
    rotation_cap: float = 30.0,
    n_frames: int = 3,
    width: int = 128,
    subframes: int = DEFAULT_SUBFRAMES,
    texture_size: int = 256,
    highspeed_factor: int = 8,
    bounce: bool = False,
    prototype: Prototype | None = None,
    softness: float = DEFAULT_SOFTNESS,
) -> SyntheticScene:
    """Random prototype with procedural texture, linear (or one-bounce)
    trajectory of 1-5 object sizes, rotation up to the cap, random exposure
    gap, static smooth background; rendered by the formation model."""
    rng = np.random.default_rng(seed)
    camera = default_camera(width)

    proto = prototype or [
        Prototype.SPHERE_LOW, Prototype.SPHERE_HIGH, Prototype.TORUS
    ][rng.integers(0, 3)]
    mesh = make_prototype(proto, texture_size=texture_size)
    # Two octaves: a coarse color field plus finer contrast. The detail
    # octave is what makes rotation observable; near-uniform textures leave
    # the rotation component of the fit unconstrained.
    coarse = _smooth_field(
        rng, (texture_size, texture_size), int(rng.integers(4, 9)), 0.1, 0.9
    )
    fine = _smooth_field(
        rng, (texture_size, texture_size), int(rng.integers(12, 21)),
        -0.3, 0.3,
    )
    mesh.texture = (coarse + fine).clamp(0.05, 0.95)
    size = object_size(mesh.vertices)

    background = _smooth_field(rng, (width, width), 8, 0.05, 0.95)

    # Trajectory: rejection-sample a start point and direction that keep the
    # object visible over the whole duration.
    magnitude = float(rng.uniform(1.0, 5.0)) * size
    radius = size / 2.0
    knot_time = float(rng.uniform(0.3, 0.7)) if bounce else 0.5
    for attempt in range(1000):
        z0 = float(rng.uniform(5.0, 7.0))
        u0 = rng.uniform(0.3, 0.7, size=2)
        start = torch.tensor(
            [
                (u0[0] * width - camera.cx) * z0 / camera.focal,
                (u0[1] * width - camera.cy) * z0 / camera.focal,
                z0,
            ],
            dtype=torch.float64,
        )
        direction = torch.from_numpy(rng.normal(size=3))
        if attempt > 500:  # fall back toward depth-dominant motion
            direction[2] = direction[2] * 5.0
        direction = direction / direction.norm()
        velocity = magnitude * direction
        if bounce:
            # Reflect the dominant image-plane velocity component.
            axis = int(torch.argmax(velocity[:2].abs()))
            out_vel = velocity.clone()
            out_vel[axis] = -out_vel[axis]
        else:
            out_vel = velocity
        break_ok = True
        for tau in np.linspace(0.0, 1.0, 9):
            if tau <= knot_time:
                pos = start + velocity * tau
            else:
                pos = (
                    start + velocity * knot_time + out_vel * (tau - knot_time)
                )
            if not _in_view(pos, camera, radius):
                break_ok = False
                break
        if break_ok:
            break
    else:
        raise RuntimeError(f"could not place trajectory for seed {seed}")

    trans1 = torch.zeros(3, 3, dtype=torch.float64)
    trans1[0] = start
    trans1[1] = velocity
    trans2 = torch.zeros(2, 3, dtype=torch.float64)
    trans2[0] = out_vel

    q0 = _random_quat(rng)
    angle = math.radians(float(rng.uniform(0.0, rotation_cap)))
    axis = torch.from_numpy(rng.normal(size=3))
    axis = axis / axis.norm()
    half = angle / 2.0
    dq = torch.cat(
        [torch.tensor([math.cos(half)], dtype=torch.float64),
         math.sin(half) * axis]
    )
    q1 = quat_multiply(dq, q0)
    if float((q0 * q1).sum()) < 0:
        q1 = -q1
    rot1 = torch.zeros(3, 4, dtype=torch.float64)
    rot1[0] = q0
    rot1[1] = q1 - q0
    # The raw-quaternion velocity continues across the knot: rotation stays
    # one linear curve end to end, only the translation may bounce.
    rot2 = torch.zeros(2, 4, dtype=torch.float64)
    rot2[0] = rot1[1]

    motion = MotionModel(
        trans_piece1=trans1,
        trans_piece2=trans2,
        rot_piece1=rot1,
        rot_piece2=rot2,
        knot_raw=torch.tensor(logit(knot_time), dtype=torch.float64),
    )
    epsilon = float(rng.uniform(0.05, 0.5))
    exposure = ExposureGap(torch.tensor(logit(epsilon), dtype=torch.float64))

    with torch.no_grad():
        frames, sil = render_window(
            mesh, motion, exposure.epsilon, n_frames, camera, background,
            subframes=subframes, softness=softness,
        )
        highspeed = render_tsr(
            mesh, motion, exposure.epsilon, highspeed_factor, n_frames,
            camera, background, softness=softness,
        )
    track = MaskTrack(masks=sil, source="synthetic-ground-truth")
    return SyntheticScene(
        mesh=mesh,
        motion=motion,
        exposure=exposure,
        camera=camera,
        background=background,
        frames=frames,
        mask_track=track,
        highspeed=highspeed,
        seed=seed,
        rotation_cap=rotation_cap,
        prototype=proto,
        size=size,
        bounce=bounce,
        knot_time=knot_time,
    )


# --------------------------------------------------------------------------
# scene-level evaluation


def predicted_locations(
    mesh: TexturedMesh,
    motion: MotionModel,
    times: torch.Tensor,
    camera: Camera,
    softness: float = DEFAULT_SOFTNESS,
) -> torch.Tensor:
    """Projected-silhouette centroids of the model at the given times."""
    with torch.no_grad():
        quats = eval_rotation(motion, times)
        trans = eval_translation(motion, times)
        _, sil = render_poses(
            mesh, quats, trans, camera, softness, with_color=False
        )
    return torch.stack([silhouette_centroid(s) for s in sil])


def evaluate_against_scene(
    scene: SyntheticScene,
    mesh: TexturedMesh,
    motion: MotionModel,
    exposure: ExposureGap,
    tsr_frames: torch.Tensor | None = None,
) -> dict:
    """All metrics of a fitted model against its ground-truth scene."""
    gt_motion = scene.motion
    size = scene.size
    metrics = {
        "translation_error": translation_error(gt_motion, motion, size),
        "rotation_error_deg": rotation_error(gt_motion, motion),
        "mesh_error": mesh_error(
            scene.mesh, pose_at(gt_motion, 0.0), mesh, pose_at(motion, 0.0)
        ),
        "epsilon_error": abs(float(exposure.epsilon) - scene.epsilon),
        "knot_error": abs(float(torch.sigmoid(motion.knot_raw)) - scene.knot_time),
    }

    n, s = scene.mask_track.n_frames, scene.mask_track.subframes
    times = torch.cat(
        [
            sub_frame_times(i, n, scene.exposure.epsilon, s)
            for i in range(1, n + 1)
        ]
    ).detach()
    pred_locs = predicted_locations(mesh, motion, times, scene.camera)
    gt_masks = scene.mask_track.masks.reshape(n * s, *scene.mask_track.masks.shape[2:])
    gt_locs = torch.stack([silhouette_centroid(m) for m in gt_masks])
    vals = [
        tiou(gt_masks[i], gt_locs[i : i + 1], pred_locs[i : i + 1])
        for i in range(n * s)
    ]
    metrics["tiou"] = float(np.mean(vals))

    if tsr_frames is not None:
        if tsr_frames.shape[0] != scene.highspeed.shape[0]:
            raise ValueError("TSR frame count does not match ground truth")
        metrics["tsr_psnr"] = [
            psnr(tsr_frames[i], scene.highspeed[i])
            for i in range(tsr_frames.shape[0])
        ]
        metrics["tsr_ssim"] = [
            ssim(tsr_frames[i], scene.highspeed[i])
            for i in range(tsr_frames.shape[0])
        ]
    return metrics
