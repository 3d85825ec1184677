"""Analysis-by-synthesis optimization of mesh, motion, and exposure gap.

Fitting runs in two phases with ADAM (lr 0.1): a silhouette-only
pre-optimization (video weight zero, texture frozen, at most 100 iterations,
stopping early once the silhouette loss drops below 0.3) followed by the
main phase on the full loss over all parameters. The mesh is renormalized
to canonical space and the texture clamped to [0, 1] after every step.

Prototype selection runs the optimization per prototype and keeps the one
with the lowest final video reconstruction loss. Longer videos are fitted
with a sliding window; each frame then picks the covering window whose
video loss restricted to that frame is lowest.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import torch
import torch.nn.functional as F

from . import geometry, imgio, motion as motion_mod
from .formation import VideoSequence, make_video, render_window
from .geometry import Prototype, TexturedMesh, canonicalize_, laplacian_loss
from .losses import (
    LossComponents,
    LossWeights,
    joint_loss,
    silhouette_loss,
    tv_loss,
    video_loss_per_frame,
)
from .masks import MaskTrack
from .motion import ExposureGap, MotionModel, init_motion, make_exposure_gap
from .renderer import Camera, DEFAULT_SOFTNESS

log = logging.getLogger(__name__)

ALL_PROTOTYPES = (Prototype.SPHERE_LOW, Prototype.SPHERE_HIGH, Prototype.TORUS)


class FitDivergenceError(RuntimeError):
    """Optimization produced a non-finite loss or an invalid configuration."""

    def __init__(self, iteration: int, message: str):
        super().__init__(f"diverged at iteration {iteration}: {message}")
        self.iteration = iteration


@dataclass
class FitConfig:
    learning_rate: float = 0.1
    preopt_iters: int = 100
    preopt_threshold: float = 0.3
    main_iters: int = 1000
    lambda_v: float = 1.0
    lambda_l: float = 1000.0
    subframes: int = 8
    window: int = 3
    softness: float = DEFAULT_SOFTNESS
    seed: int = 0
    texture_size: int = 256
    fit_width: int | None = 128  # inputs downscaled to this width for fitting
    prototypes: tuple[Prototype, ...] = ALL_PROTOTYPES
    screen_iters: int | None = None  # short main-phase budget for screening
    screen_width: int | None = None  # screening fit resolution (default: fit_width)
    init_noise: float = 1e-3
    dtype: str = "float64"
    log_every: int = 100

    def __post_init__(self):
        if min(self.learning_rate, self.preopt_iters, self.main_iters,
               self.subframes, self.window) <= 0:
            raise ValueError("config values must be positive")
        if not 0.0 < self.preopt_threshold < 1.0:
            raise ValueError("preopt_threshold must lie in (0, 1)")

    @property
    def torch_dtype(self) -> torch.dtype:
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]


@dataclass
class AdamState:
    step: int
    m: list[torch.Tensor]
    v: list[torch.Tensor]


def adam_step(
    params: Sequence[torch.Tensor],
    grads: Sequence[torch.Tensor],
    state: AdamState | None,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> tuple[list[torch.Tensor], AdamState]:
    """One bias-corrected ADAM update; pure (returns new tensors)."""
    params = list(params)
    grads = list(grads)
    if len(params) != len(grads):
        raise ValueError("params and grads must align")
    for g in grads:
        if not bool(torch.isfinite(g).all()):
            raise FloatingPointError("non-finite gradient in ADAM step")
    if state is None:
        state = AdamState(
            step=0,
            m=[torch.zeros_like(p) for p in params],
            v=[torch.zeros_like(p) for p in params],
        )
    t = state.step + 1
    b1, b2 = betas
    new_m = [b1 * m + (1 - b1) * g for m, g in zip(state.m, grads)]
    new_v = [b2 * v + (1 - b2) * g * g for v, g in zip(state.v, grads)]
    bc1 = 1 - b1**t
    bc2 = 1 - b2**t
    new_p = [
        p - lr * (m / bc1) / ((v / bc2).sqrt() + eps)
        for p, m, v in zip(params, new_m, new_v)
    ]
    return new_p, AdamState(step=t, m=new_m, v=new_v)


class Adam:
    """In-place ADAM over leaf tensors, reading .grad like torch optimizers."""

    def __init__(self, params: Sequence[torch.Tensor], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state: AdamState | None = None

    def step(self) -> None:
        grads = [
            p.grad if p.grad is not None else torch.zeros_like(p)
            for p in self.params
        ]
        new_p, self.state = adam_step(
            self.params, grads, self.state, self.lr, self.betas, self.eps
        )
        with torch.no_grad():
            for p, np_ in zip(self.params, new_p):
                p.copy_(np_)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass
class Scene:
    """Fit state: everything the formation model needs to render."""

    mesh: TexturedMesh
    motion: MotionModel
    exposure: ExposureGap
    camera: Camera

    def parameters(self) -> dict[str, torch.Tensor]:
        out = {"vertex_offsets": self.mesh.vertex_offsets,
               "texture": self.mesh.texture}
        out.update(self.motion.parameters())
        out["gap_raw"] = self.exposure.gap_raw
        return out


@dataclass
class HistoryRow:
    iteration: int
    phase: str  # "pre" | "main"
    total: float
    video: float  # nan during pre-optimization
    tv: float
    silhouette: float
    laplacian: float


@dataclass
class FitResult:
    mesh: TexturedMesh
    motion: MotionModel
    exposure: ExposureGap
    prototype: Prototype
    history: list[HistoryRow]
    per_frame_video_loss: list[float]
    final_video_loss: float
    preopt_iterations: int
    camera: Camera

    @property
    def epsilon(self) -> float:
        return float(self.exposure.epsilon.detach())

    @property
    def knot_time(self) -> float:
        return float(self.motion.knot_time.detach())


def init_scene(
    prototype: Prototype, camera: Camera, config: FitConfig
) -> Scene:
    """Prototype mesh at the image center, white texture, epsilon 0.1."""
    dtype = config.torch_dtype
    gen = torch.Generator().manual_seed(config.seed)
    mesh = geometry.make_prototype(prototype, config.texture_size, dtype)
    mot = init_motion(camera, dtype=dtype, noise=config.init_noise, generator=gen)
    exposure = make_exposure_gap(dtype=dtype)
    mesh.vertex_offsets.requires_grad_(True)
    mesh.texture.requires_grad_(True)
    for t in mot.parameters().values():
        t.requires_grad_(True)
    exposure.gap_raw.requires_grad_(True)
    return Scene(mesh=mesh, motion=mot, exposure=exposure, camera=camera)


def scene_losses(
    scene: Scene,
    video: VideoSequence,
    track: MaskTrack,
    config: FitConfig,
    with_video: bool = True,
) -> tuple[LossComponents, torch.Tensor | None]:
    """Joint-loss components for the current scene; one rasterization batch.

    Returns the components plus per-frame video losses (None when the video
    term is skipped, as in pre-optimization).
    """
    frames, sil = render_window(
        scene.mesh,
        scene.motion,
        scene.exposure.epsilon,
        video.n_frames,
        scene.camera,
        video.background,
        subframes=config.subframes,
        softness=config.softness,
        with_color=with_video,
    )
    per_frame = None
    vid = 0.0
    if with_video:
        per_frame = video_loss_per_frame(frames, video.frames)
        vid = per_frame.mean()
    comps = LossComponents(
        video=vid,
        tv=tv_loss(scene.mesh.texture),
        silhouette=silhouette_loss(track.masks, sil),
        laplacian=laplacian_loss(scene.mesh),
    )
    return comps, per_frame


def _post_step(scene: Scene) -> None:
    with torch.no_grad():
        scene.mesh.texture.clamp_(0.0, 1.0)
    canonicalize_(scene.mesh.vertex_offsets, scene.mesh.base_vertices)


def preoptimize(
    scene: Scene, video: VideoSequence, track: MaskTrack, config: FitConfig
) -> list[HistoryRow]:
    """Silhouette-only phase: video weight zero, texture frozen."""
    params = [p for k, p in scene.parameters().items() if k != "texture"]
    opt = Adam(params, lr=config.learning_rate)
    weights = LossWeights(lambda_v=0.0, lambda_l=config.lambda_l)
    history: list[HistoryRow] = []
    for it in range(1, config.preopt_iters + 1):
        opt.zero_grad()
        try:
            comps, _ = scene_losses(scene, video, track, config, with_video=False)
            total = joint_loss(comps, weights)
        except (ValueError, FloatingPointError) as exc:
            raise FitDivergenceError(it, str(exc)) from exc
        sil_val = float(comps.silhouette.detach())
        history.append(
            HistoryRow(
                iteration=it,
                phase="pre",
                total=float(total.detach()),
                video=math.nan,
                tv=float(comps.tv.detach()),
                silhouette=sil_val,
                laplacian=float(comps.laplacian.detach()),
            )
        )
        if it % config.log_every == 0:
            log.info("pre %d: L_S=%.4f total=%.4f", it, sil_val,
                     float(total.detach()))
        if sil_val < config.preopt_threshold:
            return history
        total.backward()
        opt.step()
        _post_step(scene)
    warnings.warn(
        f"pre-optimization did not reach silhouette loss < "
        f"{config.preopt_threshold} within {config.preopt_iters} iterations "
        f"(last {history[-1].silhouette:.3f}); continuing to the main phase"
    )
    return history


def _main_phase(
    scene: Scene,
    video: VideoSequence,
    track: MaskTrack,
    config: FitConfig,
    iters: int,
    history: list[HistoryRow],
) -> None:
    params = list(scene.parameters().values())
    opt = Adam(params, lr=config.learning_rate)
    weights = LossWeights(lambda_v=config.lambda_v, lambda_l=config.lambda_l)
    base = len(history)
    for it in range(1, iters + 1):
        opt.zero_grad()
        try:
            comps, _ = scene_losses(scene, video, track, config)
            total = joint_loss(comps, weights)
            history.append(
                HistoryRow(
                    iteration=base + it,
                    phase="main",
                    total=float(total.detach()),
                    video=float(comps.video.detach()),
                    tv=float(comps.tv.detach()),
                    silhouette=float(comps.silhouette.detach()),
                    laplacian=float(comps.laplacian.detach()),
                )
            )
            total.backward()
            opt.step()
        except (ValueError, FloatingPointError) as exc:
            raise FitDivergenceError(base + it, str(exc)) from exc
        _post_step(scene)
        if it % config.log_every == 0:
            row = history[-1]
            log.info(
                "main %d: L=%.4f L_V=%.4f L_S=%.4f", it, row.total,
                row.video, row.silhouette,
            )


def _downscale_video(video: VideoSequence, width: int) -> VideoSequence:
    n, h, w, _ = video.frames.shape
    if w <= width:
        return video
    height = max(1, round(h * width / w))
    x = video.frames.permute(0, 3, 1, 2)
    x = F.interpolate(x, size=(height, width), mode="area")
    return make_video(x.permute(0, 2, 3, 1).contiguous())


def _downscale_track(track: MaskTrack, width: int) -> MaskTrack:
    n, s, h, w = track.masks.shape
    if w <= width:
        return track
    height = max(1, round(h * width / w))
    x = track.masks.reshape(n * s, 1, h, w)
    x = F.interpolate(x, size=(height, width), mode="area")
    return MaskTrack(masks=x.reshape(n, s, height, width), source=track.source)


def optimize_window(
    video: VideoSequence,
    track: MaskTrack,
    prototype: Prototype,
    config: FitConfig,
    camera: Camera | None = None,
    main_iters: int | None = None,
) -> FitResult:
    """Fit one video window with a single mesh prototype."""
    if track.n_frames != video.n_frames:
        raise ValueError("mask track does not cover the video window")
    dtype = config.torch_dtype
    video = VideoSequence(video.frames.to(dtype), video.background.to(dtype))
    track = MaskTrack(track.masks.to(dtype), track.source)
    if config.fit_width is not None:
        video = _downscale_video(video, config.fit_width)
        track = _downscale_track(track, config.fit_width)
    h, w = video.frames.shape[1:3]
    from .renderer import default_camera

    cam = camera.scaled(w, h) if camera is not None else default_camera(w, h)
    scene = init_scene(prototype, cam, config)

    history = preoptimize(scene, video, track, config)
    n_pre = len(history)
    _main_phase(scene, video, track, config,
                main_iters if main_iters is not None else config.main_iters,
                history)

    with torch.no_grad():
        comps, per_frame = scene_losses(scene, video, track, config)
    return FitResult(
        mesh=scene.mesh.detached(),
        motion=scene.motion.detached(),
        exposure=scene.exposure.detached(),
        prototype=prototype,
        history=history,
        per_frame_video_loss=[float(v) for v in per_frame],
        final_video_loss=float(comps.video),
        preopt_iterations=n_pre,
        camera=cam,
    )


def select_prototype(
    video: VideoSequence,
    track: MaskTrack,
    config: FitConfig,
    camera: Camera | None = None,
    main_iters: int | None = None,
) -> FitResult:
    """Fit every configured prototype; keep the lowest final video loss.

    Ties break to the earlier prototype in the configured order.
    """
    best: FitResult | None = None
    for proto in config.prototypes:
        try:
            result = optimize_window(
                video, track, proto, config, camera, main_iters=main_iters
            )
        except FitDivergenceError as exc:
            warnings.warn(f"prototype {proto.value} diverged: {exc}")
            continue
        log.info("prototype %s: final L_V=%.5f", proto.value,
                 result.final_video_loss)
        if best is None or result.final_video_loss < best.final_video_loss:
            best = result
    if best is None:
        raise FitDivergenceError(0, "all prototypes diverged")
    return best


def fit_window(
    video: VideoSequence,
    track: MaskTrack,
    config: FitConfig,
    camera: Camera | None = None,
) -> FitResult:
    """Prototype selection plus full fit for one window.

    With `screen_iters` set, prototypes are first screened with a short
    main phase and only the winner gets the full iteration budget.
    """
    if len(config.prototypes) == 1:
        return optimize_window(video, track, config.prototypes[0], config, camera)
    if config.screen_iters:
        screen_config = config
        if config.screen_width is not None:
            screen_config = replace(config, fit_width=config.screen_width)
        screened = select_prototype(
            video, track, screen_config, camera, main_iters=config.screen_iters
        )
        return optimize_window(video, track, screened.prototype, config, camera)
    return select_prototype(video, track, config, camera)


@dataclass
class VideoFit:
    windows: list[tuple[int, FitResult]]  # (start frame index, result)
    frame_choice: list[int]  # per input frame, index into `windows`

    def result_for_frame(self, n: int) -> FitResult:
        return self.windows[self.frame_choice[n]][1]


def fit_video(
    video: VideoSequence,
    track: MaskTrack,
    config: FitConfig,
    camera: Camera | None = None,
    jobs: int = 1,
) -> VideoFit:
    """Sliding-window fit over the full video.

    Every contiguous window of size min(window, N) is fitted; each frame
    then selects, among the windows covering it, the one whose video loss
    restricted to that frame is lowest.
    """
    n = video.n_frames
    w = min(config.window, n)
    starts = list(range(0, n - w + 1))

    def run(start: int) -> FitResult:
        sub = make_video(video.frames[start : start + w])
        sub_track = MaskTrack(track.masks[start : start + w], track.source)
        return fit_window(sub, sub_track, config, camera)

    if jobs > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, starts))
    else:
        results = [run(s) for s in starts]
    windows = list(zip(starts, results))

    frame_choice = []
    for f in range(n):
        best_idx, best_loss = -1, math.inf
        for i, (start, res) in enumerate(windows):
            if start <= f < start + w:
                loss = res.per_frame_video_loss[f - start]
                if loss < best_loss:
                    best_idx, best_loss = i, loss
        frame_choice.append(best_idx)
    return VideoFit(windows=windows, frame_choice=frame_choice)


# --------------------------------------------------------------------------
# persistence


def save_history_csv(path: str | Path, history: list[HistoryRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["iteration", "phase", "total", "video", "tv", "silhouette",
             "laplacian"]
        )
        for row in history:
            writer.writerow(
                [row.iteration, row.phase, repr(row.total), repr(row.video),
                 repr(row.tv), repr(row.silhouette), repr(row.laplacian)]
            )


def save_fit_result(dir_path: str | Path, result: FitResult,
                    n_frames: int | None = None) -> None:
    """Persist mesh OBJ+PNG, motion JSON (with epsilon, t_b), loss CSV."""
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    geometry.export_obj(result.mesh, dir_path / "mesh.obj")
    motion_mod.save_motion(
        dir_path / "motion.json", result.motion, result.exposure,
        n_frames if n_frames is not None else len(result.per_frame_video_loss),
    )
    save_history_csv(dir_path / "loss.csv", result.history)
