"""Differentiable rendering of a posed textured mesh under a pinhole camera.

The rasterizer produces an unlit albedo image and a soft silhouette:

* silhouette per pixel: 1 - prod_f (1 - p_f) with
  p_f = logistic(sign * d^2 / softness), where d is the pixel's distance to
  face f's boundary in normalized screen units (pixel coordinates divided by
  the image width) and sign is positive inside the face. The product is
  accumulated in log space as a sum of softplus terms, which stays stable
  for arbitrarily saturated coverage.
* color per pixel: bilinear texture lookup at the barycentrically
  interpolated UV of the nearest covering face (hard depth test, no gradient
  through the winner selection). The returned appearance is color times
  silhouette (premultiplied).

Faces influence only pixels inside a per-face window around their projected
bounding box; windows are square, bucketed by face size, and clamped into
the image. The window margin is chosen so truncated contributions stay below
exp(-TRUNCATION_EXPONENT), i.e. numerically irrelevant. Gradients flow to
vertex offsets, texture, pose translation and quaternion by reverse-mode
autodiff through this exact forward computation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

from .geometry import TexturedMesh, Pose, quat_rotate

# Contributions with |d^2 / softness| above this are cut off by the window;
# exp(-30) ~ 1e-13 keeps finite-difference gradient checks clean.
TRUNCATION_EXPONENT = 30.0
DEFAULT_SOFTNESS = 1e-4
NEAR_PLANE = 0.01
INIT_DEPTH = 6.0

# Upper bound on face-pixel pairs processed per chunk (memory control).
_PAIR_CHUNK = 8_000_000

_AREA_EPS = 1e-12


@dataclass
class Camera:
    """Pinhole camera; +x right, +y down, +z forward (into the image)."""

    width: int
    height: int
    focal: float
    cx: float
    cy: float
    init_depth: float = INIT_DEPTH

    def __post_init__(self):
        if self.focal <= 0:
            raise ValueError("focal length must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def scaled(self, width: int, height: int) -> "Camera":
        """Camera for the same view at a different raster resolution."""
        sx = width / self.width
        sy = height / self.height
        return Camera(
            width=width,
            height=height,
            focal=self.focal * sx,
            cx=(self.cx + 0.5) * sx - 0.5,
            cy=(self.cy + 0.5) * sy - 0.5,
            init_depth=self.init_depth,
        )


def default_camera(width: int, height: int | None = None) -> Camera:
    """Focal = image width (~53 deg horizontal FOV), centered principal point."""
    height = width if height is None else height
    return Camera(
        width=width,
        height=height,
        focal=float(width),
        cx=(width - 1) / 2.0,
        cy=(height - 1) / 2.0,
    )


@dataclass
class RenderOutput:
    appearance: torch.Tensor  # (H, W, 3), premultiplied by silhouette
    silhouette: torch.Tensor  # (H, W)


def project(points: torch.Tensor, camera: Camera) -> torch.Tensor:
    """Project camera-space points (..., 3) to pixel coordinates (..., 2)."""
    z = points[..., 2]
    u = camera.focal * points[..., 0] / z + camera.cx
    v = camera.focal * points[..., 1] / z + camera.cy
    return torch.stack([u, v], dim=-1)


def _edge_d2(ax, ay, ex, ey, inv_e2, px, py):
    """Squared distance from (px, py) to segment starting at (ax, ay) with
    edge vector (ex, ey) and precomputed 1 / |edge|^2."""
    apx = px - ax
    apy = py - ay
    t = ((apx * ex + apy * ey) * inv_e2).clamp(0.0, 1.0)
    dx = apx - t * ex
    dy = apy - t * ey
    return dx * dx + dy * dy


class _SoftCoverage(torch.autograd.Function):
    """softplus(sign * d^2 / softness) with a hand-written backward.

    d is the distance from each window pixel to the triangle boundary (the
    nearest of the three edge segments); `inside` supplies the sign and is
    treated as non-differentiable, like the nearest-edge selection. The
    point-to-segment gradient treats the clamped projection parameter as a
    constant, which is exact: at an interior foot point the derivative
    w.r.t. the parameter vanishes (envelope theorem), and at a clamped end
    the parameter is locally constant anyway.
    """

    @staticmethod
    def forward(ctx, tri, px, py, inside, inv_softness):
        # tri: (M, 3, 2); px, py, inside: (M, P)
        tx, ty = tri[:, :, 0], tri[:, :, 1]
        d2 = None
        edge = None
        for e in range(3):
            ax, ay = tx[:, e, None], ty[:, e, None]
            bx, by = tx[:, (e + 1) % 3, None], ty[:, (e + 1) % 3, None]
            ex, ey = bx - ax, by - ay
            inv_e2 = 1.0 / (ex * ex + ey * ey).clamp_min(1e-20)
            de = _edge_d2(ax, ay, ex, ey, inv_e2, px, py)
            if d2 is None:
                d2, edge = de, torch.zeros_like(de, dtype=torch.int8)
            else:
                closer = de < d2
                d2 = torch.where(closer, de, d2)
                edge = torch.where(closer, torch.tensor(e, dtype=torch.int8), edge)
        x = torch.where(inside, d2, -d2) * inv_softness
        ctx.save_for_backward(tri, px, py, inside, edge, x)
        ctx.inv_softness = inv_softness
        # softplus via vectorized primitives (aten::softplus takes a slow
        # scalar path on this CPU build)
        return x.clamp_min(0.0) + torch.log1p(torch.exp(-x.abs()))

    @staticmethod
    def backward(ctx, grad_out):
        tri, px, py, inside, edge, x = ctx.saved_tensors
        inv_s = ctx.inv_softness
        g_d2 = grad_out * torch.sigmoid(x) * inv_s
        g_d2 = torch.where(inside, g_d2, -g_d2)

        idx = edge.long()
        nxt = (idx + 1) % 3
        tx, ty = tri[:, :, 0], tri[:, :, 1]
        ax = tx.gather(1, idx)
        ay = ty.gather(1, idx)
        bx = tx.gather(1, nxt)
        by = ty.gather(1, nxt)
        ex, ey = bx - ax, by - ay
        inv_e2 = 1.0 / (ex * ex + ey * ey).clamp_min(1e-20)
        apx, apy = px - ax, py - ay
        t = ((apx * ex + apy * ey) * inv_e2).clamp(0.0, 1.0)
        dx = apx - t * ex
        dy = apy - t * ey
        # d^2 = dx^2 + dy^2 with diff = p - (1-t) a - t b, t held fixed.
        cx = -2.0 * g_d2 * dx
        cy = -2.0 * g_d2 * dy
        one_m_t = 1.0 - t
        g_tri = torch.zeros_like(tri)
        g_tri[:, :, 0].scatter_add_(1, idx, cx * one_m_t)
        g_tri[:, :, 1].scatter_add_(1, idx, cy * one_m_t)
        g_tri[:, :, 0].scatter_add_(1, nxt, cx * t)
        g_tri[:, :, 1].scatter_add_(1, nxt, cy * t)
        return g_tri, None, None, None, None


class _Winners:
    """Bookkeeping to resolve the nearest covering face per pixel."""

    def __init__(self, size: int, dtype: torch.dtype):
        self.zbuf = torch.full((size,), math.inf, dtype=dtype)
        self.chunks: list[tuple[torch.Tensor, torch.Tensor, torch.Tensor]] = []

    def add(self, flat: torch.Tensor, z_in: torch.Tensor, item: torch.Tensor):
        self.zbuf.scatter_reduce_(0, flat, z_in, reduce="amin", include_self=True)
        self.chunks.append((flat, z_in, item))

    def resolve(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (item ids, flat pixel ids) of unique per-pixel winners.

        Nearest depth wins; exact ties break to the globally smallest pair
        id, so duplicate writes cannot occur and results are deterministic.
        """
        idbuf = torch.full((self.zbuf.shape[0],), torch.iinfo(torch.int64).max)
        base = 0
        for flat, z_in, _ in self.chunks:
            ids = torch.arange(base, base + flat.shape[0])
            base += flat.shape[0]
            cand = torch.isfinite(z_in) & (z_in == self.zbuf[flat])
            if bool(cand.any()):
                idbuf.scatter_reduce_(
                    0, flat[cand], ids[cand], reduce="amin", include_self=True
                )
        win_items, win_flat = [], []
        base = 0
        for flat, _, item in self.chunks:
            ids = torch.arange(base, base + flat.shape[0])
            base += flat.shape[0]
            keep = idbuf[flat] == ids
            if bool(keep.any()):
                win_items.append(item[keep])
                win_flat.append(flat[keep])
        if not win_items:
            empty = torch.zeros(0, dtype=torch.int64)
            return empty, empty
        return torch.cat(win_items), torch.cat(win_flat)


def render_poses(
    mesh: TexturedMesh,
    rotations: torch.Tensor,
    translations: torch.Tensor,
    camera: Camera,
    softness: float = DEFAULT_SOFTNESS,
    with_color: bool = True,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Rasterize the mesh under a batch of poses.

    rotations: (B, 4) unit quaternions; translations: (B, 3).
    Returns appearance (B, H, W, 3) and silhouette (B, H, W).
    """
    if rotations.ndim != 2 or rotations.shape[1] != 4:
        raise ValueError("rotations must have shape (B, 4)")
    B = rotations.shape[0]
    H, W = camera.height, camera.width
    dtype = mesh.dtype
    faces = mesh.faces
    Fn = faces.shape[0]

    verts = mesh.vertices  # (V, 3)
    vcam = quat_rotate(rotations.unsqueeze(1), verts.unsqueeze(0))
    vcam = vcam + translations.unsqueeze(1)  # (B, V, 3)
    zmin = float(vcam[..., 2].detach().min())
    if zmin <= NEAR_PLANE:
        raise ValueError(
            f"posed vertex behind near plane: min depth {zmin:.4g} <= {NEAR_PLANE}"
        )
    pix = project(vcam, camera)  # (B, V, 2)

    # Flatten pose x face into one item dimension.
    tri = pix[:, faces, :].reshape(B * Fn, 3, 2)  # (M, 3, 2)
    tri_z = vcam[..., 2][:, faces].reshape(B * Fn, 3)  # (M, 3)
    item_b = torch.arange(B).repeat_interleave(Fn)  # (M,)
    item_f = torch.arange(Fn).repeat(B)

    margin = int(math.ceil(math.sqrt(TRUNCATION_EXPONENT * softness) * W)) + 1
    with torch.no_grad():
        t32 = tri.detach().to(torch.float32)
        bb_min = t32.min(dim=1).values  # (M, 2)
        bb_max = t32.max(dim=1).values
        ext = (bb_max.ceil() - bb_min.floor()).max(dim=-1).values  # (M,)
        need = ext.long() + 2 * margin + 2  # required window side
        center = 0.5 * (bb_min + bb_max)

    acc = torch.zeros(B * H * W, dtype=dtype)
    winners = _Winners(B * H * W, dtype) if with_color else None
    inv_w = 1.0 / W

    # Bucket faces by required window size so small faces don't pay for the
    # largest one. Bucket edges: ~median, ~90th percentile, max.
    with torch.no_grad():
        kmax = int(need.max())
        qs = torch.quantile(need.float(), torch.tensor([0.5, 0.9])).long()
        sizes = sorted({min(int(qs[0]), kmax), min(int(qs[1]), kmax), kmax})
    prev = 0
    for k in sizes:
        bucket = ((need > prev) & (need <= k)).nonzero(as_tuple=False).squeeze(1)
        prev = k
        if bucket.numel() == 0:
            continue
        _raster_bucket(
            bucket, k, tri, tri_z, center, item_b, item_f,
            acc, winners, camera, softness, inv_w, dtype,
        )

    silhouette = (1.0 - torch.exp(-acc)).view(B, H, W)

    if winners is None:
        return torch.zeros(B, H, W, 3, dtype=dtype), silhouette

    win_item, win_flat = winners.resolve()
    color_flat = torch.zeros(B * H * W, 3, dtype=dtype)
    if win_item.numel():
        px = (win_flat % W).to(dtype)
        py = (win_flat // W % H).to(dtype)
        v_sel = tri[win_item] * inv_w  # (K, 3, 2)
        wa, wb, wc = _barycentric_pts(v_sel, px * inv_w, py * inv_w)
        w_sel = torch.stack([wa, wb, wc], dim=-1)  # (K, 3)
        uv_sel = mesh.uv[faces[item_f[win_item]], :]  # (K, 3, 2)
        uv_pt = (w_sel.unsqueeze(-1) * uv_sel).sum(dim=1)  # (K, 2)
        texel = _bilinear_sample(mesh.texture, uv_pt)
        color_flat.index_put_((win_flat,), texel)

    appearance = color_flat.view(B, H, W, 3) * silhouette.unsqueeze(-1)
    return appearance, silhouette


def _barycentric_pts(v: torch.Tensor, px: torch.Tensor, py: torch.Tensor):
    """Barycentric coordinates of one point per triangle; v: (K, 3, 2)."""
    ax, ay = v[:, 0, 0], v[:, 0, 1]
    bx, by = v[:, 1, 0], v[:, 1, 1]
    cx, cy = v[:, 2, 0], v[:, 2, 1]
    den = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
    den = torch.where(den.abs() > _AREA_EPS, den, torch.full_like(den, _AREA_EPS))
    wa = ((cx - bx) * (py - by) - (cy - by) * (px - bx)) / den
    wb = ((ax - cx) * (py - cy) - (ay - cy) * (px - cx)) / den
    return wa, wb, 1.0 - wa - wb


def _raster_bucket(
    bucket: torch.Tensor,
    k: int,
    tri: torch.Tensor,
    tri_z: torch.Tensor,
    center: torch.Tensor,
    item_b: torch.Tensor,
    item_f: torch.Tensor,
    acc: torch.Tensor,
    winners: _Winners | None,
    camera: Camera,
    softness: float,
    inv_w: float,
    dtype: torch.dtype,
) -> None:
    """Accumulate one window-size bucket of (pose, face) items into `acc`."""
    H, W = camera.height, camera.width
    kx, ky = min(k, W), min(k, H)
    P = kx * ky
    M = bucket.shape[0]
    with torch.no_grad():
        ox = (center[bucket, 0].floor().long() - kx // 2).clamp(0, W - kx)  # (M,)
        oy = (center[bucket, 1].floor().long() - ky // 2).clamp(0, H - ky)
    grid_y = torch.arange(ky).repeat_interleave(kx)  # (P,)
    grid_x = torch.arange(kx).repeat(ky)

    grid_off = grid_y * W + grid_x  # (P,) pixel offset within the image
    gx = grid_x.to(dtype) * inv_w
    gy = grid_y.to(dtype) * inv_w

    n_chunks = max(1, math.ceil(M * P / _PAIR_CHUNK))
    step = math.ceil(M / n_chunks)
    for m0 in range(0, M, step):
        sel = bucket[m0 : m0 + step]
        oxs, oys = ox[m0 : m0 + step], oy[m0 : m0 + step]
        v = tri[sel] * inv_w  # (Mc, 3, 2) normalized screen coords
        px = (oxs.to(dtype) * inv_w).unsqueeze(-1) + gx  # (Mc, P)
        py = (oys.to(dtype) * inv_w).unsqueeze(-1) + gy

        # Inside test and depth carry no gradient (hard selections).
        with torch.no_grad():
            vd = v.detach()
            ex1 = vd[:, 2, 0, None] - vd[:, 1, 0, None]
            ey1 = vd[:, 2, 1, None] - vd[:, 1, 1, None]
            ex2 = vd[:, 0, 0, None] - vd[:, 2, 0, None]
            ey2 = vd[:, 0, 1, None] - vd[:, 2, 1, None]
            den = ex1 * ey2 - ey1 * ex2
            den_ok = den.abs() > _AREA_EPS
            den_safe = torch.where(den_ok, den, torch.full_like(den, _AREA_EPS))
            wa = (ex1 * (py - vd[:, 1, 1, None]) - ey1 * (px - vd[:, 1, 0, None])) / den_safe
            wb = (ex2 * (py - vd[:, 2, 1, None]) - ey2 * (px - vd[:, 2, 0, None])) / den_safe
            wc = 1.0 - wa - wb
            inside = (torch.minimum(wa, torch.minimum(wb, wc)) >= 0.0) & den_ok

        contrib = _SoftCoverage.apply(v, px, py, inside, 1.0 / softness)

        base = item_b[sel] * (H * W) + oys * W + oxs  # (Mc,)
        flat = (base.unsqueeze(-1) + grid_off).reshape(-1)
        acc.index_add_(0, flat, contrib.reshape(-1))

        if winners is not None:
            with torch.no_grad():
                lin = inside.reshape(-1).nonzero(as_tuple=False).squeeze(1)
                if lin.numel():
                    row = lin // P
                    z_f = tri_z[sel].detach()[row]  # (K, 3)
                    z_in = (
                        wa.reshape(-1)[lin] * z_f[:, 0]
                        + wb.reshape(-1)[lin] * z_f[:, 1]
                        + wc.reshape(-1)[lin] * z_f[:, 2]
                    )
                    winners.add(flat[lin], z_in, sel[row])


def _bilinear_sample(texture: torch.Tensor, uv: torch.Tensor) -> torch.Tensor:
    """Sample texture (H, W, 3) at UV points (K, 2); v runs bottom-up."""
    Ht, Wt = texture.shape[0], texture.shape[1]
    x = uv[:, 0].clamp(0.0, 1.0) * (Wt - 1)
    y = (1.0 - uv[:, 1].clamp(0.0, 1.0)) * (Ht - 1)
    x0 = x.floor().long().clamp(0, Wt - 2)
    y0 = y.floor().long().clamp(0, Ht - 2)
    fx = (x - x0).unsqueeze(-1)
    fy = (y - y0).unsqueeze(-1)
    t00 = texture[y0, x0]
    t01 = texture[y0, x0 + 1]
    t10 = texture[y0 + 1, x0]
    t11 = texture[y0 + 1, x0 + 1]
    top = t00 * (1 - fx) + t01 * fx
    bot = t10 * (1 - fx) + t11 * fx
    return top * (1 - fy) + bot * fy


def rasterize(
    mesh: TexturedMesh,
    pose: Pose,
    camera: Camera,
    softness: float = DEFAULT_SOFTNESS,
) -> RenderOutput:
    """Render a single pose to appearance + soft silhouette."""
    q = pose.rotation / pose.rotation.norm()
    app, sil = render_poses(
        mesh, q.unsqueeze(0), pose.translation.unsqueeze(0), camera, softness
    )
    return RenderOutput(appearance=app[0], silhouette=sil[0])


def render_gradients(
    loss: torch.Tensor, parameters: Sequence[torch.Tensor]
) -> list[torch.Tensor]:
    """Reverse-mode gradients of a scalar loss w.r.t. scene parameters.

    Parameters that do not influence the loss get zero gradients.
    """
    params = list(parameters)
    if not loss.requires_grad:
        return [torch.zeros_like(p) for p in params]
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return [
        g if g is not None else torch.zeros_like(p) for g, p in zip(grads, params)
    ]
