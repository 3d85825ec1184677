"""Mesh prototypes, canonical-space normalization, rigid posing, and OBJ I/O.

Conventions
-----------
Vertices live in canonical units: after `canonicalize` the effective vertex
set (base + offsets) has zero mean and unit total variance (trace of the
coordinate covariance equals one), so the canonical spheres have radius 1.
Quaternions are scalar-first (w, x, y, z). Texture values are linear floats
in [0, 1], shape (H, W, 3).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from pathlib import Path

import torch

from . import imgio


class Prototype(enum.Enum):
    SPHERE_LOW = "sphere_low"
    SPHERE_HIGH = "sphere_high"
    TORUS = "torus"


# Tessellation sizes: icosphere levels 2/3, torus 24x16 grid with tube/ring
# radius ratio 0.4. Kept small enough for CPU-scale rendering.
ICOSPHERE_LEVELS = {Prototype.SPHERE_LOW: 2, Prototype.SPHERE_HIGH: 3}
TORUS_MAJOR_SEGMENTS = 24
TORUS_MINOR_SEGMENTS = 16
TORUS_RADIUS_RATIO = 0.4

DEFAULT_TEXTURE_SIZE = 256

_DEGENERATE_VARIANCE = 1e-12


@dataclass
class TexturedMesh:
    """A deformable textured triangle mesh with fixed topology and UVs.

    `base_vertices` are the prototype positions, `vertex_offsets` the
    learnable deformation; the effective geometry is their sum.
    """

    prototype: Prototype | None
    base_vertices: torch.Tensor  # (V, 3)
    vertex_offsets: torch.Tensor  # (V, 3)
    faces: torch.Tensor  # (F, 3) int64
    uv: torch.Tensor  # (V, 2) in [0,1]^2
    texture: torch.Tensor  # (H, W, 3) in [0,1]

    @property
    def vertices(self) -> torch.Tensor:
        """Effective vertex positions (base + offsets)."""
        return self.base_vertices + self.vertex_offsets

    @property
    def dtype(self) -> torch.dtype:
        return self.base_vertices.dtype

    def detached(self) -> "TexturedMesh":
        return TexturedMesh(
            prototype=self.prototype,
            base_vertices=self.base_vertices.detach().clone(),
            vertex_offsets=self.vertex_offsets.detach().clone(),
            faces=self.faces.clone(),
            uv=self.uv.clone(),
            texture=self.texture.detach().clone(),
        )

    def to(self, dtype: torch.dtype) -> "TexturedMesh":
        return replace(
            self,
            base_vertices=self.base_vertices.to(dtype),
            vertex_offsets=self.vertex_offsets.to(dtype),
            uv=self.uv.to(dtype),
            texture=self.texture.to(dtype),
        )


@dataclass
class Pose:
    """Rigid pose in camera coordinates: rotate first, then translate."""

    rotation: torch.Tensor  # (4,) quaternion, scalar-first
    translation: torch.Tensor  # (3,)

    def normalized(self) -> "Pose":
        return Pose(quat_normalize(self.rotation), self.translation)


# --------------------------------------------------------------------------
# quaternion helpers


def quat_normalize(q: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    norm = q.norm(dim=-1, keepdim=True)
    if torch.any(norm < eps):
        raise ValueError("degenerate quaternion (norm below %g)" % eps)
    return q / norm


def quat_rotate(q: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Rotate vectors `v` (..., 3) by unit quaternions `q` (..., 4)."""
    w = q[..., :1]
    xyz = q[..., 1:]
    t = 2.0 * torch.linalg.cross(xyz, v, dim=-1)
    return v + w * t + torch.linalg.cross(xyz, t, dim=-1)


def quat_multiply(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dim=-1,
    )


def quat_conjugate(q: torch.Tensor) -> torch.Tensor:
    return torch.cat([q[..., :1], -q[..., 1:]], dim=-1)


def quat_from_axis_angle(axis, angle: float, dtype=torch.float64) -> torch.Tensor:
    axis = torch.as_tensor(axis, dtype=dtype)
    axis = axis / axis.norm()
    half = 0.5 * float(angle)
    return torch.cat(
        [torch.tensor([math.cos(half)], dtype=dtype), math.sin(half) * axis]
    )


# --------------------------------------------------------------------------
# prototype construction


def _icosahedron() -> tuple[list[list[float]], list[list[int]]]:
    phi = (1.0 + math.sqrt(5.0)) / 2.0
    verts = [
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ]
    faces = [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ]
    return [[float(c) for c in v] for v in verts], faces


def _icosphere(level: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Subdivided icosahedron projected onto the unit sphere."""
    verts, faces = _icosahedron()
    verts = [_unit(v) for v in verts]
    for _ in range(level):
        midpoint_cache: dict[tuple[int, int], int] = {}

        def midpoint(i: int, j: int) -> int:
            key = (min(i, j), max(i, j))
            idx = midpoint_cache.get(key)
            if idx is None:
                m = [(verts[i][k] + verts[j][k]) / 2.0 for k in range(3)]
                verts.append(_unit(m))
                idx = len(verts) - 1
                midpoint_cache[key] = idx
            return idx

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]]
        faces = new_faces
    return (
        torch.tensor(verts, dtype=torch.float64),
        torch.tensor(faces, dtype=torch.int64),
    )


def _unit(v: list[float]) -> list[float]:
    n = math.sqrt(sum(c * c for c in v))
    return [c / n for c in v]


def _sphere_uv(verts: torch.Tensor) -> torch.Tensor:
    """Equirectangular mapping: longitude -> u, latitude -> v."""
    x, y, z = verts.unbind(-1)
    r = verts.norm(dim=-1)
    u = torch.atan2(y, x) / (2.0 * math.pi) + 0.5
    v = torch.asin(torch.clamp(z / r, -1.0, 1.0)) / math.pi + 0.5
    return torch.stack([u, v], dim=-1)


def _torus(
    n_major: int, n_minor: int, ratio: float
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    # Scale so the total variance is 1 before canonicalize: R^2 + r^2 = 1.
    major = 1.0 / math.sqrt(1.0 + ratio * ratio)
    minor = ratio * major
    verts, uvs, faces = [], [], []
    for i in range(n_major):
        theta = 2.0 * math.pi * i / n_major
        for j in range(n_minor):
            phi = 2.0 * math.pi * j / n_minor
            ring = major + minor * math.cos(phi)
            verts.append(
                [ring * math.cos(theta), ring * math.sin(theta), minor * math.sin(phi)]
            )
            uvs.append([i / n_major, j / n_minor])
    for i in range(n_major):
        for j in range(n_minor):
            a = i * n_minor + j
            b = ((i + 1) % n_major) * n_minor + j
            c = ((i + 1) % n_major) * n_minor + (j + 1) % n_minor
            d = i * n_minor + (j + 1) % n_minor
            faces += [[a, b, c], [a, c, d]]
    return (
        torch.tensor(verts, dtype=torch.float64),
        torch.tensor(uvs, dtype=torch.float64),
        torch.tensor(faces, dtype=torch.int64),
    )


def make_prototype(
    kind: Prototype,
    texture_size: int = DEFAULT_TEXTURE_SIZE,
    dtype: torch.dtype = torch.float64,
) -> TexturedMesh:
    """Build a canonicalized prototype with zero offsets and white texture."""
    if kind in ICOSPHERE_LEVELS:
        verts, faces = _icosphere(ICOSPHERE_LEVELS[kind])
        uv = _sphere_uv(verts)
    elif kind is Prototype.TORUS:
        verts, uv, faces = _torus(
            TORUS_MAJOR_SEGMENTS, TORUS_MINOR_SEGMENTS, TORUS_RADIUS_RATIO
        )
    else:
        raise ValueError(f"unknown prototype: {kind!r}")
    verts = verts.to(dtype)
    mean, scale = canonical_frame(verts)
    base = (verts - mean) / scale  # canonical base, offsets exactly zero
    return TexturedMesh(
        prototype=kind,
        base_vertices=base,
        vertex_offsets=torch.zeros_like(base),
        faces=faces,
        uv=uv.to(dtype),
        texture=torch.ones(texture_size, texture_size, 3, dtype=dtype),
    )


# --------------------------------------------------------------------------
# operations


def canonical_frame(vertices: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Centroid and scale that map `vertices` to zero mean / unit variance.

    Scale is the square root of the total variance (mean squared distance
    from the centroid, i.e. the trace of the coordinate covariance).
    """
    mean = vertices.mean(dim=0)
    var = ((vertices - mean) ** 2).sum(dim=1).mean()
    if float(var) < _DEGENERATE_VARIANCE:
        raise ValueError("degenerate vertex set: zero variance")
    return mean, torch.sqrt(var)


def canonicalize(mesh: TexturedMesh) -> TexturedMesh:
    """Renormalize effective vertices to zero mean and unit total variance.

    The base vertices stay fixed; the offsets absorb the shift and scale, so
    the optimizer's parameter tensor keeps its meaning between iterations.
    """
    eff = mesh.vertices
    mean, scale = canonical_frame(eff)
    new_eff = (eff - mean) / scale
    return replace(mesh, vertex_offsets=new_eff - mesh.base_vertices)


def canonicalize_(offsets: torch.Tensor, base_vertices: torch.Tensor) -> None:
    """In-place variant used between optimizer steps (no autograd)."""
    with torch.no_grad():
        eff = base_vertices + offsets
        mean, scale = canonical_frame(eff)
        offsets.copy_((eff - mean) / scale - base_vertices)


def apply_pose(mesh: TexturedMesh, pose: Pose) -> torch.Tensor:
    """Rotate effective vertices by the pose quaternion, then translate."""
    q = pose.rotation / pose.rotation.norm()
    return quat_rotate(q.unsqueeze(0), mesh.vertices) + pose.translation


def directed_edges(faces: torch.Tensor) -> torch.Tensor:
    """Unique directed edges (i -> j) of a triangle list, shape (E, 2)."""
    e = torch.cat([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]], dim=0)
    return torch.unique(e, dim=0)


def laplacian_loss(mesh: TexturedMesh) -> torch.Tensor:
    """Mean squared norm of uniform-weight Laplacian coordinates.

    Each vertex contributes || v_i - mean(neighbors of v_i) ||^2; neighbors
    come from the 1-ring of the face topology with combinatorial weights.
    """
    eff = mesh.vertices
    edges = directed_edges(mesh.faces)
    src, dst = edges[:, 0], edges[:, 1]
    nsum = torch.zeros_like(eff).index_add_(0, src, eff[dst])
    deg = torch.zeros(
        eff.shape[0], dtype=eff.dtype, device=eff.device
    ).index_add_(0, src, torch.ones(src.shape[0], dtype=eff.dtype))
    delta = eff - nsum / deg.clamp_min(1.0).unsqueeze(1)
    return (delta**2).sum(dim=1).mean()


# --------------------------------------------------------------------------
# OBJ import/export


def export_obj(mesh: TexturedMesh, path: str | Path) -> None:
    """Write Wavefront OBJ (v/vt/f) plus a sibling PNG with the texture."""
    path = Path(path)
    lines = ["# blurfit mesh"]
    if mesh.prototype is not None:
        lines.append(f"# prototype {mesh.prototype.value}")
    verts = mesh.vertices.detach()
    for v in verts.tolist():
        lines.append("v %.9g %.9g %.9g" % (v[0], v[1], v[2]))
    for t in mesh.uv.tolist():
        lines.append("vt %.9g %.9g" % (t[0], t[1]))
    for f in mesh.faces.tolist():
        lines.append(
            "f %d/%d %d/%d %d/%d"
            % (f[0] + 1, f[0] + 1, f[1] + 1, f[1] + 1, f[2] + 1, f[2] + 1)
        )
    path.write_text("\n".join(lines) + "\n")
    imgio.save_image(path.with_suffix(".png"), mesh.texture)


def import_obj(path: str | Path, dtype: torch.dtype = torch.float64) -> TexturedMesh:
    """Read an OBJ written by `export_obj` (or any v/vt/f triangle file)."""
    path = Path(path)
    verts: list[list[float]] = []
    uvs: list[list[float]] = []
    faces: list[list[int]] = []
    prototype: Prototype | None = None
    for ln, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if line.startswith("# prototype "):
            name = line.split()[-1]
            try:
                prototype = Prototype(name)
            except ValueError:
                prototype = None
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        tag = parts[0]
        if tag == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif tag == "vt":
            uvs.append([float(x) for x in parts[1:3]])
        elif tag == "f":
            if len(parts) != 4:
                raise ValueError(f"{path}:{ln}: only triangle faces supported")
            idx = [int(p.split("/")[0]) - 1 for p in parts[1:4]]
            faces.append(idx)
    if not verts or not faces:
        raise ValueError(f"{path}: no mesh data found")
    nv = len(verts)
    for f in faces:
        if any(i < 0 or i >= nv for i in f):
            raise ValueError(f"{path}: face index out of range: {f}")
    if len(uvs) != nv:
        raise ValueError(f"{path}: expected one vt per vertex ({nv}), got {len(uvs)}")
    texture_path = path.with_suffix(".png")
    if texture_path.exists():
        texture = imgio.load_image(texture_path, dtype=dtype)
    else:
        texture = torch.ones(DEFAULT_TEXTURE_SIZE, DEFAULT_TEXTURE_SIZE, 3, dtype=dtype)
    base = torch.tensor(verts, dtype=dtype)
    return TexturedMesh(
        prototype=prototype,
        base_vertices=base,
        vertex_offsets=torch.zeros_like(base),
        faces=torch.tensor(faces, dtype=torch.int64),
        uv=torch.tensor(uvs, dtype=dtype),
        texture=texture,
    )
