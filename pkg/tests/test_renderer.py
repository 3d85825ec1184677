import math

import pytest
import torch

from blurfit import geometry as G
from blurfit import renderer as R
from conftest import make_textured_sphere


def _pose(tx=0.0, ty=0.0, tz=6.0, q=(1.0, 0.0, 0.0, 0.0)):
    return G.Pose(torch.tensor(q, dtype=torch.float64),
                  torch.tensor([tx, ty, tz], dtype=torch.float64))


def test_offscreen_silhouette_zero(sphere_low, camera64):
    out = R.rasterize(sphere_low, _pose(tx=30.0), camera64)
    assert float(out.silhouette.abs().max()) == 0.0
    assert float(out.appearance.abs().max()) == 0.0


def test_centered_sphere_center_coverage(sphere_low, camera64):
    out = R.rasterize(sphere_low, _pose(), camera64)
    h, w = camera64.height, camera64.width
    assert float(out.silhouette[h // 2, w // 2]) > 0.99
    # white texture: appearance at the center equals the silhouette value
    assert torch.allclose(out.appearance[h // 2, w // 2],
                          out.silhouette[h // 2, w // 2].expand(3))


def test_silhouette_area_matches_projected_disk():
    # soft-boundary inflation vanishes as softness decreases; at 1e-6 the
    # summed area agrees with the analytic pinhole disk projection
    mesh = G.make_prototype(G.Prototype.SPHERE_LOW, texture_size=8)
    cam = R.default_camera(128)
    z = 6.0
    out = R.rasterize(mesh, _pose(tz=z), cam, softness=1e-6)
    area = float(out.silhouette.sum())
    analytic = math.pi * (cam.focal * 1.0 / z) ** 2
    assert abs(area - analytic) / analytic < 0.03


def test_output_ranges_and_premultiplication(camera64):
    mesh = make_textured_sphere()
    out = R.rasterize(mesh, _pose(tx=0.4, ty=-0.3), camera64)
    assert float(out.silhouette.min()) >= 0.0
    assert float(out.silhouette.max()) <= 1.0
    assert float(out.appearance.min()) >= 0.0
    assert torch.all(out.appearance <= out.silhouette.unsqueeze(-1) + 1e-9)


def test_near_plane_raises(sphere_low, camera64):
    with pytest.raises(ValueError, match="near plane"):
        R.rasterize(sphere_low, _pose(tz=0.5), camera64)


def test_texture_gradient_finite_difference(camera64):
    mesh = make_textured_sphere(texture_size=16)
    mesh.texture.requires_grad_(True)

    def loss_fn():
        out = R.rasterize(mesh, _pose(), camera64, softness=1e-4)
        return out.appearance.sum()

    loss = loss_fn()
    (grad,) = torch.autograd.grad(loss, [mesh.texture])
    # check the largest-gradient texels against central differences
    flat = grad.abs().reshape(-1)
    idx = torch.argsort(flat, descending=True)[:5]
    h = 1e-2
    for i in idx.tolist():
        with torch.no_grad():
            orig = mesh.texture.reshape(-1)[i].item()
            mesh.texture.reshape(-1)[i] = orig + h
            up = float(loss_fn())
            mesh.texture.reshape(-1)[i] = orig - h
            dn = float(loss_fn())
            mesh.texture.reshape(-1)[i] = orig
        fd = (up - dn) / (2 * h)
        an = float(grad.reshape(-1)[i])
        assert abs(an - fd) / max(abs(fd), 1e-9) < 1e-3


def test_silhouette_independent_of_texture(camera64):
    mesh = make_textured_sphere(texture_size=16)
    mesh.texture.requires_grad_(True)
    out = R.rasterize(mesh, _pose(), camera64)
    grads = R.render_gradients(out.silhouette.sum(), [mesh.texture])
    assert float(grads[0].abs().max()) == 0.0


def test_translation_gradient_points_toward_target(camera64):
    mesh = make_textured_sphere()
    gen = torch.Generator().manual_seed(7)
    hits = 0
    # offsets within the attraction basin (a few pixels) of the L2 landscape
    for _ in range(20):
        offset = torch.empty(2, dtype=torch.float64).uniform_(-0.15, 0.15, generator=gen)
        target_pose = _pose(tx=float(offset[0]), ty=float(offset[1]))
        with torch.no_grad():
            target = R.rasterize(mesh, target_pose, camera64).appearance
        tr = torch.tensor([0.0, 0.0, 6.0], dtype=torch.float64, requires_grad=True)
        q = torch.tensor([1.0, 0, 0, 0], dtype=torch.float64)
        app, sil = R.render_poses(mesh, q.unsqueeze(0), tr.unsqueeze(0), camera64)
        loss = ((app[0] - target) ** 2).sum()
        (g,) = torch.autograd.grad(loss, [tr])
        true_dir = torch.tensor([float(offset[0]), float(offset[1]), 0.0],
                                dtype=torch.float64)
        if float((-g[:2] * true_dir[:2]).sum()) > 0:
            hits += 1
    assert hits == 20


def test_silhouette_monotone_convergence_to_hard(camera64):
    mesh = G.make_prototype(G.Prototype.SPHERE_LOW, texture_size=8)
    pose = _pose(tx=0.2)
    with torch.no_grad():
        hard = (R.rasterize(mesh, pose, camera64, softness=1e-9).silhouette
                > 0.5).to(torch.float64)
        max_devs, mean_devs = [], []
        for s in (1e-2, 1e-3, 1e-4, 1e-5):
            sil = R.rasterize(mesh, pose, camera64, softness=s).silhouette
            max_devs.append(float((sil - hard).abs().max()))
            mean_devs.append(float((sil - hard).abs().mean()))
    assert all(max_devs[i] > max_devs[i + 1] for i in range(len(max_devs) - 1))
    assert all(mean_devs[i] > mean_devs[i + 1] for i in range(len(mean_devs) - 1))
    # pointwise convergence almost everywhere: only a thin boundary ring at
    # the smallest softness still deviates
    assert mean_devs[-1] < 0.01


def test_translation_equivariance_integer_pixels():
    mesh = G.make_prototype(G.Prototype.SPHERE_LOW, texture_size=8)
    cam = R.default_camera(96)
    z = 6.0
    with torch.no_grad():
        base = R.rasterize(mesh, _pose(tz=z), cam, softness=1e-5).silhouette
        for k in (3, 7):
            dx = k * z / cam.focal  # shifts projection by exactly k pixels
            moved = R.rasterize(mesh, _pose(tx=dx, tz=z), cam,
                                softness=1e-5).silhouette
            a = (base > 0.5).roll(k, dims=1)
            b = moved > 0.5
            inter = (a & b).sum()
            union = (a | b).sum()
            assert float(inter) / float(union) > 0.98


def test_render_gradients_zero_for_unused(camera64):
    mesh = make_textured_sphere(texture_size=8)
    unused = torch.zeros(3, dtype=torch.float64, requires_grad=True)
    out = R.rasterize(mesh, _pose(), camera64)
    grads = R.render_gradients(out.silhouette.sum(), [unused])
    assert torch.equal(grads[0], torch.zeros(3, dtype=torch.float64))


def test_camera_validation():
    with pytest.raises(ValueError):
        R.Camera(width=64, height=64, focal=-1.0, cx=32, cy=32)
    with pytest.raises(ValueError):
        R.Camera(width=64, height=64, focal=64.0, cx=200, cy=32)
