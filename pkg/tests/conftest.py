import pytest
import torch

from blurfit import geometry as G
from blurfit import renderer as R


@pytest.fixture(autouse=True)
def _fixed_seed():
    torch.manual_seed(0)


@pytest.fixture
def sphere_low():
    return G.make_prototype(G.Prototype.SPHERE_LOW, texture_size=32)


@pytest.fixture
def camera64():
    return R.default_camera(64)


@pytest.fixture
def identity_pose():
    return G.Pose(
        rotation=torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=torch.float64),
        translation=torch.tensor([0.0, 0.0, 6.0], dtype=torch.float64),
    )


def make_textured_sphere(texture_size=32, seed=0, dtype=torch.float64):
    """SphereLow with a smooth random texture, for render tests."""
    gen = torch.Generator().manual_seed(seed)
    mesh = G.make_prototype(G.Prototype.SPHERE_LOW, texture_size=texture_size,
                            dtype=dtype)
    low = torch.rand(6, 6, 3, generator=gen, dtype=dtype)
    up = torch.nn.functional.interpolate(
        low.permute(2, 0, 1).unsqueeze(0), size=(texture_size, texture_size),
        mode="bilinear", align_corners=True,
    )
    mesh.texture = up[0].permute(1, 2, 0).contiguous()
    return mesh
