import numpy as np
import pytest
import torch
from PIL import Image

from blurfit import masks as MK
from blurfit import imgio


def make_track(n=3, s=8, size=16, seed=0):
    gen = torch.Generator().manual_seed(seed)
    data = torch.rand(n, s, size, size, generator=gen, dtype=torch.float64)
    return MK.MaskTrack(masks=data, source="external")


def moving_blob_track(n=3, s=8, size=32, step=1.5, width=6):
    """Masks of a blob moving left to right across frames and sub-frames."""
    masks = torch.zeros(n, s, size, size, dtype=torch.float64)
    pos = 4.0
    for i in range(n):
        for j in range(s):
            x = int(round(pos))
            masks[i, j, 10 : 10 + width, x : x + width] = 1.0
            pos += step
    return MK.MaskTrack(masks=masks, source="external")


def test_track_roundtrip(tmp_path):
    track = make_track()
    MK.save_mask_track(tmp_path, track)
    assert len(list(tmp_path.glob("*.png"))) == 24
    back = MK.load_mask_track(tmp_path)
    assert back.n_frames == 3 and back.subframes == 8
    assert float((back.masks - track.masks).abs().max()) <= 1.0 / 255


def test_track_missing_file_named(tmp_path):
    track = make_track()
    MK.save_mask_track(tmp_path, track)
    (tmp_path / "frame_2_sub_5.png").unlink()
    with pytest.raises(FileNotFoundError, match="frame_2_sub_5.png"):
        MK.load_mask_track(tmp_path)


def test_track_16bit_png_scaling(tmp_path):
    arr = (np.linspace(0, 1, 64, dtype=np.float64).reshape(8, 8) * 65535)
    img = Image.fromarray(arr.astype(np.uint16))
    for n in range(1, 3):
        for s in range(1, 3):
            img.save(tmp_path / f"frame_{n}_sub_{s}.png")
    track = MK.load_mask_track(tmp_path)
    expected = torch.from_numpy(arr.astype(np.uint16).astype(np.float64) / 65535)
    assert float((track.masks[0, 0] - expected).abs().max()) < 1e-9


def test_track_inconsistent_dimensions(tmp_path):
    imgio.save_gray(tmp_path / "frame_1_sub_1.png", torch.zeros(8, 8))
    imgio.save_gray(tmp_path / "frame_1_sub_2.png", torch.zeros(9, 8))
    with pytest.raises(ValueError, match="inconsistent"):
        MK.load_mask_track(tmp_path)


def test_background_subtraction_zero_when_video_is_background():
    bg = torch.rand(16, 16, 3, dtype=torch.float64)
    frames = bg.expand(3, 16, 16, 3).contiguous()
    track = MK.background_subtraction_masks(frames, bg, threshold=0.05)
    assert track.subframes == 1
    assert float(track.masks.abs().max()) == 0.0


def test_background_subtraction_threshold_one_all_zero():
    gen = torch.Generator().manual_seed(4)
    bg = torch.rand(16, 16, 3, generator=gen, dtype=torch.float64)
    frames = torch.rand(3, 16, 16, 3, generator=gen, dtype=torch.float64)
    track = MK.background_subtraction_masks(frames, bg, threshold=1.0)
    assert float(track.masks.abs().max()) == 0.0


def test_background_subtraction_recovers_contrasting_support():
    bg = torch.full((32, 32, 3), 0.1, dtype=torch.float64)
    frames = bg.expand(2, 32, 32, 3).clone()
    frames[0, 8:20, 8:20, :] = 0.9
    frames[1, 8:20, 14:26, :] = 0.9
    support = torch.zeros(2, 32, 32, dtype=torch.float64)
    support[0, 8:20, 8:20] = 1.0
    support[1, 8:20, 14:26] = 1.0
    track = MK.background_subtraction_masks(frames, bg, threshold=0.05)
    for n in range(2):
        inter = torch.minimum(track.masks[n, 0], support[n]).sum()
        union = torch.maximum(track.masks[n, 0], support[n]).sum()
        assert float(inter / union) > 0.8
    assert float(track.masks.min()) >= 0.0 and float(track.masks.max()) <= 1.0


def test_synchronize_consistent_track_unchanged():
    track = moving_blob_track()
    out = MK.synchronize_direction(track)
    assert torch.equal(out.masks, track.masks)


def test_synchronize_restores_reversed_frame():
    track = moving_blob_track()
    broken = track.masks.clone()
    broken[1] = broken[1].flip(0)
    out = MK.synchronize_direction(MK.MaskTrack(broken, "external"))
    assert torch.equal(out.masks, track.masks)


def test_synchronize_single_frame_identity():
    track = MK.MaskTrack(torch.rand(1, 8, 8, 8, dtype=torch.float64), "external")
    out = MK.synchronize_direction(track)
    assert torch.equal(out.masks, track.masks)


def test_synchronize_idempotent():
    track = moving_blob_track()
    broken = track.masks.clone()
    broken[2] = broken[2].flip(0)
    once = MK.synchronize_direction(MK.MaskTrack(broken, "external"))
    twice = MK.synchronize_direction(once)
    assert torch.equal(once.masks, twice.masks)


def test_synchronize_locally_optimal():
    # after synchronization, each frame's orientation beats its reverse
    track = moving_blob_track(n=4)
    broken = track.masks.clone()
    broken[1] = broken[1].flip(0)
    broken[3] = broken[3].flip(0)
    out = MK.synchronize_direction(MK.MaskTrack(broken, "external")).masks
    for n in range(1, 4):
        keep = float((out[n - 1, -1] - out[n, 0]).abs().sum())
        rev = float((out[n - 1, -1] - out[n, -1]).abs().sum())
        assert keep <= rev
