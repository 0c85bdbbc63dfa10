import numpy as np
import pytest
import torch

from siamrel.crop import context_size, crop_search, crop_template
from siamrel.features import (FEATURE_OFFSET, Backbone, CorrelationHead, depthwise_xcorr, extract_pyramid,
                              patch_tensor, patch_to_feature)
from siamrel.geometry import BBox


def naive_xcorr(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    c, h, w = x.shape
    _, kh, kw = k.shape
    out = np.zeros((c, h - kh + 1, w - kw + 1))
    for ch in range(c):
        for i in range(h - kh + 1):
            for j in range(w - kw + 1):
                out[ch, i, j] = (x[ch, i:i + kh, j:j + kw] * k[ch]).sum()
    return out


@pytest.fixture
def frame():
    rng = np.random.default_rng(0)
    return (rng.random((480, 640, 3)) * 255).astype(np.uint8)


def test_context_size_example():
    assert context_size(BBox(100, 100, 150, 150)) == pytest.approx(100.0)


def test_crop_scales(frame):
    box = BBox(100, 100, 150, 150)
    z = crop_template(frame, box)
    x = crop_search(frame, box)
    assert z.image.shape == (127, 127, 3) and x.image.shape == (255, 255, 3)
    assert z.scale == pytest.approx(1.27)
    assert 255 / x.scale == pytest.approx(100 * 255 / 127)
    assert 255 / x.scale == pytest.approx(200.79, abs=0.01)


def test_identity_crop_when_side_is_127():
    rng = np.random.default_rng(1)
    frame = rng.random((300, 300, 3)).astype(np.float32)
    # w = h = 63.5 gives s_z = 127
    box = BBox.from_center(150.5, 150.5, 63.5, 63.5)
    z = crop_template(frame, box)
    assert z.scale == pytest.approx(1.0)
    x0, y0 = int(z.origin[0]), int(z.origin[1])
    assert z.origin == (x0, y0)
    assert np.allclose(z.image, frame[y0:y0 + 127, x0:x0 + 127], atol=1e-5)


def test_affine_round_trip(frame):
    box = BBox(200.3, 150.7, 260.1, 230.9)
    x = crop_search(frame, box)
    cx, cy = x.to_frame(127.5, 127.5)
    assert abs(cx - box.cx) < 1e-4 and abs(cy - box.cy) < 1e-4
    for px, py in [(0.0, 0.0), (17.3, 201.9), (255.0, 3.5)]:
        fx, fy = x.to_frame(px, py)
        back = x.to_patch(fx, fy)
        assert abs(back[0] - px) < 1e-4 and abs(back[1] - py) < 1e-4


def test_corner_padding_uses_channel_mean(frame):
    z = crop_template(frame, BBox(0, 0, 40, 40))
    mean = (frame.reshape(-1, 3).astype(np.float64) / 255).mean(axis=0)
    assert np.allclose(z.image[0, 0], mean, atol=1e-5)


def test_box_outside_frame_gives_mean_patch(frame):
    x = crop_search(frame, BBox(5000, 5000, 5040, 5040))
    mean = (frame.reshape(-1, 3).astype(np.float64) / 255).mean(axis=0)
    assert x.out_of_frame
    assert np.allclose(x.image, mean[None, None], atol=1e-5)


def test_empty_frame_rejected():
    with pytest.raises(ValueError):
        crop_template(np.zeros((0, 0, 3), np.uint8), BBox(0, 0, 1, 1))


@pytest.mark.parametrize("seed", range(20))
def test_xcorr_matches_triple_loop(seed):
    rng = np.random.default_rng(seed)
    c = int(rng.integers(1, 5))
    kh, kw = int(rng.integers(1, 6)), int(rng.integers(1, 6))
    h, w = kh + int(rng.integers(0, 9)), kw + int(rng.integers(0, 9))
    x = rng.standard_normal((c, h, w))
    k = rng.standard_normal((c, kh, kw))
    got = depthwise_xcorr(torch.from_numpy(x), torch.from_numpy(k)).numpy()
    assert np.abs(got - naive_xcorr(x, k)).max() < 1e-5


def test_xcorr_identities():
    torch.manual_seed(0)
    x = torch.randn(3, 31, 31, dtype=torch.float64)
    y = torch.randn(3, 31, 31, dtype=torch.float64)
    k = torch.randn(3, 7, 7, dtype=torch.float64)
    assert depthwise_xcorr(x, torch.zeros_like(k)).abs().max() == 0
    impulse = torch.zeros_like(k)
    impulse[:, 3, 3] = 1
    assert torch.equal(depthwise_xcorr(x, impulse), x[:, 3:28, 3:28])
    assert torch.allclose(depthwise_xcorr(x + y, k), depthwise_xcorr(x, k) + depthwise_xcorr(y, k), atol=1e-5)
    assert depthwise_xcorr(x, k).shape == (3, 25, 25)


def test_xcorr_shape_mismatch():
    with pytest.raises(ValueError):
        depthwise_xcorr(torch.zeros(3, 31, 31), torch.zeros(4, 7, 7))


def test_xcorr_gradcheck():
    torch.manual_seed(1)
    x = torch.randn(2, 9, 9, dtype=torch.float64, requires_grad=True)
    k = torch.randn(2, 3, 3, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(depthwise_xcorr, (x, k), rtol=1e-4)


def test_exp_scaling_gradcheck():
    head = CorrelationHead(channels=8).double()
    torch.manual_seed(2)
    raw = torch.randn(1, 4, 5, 5, dtype=torch.float64, requires_grad=True)

    def scaled(r):
        return head.stride * torch.exp(r.clamp(-8.0, 8.0))

    assert torch.autograd.gradcheck(scaled, (raw,), rtol=1e-4)


@pytest.fixture(scope="module")
def backbone():
    torch.manual_seed(0)
    return Backbone(channels=16).eval()


def test_pyramid_shapes(backbone):
    z = extract_pyramid(backbone, torch.rand(2, 3, 127, 127), "template")
    x = extract_pyramid(backbone, torch.rand(2, 3, 255, 255), "search")
    for lvl in (3, 4, 5):
        assert z.levels[lvl].shape == (2, 16, 7, 7)
        assert z.full[lvl].shape == (2, 16, 15, 15)
        assert x.levels[lvl].shape == (2, 16, 31, 31)


def test_pyramid_rejects_wrong_size(backbone):
    with pytest.raises(ValueError):
        extract_pyramid(backbone, torch.rand(1, 3, 128, 128), "template")
    with pytest.raises(ValueError):
        extract_pyramid(backbone, torch.rand(1, 3, 255, 255), "template")


def test_zero_input_finite_and_deterministic(backbone):
    zeros = torch.zeros(1, 3, 255, 255)
    a = extract_pyramid(backbone, zeros, "search")
    b = extract_pyramid(backbone, zeros, "search")
    for lvl in (3, 4, 5):
        assert torch.isfinite(a.levels[lvl]).all()
        assert torch.equal(a.levels[lvl], b.levels[lvl])


def test_feature_coordinate_mapping():
    # feature cell j sits at patch coordinate 8 j + 7.5; the template crop starts at cell 4
    assert patch_to_feature(FEATURE_OFFSET) == 0
    assert patch_to_feature(127.5) == 15.0
    assert patch_to_feature(63.5) == 7.0


def test_head_outputs(backbone):
    head = CorrelationHead(channels=16)
    z = extract_pyramid(backbone, torch.rand(2, 3, 127, 127), "template")
    x = extract_pyramid(backbone, torch.rand(2, 3, 255, 255), "search")
    out = head(z, x)
    assert out.cls_corr.shape == (2, 16, 25, 25)
    assert out.reg.shape == (2, 4, 25, 25)
    assert (out.reg > 0).all()
    assert torch.allclose(out.cls_weights.sum(), torch.tensor(1.0))
    mean = sum(out.cls_levels.values()) / 3
    assert torch.allclose(out.cls_corr, mean, atol=1e-6)
    with pytest.raises(ValueError):
        head(x, z)


def test_single_level_head(backbone):
    head = CorrelationHead(channels=16, levels=(4,))
    z = extract_pyramid(backbone, torch.rand(1, 3, 127, 127), "template", (4,))
    x = extract_pyramid(backbone, torch.rand(1, 3, 255, 255), "search", (4,))
    out = head(z, x)
    assert set(out.cls_levels) == {4}
    assert torch.allclose(out.cls_corr, out.cls_levels[4])


def test_patch_tensor_layout(frame):
    p = crop_template(frame, BBox(100, 100, 150, 150))
    t = patch_tensor([p, p])
    assert t.shape == (2, 3, 127, 127) and t.dtype == torch.float32
    assert np.allclose(t[0, 1].numpy(), p.image[..., 1])
