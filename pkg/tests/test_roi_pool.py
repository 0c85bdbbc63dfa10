import numpy as np
import pytest
import torch
import torch.nn.functional as F

from siamrel.roi_pool import prroi_pool, prroi_pool_one


def shifted_avgpool_oracle(feat: torch.Tensor, x0: int, y0: int, k: int, out: int = 7) -> torch.Tensor:
    """Exact bin averages for an integer-aligned box spanning ``out * k`` cells.

    Along one axis the bilinear interpolant is piecewise linear between cell
    centres, so its mean over ``[a, a + k]`` is the trapezoid rule: the average
    of the k-window means starting at ``a`` and at ``a + 1``.  In 2-D that is
    the mean of four unit-shifted ``k x k`` average pools.
    """
    padded = F.pad(feat, (0, 1, 0, 1))
    acc = 0
    for dy in (0, 1):
        for dx in (0, 1):
            win = padded[:, y0 + dy:y0 + dy + out * k, x0 + dx:x0 + dx + out * k]
            acc = acc + F.avg_pool2d(win.unsqueeze(0), k)[0]
    return acc / 4


@pytest.mark.parametrize("box", [(0.0, 0.0, 14.0, 14.0), (2.3, 1.1, 9.7, 4.2), (-3.0, -2.0, 20.0, 18.0)])
def test_constant_field(box):
    v = 1.75
    feat = torch.full((3, 31, 31), v, dtype=torch.float64)
    inside = box[0] >= 0 and box[1] >= 0 and box[2] <= 30 and box[3] <= 30
    out = prroi_pool(feat, torch.tensor([box], dtype=torch.float64))
    assert out.shape == (1, 3, 7, 7)
    if inside:
        assert torch.allclose(out, torch.full_like(out, v), atol=1e-5)
    else:
        # bins reaching outside the map see zeros
        assert out.max() <= v + 1e-9 and out.min() < v


@pytest.mark.parametrize("k, x0, y0", [(1, 0, 0), (1, 5, 3), (2, 1, 2), (3, 4, 0), (4, 2, 2)])
def test_integer_aligned_matches_avgpool(k, x0, y0):
    torch.manual_seed(k)
    feat = torch.rand(4, 31, 31, dtype=torch.float64)
    box = torch.tensor([[x0, y0, x0 + 7 * k, y0 + 7 * k]], dtype=torch.float64)
    got = prroi_pool(feat, box)[0]
    assert (got - shifted_avgpool_oracle(feat, x0, y0, k)).abs().max() < 1e-5


def test_box_coordinate_gradient():
    torch.manual_seed(0)
    feat = torch.rand(2, 15, 15, dtype=torch.float64)
    boxes = torch.tensor([[1.37, 2.21, 9.83, 8.59], [0.41, 0.77, 5.13, 12.29]], dtype=torch.float64,
                         requires_grad=True)
    assert torch.autograd.gradcheck(lambda b: prroi_pool(feat, b), (boxes,), eps=1e-3, atol=1e-6, rtol=1e-3)


def test_feature_gradient_and_linearity():
    torch.manual_seed(1)
    a = torch.rand(3, 9, 9, dtype=torch.float64, requires_grad=True)
    b = torch.rand(3, 9, 9, dtype=torch.float64)
    box = torch.tensor([[0.5, 1.5, 6.2, 7.9]], dtype=torch.float64)
    assert torch.autograd.gradcheck(lambda f: prroi_pool(f, box), (a,))
    lhs = prroi_pool(2 * a + b, box)
    rhs = 2 * prroi_pool(a, box) + prroi_pool(b, box)
    assert torch.allclose(lhs, rhs, atol=1e-12)


def test_translation_equivariance():
    torch.manual_seed(2)
    feat = torch.rand(2, 31, 31, dtype=torch.float64)
    box = torch.tensor([[3.3, 4.6, 12.1, 13.4]], dtype=torch.float64)
    shifted = torch.roll(feat, shifts=(2, 5), dims=(1, 2))
    moved = box + torch.tensor([5.0, 2.0, 5.0, 2.0], dtype=torch.float64)
    assert torch.allclose(prroi_pool(feat, box), prroi_pool(shifted, moved), atol=1e-12)


def test_continuity_sweep():
    torch.manual_seed(3)
    feat = torch.rand(2, 20, 20, dtype=torch.float64)
    outs = []
    for t in np.linspace(4.0, 5.0, 101):
        outs.append(prroi_pool(feat, torch.tensor([[t, 2.0, t + 7.5, 9.5]], dtype=torch.float64)))
    steps = torch.stack([(b - a).abs().max() for a, b in zip(outs, outs[1:])])
    # per-step change is bounded by a Lipschitz constant times the step
    assert steps.max() < 0.05


def test_batched_matches_single():
    torch.manual_seed(4)
    feat = torch.rand(2, 3, 15, 15)
    boxes = torch.rand(2, 5, 2) * 6
    boxes = torch.cat([boxes, boxes + 1 + torch.rand(2, 5, 2) * 6], dim=-1)
    batched = prroi_pool(feat, boxes)
    for b in range(2):
        assert torch.allclose(batched[b], prroi_pool(feat[b], boxes[b]), atol=1e-6)


def test_zero_area_rejected():
    with pytest.raises(ValueError):
        prroi_pool(torch.rand(1, 5, 5), torch.tensor([[1.0, 1.0, 1.0, 3.0]]))


def test_roi_feature_record():
    feat = torch.rand(4, 15, 15)
    roi = prroi_pool_one(feat, [1, 2, 8, 9])
    assert roi.features.shape == (4, 7, 7)
    assert torch.isfinite(roi.features).all()
    assert roi.box.tolist() == [1, 2, 8, 9]


def test_sampled_fallback_close_on_smooth_field():
    ys, xs = torch.meshgrid(torch.arange(15.0), torch.arange(15.0), indexing="ij")
    feat = (0.3 * xs + 0.1 * ys)[None].double()
    box = torch.tensor([[1.2, 2.4, 10.6, 11.3]], dtype=torch.float64)
    exact = prroi_pool(feat, box)
    approx = prroi_pool(feat, box, sampled=True)
    assert torch.allclose(exact, approx, atol=1e-9)
