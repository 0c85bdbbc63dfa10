import hashlib

import numpy as np
import pytest
import torch

from siamrel.crop import crop_search
from siamrel.geometry import BBox, GridSpec
from siamrel.model import ModelConfig, SiamRelationNet
from siamrel.tracker import Tracker, TrackerConfig, select_box

SMALL = ModelConfig(channels=8, widths=(4, 8), rd_hidden=8)


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return SiamRelationNet(SMALL).eval()


def state_hash(state) -> str:
    h = hashlib.sha256()
    for lvl in sorted(state.template.levels):
        h.update(state.template.levels[lvl].numpy().tobytes())
        h.update(state.template.full[lvl].numpy().tobytes())
        h.update(state.template_roi[lvl].numpy().tobytes())
    return h.hexdigest()


def run(model, seq, cfg=None, n=None):
    tr = Tracker(model, cfg or TrackerConfig(topk=8))
    tr.init(seq.frames[0], seq.boxes[0])
    return [tr.update(f)[0] for f in seq.frames[1:n]]


def test_init_twice_bit_identical(model, tiny_dataset):
    seq = tiny_dataset[0]
    a = Tracker(model).init(seq.frames[0], seq.boxes[0])
    b = Tracker(model).init(seq.frames[0], seq.boxes[0])
    assert state_hash(a) == state_hash(b)
    assert a.frame_index == 1
    for lvl, roi in a.template_roi.items():
        assert roi.shape == (SMALL.channels, 7, 7)


def test_init_rejects_degenerate_box(model, tiny_dataset):
    with pytest.raises(Exception):
        Tracker(model).init(tiny_dataset[0].frames[0], BBox(5, 5, 5, 9))


def test_update_before_init(model, tiny_dataset):
    with pytest.raises(RuntimeError):
        Tracker(model).update(tiny_dataset[0].frames[0])


def test_update_keeps_template_cache(model, tiny_dataset):
    seq = tiny_dataset[0]
    tr = Tracker(model, TrackerConfig(topk=8))
    st = tr.init(seq.frames[0], seq.boxes[0])
    before = state_hash(st)
    for f in seq.frames[1:5]:
        box, conf, diag = tr.update(f)
        assert np.isfinite([box.x0, box.y0, box.x1, box.y1]).all()
        assert box.w > 0 and box.h > 0
        assert 0.0 <= conf <= 1.0
    assert state_hash(st) == before
    assert st.frame_index == 5
    assert set(st.diagnostics[0]) == {"frame", "argmax", "score_pre", "score_post", "matching_at_argmax",
                                      "degenerate"}
    assert diag["matching_map"].shape == (25, 25) and diag["cls_map"].shape == (25, 25)


def test_tracking_deterministic(model, tiny_dataset):
    seq = tiny_dataset[1]
    assert run(model, seq, n=6) == run(model, seq, n=6)


@pytest.mark.parametrize("mode", ["topk", "all"])
def test_matching_modes_run(model, tiny_dataset, mode):
    boxes = run(model, tiny_dataset[2], TrackerConfig(matching_mode=mode, topk=4), n=3)
    assert len(boxes) == 2


def test_ablate_no_rd_matches_rd_free_model(tiny_dataset):
    torch.manual_seed(3)
    with_rd = SiamRelationNet(SMALL).eval()
    no_rd = SiamRelationNet(ModelConfig(channels=8, widths=(4, 8), use_rd=False)).eval()
    no_rd.load_state_dict({k: v for k, v in with_rd.state_dict().items() if not k.startswith("rd.")})
    seq = tiny_dataset[0]
    a = run(with_rd, seq, TrackerConfig(ablate_no_rd=True), n=5)
    b = run(no_rd, seq, TrackerConfig(), n=5)
    assert a == b


def _patch(frame_box=BBox.from_center(127.5, 127.5, 64, 64)):
    frame = np.zeros((255 * 2, 255 * 2, 3), np.uint8)
    return crop_search(frame, frame_box)


def test_select_box_argmax_without_window():
    grid = GridSpec()
    logits = torch.zeros(2, 25, 25)
    logits[1, 3, 20] = 5.0
    reg = torch.full((4, 25, 25), 10.0)
    patch = _patch()
    _, loc, prob = select_box(logits, reg, grid, BBox.from_center(127.5, 127.5, 64, 64), patch,
                              window_influence=0.0)
    assert loc == (3, 20)
    assert prob == pytest.approx(torch.softmax(logits[:, 3, 20], 0)[1].item())


def test_select_box_uniform_prefers_center():
    grid = GridSpec()
    patch = _patch()
    _, loc, _ = select_box(torch.zeros(2, 25, 25), torch.full((4, 25, 25), 10.0), grid,
                           BBox.from_center(127.5, 127.5, 64, 64), patch)
    assert loc == (12, 12)


def test_select_box_full_size_update():
    grid = GridSpec()
    prev = BBox.from_center(127.5, 127.5, 64, 64)
    patch = _patch(prev)
    reg = torch.full((4, 25, 25), 10.0)
    box, loc, _ = select_box(torch.zeros(2, 25, 25), reg, grid, prev, patch, size_lr=1.0)
    expected = patch.box_to_frame(BBox.from_center(127.5, 127.5, 20.0, 20.0))
    assert box.w == pytest.approx(expected.w) and box.h == pytest.approx(expected.h)
    assert box.cx == pytest.approx(expected.cx) and box.cy == pytest.approx(expected.cy)
    still, _, _ = select_box(torch.zeros(2, 25, 25), reg, grid, prev, patch, size_lr=0.0)
    assert still.w == pytest.approx(64) and still.h == pytest.approx(64)
