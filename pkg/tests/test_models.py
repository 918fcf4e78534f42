"""Detector model contracts: dense outputs, post-processing, gradients, checkpoints."""

import numpy as np
import pytest
import torch

from detinvert.data import DatasetSpec, generate_scene, image_to_tensor
from detinvert.geometry import (
    Box,
    Detection,
    Layout,
    decode_boxes,
    encode_boxes,
    layouts_equal_exact,
    pairwise_iou,
)
from detinvert.models import (
    PostprocessConfig,
    SingleStageRaw,
    TwoStageRaw,
    check_nms_feasible,
    load_checkpoint,
    make_detector,
    paste_roi_mask,
    raw_from_layout,
    save_checkpoint,
)

SMALL = dict(image_size=(64, 64))


@pytest.fixture(scope="module")
def single():
    return make_detector("single_stage", seed=3)


@pytest.fixture(scope="module")
def two():
    return make_detector("two_stage", seed=3)


@pytest.fixture(scope="module")
def scene_image():
    rec = generate_scene(DatasetSpec(), 11)
    return image_to_tensor(rec.image), rec.layout()


# ---------------------------------------------------------------------------
# shapes and basic invariants


def test_single_raw_shapes(single, scene_image):
    raw = single.forward_raw(scene_image[0])
    n = len(single.anchor_grid)
    assert n == 960
    assert raw.cls_logits.shape == (n, 8)
    assert raw.reg_deltas.shape == (n, 4)
    assert torch.equal(raw.anchors, single.anchor_grid.boxes.float())


def test_two_raw_shapes(two, scene_image):
    raw = two.forward_raw(scene_image[0])
    n1 = len(two.anchor_grid)
    assert n1 == 768
    assert raw.rpn_logits.shape == (n1,)
    assert raw.rpn_deltas.shape == (n1, 4)
    r = raw.proposals.shape[0]
    assert 0 < r <= two.config.post_nms_top_n
    assert raw.cls_logits.shape == (r, 9)
    assert raw.reg_deltas.shape == (r, 4)
    assert raw.mask_logits.shape == (r, 1, 28, 28)
    assert two.forward_raw(scene_image[0], with_masks=False).mask_logits is None


def test_wrong_image_shape_raises(single, two):
    for model in (single, two):
        with pytest.raises(ValueError):
            model.forward_raw(torch.zeros(3, 64, 64))
        with pytest.raises(ValueError):
            model.forward_raw(torch.zeros(1, 3, 128, 128))


def test_forward_deterministic(single, two, scene_image):
    img = scene_image[0]
    for model in (single, two):
        a = model.forward_raw(img)
        b = model.forward_raw(img)
        assert torch.equal(a.cls_logits, b.cls_logits)
        assert torch.equal(a.reg_deltas, b.reg_deltas)


def test_make_detector_seeding():
    a = make_detector("single_stage", seed=9, **SMALL)
    b = make_detector("single_stage", seed=9, **SMALL)
    c = make_detector("single_stage", seed=10, **SMALL)
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)
    assert any(
        not torch.equal(va, vc) for va, vc in zip(a.state_dict().values(), c.state_dict().values())
    )
    with pytest.raises(ValueError):
        make_detector("three_stage")


def test_flat_row_order_matches_anchor_grid(single):
    grid = single.anchor_grid
    # encode (level, iy, ix, scale) into distinct values and check the
    # concatenated flattened rows line up with the grid's global indices
    a = single._anchors_per_cell
    flats = []
    for level, (h, w) in enumerate(((16, 16), (8, 8))):
        feat = torch.arange(h * w, dtype=torch.float32).view(1, 1, h, w).repeat(1, a, 1, 1)
        for s in range(a):
            feat[0, s] += 1000.0 * s
        feat += 100000.0 * level
        flats.append(single._flatten(feat, 1)[0, :, 0])
    flat = torch.cat(flats)
    assert flat.shape[0] == len(grid)
    for level, (h, w) in enumerate(((16, 16), (8, 8))):
        for iy, ix, s in ((0, 0, 0), (2, 5, 1), (h - 1, w - 1, a - 1)):
            idx = grid.index_of(level, iy, ix, s)
            assert flat[idx].item() == pytest.approx(iy * w + ix + 1000.0 * s + 100000.0 * level)


def test_degenerate_inputs_finite(single, two):
    for img in (torch.zeros(3, 128, 128), torch.full((3, 128, 128), 0.5)):
        for model in (single, two):
            layout = model.detect(img)
            assert all(np.isfinite(d.score) for d in layout)


def test_nan_image_raises(single, two):
    img = torch.zeros(3, 128, 128)
    img[0, 5, 5] = float("nan")
    for model in (single, two):
        with pytest.raises(RuntimeError):
            model.forward_raw(img)


# ---------------------------------------------------------------------------
# post-processing semantics on hand-built dense outputs


def _hand_raw(model, hot):
    """All-background raw except (row, category, logit, deltas) entries."""
    n = len(model.anchor_grid)
    cls = torch.full((n, model.config.num_categories), -9.0)
    reg = torch.zeros(n, 4)
    for row, cat, logit, deltas in hot:
        cls[row, cat] = logit
        reg[row] = torch.tensor(deltas)
    return SingleStageRaw(cls, reg, model.anchor_grid.boxes.float())


def test_single_confident_row_becomes_detection(single):
    row = 451
    deltas = (0.1, -0.2, 0.05, 0.15)
    raw = _hand_raw(single, [(row, 4, 2.0, deltas)])
    layout = single.postprocess(raw)
    assert len(layout) == 1
    det = layout[0]
    assert det.category == 4
    assert det.score == pytest.approx(torch.sigmoid(torch.tensor(2.0, dtype=torch.float64)).item(), abs=1e-9)
    anchor = single.anchor_grid.boxes[row : row + 1]
    expect = decode_boxes(torch.tensor([deltas], dtype=torch.float64), anchor)[0]
    assert det.box.to_xyxy() == pytest.approx(expect.tolist(), abs=1e-6)


def test_score_threshold_is_inclusive(single):
    raw = _hand_raw(single, [(100, 0, 0.0, (0, 0, 0, 0)), (500, 1, -1e-4, (0, 0, 0, 0))])
    layout = single.postprocess(raw)
    assert [d.category for d in layout] == [0]
    assert layout[0].score == pytest.approx(0.5)


def test_postprocess_per_class_nms(single):
    # two rows steered onto the same box: same class keeps one, and the
    # survivor is the higher-scoring row
    target = torch.tensor([[40.0, 40.0, 70.0, 76.0]])
    rows = (300, 301)
    hot = []
    for row, logit in zip(rows, (1.0, 2.0)):
        d = encode_boxes(target, single.anchor_grid.boxes[row : row + 1].float())[0]
        hot.append((row, 2, logit, tuple(d.tolist())))
    layout = single.postprocess(_hand_raw(single, hot))
    assert len(layout) == 1
    assert layout[0].score == pytest.approx(torch.sigmoid(torch.tensor(2.0)).item(), abs=1e-6)

    # different classes on the same box both survive
    hot2 = [(rows[0], 2, 1.0, hot[0][3]), (rows[1], 5, 2.0, hot[1][3])]
    layout2 = single.postprocess(_hand_raw(single, hot2))
    assert sorted(d.category for d in layout2) == [2, 5]


def test_postprocess_cap_keeps_highest_scores(single):
    hot = []
    for k, row in enumerate((10, 200, 420, 700, 900)):
        hot.append((row, k % 3, 0.5 + 0.3 * k, (0.0, 0.0, 0.0, 0.0)))
    layout = single.postprocess(_hand_raw(single, hot), max_detections=3)
    assert len(layout) == 3
    scores = [d.score for d in layout]
    assert scores == sorted(scores, reverse=True)
    assert min(scores) > torch.sigmoid(torch.tensor(0.5 + 0.3 * 1)).item()


def test_postprocess_drops_boxes_clipped_to_nothing(single):
    # shove the decoded box fully outside the image; clipping leaves a
    # zero-area sliver that must not surface as a detection
    row = 0
    raw = _hand_raw(single, [(row, 0, 3.0, (-8.0, -8.0, 0.0, 0.0))])
    assert len(single.postprocess(raw)) == 0


def test_postprocess_threshold_override(single):
    raw = _hand_raw(single, [(123, 3, -2.0, (0, 0, 0, 0))])
    assert len(single.postprocess(raw)) == 0
    low = single.postprocess(raw, score_thresh=0.05)
    assert len(low) == 1 and low[0].category == 3


def test_two_stage_postprocess_softmax_scores(two):
    props = torch.tensor([[20.0, 20.0, 50.0, 50.0], [70.0, 60.0, 100.0, 95.0], [5.0, 5.0, 20.0, 20.0]])
    cls = torch.full((3, 9), -4.0)
    cls[0, 1] = 3.0
    cls[1, 6] = 2.5
    cls[2, 8] = 3.0  # background wins row 2
    raw = TwoStageRaw(
        rpn_logits=torch.zeros(len(two.anchor_grid)),
        rpn_deltas=torch.zeros(len(two.anchor_grid), 4),
        anchors=two.anchor_grid.boxes.float(),
        proposals=props,
        cls_logits=cls,
        reg_deltas=torch.zeros(3, 4),
        mask_logits=None,
    )
    layout = two.postprocess(raw)
    assert sorted(d.category for d in layout) == [1, 6]
    probs = torch.softmax(cls.double(), dim=-1)
    by_cat = {d.category: d for d in layout}
    assert by_cat[1].score == pytest.approx(probs[0, 1].item(), abs=1e-12)
    assert by_cat[1].box.to_xyxy() == pytest.approx([20.0, 20.0, 50.0, 50.0])


def test_two_stage_postprocess_masks_cover_box(two):
    props = torch.tensor([[40.0, 40.0, 72.0, 72.0]])
    cls = torch.full((1, 9), -4.0)
    cls[0, 0] = 4.0
    mask_logits = torch.full((1, 1, 28, 28), 5.0)
    raw = TwoStageRaw(
        rpn_logits=torch.zeros(len(two.anchor_grid)),
        rpn_deltas=torch.zeros(len(two.anchor_grid), 4),
        anchors=two.anchor_grid.boxes.float(),
        proposals=props,
        cls_logits=cls,
        reg_deltas=torch.zeros(1, 4),
        mask_logits=mask_logits,
    )
    det = two.postprocess(raw)[0]
    assert det.mask is not None and det.mask.dtype == bool
    inside = det.mask[41:71, 41:71]
    assert inside.mean() > 0.95
    outside = det.mask.copy()
    outside[40:72, 40:72] = False
    assert outside.sum() == 0


def test_proposals_within_image_and_separated(two, scene_image):
    raw = two.forward_raw(scene_image[0], with_masks=False)
    p = raw.proposals
    assert (p[:, 0] >= 0).all() and (p[:, 1] >= 0).all()
    assert (p[:, 2] <= 128).all() and (p[:, 3] <= 128).all()
    assert (p[:, 2] - p[:, 0] >= 1).all() and (p[:, 3] - p[:, 1] >= 1).all()
    ious = pairwise_iou(p.double(), p.double())
    off = ious - torch.eye(p.shape[0], dtype=torch.float64)
    assert off.max().item() <= two.config.proposal_nms_iou + 1e-9
    assert not raw.proposals.requires_grad


# ---------------------------------------------------------------------------
# dense outputs constructed from a layout


@pytest.mark.parametrize("kind", ["single_stage", "two_stage"])
def test_raw_from_layout_round_trip(kind):
    model = make_detector(kind, seed=1)
    spec = DatasetSpec()
    for seed in range(25):
        gt = generate_scene(spec, 100 + seed).layout()
        raw = raw_from_layout(model, gt)
        back = model.postprocess(raw)
        assert layouts_equal_exact(back, gt), f"seed {seed}: {len(back)} vs {len(gt)}"


def test_raw_from_layout_rejects_infeasible(single):
    a = Detection(Box(40, 40, 80, 80), 2)
    b = Detection(Box(44, 44, 84, 84), 2)
    layout = Layout([a, b], image_size=(128, 128))
    with pytest.raises(ValueError, match="NMS"):
        raw_from_layout(single, layout)
    # different categories are fine
    ok = Layout([a, Detection(Box(44, 44, 84, 84), 3)], image_size=(128, 128))
    back = single.postprocess(raw_from_layout(single, ok))
    assert layouts_equal_exact(back, ok)


def test_raw_from_layout_category_range(single):
    bad = Layout([Detection(Box(10, 10, 30, 30), 8)], image_size=(128, 128))
    with pytest.raises(ValueError, match="category"):
        raw_from_layout(single, bad)


def test_check_nms_feasible_boundary():
    a = Detection(Box(0, 0, 10, 10), 0)
    b = Detection(Box(5, 0, 15, 10), 0)  # IoU = 1/3
    check_nms_feasible(Layout([a, b]), 0.5)
    with pytest.raises(ValueError):
        check_nms_feasible(Layout([a, b]), 0.3)


# ---------------------------------------------------------------------------
# pixel gradients


def _fd_scalar_check(fn, x, picks, h=1e-6):
    x = x.clone().requires_grad_(True)
    fn(x).backward()
    g = x.grad
    worst = 0.0
    for idx in picks:
        xp = x.detach().clone()
        xp[idx] += h
        xm = x.detach().clone()
        xm[idx] -= h
        fd = (fn(xp) - fn(xm)).item() / (2 * h)
        an = g[idx].item()
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-8))
    return worst


def _pixel_picks(n=6, seed=0):
    rng = np.random.default_rng(seed)
    return [tuple(int(v) for v in (rng.integers(3), rng.integers(128), rng.integers(128))) for _ in range(n)]


def test_single_stage_pixel_gradients_match_fd(scene_image):
    model = make_detector("single_stage", seed=5).double()
    img = scene_image[0].double()
    gen = torch.Generator().manual_seed(0)
    w = torch.randn(960, 8, dtype=torch.float64, generator=gen)
    v = torch.randn(960, 4, dtype=torch.float64, generator=gen)

    def fn(x):
        raw = model.forward_raw(x)
        return (raw.cls_logits * w).sum() + (raw.reg_deltas * v).sum()

    assert _fd_scalar_check(fn, img, _pixel_picks()) < 1e-3


def test_two_stage_pixel_gradients_match_fd(scene_image):
    model = make_detector("two_stage", seed=5).double()
    img = scene_image[0].double()
    with torch.no_grad():
        props = model.forward_raw(img, with_masks=False).proposals.detach()
    gen = torch.Generator().manual_seed(1)
    w = torch.randn(props.shape[0], 9, dtype=torch.float64, generator=gen)
    v = torch.randn(props.shape[0], 4, dtype=torch.float64, generator=gen)
    w3 = torch.randn(len(model.anchor_grid), dtype=torch.float64, generator=gen)

    def fn(x):
        feat = model.features(x.unsqueeze(0))
        lg, dl = model.stage1(feat)
        cls, reg, _ = model.roi_forward(feat, props, with_masks=False)
        return (cls * w).sum() + (reg * v).sum() + (lg[0] * w3).sum() + dl.sum() * 1e-2

    assert _fd_scalar_check(fn, img, _pixel_picks(5, seed=2)) < 1e-3


def test_two_stage_backward_reaches_pixels(two, scene_image):
    img = scene_image[0].clone().requires_grad_(True)
    raw = two.forward_raw(img, with_masks=False)
    raw.cls_logits.sum().backward()
    assert img.grad is not None
    assert img.grad.abs().sum().item() > 0


# ---------------------------------------------------------------------------
# checkpoints


@pytest.mark.parametrize("kind", ["single_stage", "two_stage"])
def test_checkpoint_exact_round_trip(tmp_path, kind, scene_image):
    model = make_detector(kind, seed=7)
    path = tmp_path / "m.pt"
    save_checkpoint(model, path, train_state={"epoch": 3, "step": 120})
    loaded, payload = load_checkpoint(path, with_train_state=True)
    assert loaded.kind == kind
    assert loaded.config == model.config
    assert loaded.post == model.post
    assert payload["train_state"] == {"epoch": 3, "step": 120}
    assert payload["categories"][:2] == ["circle", "square"]
    for (ka, va), (kb, vb) in zip(model.state_dict().items(), loaded.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)
    a = model.forward_raw(scene_image[0], with_masks=False) if kind == "two_stage" else model.forward_raw(scene_image[0])
    b = loaded.forward_raw(scene_image[0], with_masks=False) if kind == "two_stage" else loaded.forward_raw(scene_image[0])
    assert torch.equal(a.cls_logits, b.cls_logits)
    assert torch.equal(a.reg_deltas, b.reg_deltas)


def test_checkpoint_tamper_detected(tmp_path):
    model = make_detector("single_stage", seed=2, **SMALL)
    path = tmp_path / "m.pt"
    save_checkpoint(model, path)
    payload = torch.load(path, map_location="cpu", weights_only=True)
    payload["model_config"]["num_categories"] = 5
    torch.save(payload, path)
    with pytest.raises(ValueError, match="hash"):
        load_checkpoint(path)


# ---------------------------------------------------------------------------
# mask pasting and layer taps


def test_paste_roi_mask_geometry():
    ones = torch.ones(28, 28)
    mask = paste_roi_mask(ones, Box(10.2, 20.7, 40.8, 50.1), (64, 64))
    assert mask.shape == (64, 64)
    assert mask[21:50, 11:40].all()
    assert mask[:20, :].sum() == 0
    empty = paste_roi_mask(torch.zeros(28, 28), Box(10, 20, 40, 50), (64, 64))
    assert empty.sum() == 0
    clipped = paste_roi_mask(ones, Box(-10, -10, 5, 5), (64, 64))
    assert clipped[:5, :5].any() and clipped.shape == (64, 64)


def test_attribution_layers_are_model_modules(single, two):
    for model in (single, two):
        named = dict(model.named_modules())
        for name, module in model.attribution_layers().items():
            assert any(module is m for m in named.values()), name
