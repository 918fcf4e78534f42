"""Saliency contracts: request validation, analytic oracles for both map
methods, RoI handling, preserving-mask area calibration, and binarization."""

from types import SimpleNamespace

import numpy as np
import pytest
import torch

from detinvert.attribution import (
    AttributionRequest,
    binarize_top_fraction,
    extremal_mask,
    grad_cam,
    mask_iou,
    norm_grad,
    separation_report,
)
from detinvert.geometry import Box
from detinvert.models import make_detector


class _LinearTapModel(torch.nn.Module):
    """Analytic stand-in with one tap layer and a single candidate row.

    The feature is the channel-mean image; class logit ``c`` of the row is
    ``(c + 1) * feature.mean()`` so its gradient at the tap is a positive
    constant, while the box deltas are constants so their gradient is absent.
    """

    def __init__(self, image_size=(32, 32), num_categories=2):
        super().__init__()
        self.tap = torch.nn.Identity()
        # unit gain so activations carry a graph, as real model features do
        self.gain = torch.nn.Parameter(torch.tensor(1.0))
        self.config = SimpleNamespace(
            image_size=image_size, num_categories=num_categories
        )
        h, w = image_size
        self._anchor = torch.tensor([[4.0, 4.0, w - 4.0, h - 4.0]])

    def attribution_layers(self):
        return {"tap": self.tap}

    def forward_raw(self, image):
        feat = self.tap(self.gain * image.mean(dim=0, keepdim=True)[None])
        pooled = feat.mean()
        cls = torch.stack(
            [pooled * (c + 1) for c in range(self.config.num_categories)]
        )[None]
        # deltas depend on the weights but not on the tapped feature
        reg = self.gain * torch.zeros((1, 4))
        return SimpleNamespace(
            cls_logits=cls, reg_deltas=reg, anchors=self._anchor
        )


@pytest.fixture()
def tap_model():
    return _LinearTapModel()


@pytest.fixture()
def tap_image():
    image = torch.zeros(3, 32, 32)
    g = torch.Generator().manual_seed(11)
    image[:, 8:24, 8:24] = 0.2 + 0.8 * torch.rand((3, 16, 16), generator=g)
    return image


@pytest.fixture(scope="module")
def untrained_single():
    return make_detector("single_stage", seed=1, image_size=(64, 64))


@pytest.fixture(scope="module")
def untrained_two():
    return make_detector("two_stage", seed=2, image_size=(64, 64))


# ---------------------------------------------------------------------------
# request validation and layer resolution


def test_request_rejects_unknown_target(tap_model, tap_image):
    with pytest.raises(ValueError, match="unknown target"):
        AttributionRequest(tap_model, tap_image, Box(4, 4, 28, 28), 0, target="iou")


def test_request_rejects_category_out_of_range(tap_model, tap_image):
    with pytest.raises(ValueError, match="category"):
        AttributionRequest(tap_model, tap_image, Box(4, 4, 28, 28), 2)


def test_request_rejects_wrong_image_shape(tap_model):
    with pytest.raises(ValueError, match="image"):
        AttributionRequest(tap_model, torch.zeros(3, 16, 16), Box(4, 4, 28, 28), 0)


def test_request_rejects_wrong_mask_shape(tap_model, tap_image):
    with pytest.raises(ValueError, match="mask"):
        AttributionRequest(
            tap_model, tap_image, Box(4, 4, 28, 28), 0,
            mask=np.ones((8, 8), dtype=bool),
        )


def test_unknown_layer_raises_with_available_names(tap_model, tap_image):
    req = AttributionRequest(
        tap_model, tap_image, Box(4, 4, 28, 28), 0, layer="nope"
    )
    with pytest.raises(ValueError, match="unknown attribution layer"):
        grad_cam(req)


# ---------------------------------------------------------------------------
# analytic oracles on the tap model


def test_norm_grad_matches_hand_computation(tap_model, tap_image):
    res = norm_grad(AttributionRequest(tap_model, tap_image, Box(4, 4, 28, 28), 1))
    a = tap_image.mean(dim=0).abs()
    expected = a / a.max()
    assert res.map.shape == (32, 32)
    assert not res.all_zero
    assert torch.allclose(res.map, expected, atol=1e-5)


def test_norm_grad_zero_activation_gives_zero_saliency(tap_model, tap_image):
    res = norm_grad(AttributionRequest(tap_model, tap_image, Box(4, 4, 28, 28), 0))
    assert float(res.map[:8, :].abs().sum()) == 0.0
    assert float(res.map[:, :8].abs().sum()) == 0.0


def test_grad_cam_matches_hand_computation_untruncated(tap_model, tap_image):
    res = grad_cam(
        AttributionRequest(tap_model, tap_image, Box(4, 4, 28, 28), 0),
        truncate=False,
    )
    a = tap_image.mean(dim=0)
    expected = torch.relu(a) / torch.relu(a).max()
    assert res.roi is None
    assert torch.allclose(res.map, expected, atol=1e-5)


def test_grad_cam_truncates_exactly_to_box(tap_model, tap_image):
    box = Box(10.0, 10.0, 20.0, 20.0)
    res = grad_cam(AttributionRequest(tap_model, tap_image, box, 0))
    assert res.roi == box
    outside = res.map.clone()
    outside[10:20, 10:20] = 0.0
    assert float(outside.abs().sum()) == 0.0
    assert float(res.map.max()) == pytest.approx(1.0)


def test_unreachable_target_warns_and_returns_empty_map(tap_model, tap_image):
    req = AttributionRequest(tap_model, tap_image, Box(4, 4, 28, 28), 0, target="dx")
    with pytest.warns(UserWarning, match="identically zero"):
        res = grad_cam(req)
    assert res.all_zero
    assert float(res.map.abs().sum()) == 0.0
    with pytest.warns(UserWarning, match="identically zero"):
        res2 = norm_grad(req)
    assert res2.all_zero


# ---------------------------------------------------------------------------
# real models: invariants, RoI paste, purity


def test_maps_are_normalized_on_real_model(trained_tiny, tiny_data):
    image, layout = tiny_data[0]
    # instance 0 of this scene has an all-negative weighted sum; pick one
    # whose rectified map survives so the normalization contract is exercised
    inst = layout.instances[1]
    for method in (grad_cam, norm_grad):
        res = method(AttributionRequest(
            trained_tiny, image, inst.box, inst.category
        ))
        assert res.map.shape == (64, 64)
        assert float(res.map.min()) >= 0.0
        assert float(res.map.max()) == pytest.approx(1.0)
        assert res.layer == "trunk_last"
        assert res.row >= 0


def test_truncation_zeroes_outside_instance_box(trained_tiny, tiny_data):
    image, layout = tiny_data[1]
    inst = layout.instances[0]
    res = grad_cam(AttributionRequest(
        trained_tiny, image, inst.box, inst.category
    ))
    x0 = int(np.floor(inst.box.x_min))
    y0 = int(np.floor(inst.box.y_min))
    x1 = int(np.ceil(inst.box.x_max))
    y1 = int(np.ceil(inst.box.y_max))
    outside = res.map.clone()
    outside[y0:y1, x0:x1] = 0.0
    assert float(outside.abs().sum()) == 0.0


def test_roi_layer_map_is_pasted_into_proposal_region(untrained_two, tiny_data):
    image, layout = tiny_data[2]
    inst = layout.instances[0]
    res = norm_grad(AttributionRequest(
        untrained_two, image, inst.box, inst.category, layer="roi_features"
    ))
    assert res.map.shape == (64, 64)
    assert float(res.map.min()) >= 0.0
    # a per-candidate map occupies one box region, not the whole image
    support = int((res.map > 0).sum())
    assert 0 < support < 64 * 64


def test_attribution_is_a_pure_read(untrained_single, tiny_data):
    image, layout = tiny_data[0]
    inst = layout.instances[0]
    before_img = image.clone()
    before_sum = sum(float(p.detach().sum()) for p in untrained_single.parameters())
    grad_cam(AttributionRequest(untrained_single, image, inst.box, inst.category))
    norm_grad(AttributionRequest(untrained_single, image, inst.box, inst.category))
    after_sum = sum(float(p.detach().sum()) for p in untrained_single.parameters())
    assert torch.equal(image, before_img)
    assert before_sum == after_sum
    assert not any(p.grad is not None for p in untrained_single.parameters())


# ---------------------------------------------------------------------------
# preserving-mask optimization


def _first_instance(tiny_data, scene):
    image, layout = tiny_data[scene]
    return image, layout.instances[0]


def test_extremal_requires_mask_or_fraction(trained_tiny, tiny_data):
    image, inst = _first_instance(tiny_data, 0)
    req = AttributionRequest(trained_tiny, image, inst.box, inst.category)
    with pytest.raises(ValueError, match="area_fraction"):
        extremal_mask(req)


def test_extremal_rejects_bad_budget_and_iterations(trained_tiny, tiny_data):
    image, inst = _first_instance(tiny_data, 0)
    req = AttributionRequest(trained_tiny, image, inst.box, inst.category)
    with pytest.raises(ValueError, match="area budget"):
        extremal_mask(req, area_fraction=1.5)
    with pytest.raises(ValueError, match="iterations"):
        extremal_mask(req, area_fraction=0.1, iterations=0)


def test_extremal_full_budget_is_identity(trained_tiny, tiny_data):
    image, inst = _first_instance(tiny_data, 0)
    req = AttributionRequest(trained_tiny, image, inst.box, inst.category)
    res = extremal_mask(req, area_fraction=1.0, iterations=20)
    assert res.success
    assert res.area_achieved == pytest.approx(1.0, abs=1e-6)
    assert res.value_masked == pytest.approx(res.value_original, abs=1e-6)
    assert res.retention == pytest.approx(1.0, abs=1e-6)


def test_extremal_hits_area_budget_from_instance_mask(trained_tiny, tiny_data):
    image, layout = tiny_data[0]
    inst = layout.instances[0]
    req = AttributionRequest(
        trained_tiny, image, inst.box, inst.category, mask=inst.mask
    )
    res = extremal_mask(req, area_scale=0.5, iterations=80)
    budget = 0.5 * float(inst.mask.sum()) / (64 * 64)
    assert res.area_target == pytest.approx(budget)
    assert res.success
    assert abs(res.area_achieved - budget) <= 0.1 * budget
    assert float(res.mask.min()) >= 0.0 and float(res.mask.max()) <= 1.0
    assert len(res.trace) == 80
    assert res.retention is not None and res.retention > 0.0
    assert res.value_original > 0.5  # overfit model is confident here


def test_extremal_regression_target_has_no_retention(trained_tiny, tiny_data):
    image, inst = _first_instance(tiny_data, 1)
    req = AttributionRequest(
        trained_tiny, image, inst.box, inst.category, target="dw"
    )
    res = extremal_mask(req, area_fraction=0.1, iterations=30)
    assert res.retention is None
    assert isinstance(res.value_masked, float)
    assert isinstance(res.value_original, float)


def test_extremal_is_deterministic(trained_tiny, tiny_data):
    image, inst = _first_instance(tiny_data, 0)
    req = AttributionRequest(trained_tiny, image, inst.box, inst.category)
    a = extremal_mask(req, area_fraction=0.12, iterations=30)
    b = extremal_mask(req, area_fraction=0.12, iterations=30)
    assert torch.equal(a.mask, b.mask)
    assert a.value_masked == b.value_masked


def test_extremal_leaves_model_and_image_untouched(trained_tiny, tiny_data):
    image, inst = _first_instance(tiny_data, 0)
    before_img = image.clone()
    before_sum = sum(float(p.detach().sum()) for p in trained_tiny.parameters())
    extremal_mask(
        AttributionRequest(trained_tiny, image, inst.box, inst.category),
        area_fraction=0.1, iterations=10,
    )
    assert torch.equal(image, before_img)
    assert sum(float(p.detach().sum()) for p in trained_tiny.parameters()) == before_sum


# ---------------------------------------------------------------------------
# binarization, mask IoU, separation report


def test_binarize_selects_top_pixels_by_count():
    sal = torch.tensor([[0.9, 0.5], [0.1, 0.0]])
    out = binarize_top_fraction(sal, fraction=0.5)
    assert out.tolist() == [[True, True], [False, False]]


def test_binarize_never_selects_nonpositive_pixels():
    sal = torch.tensor([[0.9, 0.0], [0.0, 0.0]])
    out = binarize_top_fraction(sal, fraction=0.75)
    assert int(out.sum()) == 1 and bool(out[0, 0])
    assert not binarize_top_fraction(torch.zeros(4, 4)).any()


def test_binarize_keeps_at_least_one_pixel():
    sal = torch.tensor([[0.9, 0.5], [0.1, 0.05]])
    out = binarize_top_fraction(sal, fraction=0.01)
    assert int(out.sum()) == 1 and bool(out[0, 0])


def test_binarize_rejects_bad_fraction():
    with pytest.raises(ValueError, match="fraction"):
        binarize_top_fraction(torch.ones(2, 2), fraction=0.0)


def test_mask_iou_cases():
    a = torch.tensor([[True, True], [False, False]])
    b = torch.tensor([[True, False], [True, False]])
    assert mask_iou(a, a) == 1.0
    assert mask_iou(a, ~a) == 0.0
    assert mask_iou(a, b) == pytest.approx(1.0 / 3.0)
    empty = torch.zeros(2, 2, dtype=torch.bool)
    assert mask_iou(empty, empty) == 0.0


def test_separation_report_rejects_bad_component(trained_tiny):
    with pytest.raises(ValueError, match="component"):
        separation_report(trained_tiny, [], component="area")


def test_separation_report_structure(trained_tiny, tiny_data):
    report = separation_report(
        trained_tiny, [tiny_data[0], tiny_data[1]], n_instances=3
    )
    assert 1 <= report["n"] <= 3
    assert report["layer"] == "trunk_last"
    assert set(report["methods"]) == {"grad_cam", "norm_grad"}
    for stats in report["methods"].values():
        assert 0.0 <= stats["separation_iou"] <= 1.0
        assert 0.0 <= stats["baseline_iou"] <= 1.0
        assert isinstance(stats["separated"], bool)
        assert len(stats["per_instance_separation"]) == report["n"]
        assert len(stats["per_instance_baseline"]) == report["n"]
