"""AP protocol, transfer tables, context statistics, and scale sweeps."""

from types import SimpleNamespace

import numpy as np
import pytest

import torch

from detinvert.analysis import (
    context_frequency,
    evaluate_ap,
    position_histogram,
    relative_position,
    scale_sweep,
    tally_context,
    transfer_matrix,
)
from detinvert.geometry import Box, Detection, Layout, build_anchor_grid
from detinvert.inversion import InversionConfig, invert_layout
from detinvert.models import make_detector

from oracles import reference_ap


def _layout(items, size=(128, 128)):
    return Layout([Detection(Box(*b), c, s) for c, s, b in items], image_size=size)


# ---------------------------------------------------------------------------
# frozen hand cases


def test_ap_hand_case_fp_above_tp():
    gt = [_layout([(0, 1.0, (10, 10, 50, 50))])]
    pred = [
        _layout(
            [
                (0, 0.9, (80, 80, 120, 120)),  # false positive, ranked first
                (0, 0.8, (10, 10, 50, 50)),  # exact hit, ranked second
            ]
        )
    ]
    res = evaluate_ap(pred, gt, iou_thresholds=(0.5,))
    assert res["ap"] == pytest.approx(50.0, abs=1e-9)


def test_ap_perfect_and_empty():
    gt = [_layout([(0, 1.0, (10, 10, 50, 50)), (1, 1.0, (60, 60, 100, 100))])]
    assert evaluate_ap(gt, gt, iou_thresholds=(0.5,))["ap"] == pytest.approx(100.0)
    empty = [_layout([])]
    assert evaluate_ap(empty, gt, iou_thresholds=(0.5,))["ap"] == pytest.approx(0.0)


def test_ap_fp_below_tp_is_harmless():
    gt = [_layout([(0, 1.0, (10, 10, 50, 50))])]
    pred = [_layout([(0, 0.9, (10, 10, 50, 50)), (0, 0.8, (80, 80, 120, 120))])]
    assert evaluate_ap(pred, gt, iou_thresholds=(0.5,))["ap"] == pytest.approx(100.0)


def test_ap_averages_categories():
    gt = [_layout([(0, 1.0, (10, 10, 50, 50)), (3, 1.0, (60, 60, 100, 100))])]
    pred = [_layout([(0, 0.9, (10, 10, 50, 50))])]  # category 3 never predicted
    res = evaluate_ap(pred, gt, iou_thresholds=(0.5,))
    assert res["ap"] == pytest.approx(50.0)
    assert res["per_category"][0] == pytest.approx(100.0)
    assert res["per_category"][3] == pytest.approx(0.0)


def test_ap_duplicate_detections_count_as_fp():
    gt = [_layout([(0, 1.0, (10, 10, 50, 50))])]
    # duplicate above the true positive: the true positive cannot re-match
    pred = [_layout([(0, 0.9, (12, 12, 52, 52)), (0, 0.8, (10, 10, 50, 50))])]
    res = evaluate_ap(pred, gt, iou_thresholds=(0.5,))
    assert res["ap"] == pytest.approx(100.0)  # first already matches at 0.5
    strict = evaluate_ap(pred, gt, iou_thresholds=(0.9,))
    assert strict["ap"] == pytest.approx(50.0)  # first becomes FP, second TP


def test_ap_threshold_monotone_and_mean_bounded():
    rng = np.random.default_rng(7)
    preds, gts = [], []
    for _ in range(30):
        gt_items, pred_items = [], []
        for _ in range(rng.integers(1, 5)):
            c = int(rng.integers(0, 4))
            x0, y0 = rng.uniform(0, 80, 2)
            w, h = rng.uniform(10, 40, 2)
            gt_items.append((c, 1.0, (x0, y0, x0 + w, y0 + h)))
            if rng.random() < 0.85:
                j = rng.uniform(-6, 6, 4)
                pred_items.append(
                    (c, float(rng.uniform(0.3, 1.0)),
                     (x0 + j[0], y0 + j[1], x0 + w + j[2], y0 + h + j[3]))
                )
        for _ in range(rng.integers(0, 3)):
            x0, y0 = rng.uniform(0, 100, 2)
            pred_items.append(
                (int(rng.integers(0, 4)), float(rng.uniform(0.3, 1.0)), (x0, y0, x0 + 20, y0 + 20))
            )
        gts.append(_layout(gt_items))
        preds.append(_layout(pred_items))
    res = evaluate_ap(preds, gts)
    vals = [res["per_threshold"][t] for t in sorted(res["per_threshold"])]
    assert all(a >= b - 1e-9 for a, b in zip(vals, vals[1:]))
    assert res["ap"] <= res["per_threshold"][0.5] + 1e-9


def test_ap_matches_reference_on_100_sets():
    rng = np.random.default_rng(20260823)
    worst = 0.0
    for _ in range(100):
        n_img = int(rng.integers(2, 6))
        preds, gts = [], []
        raw_preds, raw_gts = [], []
        for _ in range(n_img):
            gt_items, pred_items = [], []
            for _ in range(int(rng.integers(0, 4))):
                c = int(rng.integers(0, 3))
                x0, y0 = rng.uniform(0, 80, 2)
                w, h = rng.uniform(8, 40, 2)
                gt_items.append((c, 1.0, (x0, y0, x0 + w, y0 + h)))
                if rng.random() < 0.8:
                    j = rng.uniform(-8, 8, 4)
                    pred_items.append(
                        (c, float(rng.uniform(0, 1)),
                         (x0 + j[0], y0 + j[1], max(x0 + w + j[2], x0 + j[0] + 2),
                          max(y0 + h + j[3], y0 + j[1] + 2)))
                    )
            for _ in range(int(rng.integers(0, 3))):
                x0, y0 = rng.uniform(0, 100, 2)
                pred_items.append(
                    (int(rng.integers(0, 3)), float(rng.uniform(0, 1)), (x0, y0, x0 + 15, y0 + 15))
                )
            gt_items = gt_items or [(0, 1.0, (1, 1, 9, 9))]
            gts.append(_layout(gt_items))
            preds.append(_layout(pred_items))
            raw_gts.append([(c, b) for c, _, b in gt_items])
            raw_preds.append([(c, s, b) for c, s, b in pred_items])
        thresholds = (0.5, 0.75)
        mine = evaluate_ap(preds, gts, iou_thresholds=thresholds)["ap"]
        ref = reference_ap(raw_preds, raw_gts, thresholds)
        worst = max(worst, abs(mine - ref))
    assert worst < 0.1, f"worst disagreement {worst}"


def test_ap_max_detections_cap():
    gt = [_layout([(0, 1.0, (10, 10, 50, 50))])]
    items = [(0, 0.99 - 0.001 * k, (80.0 + 0.01 * k, 80, 120, 120)) for k in range(120)]
    items.append((0, 0.5, (10, 10, 50, 50)))
    pred = [_layout(items)]
    capped = evaluate_ap(pred, gt, iou_thresholds=(0.5,))
    assert capped["ap"] == pytest.approx(0.0)
    uncapped = evaluate_ap(pred, gt, iou_thresholds=(0.5,), max_detections=200)
    assert uncapped["ap"] > 0.0


def test_ap_input_validation():
    gt = [_layout([(0, 1.0, (10, 10, 50, 50))])]
    with pytest.raises(ValueError, match="predictions"):
        evaluate_ap([], gt)
    with pytest.raises(ValueError, match="ground-truth"):
        evaluate_ap([_layout([])], [_layout([])])


# ---------------------------------------------------------------------------
# transfer tables with stubbed synthesis


class _StubModel:
    """Reads back planted layouts only when the stamp matches its own."""

    def __init__(self, stamp):
        self.stamp = stamp

    def detect(self, image, **kw):
        stamp, layout = image
        return layout if stamp == self.stamp else Layout([], layout.image_size)


def test_transfer_matrix_diagonal():
    layouts = [
        _layout([(0, 1.0, (10, 10, 50, 50))]),
        _layout([(1, 1.0, (30, 30, 80, 80))]),
    ]
    models = [_StubModel("a"), _StubModel("b")]

    def invert_fn(model, layout, seed):
        return (model.stamp, layout)

    res = transfer_matrix(models, layouts, invert_fn=invert_fn)
    assert res["matrix"][0][0] == pytest.approx(100.0)
    assert res["matrix"][1][1] == pytest.approx(100.0)
    assert res["matrix"][0][1] == pytest.approx(0.0)
    assert res["matrix"][1][0] == pytest.approx(0.0)
    assert res["failed"] == [0, 0]
    assert res["evaluated"] == [2, 2]
    assert res["seeds"] == [0, 1]
    with pytest.raises(ValueError):
        transfer_matrix([], layouts, invert_fn=invert_fn)


def test_transfer_matrix_excludes_failed_syntheses():
    layouts = [
        _layout([(0, 1.0, (10, 10, 50, 50))]),
        _layout([(1, 1.0, (30, 30, 80, 80))]),
    ]
    models = [_StubModel("a"), _StubModel("b")]

    def invert_fn(model, layout, seed):
        # model "b" never converges on the second layout
        ok = not (model.stamp == "b" and seed == 1)
        return SimpleNamespace(image=(model.stamp, layout), success=ok)

    res = transfer_matrix(models, layouts, invert_fn=invert_fn)
    assert res["failed"] == [0, 1]
    assert res["evaluated"] == [2, 1]
    # row b is evaluated on its surviving layout only and still self-transfers
    assert res["matrix"][1][1] == pytest.approx(100.0)
    assert res["matrix"][1][0] == pytest.approx(0.0)


def test_transfer_matrix_default_synthesis_counts_nonconverged():
    model = make_detector("single_stage", seed=0, image_size=(64, 64))
    layouts = [_layout([(2, 1.0, (20, 20, 44, 44))], size=(64, 64))]
    res = transfer_matrix([model], layouts, InversionConfig(iterations=2, seed=5))
    # an untrained model cannot reproduce the layout in two steps
    assert res["failed"] == [1]
    assert res["evaluated"] == [0]
    assert res["matrix"] == [[0.0]]
    assert res["seeds"] == [5]


# ---------------------------------------------------------------------------
# context statistics


def test_tally_context_dedup_and_threshold():
    runs = [
        (3, _layout([(4, 0.9, (10, 10, 30, 30)), (4, 0.8, (60, 60, 80, 80)),
                     (2, 0.3, (90, 90, 110, 110))])),
        (3, _layout([(4, 0.7, (10, 10, 30, 30)), (3, 0.95, (50, 50, 70, 70))])),
        (3, _layout([])),
        (4, _layout([(3, 0.6, (10, 10, 30, 30))])),
    ]
    res = tally_context(runs, num_categories=8)
    assert res["runs"][3] == 3 and res["runs"][4] == 1
    assert res["counts"][3][4] == 2  # deduplicated within each run
    assert res["counts"][3][2] == 0  # below the score threshold
    assert res["counts"][3][3] == 0  # the aimed-for category is not context
    assert res["counts"][4][3] == 1
    assert res["frequency"][3][4] == pytest.approx(2 / 3)
    with pytest.raises(ValueError):
        tally_context([(9, _layout([]))], num_categories=8)


def test_tally_context_score_exactly_half_excluded():
    runs = [(0, _layout([(1, 0.5, (10, 10, 30, 30))]))]
    assert tally_context(runs, 8)["counts"][0][1] == 0


def _context_stub_model():
    return SimpleNamespace(config=SimpleNamespace(num_categories=8))


def _viz_result(layout, success=True, prob=0.995):
    return SimpleNamespace(
        image=torch.zeros(3, 8, 8),
        success=success,
        prob=prob,
        anchor_box=Box(40, 40, 60, 60),
        detections=layout,
    )


def test_context_frequency_runs_tally_and_positions():
    per_seed = {
        # moon above-left of the star center, plus one duplicate moon below
        0: _viz_result(_layout([(3, 0.96, (42, 42, 58, 58)),
                                (4, 0.9, (10, 10, 30, 30)),
                                (4, 0.8, (44, 70, 64, 90))])),
        # no central star detected: context still tallied, no position pairs
        1: _viz_result(_layout([(4, 0.7, (10, 10, 30, 30))]), success=False, prob=0.4),
        # context at exactly the threshold is excluded
        2: _viz_result(_layout([(3, 0.99, (40, 40, 60, 60)), (2, 0.5, (80, 80, 100, 100))])),
    }

    def visualize_fn(model, anchor_index, category, cfg):
        assert anchor_index == 17 and category == 3
        return per_seed[cfg.seed]

    res = context_frequency(_context_stub_model(), 3, 17, 3, visualize_fn=visualize_fn)
    assert res["seeds"] == [0, 1, 2]
    assert res["counts"][4] == 2 and res["counts"][2] == 0 and res["counts"][3] == 0
    assert res["frequency"][4] == pytest.approx(2 / 3)
    assert max(res["frequency"]) <= 1.0
    assert res["visualization_success_rate"] == pytest.approx(2 / 3)
    # both moons of run 0 pair with its center; run 1 had no center
    assert res["positions"][4]["total"] == 2
    assert res["positions"][4]["vertical"] == {"above": 1, "below": 1, "tie": 0}
    assert res["positions"][4]["horizontal"]["left"] == 1
    assert 2 not in res["positions"]


def test_context_frequency_log_recounts_exactly():
    per_seed = {
        5: _viz_result(_layout([(0, 0.97, (41, 41, 59, 59)), (6, 0.8, (90, 10, 110, 30)),
                                (6, 0.6, (10, 90, 30, 110)), (1, 0.55, (80, 80, 100, 100))])),
        6: _viz_result(_layout([(6, 0.51, (12, 12, 32, 32))])),
    }

    def visualize_fn(model, anchor_index, category, cfg):
        return per_seed[cfg.seed]

    res = context_frequency(
        _context_stub_model(), 0, 3, 2, InversionConfig(seed=5), visualize_fn
    )
    # brute-force recount from the stored per-run logs
    recount = [0] * 8
    for entry in res["log"]:
        seen = {d["category"] for d in entry["detections"]
                if d["score"] > 0.5 and d["category"] != 0}
        for cat in seen:
            recount[cat] += 1
    assert recount == res["counts"]
    assert [e["seed"] for e in res["log"]] == [5, 6]
    assert res["log"][0]["center"] is not None and res["log"][1]["center"] is None


def test_context_frequency_zero_runs_and_validation():
    model = _context_stub_model()
    res = context_frequency(model, 2, 0, 0, visualize_fn=lambda *a: None)
    assert res["counts"] == [0] * 8 and res["log"] == [] and res["positions"] == {}
    assert res["visualization_success_rate"] == 0.0
    with pytest.raises(ValueError, match="category"):
        context_frequency(model, 99, 0, 1, visualize_fn=lambda *a: None)
    with pytest.raises(ValueError, match="n_runs"):
        context_frequency(model, 0, 0, -1, visualize_fn=lambda *a: None)


# ---------------------------------------------------------------------------
# relative positions


def test_relative_position_quadrants():
    anchor = Box(40, 40, 60, 60)  # center (50, 50)
    assert relative_position(Box(10, 10, 30, 30), anchor) == ("above", "left")
    assert relative_position(Box(70, 70, 90, 90), anchor) == ("below", "right")
    assert relative_position(Box(70, 10, 90, 30), anchor) == ("above", "right")
    assert relative_position(Box(10, 70, 30, 90), anchor) == ("below", "left")


def test_relative_position_ties():
    anchor = Box(40, 40, 60, 60)
    assert relative_position(Box(70, 40, 90, 60), anchor) == ("tie", "right")
    assert relative_position(Box(40, 10, 60, 30), anchor) == ("above", "tie")
    assert relative_position(Box(40, 40, 60, 60), anchor) == ("tie", "tie")


def test_position_histogram_totals():
    anchor = Box(40, 40, 60, 60)
    subjects = [Box(10, 10, 30, 30), Box(70, 70, 90, 90), Box(70, 40, 90, 60)]
    res = position_histogram([(s, anchor) for s in subjects])
    assert res["total"] == 3
    assert res["vertical"] == {"above": 1, "below": 1, "tie": 1}
    assert res["horizontal"] == {"left": 1, "right": 2, "tie": 0}
    assert res["joint"]["above-left"] == 1


# ---------------------------------------------------------------------------
# scale sweeps with stubbed synthesis


def _stub_sweep_model(strides, sizes):
    grid = build_anchor_grid((128, 128), strides, sizes)
    return SimpleNamespace(
        anchor_grid=grid,
        config=SimpleNamespace(image_size=(128, 128), num_categories=8),
    )


def test_scale_sweep_rates_skips_and_center_anchor():
    model = _stub_sweep_model((8, 16), ((12.0, 20.0, 32.0), (48.0, 72.0, 104.0)))
    calls = {"n": 0}

    def visualize_fn(m, anchor_index, category, cfg):
        assert category == 2
        calls["n"] += 1
        ok = calls["n"] % 5 != 0  # every 5th visualization misses 0.99
        box = m.anchor_grid.box_at(anchor_index)
        layout = _layout([(2, 0.99, box.to_xyxy())]) if ok else _layout([])
        return SimpleNamespace(
            image=torch.zeros(3, 8, 8), success=ok, prob=0.995 if ok else 0.2,
            anchor_box=box, detections=layout,
        )

    res = scale_sweep(model, 2, InversionConfig(seed=1), per_bucket=5,
                      visualize_fn=visualize_fn)
    for bucket in (1, 2, 3):
        assert res[bucket]["attempted"] == 5
        assert res[bucket]["rate"] == pytest.approx(4 / 5)
        # converged runs re-detect at IoU 1.0, the failed one contributes 0
        assert res[bucket]["mean_redetect_iou"] == pytest.approx(4 / 5)
        assert len(res[bucket]["images"]) == 5
        # the chosen anchor sits as close to the image center as the grid allows
        box = Box(*res[bucket]["anchor_box"])
        cx, cy = box.center
        assert abs(cx - 64) <= 8 and abs(cy - 64) <= 8
    assert res[3]["side"] == pytest.approx(104.0)
    assert res[4] == {"skipped": "no anchor coverage"}
    assert res[5] == {"skipped": "no anchor coverage"}
    all_seeds = [s for b in (1, 2, 3) for s in res[b]["seeds"]]
    assert len(set(all_seeds)) == 15  # no seed reuse across buckets or runs


def test_scale_sweep_uncovered_buckets_only():
    model = _stub_sweep_model((8,), ((12.0, 20.0, 32.0),))

    def visualize_fn(m, anchor_index, category, cfg):
        box = m.anchor_grid.box_at(anchor_index)
        return SimpleNamespace(
            image=torch.zeros(3, 8, 8), success=True, prob=0.999,
            anchor_box=box, detections=_layout([(0, 0.99, box.to_xyxy())]),
        )

    res = scale_sweep(model, 0, per_bucket=2, visualize_fn=visualize_fn)
    assert res[1]["rate"] == 1.0 and res[1]["mean_prob"] == pytest.approx(0.999)
    for bucket in (2, 3, 4, 5):
        assert "skipped" in res[bucket]
    with pytest.raises(ValueError, match="per_bucket"):
        scale_sweep(model, 0, per_bucket=0, visualize_fn=visualize_fn)
    with pytest.raises(ValueError, match="category"):
        scale_sweep(model, 42, visualize_fn=visualize_fn)
