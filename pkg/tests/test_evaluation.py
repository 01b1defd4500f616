"""Matching, all-point AP, reports and forgetting metrics."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import tiny_detector
from sdcot.evaluation import (
    Detection,
    EvalReport,
    average_precision,
    evaluate,
    forgetting_metrics,
    match_detections,
    report_from_detections,
)
from sdcot.geometry import Box3D, iou_3d

flag_lists = st.lists(st.booleans(), min_size=1, max_size=30)


def gt_box(x, cid=0, y=0.0):
    return Box3D((x, y, 0.5), (1.0, 1.0, 1.0), 0.0, cid)


def det(scene, box, score):
    return Detection(scene, box.with_(score=score))


# --- average precision -----------------------------------------------------
def test_ap_hand_computed_envelope():
    assert average_precision([True, False, True], 2) == pytest.approx(0.5 + (2 / 3) * 0.5, abs=1e-15)
    assert average_precision([True, False, True], 2) == pytest.approx(0.8333, abs=1e-4)


def test_ap_edge_cases():
    assert average_precision([True, True], 2) == 1.0
    assert average_precision([], 3) == 0.0
    assert average_precision([], 0) is None
    assert average_precision([False], 0) == 0.0
    assert average_precision([False, False, True], 1) == pytest.approx(1 / 3, abs=1e-15)


def envelope_oracle(flags, n_gt):
    """Sum over each newly recalled positive of the best precision at or beyond it."""
    tp = np.cumsum(flags)
    prec = tp / np.arange(1, len(flags) + 1)
    total = 0.0
    for k, f in enumerate(flags):
        if f:
            total += max(prec[k:]) / n_gt
    return total


@given(flag_lists, st.integers(0, 10))
def test_ap_matches_envelope_oracle(flags, extra):
    n_gt = sum(flags) + extra
    if n_gt == 0:
        return
    assert average_precision(flags, n_gt) == pytest.approx(envelope_oracle(flags, n_gt), abs=1e-12)
    assert 0.0 <= average_precision(flags, n_gt) <= 1.0


@given(flag_lists, st.integers(0, 5))
def test_trailing_false_positive_never_increases_ap(flags, extra):
    n_gt = max(1, sum(flags) + extra)
    assert average_precision(flags + [False], n_gt) <= average_precision(flags, n_gt)


# --- matching --------------------------------------------------------------
def test_single_and_double_claims():
    g = gt_box(0.0)
    gts = {"s": [g]}
    assert match_detections([det("s", g, 0.9)], gts, 0)[0].tolist() == [True]
    flags, scores, n = match_detections([det("s", g, 0.5), det("s", g, 0.9)], gts, 0)
    assert flags.tolist() == [True, False] and scores.tolist() == [0.9, 0.5] and n == 1


def test_matching_respects_scene_and_class():
    g = gt_box(0.0)
    assert match_detections([det("t", g, 0.9)], {"s": [g]}, 0)[0].tolist() == [False]
    assert match_detections([det("s", g.with_(class_id=1), 0.9)], {"s": [g]}, 1)[0].tolist() == [False]


def matching_oracle(detections, gts, class_id, thr):
    """Scalar re-statement: highest score first (index breaks ties), best unmatched GT at or above thr."""
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].score, i))
    order = [i for i in order if detections[i].class_id == class_id]
    taken = set()
    flags = []
    for i in order:
        d = detections[i]
        best, best_iou = None, -1.0
        for j, g in enumerate(gts.get(d.scene_id, [])):
            if g.class_id != class_id or (d.scene_id, j) in taken:
                continue
            v = iou_3d(d.box, g)
            if v > best_iou:
                best, best_iou = j, v
        hit = best is not None and best_iou >= thr
        if hit:
            taken.add((d.scene_id, best))
        flags.append(hit)
    return flags


def test_matching_equals_brute_force_oracle():
    r = np.random.default_rng(0)
    for trial in range(30):
        gts = {f"s{k}": [Box3D((*r.uniform(-2, 2, 2), 0.5), tuple(r.uniform(0.5, 1.5, 3)), 0.0, int(r.integers(2)))
                         for _ in range(r.integers(0, 4))] for k in range(3)}
        dets = []
        for _ in range(30):
            sid = f"s{r.integers(3)}"
            if gts[sid] and r.random() < 0.7:
                g = gts[sid][r.integers(len(gts[sid]))]
                b = g.with_(center=tuple(np.asarray(g.center) + r.normal(scale=0.2, size=3)))
            else:
                b = Box3D((*r.uniform(-2, 2, 2), 0.5), (1.0, 1.0, 1.0), 0.0, int(r.integers(2)))
            dets.append(det(sid, b, float(np.round(r.random(), 1))))
        for cid in (0, 1):
            assert match_detections(dets, gts, cid)[0].tolist() == matching_oracle(dets, gts, cid, 0.25)


def test_ap_invariant_under_monotone_score_transform():
    r = np.random.default_rng(1)
    gts = {"s": [gt_box(3.0 * k) for k in range(5)]}
    dets = [det("s", gt_box(3.0 * r.integers(6) + r.normal(scale=0.3)), float(r.random())) for _ in range(12)]
    base = average_precision(match_detections(dets, gts, 0)[0], 5)
    for f in (lambda s: s ** 3, lambda s: 0.1 + 0.5 * s, lambda s: np.log1p(s) / 2):
        moved = [Detection(d.scene_id, d.box.with_(score=float(f(d.score)))) for d in dets]
        assert average_precision(match_detections(moved, gts, 0)[0], 5) == base


# --- reports ---------------------------------------------------------------
def test_report_all_map_is_unweighted_mean():
    rep = EvalReport({"a": 0.2, "b": 0.7, "c": 0.9, "d": None}, {"a": 1, "b": 2, "c": 3, "d": 0},
                     {"a": "base", "b": "base", "c": "novel", "d": "novel"})
    assert rep.map_all == pytest.approx((0.2 + 0.7 + 0.9) / 3, abs=1e-12)
    assert rep.map_base == pytest.approx(0.45, abs=1e-12) and rep.map_novel == pytest.approx(0.9, abs=1e-12)


def test_oracle_and_silent_detectors():
    gts = {"s": [gt_box(0.0, 0), gt_box(3.0, 1)], "t": [gt_box(0.0, 1)]}
    oracle = [det(sid, b, 1.0) for sid, bs in gts.items() for b in bs]
    rep = report_from_detections(oracle, gts, ["a", "b"], {"a": "base", "b": "novel"})
    assert rep.ap == {"a": 1.0, "b": 1.0}
    rep = report_from_detections([], gts, ["a", "b"], {"a": "base", "b": "novel"})
    assert rep.ap == {"a": 0.0, "b": 0.0}


def test_csv_layout():
    rep = EvalReport({"a": 0.5, "b": None}, {"a": 2, "b": 0}, {"a": "base", "b": "novel"})
    lines = rep.to_csv("abc").splitlines()
    assert lines[:3] == ["# config_hash=abc", "# iou_threshold=0.25", "class,ap,n_gt,group"]
    assert lines[3:5] == ["a,0.500000,2,base", "b,,0,novel"]
    assert lines[5] == "mAP_base,0.500000,,summary" and lines[6] == "mAP_novel,,,summary"


def test_evaluate_is_deterministic_and_checks_partition(small_scenes):
    _, val = small_scenes
    names = ["box", "cone", "cylinder"]
    model = tiny_detector(names=names)
    a = evaluate(model, val, ["box", "cone", "cylinder", "slab", "tube", "wedge"], names, [])
    b = evaluate(model, val, ["box", "cone", "cylinder", "slab", "tube", "wedge"], names, [])
    assert a.to_csv() == b.to_csv()
    with pytest.raises(ValueError):
        evaluate(model, val, ["box", "cone", "cylinder"], ["box", "sofa"], [])


def test_evaluate_silent_model_scores_zero(small_scenes):
    _, val = small_scenes
    names = ["box", "cone", "cylinder"]
    model = tiny_detector(names=names)
    model.params.replace("reg.b", np.r_[40.0, -40.0, np.zeros(model.cfg.reg_dim - 2)])
    model.params.replace("reg.w", np.zeros_like(model.params["reg.w"].values))
    rep = evaluate(model, val, ["box", "cone", "cylinder", "slab", "tube", "wedge"], names, [])
    assert all(v == 0.0 for v in rep.ap.values())


# --- forgetting ------------------------------------------------------------
def rep(vals):
    return EvalReport(dict(vals), {k: 1 for k in vals}, {k: "base" for k in vals})


def test_forgetting_identical_and_halved():
    a = rep({"x": 0.6, "y": 0.6})
    m = forgetting_metrics(a, a)
    assert m["deltas"] == {"x": 0.0, "y": 0.0} and m["retention"] == 1.0
    assert forgetting_metrics(a, rep({"x": 0.3, "y": 0.3}))["retention"] == pytest.approx(0.5, abs=1e-15)


@given(st.lists(st.floats(0, 1), min_size=2, max_size=2), st.lists(st.floats(0, 1), min_size=2, max_size=2))
def test_forgetting_antisymmetric(u, v):
    a, b = rep(dict(zip("xy", u))), rep(dict(zip("xy", v)))
    fab, fba = forgetting_metrics(a, b)["deltas"], forgetting_metrics(b, a)["deltas"]
    assert all(fab[k] == -fba[k] for k in fab)


def test_forgetting_disjoint_rejected():
    with pytest.raises(ValueError):
        forgetting_metrics(rep({"x": 0.5}), rep({"y": 0.5}))
