"""Sampling, backbone/vote/proposal stages, index reuse, classifier extension, decoding, targets."""
import math
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import generic_point, random_cloud, tiny_config, tiny_detector
from sdcot.cotraining import supervised_loss
from sdcot.data import gt_arrays
from sdcot.detector import (
    ProposalSet,
    SampleIndices,
    assign_targets,
    backbone_forward,
    decode_proposals,
    extend_classifier,
    farthest_point_sample,
    forward,
    forward_with_indices,
    load_checkpoint,
    propose,
    save_checkpoint,
    vote,
)
from sdcot.geometry import Box3D
from sdcot.numerics import RngStream, Tensor, grad_check
from sdcot.numerics import ops as T


def _same_proposals(a: ProposalSet, b: ProposalSet):
    for f in ("objectness_logits", "center", "size_offsets", "heading_scores", "class_logits"):
        if getattr(a, f).values.tobytes() != getattr(b, f).values.tobytes():
            return False
    return True


# --- farthest point sampling ------------------------------------------------
def test_fps_full_count_is_a_permutation():
    pts = random_cloud(0, 20)
    assert sorted(farthest_point_sample(pts, 20, RngStream(0)).tolist()) == list(range(20))


def test_fps_collinear_picks_far_endpoint():
    pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]])
    assert farthest_point_sample(pts, 2, start=0).tolist() == [0, 2]


def test_fps_spreads_better_than_random_subsets():
    pts = random_cloud(1, 200)
    count = 12

    def min_gap(idx):
        p = pts[idx]
        d = np.linalg.norm(p[:, None] - p[None], axis=2)
        return d[np.triu_indices(len(idx), 1)].min()

    chosen = min_gap(farthest_point_sample(pts, count, RngStream(3)))
    r = np.random.default_rng(4)
    assert all(chosen >= min_gap(r.choice(200, count, replace=False)) for _ in range(1000))


def test_fps_rejects_too_many():
    with pytest.raises(ValueError):
        farthest_point_sample(random_cloud(0, 5), 6)


def test_fps_indices_are_distinct():
    idx = farthest_point_sample(random_cloud(2, 100), 50, RngStream(1))
    assert len(set(idx.tolist())) == 50


# --- backbone / vote / propose ---------------------------------------------
def test_isolated_seed_pools_only_itself(detector):
    cfg = detector.cfg
    pts = np.array([[0.0, 0, 0], [9.0, 9, 0], [-9.0, 9, 0]])
    feat, pos = backbone_forward(detector.params, cfg, pts, np.array([[0]]))
    p = detector.params
    lin = lambda n, x, act=True: (T.relu if act else (lambda v: v))(T.linear(x, p[f"{n}.w"], p[f"{n}.b"]))  # noqa: E731
    own = lin("bb.nbr2", lin("bb.nbr1", Tensor(np.zeros((1, 3)))))
    want = lin("bb.fuse", T.concat([lin("bb.seed", Tensor(pos)), own], axis=1))
    np.testing.assert_array_equal(feat.values, want.values)


def test_translation_changes_features_through_coordinates(detector):
    pts = random_cloud(5, 64)
    idx = np.array([farthest_point_sample(pts, 16, start=0)])
    f0, _ = backbone_forward(detector.params, detector.cfg, pts, idx)
    f1, _ = backbone_forward(detector.params, detector.cfg, pts + 1.0, idx)
    assert not np.allclose(f0.values, f1.values)  # absolute seed coordinates enter the features


def test_backbone_gradient_check(detector):
    generic_point(detector)
    pts = random_cloud(6, 64)
    idx = np.array([farthest_point_sample(pts, 16, start=0)])
    w = np.random.default_rng(0).normal(size=(16, detector.cfg.feature_dim))
    names = [n for n in detector.params.names() if n.startswith("bb.")]
    fn = lambda s: T.sum(T.mul(backbone_forward(s, detector.cfg, pts, idx)[0], w))  # noqa: E731
    assert grad_check(fn, detector.params, names=names) <= 1e-4


def test_zero_offset_mlp_votes_on_seeds(detector):
    p = detector.params.copy()
    p.replace("vote.l2.w", np.zeros_like(p["vote.l2.w"].values))
    seeds = random_cloud(7, 5)
    pos, feat = vote(p, Tensor(np.ones((5, detector.cfg.feature_dim))), seeds)
    np.testing.assert_array_equal(pos.values, seeds)


def test_vote_shift_hand_set_single_seed(detector):
    p = detector.params.copy()
    F = detector.cfg.feature_dim
    p.replace("vote.l2.w", np.zeros((3 + F, F)))
    p.replace("vote.l2.b", np.r_[0.25, -0.5, 1.0, np.zeros(F)])
    pos, _ = vote(p, Tensor(np.ones((1, F))), np.array([[1.0, 2.0, 3.0]]))
    np.testing.assert_array_equal(pos.values, [[1.25, 1.5, 4.0]])


def test_one_vote_one_cluster_centre(detector):
    cfg = tiny_config(n_points=1, n_seeds=1, n_proposals=1)
    p = detector.params.copy()
    p.replace("reg.w", np.zeros_like(p["reg.w"].values))
    p.replace("reg.b", np.r_[0.0, 0.0, 0.1, -0.2, 0.3, np.zeros(cfg.reg_dim - 5)])
    vp = np.array([[0.3, -0.2, 0.5]])
    out = propose(p, cfg, Tensor(vp), Tensor(np.ones((1, cfg.feature_dim))), np.array([[0]]), 1)
    np.testing.assert_allclose(out["center"].values, vp + [0.1, -0.2, 0.3], rtol=0, atol=1e-15)
    np.testing.assert_array_equal(out["cluster_positions"], vp)


def test_zero_classifier_gives_zero_logits(detector):
    p = detector.params.copy()
    p.replace("cls.w", np.zeros_like(p["cls.w"].values))
    props, _ = forward(p, detector.cfg, random_cloud(8, 64), RngStream(0))
    assert np.all(props.class_logits.values == 0.0)


def test_propose_gradient_check(detector):
    generic_point(detector)
    cfg = detector.cfg
    r = np.random.default_rng(9)
    vpos = r.uniform(-1, 1, size=(16, 3))
    vfeat = r.normal(size=(16, cfg.feature_dim))
    clusters = np.array([farthest_point_sample(vpos, 4, start=0)])
    w = r.normal(size=(4, cfg.n_classes))
    names = [n for n in detector.params.names() if n.split(".")[0] in ("prop", "head", "reg", "cls")]

    def fn(s):
        out = propose(s, cfg, Tensor(vpos), Tensor(vfeat), clusters, 1)
        return T.add(T.sum(T.mul(out["class_logits"], w)), T.sum(T.square(out["center"])))

    assert grad_check(fn, detector.params, names=names) <= 1e-4


def test_single_seed_single_cluster_pipeline_is_differentiable():
    det = generic_point(tiny_detector(n_points=8, n_seeds=1, n_proposals=1))
    pts = random_cloud(10, 8, scale=0.3)
    idx = SampleIndices(np.array([[2]]), np.array([[0]]))

    def fn(s):
        p = forward_with_indices(s, det.cfg, pts, idx)
        return T.add(T.sum(T.square(p.center)), T.sum(p.class_logits))

    assert grad_check(fn, det.params) <= 1e-4


# --- forward / index reuse --------------------------------------------------
def test_forward_different_rng_states_generally_differ(detector):
    pts = random_cloud(11, 64)
    _, i1 = detector.forward(pts, RngStream(1))
    _, i2 = detector.forward(pts, RngStream(2))
    assert not np.array_equal(i1.seed_indices, i2.seed_indices)


def test_forward_is_deterministic(detector):
    pts = random_cloud(12, 64)
    a, _ = detector.forward(pts, RngStream(5))
    b, _ = detector.forward(pts, RngStream(5))
    assert _same_proposals(a, b)


@given(st.integers(0, 10_000), st.integers(1, 3))
def test_output_arity(seed, batch):
    det = tiny_detector(n_classes=2 + seed % 3, heading_bins=1 + seed % 2)
    pts = np.random.default_rng(seed).uniform(-3, 3, size=(batch, 64, 3))
    p, idx = det.forward(pts, RngStream(seed))
    K = det.cfg.n_proposals
    assert p.n_proposals == K and p.class_logits.shape == (batch * K, det.cfg.n_classes)
    assert p.heading_scores.shape == (batch * K, 2 * det.cfg.heading_bins)
    assert idx.seed_indices.shape == (batch, det.cfg.n_seeds) and idx.cluster_indices.shape == (batch, K)
    for b in range(batch):
        assert len(set(idx.cluster_indices[b].tolist())) == K


def test_forward_rejects_empty_cloud(detector):
    with pytest.raises(ValueError):
        detector.forward(np.zeros((0, 3)), RngStream(0))


def test_reused_indices_reproduce_forward_bitwise(detector):
    pts = random_cloud(13, 64)
    a, idx = detector.forward(pts, RngStream(9))
    b = detector.forward_with_indices(pts, idx)
    assert _same_proposals(a, b)


@given(st.integers(0, 10_000))
def test_index_reuse_aligns_cluster_seeds(seed):
    a, b = tiny_detector(seed=seed), tiny_detector(seed=seed + 1)
    pts = np.random.default_rng(seed).uniform(-3, 3, size=(2, 64, 3))
    pa, idx = a.forward(pts, RngStream(seed))
    pb = b.forward_with_indices(pts, idx)
    np.testing.assert_array_equal(pa.cluster_seed_positions, pb.cluster_seed_positions)


def test_perturbing_one_index_changes_only_its_slot(detector):
    pts = random_cloud(14, 64)
    _, idx = detector.forward(pts, RngStream(3))
    base = detector.forward_with_indices(pts, idx)
    moved = idx.copy()
    spare = next(i for i in range(detector.cfg.n_seeds) if i not in moved.cluster_indices[0])
    moved.cluster_indices[0, 2] = spare
    p = detector.forward_with_indices(pts, moved)
    changed = np.any(p.cluster_seed_positions != base.cluster_seed_positions, axis=1)
    assert changed.tolist() == [False, False, True, False]


def test_out_of_range_indices_rejected(detector):
    pts = random_cloud(15, 64)
    _, idx = detector.forward(pts, RngStream(3))
    bad = idx.copy()
    bad.seed_indices[0, 0] = 64
    with pytest.raises(ValueError):
        detector.forward_with_indices(pts, bad)


# --- classifier extension ---------------------------------------------------
@given(st.integers(0, 10_000), st.integers(1, 4))
def test_extension_preserves_base_logits_bitwise(seed, n_new):
    det = tiny_detector(seed=seed)
    pts = np.random.default_rng(seed).uniform(-3, 3, size=(64, 3))
    before, idx = det.forward(pts, RngStream(seed))
    ext = det.extended([f"new{i}" for i in range(n_new)], RngStream(seed, "novel"))
    after = ext.forward_with_indices(pts, idx)
    nb = det.cfg.n_classes
    assert after.class_logits.values[:, :nb].tobytes() == before.class_logits.values.tobytes()
    for name in det.params.names():
        if name != "cls.w":
            assert ext.params[name].values.tobytes() == det.params[name].values.tobytes()


def test_extend_by_zero_rejected(detector):
    with pytest.raises(ValueError):
        extend_classifier(detector.params, 8, 0, RngStream(0))


def test_extend_five_to_ten(detector):
    det = tiny_detector(n_classes=5, names=[f"c{i}" for i in range(5)])
    ext = det.extended([f"n{i}" for i in range(5)], RngStream(0))
    p, _ = ext.forward(random_cloud(16, 64), RngStream(1))
    assert p.class_logits.shape[1] == 10


def test_new_rows_are_bounded_uniform(detector):
    out = extend_classifier(detector.params, 8, 50, RngStream(0))
    rows = out["cls.w"].values[3:]
    assert np.abs(rows).max() <= 1 / math.sqrt(8) and abs(rows.mean()) < 0.05


# --- decoding --------------------------------------------------------------
def _fixed_props(n_classes=4, nh=1):
    z = lambda *s: Tensor(np.zeros(s))  # noqa: E731
    return ProposalSet(z(1, 2), Tensor([[1.0, 2.0, 0.5]]), z(1, 3), z(1, 2 * nh), z(1, n_classes),
                       SampleIndices(np.zeros((1, 1), int), np.zeros((1, 1), int)), 1,
                       np.zeros((1, 3)), np.zeros((1, 3)), np.zeros((1, 3)), z(1, 3))


def test_zero_offsets_decode_to_mean_size():
    mean = np.array([0.7, 0.8, 0.9])
    ((box, obj),) = decode_proposals(_fixed_props(), mean)[0]
    assert box.size == tuple(mean) and box.heading == 0.0


def test_uniform_scores():
    ((box, obj),) = decode_proposals(_fixed_props(4), np.ones(3))[0]
    assert obj == 0.5 and box.score == pytest.approx(0.125, abs=1e-15)


# --- target assignment ------------------------------------------------------
def _props_with_clusters(det, centres, seeds):
    pts = random_cloud(17, 64)
    p, _ = det.forward(pts, RngStream(0))
    p.cluster_positions = np.asarray(centres, dtype=float)
    p.seed_positions = np.asarray(seeds, dtype=float)
    return p


def test_cluster_at_gt_centre_is_positive(detector):
    p, _ = detector.forward(random_cloud(18, 64), RngStream(0))
    gt = np.array([[*p.cluster_positions[1], 1.0, 1.0, 1.0, 0.0]])
    a = assign_targets(p, [(gt, np.array([2]))], detector.cfg)
    assert a.objectness[1] == 1 and a.matched[1] == 0 and a.gt_classes[a.matched[1]] == 2


def test_empty_gt_gives_all_negatives(detector):
    p, _ = detector.forward(random_cloud(19, 64), RngStream(0))
    a = assign_targets(p, [(np.zeros((0, 7)), np.zeros(0))], detector.cfg)
    assert np.all(a.objectness == 0) and not a.vote_mask.any()


def test_assignment_matches_brute_force_scan():
    det = tiny_detector()
    cfg = det.cfg
    r = np.random.default_rng(20)
    for trial in range(25):
        B = 2
        pts = r.uniform(-3, 3, size=(B, 64, 3))
        p, _ = det.forward(pts, RngStream(trial))
        gt = []
        for b in range(B):
            n = int(r.integers(0, 4))
            boxes = np.column_stack([r.uniform(-1, 1, (n, 3)), r.uniform(0.5, 2, (n, 3)), np.zeros(n)])
            gt.append((boxes, r.integers(0, 3, n)))
        a = assign_targets(p, gt, cfg)
        K, M = cfg.n_proposals, cfg.n_seeds
        offset = 0
        for b in range(B):
            boxes = gt[b][0]
            for k in range(K):
                c = p.cluster_positions[b * K + k]
                dists = [math.dist(c, box[:3]) for box in boxes]
                if not dists:
                    want = 0
                else:
                    d = min(dists)
                    want = 1 if d < cfg.vote_loss_radius_near else (0 if d > cfg.vote_loss_radius_far else -1)
                    if want == 1:
                        assert a.matched[b * K + k] == offset + int(np.argmin(dists))
                assert a.objectness[b * K + k] == want
            for m in range(M):
                s = p.seed_positions[b * M + m]
                owner = next((box for box in boxes if np.all(np.abs(s - box[:3]) <= box[3:6] / 2 + 1e-6)), None)
                assert a.vote_mask[b * M + m] == (owner is not None)
                if owner is not None:
                    np.testing.assert_array_equal(a.vote_target[b * M + m], owner[:3])
            offset += len(boxes)


def test_supervised_loss_gradient_through_detector(small_scenes):
    det = generic_point(tiny_detector())
    scene = next(s for s in small_scenes[0] if len(s.gt_boxes) >= 2)
    pts = scene.points[:64]
    boxes = [b.with_(class_id=b.class_id % 3) for b in scene.gt_boxes]
    p, idx = det.forward(pts, RngStream(0))
    a = assign_targets(p, [gt_arrays(boxes)], det.cfg)

    def fn(s):
        q = forward_with_indices(s, det.cfg, pts, idx)
        return supervised_loss(q, a, det.mean_size, 1)[0]

    assert grad_check(fn, det.params) <= 1e-4


# --- checkpoints -----------------------------------------------------------
def test_checkpoint_round_trip_is_bitwise(tmp_path, detector):
    path = tmp_path / "m.ckpt"
    text = save_checkpoint(path, {"student": detector}, "student", {"note": 1})
    models, key, meta = load_checkpoint(path)
    det = models["student"]
    assert key == "student" and meta == {"note": 1} and det.class_names == detector.class_names
    assert det.params.to_text() == detector.params.to_text()
    assert det.mean_size.tobytes() == detector.mean_size.tobytes()
    assert save_checkpoint(tmp_path / "n.ckpt", models, key, meta) == text
