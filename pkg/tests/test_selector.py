import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wstal import selector
from wstal.core import ContractViolation, GroundTruthSegment, Interval, Proposal, iou


def prop(start, end, conf=0.5, class_id=0, video_id="v"):
    return Proposal(video_id, Interval(start, end), class_id, conf)


def brute_force_scores(proposals):
    out = []
    for i, p in enumerate(proposals):
        total = 0.0
        for j, q in enumerate(proposals):
            if i != j:
                total += iou(p.interval, q.interval)
        out.append(total)
    return np.array(out)


class TestIouScores:
    def test_hand_case(self):
        ps = [prop(0, 10), prop(0, 10), prop(20, 30)]
        np.testing.assert_allclose(selector.iou_scores(ps), [1.0, 1.0, 0.0])

    def test_single_proposal_scores_zero(self):
        np.testing.assert_allclose(selector.iou_scores([prop(0, 5)]), [0.0])

    def test_identical_proposals_score_g_minus_one(self):
        g = 5
        ps = [prop(3, 9) for _ in range(g)]
        np.testing.assert_allclose(selector.iou_scores(ps), [g - 1.0] * g)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            n = int(rng.integers(1, 15))
            ps = []
            for _ in range(n):
                s = float(rng.uniform(0, 40))
                ps.append(prop(s, s + float(rng.uniform(1, 15)),
                               conf=float(rng.uniform(0, 1)),
                               class_id=int(rng.integers(0, 3))))
            np.testing.assert_allclose(selector.iou_scores(ps), brute_force_scores(ps), atol=1e-9)

    def test_invariant_to_order_and_conf(self):
        rng = np.random.default_rng(1)
        ps = [prop(0, 10, 0.9), prop(2, 12, 0.1), prop(30, 35, 0.5)]
        base = selector.iou_scores(ps)
        perm = [ps[2], ps[0], ps[1]]
        reordered = selector.iou_scores(perm)
        np.testing.assert_allclose(sorted(base), sorted(reordered))
        different_conf = [Proposal(p.video_id, p.interval, p.class_id, 0.123) for p in ps]
        np.testing.assert_allclose(selector.iou_scores(different_conf), base)

    def test_mixed_videos_rejected(self):
        with pytest.raises(ContractViolation):
            selector.iou_scores([prop(0, 5, video_id="a"), prop(0, 5, video_id="b")])


class TestFilter:
    def test_hand_case_removes_isolated(self):
        ps = [prop(0, 10, 0.9), prop(0, 10, 0.8), prop(20, 30, 0.7)]
        kept = selector.filter_proposals(ps, gamma=0.2, eta=0.0).all_proposals()
        assert [(p.interval.start, p.interval.end) for p in kept] == [(0, 10), (0, 10)]
        assert all(p.iou_score == pytest.approx(1.0) for p in kept)

    def test_zero_thresholds_identity(self):
        ps = [prop(0, 10, 0.9), prop(20, 30, 0.1)]
        kept = selector.filter_proposals(ps, gamma=0.0, eta=0.0).all_proposals()
        assert len(kept) == len(ps)

    def test_confidence_threshold(self):
        ps = [prop(0, 10, 0.9), prop(0, 10, 0.3)]
        kept = selector.filter_proposals(ps, gamma=0.0, eta=0.4).all_proposals()
        assert [p.conf for p in kept] == [0.9]

    def test_subset_and_monotone(self):
        rng = np.random.default_rng(2)
        ps = []
        for v in range(3):
            for _ in range(10):
                s = float(rng.uniform(0, 30))
                ps.append(prop(s, s + float(rng.uniform(2, 10)),
                               conf=float(rng.uniform(0, 1)), video_id=f"v{v}"))
        base_keys = {(p.video_id, p.interval.start, p.interval.end, p.class_id) for p in ps}

        def kept_keys(gamma, eta):
            kept = selector.filter_proposals(ps, gamma, eta).all_proposals()
            return {(p.video_id, p.interval.start, p.interval.end, p.class_id) for p in kept}

        prev = base_keys
        for gamma in (0.0, 0.2, 0.5, 1.0):
            cur = kept_keys(gamma, 0.0)
            assert cur <= prev
            prev = cur
        prev = base_keys
        for eta in (0.0, 0.3, 0.6, 0.9):
            cur = kept_keys(0.0, eta)
            assert cur <= prev
            prev = cur

    def test_groups_by_video(self):
        ps = [prop(0, 10, 0.9, video_id="b"), prop(0, 10, 0.9, video_id="b"),
              prop(5, 9, 0.9, video_id="a")]
        out = selector.filter_proposals(ps, gamma=0.0, eta=0.0)
        assert set(out.by_video) == {"a", "b"}
        assert len(out.for_video("b")) == 2


class TestFpDistribution:
    def test_on_gt_proposals_have_no_fp(self):
        gt = [GroundTruthSegment("v", Interval(0, 10), 0),
              GroundTruthSegment("v", Interval(20, 30), 1)]
        ps = [prop(0, 10), prop(20, 30, class_id=1)]
        rows = selector.fp_distribution(ps, gt)
        assert sum(r.fp_count for r in rows) == 0
        assert sum(r.tp_count for r in rows) == 2

    def test_isolated_off_gt_proposal_in_lowest_bin(self):
        # score exactly 0 must land in the lowest bin [0, 0.1]
        gt = [GroundTruthSegment("v", Interval(0, 10), 0)]
        ps = [prop(0, 10), prop(40, 45)]
        rows = selector.fp_distribution(ps, gt)
        assert rows[0].bin_upper == pytest.approx(0.1)
        assert rows[0].fp_count == 1
        assert sum(r.tp_count for r in rows) == 1

    def test_bins_are_half_open_upper_inclusive(self):
        gt = [GroundTruthSegment("v", Interval(0, 12), 0)]
        ps = [prop(0, 8), prop(4, 12)]
        np.testing.assert_allclose(selector.iou_scores(ps), [1 / 3, 1 / 3])
        # score exactly on a bin edge belongs to that bin, not the next one
        rows = selector.fp_distribution(ps, gt, bin_width=1 / 3)
        assert len(rows) == 1
        assert rows[0].bin_upper == pytest.approx(1 / 3)
        assert rows[0].tp_count == 2

    def test_empty_input(self):
        assert selector.fp_distribution([], []) == []
