import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wstal.core import (
    ContractViolation,
    Interval,
    Proposal,
    PseudoLabelSet,
    VideoRecord,
    iou,
    merge_adjacent,
)


def intervals(max_start=100.0, max_len=50.0):
    return st.builds(
        lambda s, l: Interval(s, s + l),
        st.floats(0, max_start, allow_nan=False),
        st.floats(0.125, max_len, allow_nan=False),
    )


class TestInterval:
    def test_rejects_reversed(self):
        with pytest.raises(ContractViolation):
            Interval(5, 5)
        with pytest.raises(ContractViolation):
            Interval(5, 3)

    def test_rejects_negative_and_nonfinite(self):
        with pytest.raises(ContractViolation):
            Interval(-1, 3)
        with pytest.raises(ContractViolation):
            Interval(0, float("inf"))

    def test_length_and_center(self):
        iv = Interval(2, 6)
        assert iv.length == 4
        assert iv.center == 4


class TestIou:
    def test_identical(self):
        assert iou(Interval(0, 10), Interval(0, 10)) == 1.0

    def test_disjoint(self):
        assert iou(Interval(0, 10), Interval(20, 30)) == 0.0

    def test_partial_overlap(self):
        # overlap 5, union 15
        assert iou(Interval(0, 10), Interval(5, 15)) == pytest.approx(1 / 3)

    @given(intervals(), intervals())
    def test_symmetric_and_bounded(self, a, b):
        v = iou(a, b)
        assert v == iou(b, a)
        assert 0.0 <= v <= 1.0

    @given(intervals(), intervals())
    def test_one_iff_equal(self, a, b):
        if iou(a, b) == 1.0:
            assert a.start == b.start and a.end == b.end

    @given(intervals(), intervals())
    def test_length_ratio_bound(self, a, b):
        assert iou(a, b) <= min(a.length, b.length) / max(a.length, b.length) + 1e-9


class TestMergeAdjacent:
    def test_fuses_within_gap(self):
        out = merge_adjacent([Interval(0, 2), Interval(3, 5)], gap=1)
        assert out == [Interval(0, 5)]

    def test_keeps_beyond_gap(self):
        ivs = [Interval(0, 2), Interval(5, 7)]
        assert merge_adjacent(ivs, gap=1) == ivs

    def test_empty(self):
        assert merge_adjacent([], gap=3) == []

    def test_unsorted_input(self):
        out = merge_adjacent([Interval(3, 5), Interval(0, 2)], gap=1)
        assert out == [Interval(0, 5)]

    @given(st.lists(intervals(), max_size=12), st.floats(0, 5, allow_nan=False))
    def test_idempotent(self, ivs, gap):
        once = merge_adjacent(ivs, gap)
        assert merge_adjacent(once, gap) == once

    @given(st.lists(intervals(), max_size=12), st.floats(0, 5, allow_nan=False))
    def test_output_gaps_exceed_threshold(self, ivs, gap):
        out = merge_adjacent(ivs, gap)
        for prev, nxt in zip(out, out[1:]):
            assert nxt.start - prev.end > gap


class TestRecords:
    def test_video_record_requires_label(self):
        with pytest.raises(ContractViolation):
            VideoRecord("v", np.zeros((4, 3), dtype=np.float32), np.zeros(5, dtype=np.float32))

    def test_video_record_rejects_nonfinite(self):
        feats = np.zeros((4, 3), dtype=np.float32)
        feats[1, 1] = np.nan
        label = np.array([1, 0], dtype=np.float32)
        with pytest.raises(ContractViolation):
            VideoRecord("v", feats, label)

    def test_label_class_ids(self):
        rec = VideoRecord("v", np.ones((2, 2), dtype=np.float32), np.array([0, 1, 1], dtype=np.float32))
        assert rec.label_class_ids() == [1, 2]

    def test_proposal_conf_bounds(self):
        with pytest.raises(ContractViolation):
            Proposal("v", Interval(0, 1), 0, conf=1.5)

    def test_pseudo_label_set_groups_by_video(self):
        ps = [
            Proposal("b", Interval(0, 2), 0, 0.5),
            Proposal("a", Interval(1, 3), 1, 0.7),
            Proposal("b", Interval(4, 6), 0, 0.6),
        ]
        pls = PseudoLabelSet.from_proposals(ps)
        assert len(pls) == 3
        assert [p.video_id for p in pls.all_proposals()] == ["a", "b", "b"]
        assert pls.for_video("missing") == ()
