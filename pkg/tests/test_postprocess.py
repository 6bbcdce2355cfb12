import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wstal import postprocess as pp
from wstal.core import ContractViolation, Interval, Proposal, iou


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1 - p))


class TestCasToProposals:
    def test_hand_trace_two_runs(self):
        track = logit([0.9, 0.9, 0.1, 0.1, 0.9])
        logits = np.stack([track], axis=1)
        out = pp.cas_to_proposals(logits, "v", k=2, thresholds=(0.5,), min_len=1,
                                  merge_gap=0, class_keep=0.0)
        assert [(p.interval.start, p.interval.end) for p in out] == [(0.0, 2.0), (4.0, 5.0)]
        assert all(p.conf == pytest.approx(0.9, abs=1e-9) for p in out)
        assert all(p.class_id == 0 for p in out)

    def test_all_subthreshold_empty(self):
        logits = logit(np.full((6, 2), 0.05))
        out = pp.cas_to_proposals(logits, "v", k=2, thresholds=(0.5,), class_keep=0.0)
        assert out == []

    def test_nested_intervals_from_two_thresholds(self):
        bump = logit([0.05, 0.35, 0.8, 0.9, 0.8, 0.35, 0.05])
        logits = np.stack([bump], axis=1)
        out = pp.cas_to_proposals(logits, "v", k=2, thresholds=(0.3, 0.7), min_len=1,
                                  merge_gap=0, class_keep=0.0)
        assert len(out) == 2
        outer = next(p for p in out if p.interval.length == 5)
        inner = next(p for p in out if p.interval.length == 3)
        assert outer.interval.start <= inner.interval.start
        assert inner.interval.end <= outer.interval.end

    def test_label_classes_added_during_pseudo_labeling(self):
        # class 1 never fires; with label_classes it is still scanned
        strong = logit(np.full(6, 0.9))
        silent = logit(np.full(6, 0.4))
        logits = np.stack([strong, silent], axis=1)
        without = pp.cas_to_proposals(logits, "v", k=3, thresholds=(0.3,), class_keep=0.9)
        with_labels = pp.cas_to_proposals(logits, "v", k=3, thresholds=(0.3,),
                                          class_keep=0.9, label_classes=[1])
        assert {p.class_id for p in without} <= {0}
        assert 1 in {p.class_id for p in with_labels}

    def test_min_len_drops_short_runs(self):
        track = logit([0.9, 0.1, 0.1, 0.9, 0.9, 0.9])
        logits = np.stack([track], axis=1)
        out = pp.cas_to_proposals(logits, "v", k=2, thresholds=(0.5,), min_len=2,
                                  merge_gap=0, class_keep=0.0)
        assert [(p.interval.start, p.interval.end) for p in out] == [(3.0, 6.0)]

    def test_merge_gap_fuses_runs(self):
        track = logit([0.9, 0.9, 0.1, 0.9, 0.9, 0.05])
        logits = np.stack([track], axis=1)
        out = pp.cas_to_proposals(logits, "v", k=2, thresholds=(0.5,), min_len=1,
                                  merge_gap=1, class_keep=0.0)
        assert [(p.interval.start, p.interval.end) for p in out] == [(0.0, 5.0)]

    def test_conf_equals_mean_sigmoid_over_interval(self):
        rng = np.random.default_rng(0)
        logits = rng.standard_normal((30, 3))
        out = pp.cas_to_proposals(logits, "v", k=6, thresholds=(0.3, 0.5, 0.7),
                                  min_len=1, merge_gap=1, class_keep=0.0)
        sig = 1 / (1 + np.exp(-logits))
        for p in out:
            expected = sig[int(p.interval.start):int(p.interval.end), p.class_id].mean()
            assert p.conf == pytest.approx(expected, abs=1e-12)

    def test_raising_threshold_never_lengthens_runs(self):
        rng = np.random.default_rng(1)
        logits = rng.standard_normal((40, 1)) * 2
        sig = 1 / (1 + np.exp(-logits[:, 0]))
        for lo, hi in [(0.2, 0.4), (0.4, 0.6), (0.3, 0.7)]:
            lo_runs = pp._runs(sig >= lo)
            hi_runs = pp._runs(sig >= hi)
            for hs, he in hi_runs:
                containing = [r for r in lo_runs if r[0] <= hs and he <= r[1]]
                assert containing, "every high-threshold run nests in a low-threshold run"

    def test_thresholds_validated(self):
        with pytest.raises(ContractViolation):
            pp.cas_to_proposals(np.zeros((4, 1)), "v", k=1, thresholds=())
        with pytest.raises(ContractViolation):
            pp.cas_to_proposals(np.zeros((4, 1)), "v", k=1, thresholds=(0.0, 0.5))


def brute_force_nms(proposals, threshold):
    order = sorted(proposals, key=lambda p: (-p.conf, p.interval.start, -p.interval.length))
    kept = []
    for cand in order:
        ok = True
        for k in kept:
            if k.class_id == cand.class_id and iou(k.interval, cand.interval) > threshold:
                ok = False
                break
        if ok:
            kept.append(cand)
    return kept


def random_proposals(rng, n, num_classes=3, video_id="v"):
    out = []
    for _ in range(n):
        start = float(rng.uniform(0, 50))
        length = float(rng.uniform(1, 20))
        out.append(Proposal(video_id, Interval(start, start + length),
                            int(rng.integers(0, num_classes)), float(rng.uniform(0, 1))))
    return out


class TestNms:
    def test_duplicate_suppression(self):
        a = Proposal("v", Interval(0, 10), 0, 0.9)
        b = Proposal("v", Interval(0, 10), 0, 0.8)
        assert pp.nms([a, b], 0.5) == [a]

    def test_disjoint_all_kept(self):
        ps = [Proposal("v", Interval(i * 10, i * 10 + 5), 0, 0.5 + 0.01 * i) for i in range(4)]
        assert sorted(pp.nms(ps, 0.5), key=lambda p: p.interval.start) == ps

    def test_different_classes_do_not_suppress(self):
        a = Proposal("v", Interval(0, 10), 0, 0.9)
        b = Proposal("v", Interval(0, 10), 1, 0.8)
        assert set(pp.nms([a, b], 0.5)) == {a, b}

    def test_matches_brute_force_on_random_sets(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            ps = random_proposals(rng, 50)
            got = pp.nms(ps, 0.5)
            expected = brute_force_nms(ps, 0.5)
            assert got == expected

    def test_output_pairwise_iou_below_threshold(self):
        rng = np.random.default_rng(3)
        for threshold in (0.3, 0.5, 0.9):
            ps = random_proposals(rng, 40)
            kept = pp.nms(ps, threshold)
            for i, a in enumerate(kept):
                for b in kept[i + 1:]:
                    if a.class_id == b.class_id:
                        assert iou(a.interval, b.interval) <= threshold

    def test_output_sorted_by_conf(self):
        rng = np.random.default_rng(4)
        kept = pp.nms(random_proposals(rng, 30), 0.5)
        confs = [p.conf for p in kept]
        assert confs == sorted(confs, reverse=True)

    def test_threshold_validated(self):
        with pytest.raises(ContractViolation):
            pp.nms([], 0.0)
