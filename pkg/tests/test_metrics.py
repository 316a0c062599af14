import json

import numpy as np
import pytest

from ozsl import metrics as mx
from ozsl.errors import ValidationError
from ozsl.openset import REJECT
from ozsl.protocol import SplitManifest
from ozsl.sampling import UNKNOWN_LABEL


def manifest(seen=("s0", "s1"), unseen=("u0",), unknown=("o0",)):
    return SplitManifest(regime="50-50", seen=set(seen), unseen=set(unseen),
                         unknown=set(unknown))


def brute_force_tally(predictions, truths, seen, unseen):
    """Independent oracle: the five outcome rules, written from scratch."""
    cells = {c: {"tp": 0, "fp": 0, "fn": 0} for c in list(seen) + list(unseen)}
    omega = {"tp": 0, "fp": 0, "fn": 0}
    for p, t in zip(predictions, truths):
        if p == REJECT and t == UNKNOWN_LABEL:
            omega["tp"] += 1
        elif p == REJECT:
            omega["fp"] += 1
            cells[t]["fn"] += 1
        elif t == UNKNOWN_LABEL:
            cells[p]["fp"] += 1
            omega["fn"] += 1
        elif p == t:
            cells[p]["tp"] += 1
        else:
            cells[p]["fp"] += 1
            cells[t]["fn"] += 1
    return cells, omega


class TestTally:
    def test_all_correct(self):
        m = manifest()
        preds = ["s0", "s1", "u0", REJECT]
        truth = ["s0", "s1", "u0", UNKNOWN_LABEL]
        ledger = mx.tally(preds, truth, m)
        report = mx.build_report(ledger, m)
        assert report.f1_seen == 1.0 and report.f1_unseen == 1.0
        assert report.unknown.f1 == 1.0
        for s in report.per_class.values():
            assert s.f1 == 1.0

    def test_unknown_predicted_as_seen(self):
        m = manifest()
        ledger = mx.tally(["s0"], [UNKNOWN_LABEL], m)
        assert ledger.known["s0"].fp == 1
        assert ledger.unknown.fn == 1
        assert ledger.unknown.tp == 0

    def test_reject_of_known_class(self):
        m = manifest()
        ledger = mx.tally([REJECT], ["u0"], m)
        assert ledger.unknown.fp == 1
        assert ledger.known["u0"].fn == 1

    def test_label_validation(self):
        m = manifest()
        with pytest.raises(ValidationError):
            mx.tally(["s0"], ["nope"], m)
        with pytest.raises(ValidationError):
            mx.tally(["o0"], ["s0"], m)  # predictions never name unknown classes
        with pytest.raises(ValidationError):
            mx.tally(["s0", "s0"], ["s0"], m)

    def test_matches_brute_force_on_random_cases(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n_seen = int(rng.integers(1, 5))
            n_unseen = int(rng.integers(1, 5))
            seen = [f"s{i}" for i in range(n_seen)]
            unseen = [f"u{i}" for i in range(n_unseen)]
            m = manifest(seen, unseen, ["o0", "o1"])
            known = seen + unseen
            n = int(rng.integers(1, 50))
            truth = [
                UNKNOWN_LABEL if rng.random() < 0.25 else known[rng.integers(len(known))]
                for _ in range(n)
            ]
            preds = [
                REJECT if rng.random() < 0.2 else known[rng.integers(len(known))]
                for _ in range(n)
            ]
            ledger = mx.tally(preds, truth, m)
            cells, omega = brute_force_tally(preds, truth, seen, unseen)
            for c in known:
                assert (ledger.known[c].tp, ledger.known[c].fp, ledger.known[c].fn) == (
                    cells[c]["tp"], cells[c]["fp"], cells[c]["fn"])
            assert (ledger.unknown.tp, ledger.unknown.fp, ledger.unknown.fn) == (
                omega["tp"], omega["fp"], omega["fn"])

    def test_merge_matches_single_pass(self):
        rng = np.random.default_rng(1)
        m = manifest()
        known = ["s0", "s1", "u0"]
        truth = [UNKNOWN_LABEL if rng.random() < 0.3 else known[rng.integers(3)]
                 for _ in range(60)]
        preds = [REJECT if rng.random() < 0.2 else known[rng.integers(3)]
                 for _ in range(60)]
        whole = mx.tally(preds, truth, m)
        a = mx.tally(preds[:25], truth[:25], m)
        b = mx.tally(preds[25:], truth[25:], m)
        merged = mx.merge_ledgers(a, b)
        merged_ba = mx.merge_ledgers(b, a)  # commutative
        for lg in (merged, merged_ba):
            assert lg.n_instances == whole.n_instances
            for c in known:
                assert (lg.known[c].tp, lg.known[c].fp, lg.known[c].fn) == (
                    whole.known[c].tp, whole.known[c].fp, whole.known[c].fn)
            assert (lg.unknown.tp, lg.unknown.fp, lg.unknown.fn) == (
                whole.unknown.tp, whole.unknown.fp, whole.unknown.fn)


class TestScores:
    def test_perfect_class(self):
        s = mx.class_scores(mx.ClassCounts(tp=5, fp=0, fn=0))
        assert (s.recall, s.precision, s.f1) == (1.0, 1.0, 1.0)

    def test_zero_convention(self):
        s = mx.class_scores(mx.ClassCounts(tp=0, fp=0, fn=3))
        assert (s.recall, s.precision, s.f1) == (0.0, 0.0, 0.0)

    def test_reference_unknown_bin_scores(self):
        # published component scores reproduce the derived F1 within 0.02pp
        f1 = mx.harmonic_mean(0.1881, 0.5824)
        assert abs(f1 * 100 - 28.43) <= 0.02

    def test_aggregate_single_and_pair(self):
        scores = {"a": mx.Scores(1.0, 1.0, 1.0), "b": mx.Scores(0.0, 0.0, 0.0)}
        r, f1 = mx.aggregate(scores, {"a"})
        assert (r, f1) == (1.0, 1.0)
        r, f1 = mx.aggregate(scores, {"a", "b"})
        assert (r, f1) == (0.5, 0.5)
        with pytest.raises(ValidationError):
            mx.aggregate(scores, set())

    def test_aggregate_matches_brute_force(self):
        rng = np.random.default_rng(2)
        scores = {f"c{i}": mx.Scores(*rng.uniform(size=3)) for i in range(7)}
        subset = {"c1", "c3", "c4"}
        r, f1 = mx.aggregate(scores, subset)
        assert r == pytest.approx(sum(scores[c].recall for c in sorted(subset)) / 3)
        assert f1 == pytest.approx(sum(scores[c].f1 for c in sorted(subset)) / 3)


class TestHarmonicMeans:
    def test_reference_h_ozsl_values(self):
        assert abs(mx.h_ozsl(0.6148, 0.3929) * 100 - 47.94) <= 0.02
        assert abs(mx.h_ozsl(0.7332, 0.4577) * 100 - 56.36) <= 0.02

    def test_equal_arguments(self):
        assert mx.harmonic_mean(0.4, 0.4) == pytest.approx(0.4)

    def test_symmetry_and_bounds(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            a, b = rng.uniform(size=2)
            h = mx.harmonic_mean(a, b)
            assert h == pytest.approx(mx.harmonic_mean(b, a))
            assert min(a, b) - 1e-12 <= h <= max(a, b) + 1e-12
        assert mx.harmonic_mean(0.7, 0.0) == 0.0
        assert mx.harmonic_mean(0.0, 0.0) == 0.0

    def test_domain(self):
        with pytest.raises(ValidationError):
            mx.harmonic_mean(1.5, 0.5)


class TestReportStructure:
    def build(self, preds, truth, m=None):
        m = m or manifest()
        return mx.build_report(mx.tally(preds, truth, m), m), m

    def test_never_rejecting_predictor_zeroes_unknown_bin(self):
        report, _ = self.build(
            ["s0", "s1", "u0", "s0", "s1"],
            ["s0", "s1", "u0", UNKNOWN_LABEL, UNKNOWN_LABEL],
        )
        assert report.unknown.precision == 0.0
        assert report.unknown.recall == 0.0
        assert report.unknown.f1 == 0.0
        assert report.f1_seen > 0.0 and report.f1_unseen > 0.0

    def test_correct_rejections_never_hurt(self):
        preds = ["s0", "s1", "u0", "s0"]
        truth = ["s0", "s1", "u0", UNKNOWN_LABEL]
        before, m = self.build(preds, truth)
        after, _ = self.build(preds + [REJECT] * 5, truth + [UNKNOWN_LABEL] * 5)
        assert after.unknown.f1 >= before.unknown.f1
        for c in before.per_class:
            assert after.per_class[c].f1 == before.per_class[c].f1

    def test_json_round_trip(self):
        report, _ = self.build(["s0", "s1", "u0", REJECT],
                               ["s0", "s1", "u0", UNKNOWN_LABEL])
        blob = mx.report_json("run-a", report)
        record = json.loads(blob)
        back = mx.report_from_record(record)
        assert back == report

    def test_table_column_order(self):
        report, _ = self.build(["s0", "s1", "u0", REJECT],
                               ["s0", "s1", "u0", UNKNOWN_LABEL])
        table = mx.comparison_table([("run-a", report)])
        header = table.splitlines()[0].split()
        assert header[:4] == ["run", "F1_U", "F1_S", "H_OZSL"]

    def test_per_class_series_format(self):
        report, _ = self.build(["s0", "s1", "u0", REJECT],
                               ["s0", "s1", "u0", UNKNOWN_LABEL])
        series = mx.per_class_series("run-a", report)
        lines = series.strip().splitlines()
        assert lines[0].startswith("#")
        assert len(lines) == 1 + len(report.per_class)
        name, p, r = lines[1].split()
        float(p), float(r)


def test_format_pct_two_decimals():
    # banker's rounding via round(); exact decimal halves are not
    # representable as doubles, so no tie case can arise in practice
    assert mx.format_pct(0.5) == "50.00"
    assert mx.format_pct(0.123456) == "12.35"
    assert mx.format_pct(0.284364) == "28.44"
    assert mx.format_pct(1.0) == "100.00"
    assert mx.format_pct(0.0) == "0.00"
