"""Open-world scoring: confusion accounting with rejection, per-class
precision/recall/F1, seen/unseen averages, and the two harmonic means.

Tally rules (prediction, truth):
    (c, c)           -> TP_c
    (c, c' != c)     -> FP_c and FN_c'
    (c, UNKNOWN)     -> FP_c and FN of the unknown macro-bin
    (REJECT, UNKNOWN)-> TP of the unknown macro-bin
    (REJECT, c)      -> FP of the unknown macro-bin and FN_c

The unknown bin is scored from micro counts over all unknown instances (one
macro-container), while seen/unseen scores are unweighted per-class
averages.  Degenerate 0/0 ratios score 0 (the pessimistic convention; see
the report footer).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .openset import REJECT
from .sampling import UNKNOWN_LABEL

ZERO_CONVENTION_NOTE = "degenerate 0/0 precision, recall and F1 score 0 by convention"


@dataclass
class ClassCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0


@dataclass
class ConfusionLedger:
    """Per-class counts for S followed by U, plus the unknown macro-bin."""

    known: dict[str, ClassCounts]
    unknown: ClassCounts = field(default_factory=ClassCounts)
    n_instances: int = 0

    def validate(self, truths=None) -> None:
        total = sum(c.tp + c.fn for c in self.known.values())
        total += self.unknown.tp + self.unknown.fn
        if total != self.n_instances:
            raise ValidationError(
                f"ledger does not conserve instances: {total} != {self.n_instances}"
            )


@dataclass
class Scores:
    recall: float
    precision: float
    f1: float


@dataclass
class EvalReport:
    per_class: dict[str, Scores]
    r_seen: float
    r_unseen: float
    f1_seen: float
    f1_unseen: float
    h_gzsl: float
    h_ozsl: float
    unknown: Scores
    n_instances: int
    note: str = ZERO_CONVENTION_NOTE


def _ratio(num: int, den: int) -> float:
    return num / den if den > 0 else 0.0


def harmonic_mean(a: float, b: float) -> float:
    """2ab / (a + b), zero when both arguments vanish."""
    if not (0.0 <= a <= 1.0 and 0.0 <= b <= 1.0):
        raise ValidationError("harmonic mean arguments must lie in [0, 1]")
    return 2.0 * a * b / (a + b) if a + b > 0 else 0.0


def tally(predictions, truths, manifest) -> ConfusionLedger:
    """Count the five outcome kinds over aligned prediction/truth lists.

    `manifest` supplies the class sets (protocol.SplitManifest).  Truths must
    name seen/unseen classes or UNKNOWN; predictions must name seen/unseen
    classes or REJECT — an unknown class name in the predictions is a
    contract violation, since unknown classes are never trainable targets.
    """
    predictions = list(predictions)
    truths = list(truths)
    if len(predictions) != len(truths):
        raise ValidationError("predictions and truths differ in length")
    known = sorted(manifest.seen) + sorted(manifest.unseen)
    known_set = set(known)
    ledger = ConfusionLedger(known={c: ClassCounts() for c in known},
                             n_instances=len(truths))
    for pred, truth in zip(predictions, truths):
        if truth != UNKNOWN_LABEL and truth not in known_set:
            raise ValidationError(f"truth label {truth!r} outside the manifest")
        if pred != REJECT and pred not in known_set:
            raise ValidationError(f"prediction {pred!r} is not a seen/unseen class")
        if pred == REJECT:
            if truth == UNKNOWN_LABEL:
                ledger.unknown.tp += 1
            else:
                ledger.unknown.fp += 1
                ledger.known[truth].fn += 1
        else:
            if truth == UNKNOWN_LABEL:
                ledger.known[pred].fp += 1
                ledger.unknown.fn += 1
            elif truth == pred:
                ledger.known[pred].tp += 1
            else:
                ledger.known[pred].fp += 1
                ledger.known[truth].fn += 1
    ledger.validate()
    return ledger


def merge_ledgers(a: ConfusionLedger, b: ConfusionLedger) -> ConfusionLedger:
    """Cellwise addition; sharding tally by instance ranges then merging is
    equivalent to one pass."""
    if set(a.known) != set(b.known):
        raise ValidationError("ledgers cover different class sets")
    merged = ConfusionLedger(
        known={c: ClassCounts(a.known[c].tp + b.known[c].tp,
                              a.known[c].fp + b.known[c].fp,
                              a.known[c].fn + b.known[c].fn) for c in a.known},
        unknown=ClassCounts(a.unknown.tp + b.unknown.tp,
                            a.unknown.fp + b.unknown.fp,
                            a.unknown.fn + b.unknown.fn),
        n_instances=a.n_instances + b.n_instances,
    )
    return merged


def class_scores(counts: ClassCounts) -> Scores:
    r = _ratio(counts.tp, counts.tp + counts.fn)
    p = _ratio(counts.tp, counts.tp + counts.fp)
    f1 = harmonic_mean(r, p)
    return Scores(recall=r, precision=p, f1=f1)


def per_class_scores(ledger: ConfusionLedger) -> dict[str, Scores]:
    return {c: class_scores(counts) for c, counts in ledger.known.items()}


def aggregate(scores: dict[str, Scores], class_set) -> tuple[float, float]:
    """Unweighted (recall, f1) averages over one class set."""
    ids = sorted(class_set)
    if not ids:
        raise ValidationError("cannot aggregate over an empty class set")
    missing = [c for c in ids if c not in scores]
    if missing:
        raise ValidationError(f"missing scores for classes {missing}")
    r = float(np.mean([scores[c].recall for c in ids]))
    f1 = float(np.mean([scores[c].f1 for c in ids]))
    return r, f1


def h_gzsl(r_seen: float, r_unseen: float) -> float:
    return harmonic_mean(r_seen, r_unseen)


def h_ozsl(f1_seen: float, f1_unseen: float) -> float:
    return harmonic_mean(f1_seen, f1_unseen)


def build_report(ledger: ConfusionLedger, manifest) -> EvalReport:
    scores = per_class_scores(ledger)
    r_s, f1_s = aggregate(scores, manifest.seen)
    r_u, f1_u = aggregate(scores, manifest.unseen)
    return EvalReport(
        per_class=scores,
        r_seen=r_s,
        r_unseen=r_u,
        f1_seen=f1_s,
        f1_unseen=f1_u,
        h_gzsl=h_gzsl(r_s, r_u),
        h_ozsl=h_ozsl(f1_s, f1_u),
        unknown=class_scores(ledger.unknown),
        n_instances=ledger.n_instances,
    )


# ---------------------------------------------------------------------------
# rendering


def format_pct(x: float) -> str:
    """Percent with two decimals, round-half-even, matching table style."""
    return f"{round(x * 100.0, 2):.2f}"


def report_record(label: str, report: EvalReport) -> dict:
    return {
        "label": label,
        "n_instances": report.n_instances,
        "per_class": {
            c: {"recall": s.recall, "precision": s.precision, "f1": s.f1}
            for c, s in sorted(report.per_class.items())
        },
        "r_seen": report.r_seen,
        "r_unseen": report.r_unseen,
        "f1_seen": report.f1_seen,
        "f1_unseen": report.f1_unseen,
        "h_gzsl": report.h_gzsl,
        "h_ozsl": report.h_ozsl,
        "unknown": {
            "recall": report.unknown.recall,
            "precision": report.unknown.precision,
            "f1": report.unknown.f1,
        },
        "note": report.note,
    }


def report_json(label: str, report: EvalReport) -> str:
    return json.dumps(report_record(label, report), sort_keys=True)


def report_from_record(record: dict) -> EvalReport:
    per_class = {
        c: Scores(recall=s["recall"], precision=s["precision"], f1=s["f1"])
        for c, s in record["per_class"].items()
    }
    u = record["unknown"]
    return EvalReport(
        per_class=per_class,
        r_seen=record["r_seen"],
        r_unseen=record["r_unseen"],
        f1_seen=record["f1_seen"],
        f1_unseen=record["f1_unseen"],
        h_gzsl=record["h_gzsl"],
        h_ozsl=record["h_ozsl"],
        unknown=Scores(recall=u["recall"], precision=u["precision"], f1=u["f1"]),
        n_instances=record["n_instances"],
        note=record.get("note", ZERO_CONVENTION_NOTE),
    )


def comparison_table(rows: list[tuple[str, EvalReport]]) -> str:
    """Aligned text table in the F1_U, F1_S, H_OZSL column order, plus the
    unknown-bin columns."""
    header = ["run", "F1_U", "F1_S", "H_OZSL", "P_unk", "R_unk", "F1_unk"]
    body = [
        [
            label,
            format_pct(r.f1_unseen),
            format_pct(r.f1_seen),
            format_pct(r.h_ozsl),
            format_pct(r.unknown.precision),
            format_pct(r.unknown.recall),
            format_pct(r.unknown.f1),
        ]
        for label, r in rows
    ]
    widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
    lines = []
    for row in [header] + body:
        lines.append("  ".join(cell.rjust(w) for cell, w in zip(row, widths)))
    lines.append(f"# {ZERO_CONVENTION_NOTE}")
    return "\n".join(lines) + "\n"


def per_class_series(label: str, report: EvalReport) -> str:
    """Plot-ready text series: one class per line with precision and recall."""
    lines = [f"# {label}: class precision recall"]
    for c, s in sorted(report.per_class.items()):
        lines.append(f"{c} {s.precision:.6f} {s.recall:.6f}")
    return "\n".join(lines) + "\n"
