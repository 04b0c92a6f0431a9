"""Trial lists, detection metrics, and score fusion.

Verification scores are swept over every distinct value to build the
miss / false-alarm staircase.  A trial scoring exactly at a threshold
counts as accepted, which pins tie handling down deterministically.
The equal error rate is read off the staircase at the crossing with
linear interpolation between adjacent operating points, and the
detection cost is minimized over the same points, normalized by the
cost of the better trivial decision.
"""

import math
import os
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import FormatError


class Trial(NamedTuple):
    enroll: str
    test: str
    target: bool


@dataclass(frozen=True)
class MetricsReport:
    """Metrics for one system from a single threshold sweep."""

    eer: float
    min_dcf_p01: float
    min_dcf_p001: float
    thresholds: tuple
    det_points: tuple


_LABELS = {"target": True, "nontarget": False}


def parse_trials(path):
    """Read ``<enroll> <test> target|nontarget`` lines.

    Blank lines are skipped.  Malformed lines, unknown labels, and
    duplicate (enroll, test) pairs raise FormatError with the offending
    line number.
    """
    trials = []
    seen = {}
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, raw in enumerate(handle, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise FormatError(
                    f"{path} line {lineno}: expected "
                    f"'<enroll> <test> target|nontarget', got {line!r}")
            enroll, test, label = parts
            if label not in _LABELS:
                raise FormatError(
                    f"{path} line {lineno}: unknown label {label!r}")
            key = (enroll, test)
            if key in seen:
                raise FormatError(
                    f"{path} line {lineno}: duplicate trial "
                    f"{enroll} {test} (first on line {seen[key]})")
            seen[key] = lineno
            trials.append(Trial(enroll, test, _LABELS[label]))
    return trials


def read_scores(path):
    """Read ``<enroll> <test> <score>`` lines into an ordered mapping."""
    scores = {}
    seen = {}
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, raw in enumerate(handle, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise FormatError(
                    f"{path} line {lineno}: expected "
                    f"'<enroll> <test> <score>', got {line!r}")
            enroll, test, text = parts
            try:
                value = float(text)
            except ValueError:
                raise FormatError(
                    f"{path} line {lineno}: bad score {text!r}") from None
            if not math.isfinite(value):
                raise FormatError(
                    f"{path} line {lineno}: non-finite score {text!r}")
            key = (enroll, test)
            if key in seen:
                raise FormatError(
                    f"{path} line {lineno}: duplicate score for "
                    f"{enroll} {test} (first on line {seen[key]})")
            seen[key] = lineno
            scores[key] = value
    return scores


def write_scores(path, scores):
    """Write a score mapping with 6 decimals, in iteration order."""
    lines = []
    for (enroll, test), value in scores.items():
        if not math.isfinite(value):
            raise ValueError(f"non-finite score for {enroll} {test}")
        lines.append(f"{enroll} {test} {value:.6f}")
    with open(path, "w", encoding="utf-8") as handle:
        handle.write("\n".join(lines) + ("\n" if lines else ""))


def _split_scores(scores, trials):
    """Align a score mapping with a trial list.

    The key sets must match exactly.  Returns (target_scores,
    nontarget_scores) as float64 arrays in trial order.
    """
    if not trials:
        raise ValueError("empty trial list")
    keys = {(t.enroll, t.test) for t in trials}
    missing = [t for t in trials if (t.enroll, t.test) not in scores]
    if missing:
        first = missing[0]
        raise ValueError(
            f"scores missing for {len(missing)} trials, "
            f"first {first.enroll} {first.test}")
    if len(scores) != len(keys):
        extra = sorted(set(scores) - keys)
        raise ValueError(
            f"{len(extra)} scores match no trial, first {extra[0]}")
    values = np.array([scores[t.enroll, t.test] for t in trials],
                      dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise ValueError("scores must be finite")
    mask = np.array([t.target for t in trials], dtype=bool)
    target_scores = values[mask]
    nontarget_scores = values[~mask]
    if target_scores.size == 0 or nontarget_scores.size == 0:
        raise ValueError("need at least one target and one nontarget trial")
    return target_scores, nontarget_scores


def _sweep(target_scores, nontarget_scores):
    """Operating points at every distinct score plus a reject-all threshold.

    At the lowest threshold everything is accepted, giving (0, 1); the
    final +inf threshold rejects everything, giving (1, 0).
    """
    thresholds = np.unique(np.concatenate([target_scores, nontarget_scores]))
    thresholds = np.append(thresholds, np.inf)
    sorted_tar = np.sort(target_scores)
    sorted_non = np.sort(nontarget_scores)
    # accepted means score >= t, so a miss is a target strictly below t
    p_miss = (np.searchsorted(sorted_tar, thresholds, side="left")
              / target_scores.size)
    p_fa = ((nontarget_scores.size
             - np.searchsorted(sorted_non, thresholds, side="left"))
            / nontarget_scores.size)
    return thresholds, p_miss, p_fa


def _eer_from_points(p_miss, p_fa):
    # p_miss - p_fa is nondecreasing and starts at -1, so the first
    # nonnegative index always has a predecessor
    diff = p_miss - p_fa
    idx = int(np.argmax(diff >= 0.0))
    m1, f1 = p_miss[idx - 1], p_fa[idx - 1]
    m2, f2 = p_miss[idx], p_fa[idx]
    alpha = (f1 - m1) / ((f1 - m1) + (m2 - f2))
    return float(m1 + alpha * (m2 - m1))


def _min_dcf_from_points(p_miss, p_fa, p_tar, c_miss, c_fa):
    cost = c_miss * p_tar * p_miss + c_fa * (1.0 - p_tar) * p_fa
    floor = min(c_miss * p_tar, c_fa * (1.0 - p_tar))
    return float(np.min(cost) / floor)


def det_points(scores, trials):
    """Miss and false-alarm pairs sorted by threshold."""
    _, p_miss, p_fa = _sweep(*_split_scores(scores, trials))
    return list(zip(p_miss.tolist(), p_fa.tolist()))


def compute_eer(scores, trials):
    """Equal error rate as a fraction in [0, 1]."""
    _, p_miss, p_fa = _sweep(*_split_scores(scores, trials))
    return _eer_from_points(p_miss, p_fa)


def compute_min_dcf(scores, trials, p_tar, c_miss=1.0, c_fa=1.0):
    """Minimum normalized detection cost over all swept thresholds."""
    if not 0.0 < p_tar < 1.0:
        raise ValueError(f"p_tar must lie in (0, 1), got {p_tar}")
    if c_miss <= 0.0 or c_fa <= 0.0:
        raise ValueError("costs must be positive")
    _, p_miss, p_fa = _sweep(*_split_scores(scores, trials))
    return _min_dcf_from_points(p_miss, p_fa, p_tar, c_miss, c_fa)


def evaluate_scores(scores, trials):
    """Full metric set for one system from a single sweep."""
    thresholds, p_miss, p_fa = _sweep(*_split_scores(scores, trials))
    return MetricsReport(
        eer=_eer_from_points(p_miss, p_fa),
        min_dcf_p01=_min_dcf_from_points(p_miss, p_fa, 0.01, 1.0, 1.0),
        min_dcf_p001=_min_dcf_from_points(p_miss, p_fa, 0.001, 1.0, 1.0),
        thresholds=tuple(thresholds.tolist()),
        det_points=tuple(zip(p_miss.tolist(), p_fa.tolist())),
    )


def fuse_scores(first, second, weights=(0.5, 0.5)):
    """Per-trial weighted mean of two score sets over identical keys.

    No per-system normalization is applied.  Key order follows the
    first set.
    """
    if len(weights) != 2 or not all(math.isfinite(w) for w in weights):
        raise ValueError(f"need two finite weights, got {weights!r}")
    only_first = [k for k in first if k not in second]
    only_second = [k for k in second if k not in first]
    if only_first or only_second:
        sample = (only_first + only_second)[:3]
        raise ValueError(
            f"score sets disagree on {len(only_first) + len(only_second)} "
            f"keys, e.g. {sample}")
    return {key: weights[0] * first[key] + weights[1] * second[key]
            for key in first}


def _check_system_name(name):
    if not name or not all(c.isalnum() or c in "._-" for c in name):
        raise ValueError(f"system name {name!r} is not filename safe")


def emit_report(reports, out_dir):
    """Write the summary CSV plus one DET table per system.

    ``reports`` maps system name to MetricsReport.  The summary lists
    EER as a percentage with 3 decimals and both DCF values with 4;
    DET tables keep full float precision.  Returns the written paths.
    """
    if not reports:
        raise ValueError("no systems to report")
    for name in reports:
        _check_system_name(name)
    out = os.fspath(out_dir)
    written = []
    lines = ["system,eer,dcf_p01,dcf_p001"]
    for name, report in reports.items():
        lines.append(f"{name},{100.0 * report.eer:.3f},"
                     f"{report.min_dcf_p01:.4f},{report.min_dcf_p001:.4f}")
    path = os.path.join(out, "report.csv")
    with open(path, "w", encoding="utf-8") as handle:
        handle.write("\n".join(lines) + "\n")
    written.append(path)
    for name, report in reports.items():
        rows = ["threshold,p_miss,p_fa"]
        for threshold, (miss, fa) in zip(report.thresholds,
                                         report.det_points):
            rows.append(f"{threshold!r},{miss!r},{fa!r}")
        det_path = os.path.join(out, f"det_{name}.csv")
        with open(det_path, "w", encoding="utf-8") as handle:
            handle.write("\n".join(rows) + "\n")
        written.append(det_path)
    return written
