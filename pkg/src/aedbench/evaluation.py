"""Detection metrics: average precision, DET curves and their area, rollups, fusion."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

ESC50_CATEGORIES = {
    "animals": ["dog", "rooster", "pig", "cow", "frog", "cat", "hen", "insects", "sheep", "crow"],
    "natural_soundscapes": ["rain", "sea_waves", "crackling_fire", "crickets", "chirping_birds",
                            "water_drops", "wind", "pouring_water", "toilet_flush", "thunderstorm"],
    "human_non_speech": ["crying_baby", "sneezing", "clapping", "breathing", "coughing",
                         "footsteps", "laughing", "brushing_teeth", "snoring", "drinking_sipping"],
    "interior_domestic": ["door_wood_knock", "mouse_click", "keyboard_typing", "door_wood_creaks",
                          "can_opening", "washing_machine", "vacuum_cleaner", "clock_alarm",
                          "clock_tick", "glass_breaking"],
    "exterior_urban": ["helicopter", "chainsaw", "siren", "car_horn", "engine", "train",
                       "church_bells", "airplane", "fireworks", "hand_saw"],
}
ESC50_EVENT_TO_CATEGORY = {e: c for c, evs in ESC50_CATEGORIES.items() for e in evs}


class MetricError(ValueError):
    pass


@dataclass
class ScoredSet:
    clip_ids: list
    scores: np.ndarray
    labels: np.ndarray   # bool, True = event present

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=bool)
        if len(self.clip_ids) != len(self.scores) or len(self.scores) != len(self.labels):
            raise MetricError("clip ids, scores and labels differ in length")
        if not np.all(np.isfinite(self.scores)):
            raise MetricError("scores must be finite")


@dataclass
class DetCurve:
    """Operating points ordered by increasing threshold."""
    false_alarm: np.ndarray
    miss: np.ndarray

    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.false_alarm.tolist(), self.miss.tolist()))

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            wr = csv.writer(f, lineterminator="\n")
            wr.writerow(["false_alarm_rate", "miss_probability"])
            for fa, m in self.points():
                wr.writerow([repr(fa), repr(m)])


def _unpack(scores, labels=None):
    if isinstance(scores, ScoredSet):
        return scores.scores, scores.labels
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    if s.shape != y.shape or s.ndim != 1:
        raise MetricError("scores and labels must be 1-D of equal length")
    if not np.all(np.isfinite(s)):
        raise MetricError("scores must be finite")
    return s, y


def _tie_groups(s, y):
    """Per distinct score (descending): group size and positives in the group."""
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    starts = np.flatnonzero(np.r_[True, s[1:] != s[:-1]])
    sizes = np.diff(np.r_[starts, len(s)])
    pos = np.add.reduceat(y.astype(np.int64), starts)
    return sizes, pos


def average_precision(scores, labels=None) -> float:
    """Mean over positives of precision at the positive's rank.

    Tied scores form one group and every positive in a group gets the
    precision at the group's last rank, so the result does not depend on
    input order.
    """
    s, y = _unpack(scores, labels)
    P = int(y.sum())
    if P == 0:
        raise MetricError("average precision needs at least one positive")
    sizes, pos = _tie_groups(s, y)
    prec = np.cumsum(pos) / np.cumsum(sizes)
    return float(np.sum(pos * prec) / P)


def det_curve(scores, labels=None) -> DetCurve:
    """Miss / false-alarm rates for the rule ``score >= threshold``.

    Thresholds run over the distinct scores plus +inf, so the curve starts
    at (FA=1, miss=0) and ends at (FA=0, miss=1). Repeated consecutive
    points are dropped.
    """
    s, y = _unpack(scores, labels)
    P = int(y.sum())
    N = len(y) - P
    if P == 0 or N == 0:
        raise MetricError("DET curve needs positives and negatives")
    sizes, pos = _tie_groups(s, y)
    neg = sizes - pos
    # accepted counts at each threshold, descending score order; prepend "accept nothing"
    tp = np.r_[0, np.cumsum(pos)][::-1]
    fp = np.r_[0, np.cumsum(neg)][::-1]
    fa = fp / N
    miss = (P - tp) / P
    keep = np.r_[True, (fa[1:] != fa[:-1]) | (miss[1:] != miss[:-1])]
    return DetCurve(fa[keep], miss[keep])


def det_auc(curve: DetCurve) -> float:
    """Trapezoidal area under miss probability over false-alarm rate (linear axes)."""
    fa, miss = curve.false_alarm, curve.miss
    if len(fa) < 2:
        raise MetricError("DET curve needs at least two points")
    # fa is non-increasing along the curve
    return float(np.sum((fa[:-1] - fa[1:]) * (miss[:-1] + miss[1:]) * 0.5))


def aggregate(values: dict, grouping: dict | None = None) -> dict:
    """Unweighted means of per-event values.

    Args:
        values: event -> AP (or AUC).
        grouping: optional event -> category map; when given the result
            holds one mean per category, otherwise ``{"all": mean}``.
    """
    if not values:
        raise MetricError("nothing to aggregate")
    if grouping is None:
        return {"all": float(np.mean(list(values.values())))}
    groups: dict[str, list] = {}
    for ev, v in values.items():
        if ev not in grouping:
            raise MetricError(f"event {ev!r} missing from category map")
        groups.setdefault(grouping[ev], []).append(v)
    return {c: float(np.mean(v)) for c, v in sorted(groups.items())}


def minmax(scores) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    lo, hi = s.min(), s.max()
    if hi <= lo:
        return np.zeros_like(s)
    return (s - lo) / (hi - lo)


def fuse_scores(sets: list[ScoredSet]) -> ScoredSet:
    """Average of per-system min-max normalised scores over identical clips."""
    if not sets:
        raise MetricError("no score sets to fuse")
    ref = sets[0]
    index = {c: i for i, c in enumerate(ref.clip_ids)}
    total = np.zeros(len(ref.clip_ids))
    for s in sets:
        if len(s.clip_ids) != len(ref.clip_ids) or set(s.clip_ids) != set(index):
            raise MetricError("score sets cover different clips")
        order = np.array([index[c] for c in s.clip_ids], dtype=np.int64)
        lab = np.empty(len(order), dtype=bool)
        lab[order] = s.labels
        if not np.array_equal(lab, ref.labels):
            raise MetricError("score sets disagree on labels")
        aligned = np.empty(len(order))
        aligned[order] = minmax(s.scores)
        total += aligned
    return ScoredSet(list(ref.clip_ids), total / len(sets), ref.labels.copy())
